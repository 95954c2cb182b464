// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "voicy/corpus.hpp"
#include "voicy/wav.hpp"

using namespace voicy;
using namespace voicy::corpus;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) {
  const fs::path p = fs::path(VOICY_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PhonemeInventory arpabet_subset() {
  PhonemeInventory inv;
  inv.id = "test-v1";
  inv.symbols = {"sil", "AH", "B", "K"};
  return inv;
}

}  // namespace

TEST_CASE("alignment ingestion") {
  const fs::path dir = tmp("align");
  put(dir / "ok.tsv", "AH\t0.00\t0.10\nB\t0.10\t0.25\n");
  const auto seq = load_alignment(dir / "ok.tsv", arpabet_subset());
  CHECK(seq.symbols == std::vector<int>{1, 2});
  CHECK(seq.inventory_id == "test-v1");

  put(dir / "pause.tsv", "sil\t0.0\t0.1\nAH\t0.1\t0.2\nsp\t0.2\t0.3\n\t0.3\t0.4\nspn\t0.4\t0.5\n");
  CHECK(load_alignment(dir / "pause.tsv", arpabet_subset()).symbols ==
        std::vector<int>{0, 1, 0, 0, 0});

  put(dir / "overlap.tsv", "AH\t0.00\t0.20\nB\t0.10\t0.25\n");
  CHECK_THROWS(load_alignment(dir / "overlap.tsv", arpabet_subset()));
  put(dir / "empty.tsv", "");
  CHECK_THROWS(load_alignment(dir / "empty.tsv", arpabet_subset()));
  put(dir / "bad.tsv", "AH\t0.00\t0.10\nB\t0.10\n");
  CHECK_THROWS_WITH(load_alignment(dir / "bad.tsv", arpabet_subset()), doctest::Contains("line 2"));
  put(dir / "reversed.tsv", "AH\t0.30\t0.10\n");
  CHECK_THROWS(load_alignment(dir / "reversed.tsv", arpabet_subset()));
  put(dir / "unknown.tsv", "AH\t0.0\t0.1\nZZ\t0.1\t0.2\n");
  CHECK_THROWS_WITH(load_alignment(dir / "unknown.tsv", arpabet_subset()), doctest::Contains("ZZ"));
}

TEST_CASE("alignment write/read round trip preserves the span") {
  const fs::path dir = tmp("align_rt");
  const std::vector<AlignmentRow> rows = {{"sil", 0.0, 0.05}, {"AH", 0.05, 0.17}, {"K", 0.17, 0.3}};
  write_alignment(rows, dir / "a.tsv");
  CHECK(slurp(dir / "a.tsv") == "sil\t0.000000\t0.050000\nAH\t0.050000\t0.170000\nK\t0.170000\t0.300000\n");
  const auto back = read_alignment(dir / "a.tsv");
  REQUIRE(back.size() == 3);
  double total = 0.0;
  for (const auto& r : back) total += r.end_s - r.start_s;
  CHECK(total == doctest::Approx(back.back().end_s - back.front().start_s));
}

TEST_CASE("inventory file round trip") {
  const fs::path dir = tmp("inv");
  const auto inv = toy_inventory(8);
  CHECK(inv.size() == 9);
  CHECK(inv.symbols[0] == "sil");
  write_inventory(inv, dir / "inventory.txt");
  const auto back = load_inventory(dir / "inventory.txt");
  CHECK(back.id == inv.id);
  CHECK(back.symbols == inv.symbols);
  CHECK(slurp(dir / "inventory.txt").rfind("#inventory " + inv.id + "\nsil\n", 0) == 0);
}

TEST_CASE("manifest round trip, ordering and validation") {
  const fs::path dir = tmp("manifest");
  Manifest m;
  ManifestRecord a;
  a.id = "u1";
  a.speaker_id = "s1";
  a.audio_path = "wav/u1.wav";
  a.alignment_path = "align/u1.tsv";
  ManifestRecord b = a;
  b.condition = Condition::NoisyReverb;
  b.audio_path = "audio/u1_noisy_reverb.wav";
  b.snr_db = 3.25;
  b.t60_s = 0.5;
  b.seed = 12345678901234ULL;
  m.records = {a, b};
  write_manifest(m, dir / "m.jsonl");
  const auto back = load_manifest(dir / "m.jsonl");
  CHECK(back.records == m.records);
  const std::string text = slurp(dir / "m.jsonl");
  CHECK(text.find("{\"id\":\"u1\",\"speaker_id\":\"s1\",\"condition\":\"clean\"") == 0);
  CHECK(back.resolve("wav/u1.wav") == dir / "wav/u1.wav");

  ManifestReader reader(dir / "m.jsonl");
  ManifestRecord r;
  int count = 0;
  while (reader.next(r)) ++count;
  CHECK(count == 2);

  Manifest dup;
  dup.records = {a, a};
  CHECK_THROWS(write_manifest(dup, dir / "dup.jsonl"));
  put(dir / "dup.jsonl", record_to_line(a) + "\n" + record_to_line(a) + "\n");
  CHECK_THROWS_WITH(load_manifest(dir / "dup.jsonl"), doctest::Contains("duplicate"));

  Manifest missing;
  ManifestRecord no_audio = a;
  no_audio.audio_path.clear();
  missing.records = {no_audio};
  CHECK_THROWS(write_manifest(missing, dir / "missing.jsonl"));
  put(dir / "missing.jsonl", "{\"id\":\"u1\",\"speaker_id\":\"s1\",\"condition\":\"clean\"}\n");
  CHECK_THROWS(load_manifest(dir / "missing.jsonl"));
}

TEST_CASE("toy corpus cardinality and determinism") {
  const fs::path dir = tmp("toy");
  ToyCorpusSpec spec;
  spec.n_speakers = 4;
  spec.utterances_per_speaker = 20;
  spec.seed = 7;
  const Manifest m = make_toy_corpus(spec, dir / "a", 1);
  make_toy_corpus(spec, dir / "b", 3);
  REQUIRE(m.records.size() == 80);
  int wavs = 0, aligns = 0;
  for (const auto& e : fs::directory_iterator(dir / "a" / "wav")) wavs += e.path().extension() == ".wav";
  for (const auto& e : fs::directory_iterator(dir / "a" / "align")) aligns += e.path().extension() == ".tsv";
  CHECK(wavs == 80);
  CHECK(aligns == 80);
  CHECK(slurp(dir / "a" / "manifest.jsonl") == slurp(dir / "b" / "manifest.jsonl"));
  CHECK(slurp(dir / "a" / "wav" / "spk3_utt019.wav") == slurp(dir / "b" / "wav" / "spk3_utt019.wav"));
  const auto inv = load_inventory(dir / "a" / "inventory.txt");
  for (const auto& r : m.records) {
    REQUIRE(r.spec_hash.has_value());
    CHECK(*r.spec_hash == spec.hash());
    const auto seq = load_alignment(m.resolve(r.alignment_path), inv);
    CHECK(seq.symbols.size() >= 3 + 2);
    CHECK(seq.symbols.size() <= 8 + 2);
    const auto wave = read_wav(m.resolve(r.audio_path).string());
    const auto rows = read_alignment(m.resolve(r.alignment_path));
    CHECK(rows.back().end_s == doctest::Approx(static_cast<double>(wave.size()) / 24000).epsilon(1e-4));
  }
  ToyCorpusSpec other = spec;
  other.seed = 8;
  CHECK(other.hash() != spec.hash());
}

TEST_CASE("toy speakers differ on the same phoneme sequence") {
  ToyCorpusSpec spec;
  const std::vector<int> phonemes = {1, 2, 3, 4, 5};
  const std::vector<double> durations = {0.12, 0.1, 0.14, 0.09, 0.15};
  const dsp::StftConfig scfg;
  const dsp::MelConfig mcfg;
  std::vector<dsp::MelSpectrogram> mels;
  for (int s = 0; s < 4; ++s)
    mels.push_back(dsp::mel_spectrogram(
        synthesize_toy_utterance(spec, toy_speaker(spec, s), phonemes, durations, 99).wave, scfg,
        mcfg));
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b) {
      REQUIRE(mels[a].frames() == mels[b].frames());
      const double mean_l2 = (mels[a].values - mels[b].values).rowwise().norm().mean();
      CHECK(mean_l2 > 0.1);
    }
}

TEST_CASE("toy corpus rejects an unwritable directory") {
  const fs::path dir = tmp("unwritable");
  put(dir / "file", "x");
  CHECK_THROWS(make_toy_corpus(ToyCorpusSpec{}, dir / "file" / "sub"));
}
