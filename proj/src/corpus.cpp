// SPDX-License-Identifier: Apache-2.0
#include "voicy/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "voicy/parallel.hpp"
#include "voicy/rng.hpp"
#include "voicy/wav.hpp"

namespace voicy::corpus {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string to_string(Condition c) {
  switch (c) {
    case Condition::Clean: return "clean";
    case Condition::Reverb: return "reverb";
    case Condition::NoisyReverb: return "noisy_reverb";
  }
  return "clean";
}

Condition parse_condition(const std::string& s) {
  if (s == "clean") return Condition::Clean;
  if (s == "reverb") return Condition::Reverb;
  if (s == "noisy_reverb") return Condition::NoisyReverb;
  throw std::invalid_argument("unknown condition '" + s + "'");
}

fs::path Manifest::resolve(const std::string& path) const {
  const fs::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

std::string record_to_line(const ManifestRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["speaker_id"] = r.speaker_id;
  j["condition"] = to_string(r.condition);
  j["audio_path"] = r.audio_path;
  j["alignment_path"] = r.alignment_path;
  if (r.snr_db) j["snr_db"] = *r.snr_db;
  if (r.t60_s) j["t60_s"] = *r.t60_s;
  if (r.seed) j["seed"] = *r.seed;
  if (r.spec_hash) j["spec_hash"] = *r.spec_hash;
  if (r.error) j["error"] = *r.error;
  return j.dump();
}

ManifestRecord record_from_line(const std::string& line, std::size_t line_no) {
  const auto fail = [&](const std::string& what) {
    return std::runtime_error("manifest line " + std::to_string(line_no) + ": " + what);
  };
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const std::exception& e) {
    throw fail(std::string("malformed record (") + e.what() + ")");
  }
  const auto required = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string()) throw fail(std::string("missing ") + key);
    return j[key].get<std::string>();
  };
  ManifestRecord r;
  r.id = required("id");
  r.speaker_id = required("speaker_id");
  try {
    r.condition = parse_condition(required("condition"));
  } catch (const std::invalid_argument& e) {
    throw fail(e.what());
  }
  r.audio_path = required("audio_path");
  if (r.audio_path.empty()) throw fail("missing audio_path");
  if (j.contains("alignment_path")) r.alignment_path = j["alignment_path"].get<std::string>();
  if (j.contains("snr_db")) r.snr_db = j["snr_db"].get<double>();
  if (j.contains("t60_s")) r.t60_s = j["t60_s"].get<double>();
  if (j.contains("seed")) r.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("spec_hash")) r.spec_hash = j["spec_hash"].get<std::string>();
  if (j.contains("error")) r.error = j["error"].get<std::string>();
  return r;
}

ManifestReader::ManifestReader(const fs::path& path) : in_(path), path_(path) {
  if (!in_) throw std::runtime_error("cannot open manifest " + path.string());
}

bool ManifestReader::next(ManifestRecord& record) {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    if (line.empty() || line[0] == '#') continue;
    record = record_from_line(line, line_no_);
    return true;
  }
  return false;
}

Manifest load_manifest(const fs::path& path) {
  Manifest m;
  m.base_dir = path.parent_path();
  ManifestReader reader(path);
  std::set<std::pair<std::string, Condition>> seen;
  ManifestRecord r;
  while (reader.next(r)) {
    if (!seen.emplace(r.id, r.condition).second)
      throw std::runtime_error("manifest " + path.string() + ": duplicate record (" + r.id +
                               ", " + to_string(r.condition) + ")");
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  std::set<std::pair<std::string, Condition>> seen;
  for (const auto& r : manifest.records) {
    if (r.audio_path.empty())
      throw std::invalid_argument("write_manifest: record " + r.id + " has no audio path");
    if (!seen.emplace(r.id, r.condition).second)
      throw std::invalid_argument("write_manifest: duplicate record (" + r.id + ", " +
                                  to_string(r.condition) + ")");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& r : manifest.records) out << record_to_line(r) << '\n';
  if (!out) throw std::runtime_error("failed writing manifest " + path.string());
}

std::optional<int> PhonemeInventory::find(const std::string& symbol) const {
  if (symbol.empty() || symbol == "sp" || symbol == "spn" || symbol == kSilence)
    return silence_index();
  for (int i = 0; i < size(); ++i)
    if (symbols[i] == symbol) return i;
  return std::nullopt;
}

PhonemeInventory toy_inventory(int n_phonemes) {
  if (n_phonemes < 1) throw std::invalid_argument("toy inventory needs at least one phoneme");
  PhonemeInventory inv;
  inv.id = "toy-v1-k" + std::to_string(n_phonemes);
  inv.symbols.push_back(kSilence);
  for (int k = 0; k < n_phonemes; ++k) inv.symbols.push_back("p" + std::to_string(k));
  return inv;
}

PhonemeInventory load_inventory(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open inventory " + path.string());
  PhonemeInventory inv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("#inventory ", 0) == 0) {
      inv.id = line.substr(11);
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    inv.symbols.push_back(line);
  }
  if (inv.id.empty())
    throw std::runtime_error("inventory " + path.string() + ": missing '#inventory <id>' line");
  if (inv.symbols.empty() || inv.symbols.front() != kSilence)
    throw std::runtime_error("inventory " + path.string() + ": first symbol must be 'sil'");
  std::set<std::string> unique(inv.symbols.begin(), inv.symbols.end());
  if (unique.size() != inv.symbols.size())
    throw std::runtime_error("inventory " + path.string() + ": duplicate symbol");
  return inv;
}

void write_inventory(const PhonemeInventory& inventory, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write inventory " + path.string());
  out << "#inventory " << inventory.id << '\n';
  for (const auto& s : inventory.symbols) out << s << '\n';
}

std::vector<AlignmentRow> read_alignment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open alignment " + path.string());
  std::vector<AlignmentRow> rows;
  std::string line;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& what) {
    return std::runtime_error("alignment " + path.string() + " line " +
                              std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 3) throw fail("expected 3 tab-separated fields");
    AlignmentRow row;
    row.symbol = fields[0];
    try {
      std::size_t used = 0;
      row.start_s = std::stod(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("trailing");
      row.end_s = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw fail("malformed time");
    }
    if (!(row.end_s > row.start_s)) throw fail("end must be greater than start");
    if (!rows.empty() && row.start_s < rows.back().end_s - 1e-9)
      throw fail("row overlaps or precedes the previous row");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("alignment " + path.string() + " is empty");
  return rows;
}

void write_alignment(const std::vector<AlignmentRow>& rows, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write alignment " + path.string());
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\n", r.start_s, r.end_s);
    out << r.symbol << buf;
  }
}

PhonemeSequence load_alignment(const fs::path& path, const PhonemeInventory& inventory) {
  const auto rows = read_alignment(path);
  PhonemeSequence seq;
  seq.inventory_id = inventory.id;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto idx = inventory.find(rows[i].symbol);
    if (!idx)
      throw std::runtime_error("alignment " + path.string() + " line " + std::to_string(i + 1) +
                               ": unknown phoneme '" + rows[i].symbol + "'");
    seq.symbols.push_back(*idx);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Toy corpus

void ToyCorpusSpec::validate() const {
  if (n_speakers < 1 || utterances_per_speaker < 1)
    throw std::invalid_argument("toy corpus: need at least one speaker and utterance");
  if (inventory_size < 1) throw std::invalid_argument("toy corpus: inventory_size must be >= 1");
  if (!(min_segment_s > 0 && min_segment_s <= max_segment_s))
    throw std::invalid_argument("toy corpus: invalid segment duration range");
  if (min_segments < 1 || min_segments > max_segments)
    throw std::invalid_argument("toy corpus: invalid segment count range");
  if (sample_rate_hz <= 0) throw std::invalid_argument("toy corpus: invalid sample rate");
}

std::string ToyCorpusSpec::hash() const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "toy-v1|%d|%d|%d|%.17g|%.17g|%d|%d|%.17g|%d|%llu", n_speakers,
                utterances_per_speaker, inventory_size, min_segment_s, max_segment_s,
                min_segments, max_segments, edge_silence_s, sample_rate_hz,
                static_cast<unsigned long long>(seed));
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(buf)));
  return hex;
}

ToySpeaker toy_speaker(const ToyCorpusSpec& spec, int speaker) {
  Rng rng(derive_seed(spec.seed, "speaker/" + std::to_string(speaker)));
  ToySpeaker s;
  s.pitch_scale = rng.uniform(0.75, 1.35);
  s.formants_hz = {rng.uniform(300, 800), rng.uniform(1000, 2200), rng.uniform(2400, 3600)};
  s.bandwidths_hz = {rng.uniform(60, 160), rng.uniform(60, 160), rng.uniform(60, 160)};
  return s;
}

namespace {

// Two-pole resonator with unit gain at DC.
void resonate(std::vector<double>& x, double center_hz, double bandwidth_hz, int fs) {
  const double r = std::exp(-std::numbers::pi * bandwidth_hz / fs);
  const double theta = 2.0 * std::numbers::pi * center_hz / fs;
  const double a1 = 2.0 * r * std::cos(theta);
  const double a2 = -r * r;
  const double gain = 1.0 - a1 - a2;
  double y1 = 0.0, y2 = 0.0;
  for (double& v : x) {
    const double y = gain * v + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    v = y;
  }
}

std::vector<double> phoneme_excitation(int phoneme, std::size_t n, double pitch_scale, int fs,
                                       Rng& rng) {
  std::vector<double> seg(n, 0.0);
  const int k = phoneme - 1;
  if (k % 2 == 0) {
    const double f0 = (110.0 + 25.0 * k) * pitch_scale;
    for (int h = 1; h * f0 < 5000.0; ++h) {
      const double w = 2.0 * std::numbers::pi * h * f0 / fs;
      for (std::size_t i = 0; i < n; ++i) seg[i] += std::sin(w * static_cast<double>(i)) / h;
    }
  } else {
    for (auto& v : seg) v = rng.normal();
    resonate(seg, 1200.0 + 600.0 * k, 600.0, fs);
  }
  double power = 0.0;
  for (double v : seg) power += v * v;
  const double scale = power > 0 ? 1.0 / std::sqrt(power / static_cast<double>(n)) : 0.0;
  const std::size_t ramp = std::min<std::size_t>(n / 2, static_cast<std::size_t>(0.005 * fs));
  for (std::size_t i = 0; i < n; ++i) {
    double g = scale;
    if (i < ramp) g *= 0.5 - 0.5 * std::cos(std::numbers::pi * i / ramp);
    if (n - 1 - i < ramp) g *= 0.5 - 0.5 * std::cos(std::numbers::pi * (n - 1 - i) / ramp);
    seg[i] *= g;
  }
  return seg;
}

}  // namespace

ToyUtterance synthesize_toy_utterance(const ToyCorpusSpec& spec, const ToySpeaker& speaker,
                                      const std::vector<int>& phonemes,
                                      const std::vector<double>& durations_s,
                                      std::uint64_t seed) {
  if (phonemes.empty() || phonemes.size() != durations_s.size())
    throw std::invalid_argument("toy utterance: need one duration per phoneme");
  const int fs = spec.sample_rate_hz;
  const PhonemeInventory inv = toy_inventory(spec.inventory_size);
  Rng rng(seed);

  ToyUtterance utt;
  std::vector<double> samples;
  std::size_t cursor = 0;
  const auto push_segment = [&](const std::string& symbol, std::vector<double> seg) {
    const double start = static_cast<double>(cursor) / fs;
    cursor += seg.size();
    samples.insert(samples.end(), seg.begin(), seg.end());
    utt.alignment.push_back({symbol, start, static_cast<double>(cursor) / fs});
  };
  const auto edge = static_cast<std::size_t>(std::lround(spec.edge_silence_s * fs));
  if (edge > 0) push_segment(kSilence, std::vector<double>(edge, 0.0));
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    const int p = phonemes[i];
    if (p < 1 || p >= inv.size())
      throw std::invalid_argument("toy utterance: phoneme index out of range");
    const auto n = static_cast<std::size_t>(std::lround(durations_s[i] * fs));
    push_segment(inv.symbols[p], phoneme_excitation(p, n, speaker.pitch_scale, fs, rng));
  }
  if (edge > 0) push_segment(kSilence, std::vector<double>(edge, 0.0));

  for (std::size_t f = 0; f < speaker.formants_hz.size(); ++f)
    resonate(samples, speaker.formants_hz[f], speaker.bandwidths_hz[f], fs);

  double power = 0.0;
  for (double v : samples) power += v * v;
  const double scale = 0.1 / std::sqrt(power / static_cast<double>(samples.size()));
  utt.wave.sample_rate_hz = fs;
  utt.wave.samples.resize(static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i)
    utt.wave.samples[static_cast<Eigen::Index>(i)] = samples[i] * scale + 1e-4 * rng.normal();
  return utt;
}

Manifest make_toy_corpus(const ToyCorpusSpec& spec, const fs::path& out_dir, int threads) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "wav", ec);
  fs::create_directories(out_dir / "align", ec);
  if (ec || !fs::is_directory(out_dir / "wav") || !fs::is_directory(out_dir / "align"))
    throw std::runtime_error("toy corpus: cannot create output directory " + out_dir.string());

  const PhonemeInventory inv = toy_inventory(spec.inventory_size);
  write_inventory(inv, out_dir / "inventory.txt");
  const std::string hash = spec.hash();

  Manifest manifest;
  manifest.base_dir = out_dir;
  const std::size_t total =
      static_cast<std::size_t>(spec.n_speakers) * spec.utterances_per_speaker;
  manifest.records.resize(total);

  parallel_for(total, threads, [&](std::size_t i) {
    const int s = static_cast<int>(i) / spec.utterances_per_speaker;
    const int u = static_cast<int>(i) % spec.utterances_per_speaker;
    char id[64];
    std::snprintf(id, sizeof id, "spk%d_utt%03d", s, u);
    const std::uint64_t seed = derive_seed(spec.seed, id);
    Rng rng(seed);
    const int n_seg =
        spec.min_segments + static_cast<int>(rng.index(spec.max_segments - spec.min_segments + 1));
    std::vector<int> phonemes(n_seg);
    std::vector<double> durations(n_seg);
    for (int k = 0; k < n_seg; ++k) {
      phonemes[k] = 1 + static_cast<int>(rng.index(spec.inventory_size));
      durations[k] = rng.uniform(spec.min_segment_s, spec.max_segment_s);
    }
    const ToyUtterance utt =
        synthesize_toy_utterance(spec, toy_speaker(spec, s), phonemes, durations, rng.next());

    ManifestRecord& r = manifest.records[i];
    r.id = id;
    r.speaker_id = "spk" + std::to_string(s);
    r.condition = Condition::Clean;
    r.audio_path = "wav/" + r.id + ".wav";
    r.alignment_path = "align/" + r.id + ".tsv";
    r.seed = seed;
    r.spec_hash = hash;
    write_wav((out_dir / r.audio_path).string(), utt.wave);
    write_alignment(utt.alignment, out_dir / r.alignment_path);
  });
  write_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

}  // namespace voicy::corpus
