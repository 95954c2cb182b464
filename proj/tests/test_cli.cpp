// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the voicy executable on a small toy corpus.
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "voicy/checkpoint.hpp"
#include "voicy/corpus.hpp"
#include "voicy/training.hpp"

using namespace voicy;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::path(VOICY_TEST_TMP);

/// Runs the CLI with `args` (shell-quoted by the caller) and returns its exit code.
int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " '" + std::string(VOICY_CLI) + "' " + args + " >>'" +
                          (kRoot / "cli.log").string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Relative path -> bytes for every regular file under `dir`.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

void check_same_tree(const fs::path& a, const fs::path& b) {
  const auto sa = snapshot(a), sb = snapshot(b);
  REQUIRE(sa.size() == sb.size());
  for (const auto& [name, bytes] : sa) {
    INFO(name);
    REQUIRE(sb.count(name) == 1);
    CHECK(bytes == sb.at(name));
  }
}

fs::path fresh(const std::string& name) {
  const fs::path p = kRoot / name;
  fs::remove_all(p);
  return p;
}

/// Toy corpus and degraded dataset shared by the cases below.
struct Fixture {
  fs::path toy, data;
  Fixture() {
    toy = fresh("toy");
    data = fresh("data");
    REQUIRE(run_cli("toy-corpus --out " + q(toy) + " --speakers 2 --utts 4 --seed 3") == 0);
    REQUIRE(run_cli("build-dataset --manifest " + q(toy / "manifest.jsonl") + " --out " + q(data) + " --seed 4") == 0);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

const std::string kTrainArgs = " --steps 6 --batch-size 2 --holdout-per-speaker 1 --seed 5 --decay-steps 6";

}  // namespace

TEST_CASE("usage errors exit with 2, failures with 1, help with 0") {
  CHECK(run_cli("") == 2);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("train --help") == 0);
  CHECK(run_cli("no-such-command") == 2);
  CHECK(run_cli("toy-corpus") == 2);
  CHECK(run_cli("toy-corpus --out x --speakers notanumber") == 2);
  CHECK(run_cli("eval --scores /nonexistent/scores.jsonl --out x") == 2);
  CHECK(run_cli("gradcheck --eps 0.5") == 2);
  CHECK(run_cli("toy-corpus --out " + q(fresh("envbad")), "VOICY_SEED=abc") == 2);

  const fs::path bad = fresh("bad_ckpt");
  fs::create_directories(bad);
  std::ofstream(bad / "c.bin") << "VOICYCKP garbage";
  const auto& f = fixture();
  const fs::path wav = f.toy / "wav" / "spk0_utt000.wav";
  CHECK(run_cli("convert --checkpoint " + q(bad / "c.bin") + " --source " + q(wav) + " --target " + q(wav) +
              " --out " + q(bad / "out")) == 1);
  CHECK(run_cli("gradcheck --layers-only --tolerance 1e-30") == 1);
}

TEST_CASE("corpus commands are byte-deterministic and honour VOICY_SEED") {
  const auto& f = fixture();
  const fs::path toy2 = fresh("toy2"), toy_env = fresh("toy_env");
  REQUIRE(run_cli("toy-corpus --out " + q(toy2) + " --speakers 2 --utts 4 --seed 3") == 0);
  REQUIRE(run_cli("toy-corpus --out " + q(toy_env) + " --speakers 2 --utts 4", "VOICY_SEED=3") == 0);
  check_same_tree(f.toy, toy2);
  check_same_tree(f.toy, toy_env);

  const fs::path data2 = fresh("data2");
  REQUIRE(run_cli("build-dataset --manifest " + q(f.toy / "manifest.jsonl") + " --out " + q(data2) + " --seed 4") ==
          0);
  check_same_tree(f.data, data2);

  const fs::path feats1 = fresh("feats1"), feats2 = fresh("feats2");
  REQUIRE(run_cli("features --manifest " + q(f.data / "manifest.jsonl") + " --out " + q(feats1)) == 0);
  REQUIRE(run_cli("features --manifest " + q(f.data / "manifest.jsonl") + " --out " + q(feats2) + " --threads 3") == 0);
  check_same_tree(feats1, feats2);
  CHECK(fs::exists(feats1 / "spk1_utt003_noisy_reverb.npy"));
}

TEST_CASE("dataset holds three conditions per clean utterance") {
  const fs::path toy = fresh("toy_full"), data = fresh("data_full");
  REQUIRE(run_cli("toy-corpus --out " + q(toy)) == 0);
  REQUIRE(run_cli("build-dataset --manifest " + q(toy / "manifest.jsonl") + " --out " + q(data) + " --threads 2") == 0);
  const auto m = corpus::load_manifest(data / "manifest.jsonl");
  CHECK(m.records.size() == 240);
  std::map<corpus::Condition, int> per;
  for (const auto& r : m.records) {
    CHECK_FALSE(r.error.has_value());
    ++per[r.condition];
  }
  CHECK(per[corpus::Condition::Clean] == 80);
  CHECK(per[corpus::Condition::Reverb] == 80);
  CHECK(per[corpus::Condition::NoisyReverb] == 80);
}

TEST_CASE("training is deterministic and resuming matches a straight run") {
  const auto& f = fixture();
  const std::string manifest = " --manifest " + q(f.data / "manifest.jsonl");
  const fs::path a = fresh("run_a"), b = fresh("run_b"), c = fresh("run_c"), t = fresh("run_t");
  REQUIRE(run_cli("train" + manifest + " --out " + q(a) + kTrainArgs) == 0);
  REQUIRE(run_cli("train" + manifest + " --out " + q(b) + kTrainArgs) == 0);
  REQUIRE(run_cli("train" + manifest + " --out " + q(t) + kTrainArgs + " --threads 2") == 0);
  check_same_tree(a, b);
  CHECK(read_file(a / "checkpoint.bin") == read_file(t / "checkpoint.bin"));
  CHECK(read_file(a / "loss_log.tsv") == read_file(t / "loss_log.tsv"));

  const std::string split_args = " --batch-size 2 --holdout-per-speaker 1 --seed 5 --decay-steps 6";
  REQUIRE(run_cli("train" + manifest + " --out " + q(c) + " --steps 2" + split_args) == 0);
  REQUIRE(run_cli("train" + manifest + " --out " + q(c) + " --steps 4 --resume " + q(c / "checkpoint.bin")) == 0);
  REQUIRE(run_cli("train" + manifest + " --out " + q(c) + " --steps 6 --resume " + q(c / "checkpoint.bin")) == 0);
  CHECK(read_file(a / "checkpoint.bin") == read_file(c / "checkpoint.bin"));
  CHECK(read_file(a / "loss_log.tsv") == read_file(c / "loss_log.tsv"));

  CHECK(run_cli("train" + manifest + " --out " + q(c) + " --steps 8 --lr 0.1 --resume " + q(c / "checkpoint.bin")) ==
        2);
  const auto log = read_file(a / "loss_log.tsv");
  CHECK(log.rfind("step\tL\tL_recon\tL_phonetic\tL_content\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 7);
}

TEST_CASE("zero phonetic weight leaves the acoustic encoder at its initial values") {
  const auto& f = fixture();
  const fs::path run = fresh("run_beta0");
  REQUIRE(run_cli("train --manifest " + q(f.data / "manifest.jsonl") + " --out " + q(run) + kTrainArgs +
                " --beta 0") == 0);
  const auto [model, state] = restore_checkpoint(load_checkpoint(run / "checkpoint.bin"));
  CHECK(model.config().beta == 0.0);
  const auto init = VoicyModel::create(model.config());
  std::size_t asr = 0, moved = 0;
  for (const auto& [path, p] : model.parameters()) {
    const bool same = p.value == init.parameters().at(path).value;
    if (path.rfind("asr/", 0) == 0) {
      ++asr;
      CHECK(same);
    } else if (!same) {
      ++moved;
    }
  }
  CHECK(asr > 0);
  CHECK(moved > 0);
}

TEST_CASE("conversion needs no alignments and is deterministic") {
  const auto& f = fixture();
  const fs::path run = fresh("run_conv");
  REQUIRE(run_cli("train --manifest " + q(f.data / "manifest.jsonl") + " --out " + q(run) + kTrainArgs) == 0);

  // Private copy of the clean audio and alignments so deletion does not
  // disturb other cases.
  const fs::path toy = fresh("toy_conv");
  fs::copy(f.toy, toy, fs::copy_options::recursive);
  const std::string pairs = "pairs.tsv";
  std::ofstream(toy / pairs) << "wav/spk0_utt000.wav\twav/spk1_utt001.wav\tcross\twav/spk0_utt000.wav\n"
                             << "wav/spk1_utt002.wav\twav/spk1_utt002.wav\n";
  const std::string args = "convert --checkpoint " + q(run / "checkpoint.bin") + " --pairs " + q(toy / pairs) +
                           " --vocode --gl-iters 4 --out ";
  const fs::path before = fresh("conv_before"), after = fresh("conv_after");
  REQUIRE(run_cli(args + q(before)) == 0);
  fs::remove_all(toy / "align");
  fs::remove(toy / "manifest.jsonl");
  REQUIRE(run_cli(args + q(after)) == 0);
  check_same_tree(before, after);
  CHECK(fs::exists(before / "cross.npy"));
  CHECK(fs::exists(before / "cross.wav"));
  CHECK(fs::exists(before / "spk1_utt002_to_spk1_utt002.npy"));
  CHECK(fs::exists(before / "objective.tsv"));
  CHECK(run_cli("convert --help") == 0);
  const auto help_log = read_file(kRoot / "cli.log");
  CHECK(help_log.find("--transcript") == std::string::npos);
  CHECK(help_log.find("--alignment") == std::string::npos);
}

TEST_CASE("eval and gradcheck outputs are deterministic") {
  const fs::path dir = fresh("eval_in");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "scores.jsonl");
    for (int u = 0; u < 6; ++u)
      for (const char* sys : {"base", "proposed"})
        for (int r = 0; r < 2; ++r)
          out << R"({"system":")" << sys << R"(","utterance":"u)" << u << R"(","rater":"r)" << r
              << R"(","metric":"naturalness","score":)" << (30 + 7 * u + (sys[0] == 'p' ? 5 + r : r)) << "}\n";
    std::ofstream snr(dir / "snr.tsv");
    for (int u = 0; u < 6; ++u) snr << "u" << u << "\t" << (u == 0 ? "clean" : std::to_string(u * 6)) << "\n";
  }
  const fs::path e1 = fresh("eval1"), e2 = fresh("eval2");
  const std::string args = "eval --scores " + q(dir / "scores.jsonl") + " --snr-map " + q(dir / "snr.tsv") +
                           " --edges 0,10,20 --out ";
  REQUIRE(run_cli(args + q(e1)) == 0);
  REQUIRE(run_cli(args + q(e2)) == 0);
  check_same_tree(e1, e2);
  const auto pairwise = read_file(e1 / "wilcoxon_pairwise.tsv");
  CHECK(pairwise.find("naturalness\tbase\tproposed\t12\t12") != std::string::npos);
  CHECK(read_file(e1 / "snr_buckets.tsv").find("clean\t") != std::string::npos);
  CHECK(run_cli("eval --scores " + q(dir / "scores.jsonl") + " --out " + q(e1) + " --mode sometimes") == 2);

  const fs::path g1 = fresh("gc1"), g2 = fresh("gc2");
  REQUIRE(run_cli("gradcheck --layers-only --seed 2 --out " + q(g1)) == 0);
  REQUIRE(run_cli("gradcheck --layers-only --out " + q(g2), "VOICY_SEED=2") == 0);
  check_same_tree(g1, g2);
}
