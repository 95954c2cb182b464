// SPDX-License-Identifier: Apache-2.0
//
// voicy: command-line driver for corpus synthesis, feature extraction,
// training, conversion, evaluation and gradient checking.
//
// Exit codes: 0 success, 1 computational failure, 2 usage error.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "voicy/checkpoint.hpp"
#include "voicy/corpus.hpp"
#include "voicy/eval.hpp"
#include "voicy/gradcheck_suite.hpp"
#include "voicy/npy.hpp"
#include "voicy/parallel.hpp"
#include "voicy/scene.hpp"
#include "voicy/training.hpp"
#include "voicy/wav.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace voicy;

namespace {

constexpr const char* kVersion = "0.1.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flag value, else VOICY_SEED, else the command default.
std::uint64_t resolve_seed(const CLI::Option* flag, std::uint64_t flag_value, std::uint64_t fallback) {
  if (flag->count() > 0) return flag_value;
  if (const char* env = std::getenv("VOICY_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("VOICY_SEED is not an unsigned integer: '") + env + "'");
  }
  return fallback;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_resolved_config(const fs::path& dir, const std::string& command, ordered_json settings) {
  ordered_json j;
  j["tool"] = "voicy";
  j["version"] = kVersion;
  j["command"] = command;
  j["settings"] = std::move(settings);
  write_text(dir / "resolved_config.json", j.dump(2) + "\n");
}

ordered_json sampler_json(const scene::SamplerConfig& c) {
  return {{"dims_min", {c.dims_min.x(), c.dims_min.y(), c.dims_min.z()}},
          {"dims_max", {c.dims_max.x(), c.dims_max.y(), c.dims_max.z()}},
          {"t60_min", c.t60_min},
          {"t60_max", c.t60_max},
          {"noisy_t60_max", c.noisy_t60_max},
          {"max_order", c.max_order},
          {"wall_margin", c.wall_margin},
          {"snr_min", c.snr_min},
          {"snr_mean", c.snr_mean},
          {"snr_max", c.snr_max},
          {"white_share_min", c.white_share_min},
          {"white_share_max", c.white_share_max},
          {"noise_paths", c.noise_paths}};
}

std::vector<double> parse_edges(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw UsageError("bad bucket edge '" + item + "'");
    out.push_back(v);
  }
  return out;
}

// -- toy-corpus -------------------------------------------------------------

struct ToyArgs {
  corpus::ToyCorpusSpec spec;
  std::uint64_t seed = 7;
  std::string out;
  int threads = 1;
  CLI::Option* seed_opt = nullptr;
};

int cmd_toy_corpus(ToyArgs& a) {
  a.spec.seed = resolve_seed(a.seed_opt, a.seed, 7);
  const auto m = corpus::make_toy_corpus(a.spec, a.out, a.threads);
  write_resolved_config(a.out, "toy-corpus",
                        {{"speakers", a.spec.n_speakers},
                         {"utterances_per_speaker", a.spec.utterances_per_speaker},
                         {"inventory_size", a.spec.inventory_size},
                         {"min_segment_s", a.spec.min_segment_s},
                         {"max_segment_s", a.spec.max_segment_s},
                         {"min_segments", a.spec.min_segments},
                         {"max_segments", a.spec.max_segments},
                         {"seed", a.spec.seed},
                         {"spec_hash", a.spec.hash()}});
  std::printf("wrote %zu records to %s\n", m.records.size(), (fs::path(a.out) / "manifest.jsonl").c_str());
  return 0;
}

// -- build-dataset ----------------------------------------------------------

struct BuildArgs {
  std::string manifest;
  std::string out;
  scene::SamplerConfig sampler;
  std::uint64_t seed = 0;
  int threads = 1;
  CLI::Option* seed_opt = nullptr;
};

int cmd_build_dataset(BuildArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed, 0);
  a.sampler.validate();
  const auto m = scene::build_dataset(a.manifest, a.out, a.sampler, seed, a.threads);
  ordered_json settings = sampler_json(a.sampler);
  settings["input_manifest"] = a.manifest;
  settings["seed"] = seed;
  write_resolved_config(a.out, "build-dataset", settings);
  std::size_t failed = 0;
  for (const auto& r : m.records) failed += r.error.has_value();
  std::printf("wrote %zu records to %s", m.records.size(), (fs::path(a.out) / "manifest.jsonl").c_str());
  if (failed) std::printf(" (%zu failed, see error fields)", failed);
  std::printf("\n");
  return failed ? 1 : 0;
}

// -- features ---------------------------------------------------------------

struct FeatureArgs {
  std::string manifest;
  std::vector<std::string> wavs;
  std::string out;
  int threads = 1;
};

int cmd_features(FeatureArgs& a) {
  if (a.manifest.empty() == a.wavs.empty()) throw UsageError("give exactly one of --manifest or --wav");
  const dsp::StftConfig stft;
  const dsp::MelConfig mel;
  struct Job {
    fs::path input;
    std::string name;
  };
  std::vector<Job> jobs;
  if (!a.manifest.empty()) {
    const auto m = corpus::load_manifest(a.manifest);
    for (const auto& r : m.records)
      if (!r.error) jobs.push_back({m.resolve(r.audio_path), r.id + "_" + corpus::to_string(r.condition)});
  } else {
    for (const auto& w : a.wavs) jobs.push_back({w, fs::path(w).stem().string()});
  }
  fs::create_directories(a.out);
  parallel_for(jobs.size(), a.threads, [&](std::size_t i) {
    const auto spec = dsp::mel_spectrogram(read_wav(jobs[i].input.string()), stft, mel);
    write_npy(fs::path(a.out) / (jobs[i].name + ".npy"), spec.values);
  });
  write_resolved_config(a.out, "features",
                        {{"fft_size", stft.fft_size},
                         {"win_size", stft.win_size},
                         {"hop_size", stft.hop_size},
                         {"window", "hann"},
                         {"n_mels", mel.n_mels},
                         {"f_min_hz", mel.f_min_hz},
                         {"f_max_hz", mel.f_max_hz},
                         {"log_floor", mel.log_floor},
                         {"log", "natural"},
                         {"files", jobs.size()}});
  std::printf("wrote %zu feature files to %s\n", jobs.size(), a.out.c_str());
  return 0;
}

// -- train ------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string out;
  std::string config;
  std::string resume;
  std::string inventory;
  int steps = 500;
  int batch_size = 8;
  double lr = 2e-3;
  double beta = 1.0;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  int holdout = 0;
  int decay_steps = 500;
  double final_lr_fraction = 0.1;
  int save_every = 0;
  int threads = 1;
  std::map<std::string, CLI::Option*> opts;
  bool given(const std::string& name) const { return opts.at(name)->count() > 0; }
};

/// Keeps header and rows with step <= last_step from an existing log.
std::string truncated_log(const fs::path& path, std::int64_t last_step) {
  std::string out = loss_log_header();
  if (!fs::exists(path)) return out;
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::int64_t step = std::stoll(line.substr(0, line.find('\t')));
    if (step <= last_step) out += line + "\n";
  }
  return out;
}

int cmd_train(TrainArgs& a) {
  const fs::path run_dir = a.out;
  fs::create_directories(run_dir);
  const auto manifest = corpus::load_manifest(a.manifest);
  const auto inventory = find_inventory(manifest, a.inventory);

  std::optional<VoicyModel> model;
  grad::OptimizerState<double> opt_state;
  TrainConfig tc;
  if (!a.resume.empty()) {
    for (const char* flag : {"--batch-size", "--lr", "--beta", "--lambda", "--seed", "--holdout-per-speaker",
                             "--decay-steps", "--final-lr-fraction", "--config"})
      if (a.given(flag))
        throw UsageError(std::string(flag) + " cannot be combined with --resume; the checkpoint fixes it");
    const Checkpoint ckpt = load_checkpoint(a.resume);
    auto [m, state] = restore_checkpoint(ckpt);
    model.emplace(std::move(m));
    opt_state = std::move(state);
    tc = checkpoint_train_config(ckpt);
    tc.steps = a.steps;
    if (model->config().inventory_id != inventory.id)
      throw std::runtime_error("checkpoint inventory '" + model->config().inventory_id +
                               "' differs from the corpus inventory '" + inventory.id + "'");
  } else {
    // Defaults, then the config file, then explicit flags.
    ordered_json model_json = ModelConfig{}.to_json();
    ordered_json train_json = TrainConfig{}.to_json();
    if (!a.config.empty()) {
      const json file = json::parse(read_text(a.config));
      if (file.contains("model")) model_json.merge_patch(file.at("model"));
      if (file.contains("training")) train_json.merge_patch(file.at("training"));
    }
    if (a.given("--steps")) train_json["steps"] = a.steps;
    if (a.given("--batch-size")) train_json["batch_size"] = a.batch_size;
    if (a.given("--lr")) train_json["learning_rate"] = a.lr;
    if (a.given("--holdout-per-speaker")) train_json["holdout_per_speaker"] = a.holdout;
    if (a.given("--decay-steps")) train_json["decay_steps"] = a.decay_steps;
    if (a.given("--final-lr-fraction")) train_json["final_lr_fraction"] = a.final_lr_fraction;
    if (a.given("--beta")) model_json["loss"]["beta"] = a.beta;
    if (a.given("--lambda")) model_json["loss"]["lambda"] = a.lambda;
    const std::uint64_t seed = resolve_seed(a.opts.at("--seed"), a.seed, train_json.value("seed", 0ULL));
    train_json["seed"] = seed;
    model_json["seed"] = seed;
    model_json["inventory"] = {{"id", inventory.id}, {"size", inventory.size()}};
    tc = TrainConfig::from_json(train_json);
    ModelConfig mc = ModelConfig::from_json(model_json);
    // Standardization is fitted below once the split is known.
    model.emplace(VoicyModel::create(mc));
    opt_state.config = tc.optimizer;
  }

  const ModelConfig& mc = model->config();
  const TrainingSet set = load_training_set(manifest, inventory, mc.stft, mc.mel, tc.holdout_per_speaker, a.threads);
  if (a.resume.empty() && mc.feature_mean.empty()) {
    std::vector<Eigen::MatrixXd> clean;
    for (const auto& id : set.train_ids) clean.push_back(set.utterances[set.clean.at(id)].log_mel);
    ModelConfig fitted = mc;
    fit_standardization(fitted, clean);
    model.emplace(VoicyModel::create(fitted));
  }

  std::string split = "id\tspeaker_id\tsplit\n";
  for (const auto& [id, speaker] : set.speaker_of)
    split += id + "\t" + speaker + "\t" + (set.is_heldout(id) ? "heldout" : "train") + "\n";
  write_text(run_dir / "split.tsv", split);
  ordered_json settings;
  settings["manifest"] = a.manifest;
  settings["inventory"] = inventory.id;
  settings["resume"] = a.resume;
  settings["threads"] = a.threads;
  settings["model"] = model->config().to_json();
  settings["training"] = tc.to_json();
  write_resolved_config(run_dir, "train", settings);

  grad::Adam<double> optimizer(opt_state);
  const fs::path log_path = run_dir / "loss_log.tsv";
  std::string log = a.resume.empty() ? loss_log_header() : truncated_log(log_path, optimizer.state().step);
  write_text(log_path, log);
  std::ofstream log_out(log_path, std::ios::app | std::ios::binary);
  const fs::path ckpt_path = run_dir / "checkpoint.bin";
  const auto t0 = std::chrono::steady_clock::now();
  train(*model, optimizer, set, tc, a.threads, [&](std::int64_t step, const LossReport& r) {
    log_out << loss_log_row(step, r);
    log_out.flush();
    if (step % 50 == 0 || step == tc.steps)
      std::fprintf(stderr, "step %lld  L %.4f  recon %.4f  phonetic %.4f  content %.4f\n",
                   static_cast<long long>(step), r.total, r.recon, r.phonetic, r.content);
    if (a.save_every > 0 && step % a.save_every == 0)
      save_checkpoint(make_checkpoint(*model, optimizer, tc), ckpt_path);
  });
  save_checkpoint(make_checkpoint(*model, optimizer, tc), ckpt_path);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("trained to step %lld in %.1f s; checkpoint %s\n", static_cast<long long>(optimizer.state().step),
              secs, ckpt_path.c_str());
  return 0;
}

// -- convert ----------------------------------------------------------------

struct ConvertArgs {
  std::string checkpoint;
  std::string source;
  std::string target;
  std::string pairs;
  std::string name = "converted";
  std::string out;
  bool vocode = false;
  int gl_iters = 32;
  int threads = 1;
};

int cmd_convert(ConvertArgs& a) {
  const bool single = !a.source.empty() || !a.target.empty();
  if (single == !a.pairs.empty()) throw UsageError("give either --source and --target, or --pairs");
  if (single && (a.source.empty() || a.target.empty())) throw UsageError("--source and --target go together");
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const VoicyModel model = restore_checkpoint(ckpt).first;

  struct Job {
    fs::path source, target, reference;
    std::string name;
  };
  std::vector<Job> jobs;
  if (single) {
    jobs.push_back({a.source, a.target, {}, a.name});
  } else {
    // source<TAB>target[<TAB>name[<TAB>clean reference]], relative to the pairs file.
    const fs::path base = fs::path(a.pairs).parent_path();
    std::istringstream in(read_text(a.pairs));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> cols;
      std::stringstream ss(line);
      std::string c;
      while (std::getline(ss, c, '\t')) cols.push_back(c);
      if (cols.size() < 2 || cols.size() > 4)
        throw std::invalid_argument("pairs line " + std::to_string(n) + ": expected 2 to 4 tab-separated columns");
      const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
      Job job{resolve(cols[0]), resolve(cols[1]), {}, {}};
      job.name = cols.size() >= 3 && !cols[2].empty()
                     ? cols[2]
                     : fs::path(cols[0]).stem().string() + "_to_" + fs::path(cols[1]).stem().string();
      if (cols.size() == 4) job.reference = resolve(cols[3]);
      jobs.push_back(job);
    }
    if (jobs.empty()) throw std::invalid_argument("pairs file lists no conversions");
  }

  fs::create_directories(a.out);
  std::vector<std::optional<eval::ObjectiveScores>> scores(jobs.size());
  parallel_for(jobs.size(), a.threads, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto source = read_wav(job.source.string());
    const auto target = read_wav(job.target.string());
    const Conversion c = convert(model, source, target, a.vocode, a.gl_iters);
    write_npy(fs::path(a.out) / (job.name + ".npy"), c.mel.values);
    if (c.waveform) write_wav((fs::path(a.out) / (job.name + ".wav")).string(), *c.waveform);
    if (!job.reference.empty()) {
      const auto& mc = model.config();
      const auto ref = dsp::mel_spectrogram(read_wav(job.reference.string()), mc.stft, mc.mel).values;
      const auto tgt = dsp::mel_spectrogram(target, mc.stft, mc.mel).values;
      scores[i] = eval::objective_proxies(c.mel.values, ref, tgt, model);
    }
  });
  std::string objective = "name\tmel_mse\tspeaker_cosine\n";
  bool any = false;
  for (std::size_t i = 0; i < jobs.size(); ++i)
    if (scores[i]) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "\t%.10g\t%.10g\n", scores[i]->mel_mse, scores[i]->speaker_cosine);
      objective += jobs[i].name + buf;
      any = true;
    }
  if (any) write_text(fs::path(a.out) / "objective.tsv", objective);
  write_resolved_config(a.out, "convert",
                        {{"checkpoint", a.checkpoint},
                         {"pairs", a.pairs},
                         {"source", a.source},
                         {"target", a.target},
                         {"vocode", a.vocode},
                         {"griffin_lim_iters", a.gl_iters},
                         {"conversions", jobs.size()},
                         {"model", model.config().to_json()}});
  std::printf("wrote %zu conversions to %s\n", jobs.size(), a.out.c_str());
  return 0;
}

// -- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string scores;
  std::string snr_map;
  std::string edges = "0,5,10,15,20,25,30,35";
  std::string out;
  std::string mode = "auto";
  int exact_threshold = 25;
};

int cmd_eval(EvalArgs& a) {
  eval::TestMode mode = eval::TestMode::Auto;
  if (a.mode == "exact")
    mode = eval::TestMode::Exact;
  else if (a.mode == "approx")
    mode = eval::TestMode::NormalApprox;
  else if (a.mode != "auto")
    throw UsageError("--mode must be auto, exact or approx");
  const auto edges = parse_edges(a.edges);
  const auto records = eval::load_scores(a.scores);
  if (records.empty()) throw std::invalid_argument("scores file has no records");
  const eval::SnrMap snr = a.snr_map.empty() ? eval::snr_map_from_scores(records) : eval::load_snr_map(a.snr_map);

  const fs::path out = a.out;
  fs::create_directories(out);
  write_text(out / "mushra_summary.tsv", eval::format_summary(eval::mushra_summary(records)));
  write_text(out / "wilcoxon_pairwise.tsv",
             eval::format_pairwise(eval::pairwise_wilcoxon(records, mode, a.exact_threshold)));
  write_text(out / "snr_buckets.tsv", eval::format_buckets(eval::snr_bucket_report(records, snr, edges)));
  write_resolved_config(out, "eval",
                        {{"scores", a.scores},
                         {"snr_map", a.snr_map},
                         {"edges", edges},
                         {"mode", a.mode},
                         {"exact_threshold", a.exact_threshold},
                         {"records", records.size()}});
  std::printf("wrote mushra_summary.tsv, wilcoxon_pairwise.tsv and snr_buckets.tsv to %s\n", a.out.c_str());
  return 0;
}

// -- gradcheck --------------------------------------------------------------

struct GradArgs {
  double eps = 1e-4;
  std::uint64_t seed = 0;
  std::size_t max_scalars = 10000;
  double tolerance = 1e-4;
  bool layers_only = false;
  std::string out;
  CLI::Option* seed_opt = nullptr;
};

int cmd_gradcheck(GradArgs& a) {
  if (!(a.eps >= 1e-6 && a.eps <= 1e-3)) throw UsageError("--eps must lie in [1e-6, 1e-3]");
  grad::GradCheckConfig cfg;
  cfg.step = a.eps;
  cfg.seed = resolve_seed(a.seed_opt, a.seed, 0);
  cfg.max_scalars = a.max_scalars;
  const auto cases = run_gradcheck_suite(cfg, !a.layers_only);
  std::string report = "case\tchecked\ttotal\trefined\tmax_relative_error\tworst_parameter\n";
  const GradCheckCase* failed = nullptr;
  for (const auto& c : cases) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "\t%zu\t%zu\t%zu\t%.6g\t", c.report.checked, c.report.total_scalars,
                  c.report.refined, c.report.max_relative_error);
    report += c.name + buf + c.report.worst.path + "\n";
    if (!failed && !(c.report.max_relative_error < a.tolerance)) failed = &c;
  }
  std::fputs(report.c_str(), stdout);
  if (!a.out.empty()) {
    write_text(fs::path(a.out) / "gradcheck.tsv", report);
    write_resolved_config(a.out, "gradcheck",
                          {{"eps", a.eps},
                           {"seed", cfg.seed},
                           {"max_scalars", a.max_scalars},
                           {"tolerance", a.tolerance},
                           {"layers_only", a.layers_only}});
  }
  if (failed) {
    std::fprintf(stderr, "gradient check failed: case %s, parameter %s[%lld,%lld], relative error %.6g\n",
                 failed->name.c_str(), failed->report.worst.path.c_str(),
                 static_cast<long long>(failed->report.worst.row), static_cast<long long>(failed->report.worst.col),
                 failed->report.max_relative_error);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-robust zero-shot voice conversion toolkit"};
  app.set_version_flag("--version", std::string("voicy ") + kVersion);
  app.require_subcommand(1);

  ToyArgs toy;
  auto* toy_cmd = app.add_subcommand("toy-corpus", "Synthesize the toy corpus (clean condition)");
  toy_cmd->add_option("--out", toy.out, "Output directory")->required();
  toy_cmd->add_option("--speakers", toy.spec.n_speakers, "Number of speakers")->capture_default_str();
  toy_cmd->add_option("--utts", toy.spec.utterances_per_speaker, "Utterances per speaker")->capture_default_str();
  toy_cmd->add_option("--inventory-size", toy.spec.inventory_size, "Phonemes (excluding silence)")
      ->capture_default_str();
  toy_cmd->add_option("--min-segments", toy.spec.min_segments)->capture_default_str();
  toy_cmd->add_option("--max-segments", toy.spec.max_segments)->capture_default_str();
  toy_cmd->add_option("--min-segment-s", toy.spec.min_segment_s)->capture_default_str();
  toy_cmd->add_option("--max-segment-s", toy.spec.max_segment_s)->capture_default_str();
  toy.seed_opt = toy_cmd->add_option("--seed", toy.seed, "Seed (default: $VOICY_SEED, else 7)");
  toy_cmd->add_option("--threads", toy.threads)->capture_default_str()->check(CLI::PositiveNumber);

  BuildArgs build;
  auto* build_cmd = app.add_subcommand("build-dataset", "Add reverberant and noisy reverberant siblings");
  build_cmd->add_option("--manifest", build.manifest, "Clean manifest")->required()->check(CLI::ExistingFile);
  build_cmd->add_option("--out", build.out, "Output directory")->required();
  build_cmd->add_option("--t60-min", build.sampler.t60_min)->capture_default_str();
  build_cmd->add_option("--t60-max", build.sampler.t60_max)->capture_default_str();
  build_cmd->add_option("--noisy-t60-max", build.sampler.noisy_t60_max)->capture_default_str();
  build_cmd->add_option("--snr-min", build.sampler.snr_min)->capture_default_str();
  build_cmd->add_option("--snr-mean", build.sampler.snr_mean)->capture_default_str();
  build_cmd->add_option("--snr-max", build.sampler.snr_max)->capture_default_str();
  build_cmd->add_option("--max-order", build.sampler.max_order)->capture_default_str();
  build_cmd->add_option("--noise", build.sampler.noise_paths, "External noise WAVs (default: synthetic babble)");
  build.seed_opt = build_cmd->add_option("--seed", build.seed, "Seed (default: $VOICY_SEED, else 0)");
  build_cmd->add_option("--threads", build.threads)->capture_default_str()->check(CLI::PositiveNumber);

  FeatureArgs feat;
  auto* feat_cmd = app.add_subcommand("features", "Extract log-mel features to .npy");
  feat_cmd->add_option("--manifest", feat.manifest, "Manifest whose audio to process")->check(CLI::ExistingFile);
  feat_cmd->add_option("--wav", feat.wavs, "Individual WAV files")->check(CLI::ExistingFile);
  feat_cmd->add_option("--out", feat.out, "Output directory")->required();
  feat_cmd->add_option("--threads", feat.threads)->capture_default_str()->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the model with the denoising objective");
  train_cmd->add_option("--manifest", tr.manifest, "Manifest from build-dataset")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  tr.opts["--config"] = train_cmd->add_option("--config", tr.config, "JSON with optional model/training sections")
                            ->check(CLI::ExistingFile);
  train_cmd->add_option("--resume", tr.resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--inventory", tr.inventory, "Phoneme inventory file")->check(CLI::ExistingFile);
  tr.opts["--steps"] = train_cmd->add_option("--steps", tr.steps, "Total optimizer steps")->capture_default_str();
  tr.opts["--batch-size"] = train_cmd->add_option("--batch-size", tr.batch_size)->capture_default_str();
  tr.opts["--lr"] = train_cmd->add_option("--lr", tr.lr, "Base learning rate")->capture_default_str();
  tr.opts["--beta"] = train_cmd->add_option("--beta", tr.beta, "Phonetic loss weight")->capture_default_str();
  tr.opts["--lambda"] = train_cmd->add_option("--lambda", tr.lambda, "Content loss weight")->capture_default_str();
  tr.opts["--seed"] = train_cmd->add_option("--seed", tr.seed, "Seed (default: $VOICY_SEED, else 0)");
  tr.opts["--holdout-per-speaker"] =
      train_cmd->add_option("--holdout-per-speaker", tr.holdout, "Held-out utterance ids per speaker")
          ->capture_default_str();
  tr.opts["--decay-steps"] = train_cmd->add_option("--decay-steps", tr.decay_steps)->capture_default_str();
  tr.opts["--final-lr-fraction"] =
      train_cmd->add_option("--final-lr-fraction", tr.final_lr_fraction)->capture_default_str();
  train_cmd->add_option("--save-every", tr.save_every, "Also checkpoint every N steps")->capture_default_str();
  train_cmd->add_option("--threads", tr.threads)->capture_default_str()->check(CLI::PositiveNumber);

  ConvertArgs conv;
  auto* conv_cmd = app.add_subcommand("convert", "Convert speech toward a target speaker (no transcript)");
  conv_cmd->add_option("--checkpoint", conv.checkpoint)->required()->check(CLI::ExistingFile);
  conv_cmd->add_option("--source", conv.source, "Source WAV")->check(CLI::ExistingFile);
  conv_cmd->add_option("--target", conv.target, "Target-speaker reference WAV")->check(CLI::ExistingFile);
  conv_cmd->add_option("--pairs", conv.pairs, "Batch file: source<TAB>target[<TAB>name[<TAB>clean reference]]")
      ->check(CLI::ExistingFile);
  conv_cmd->add_option("--name", conv.name, "Output stem for a single conversion")->capture_default_str();
  conv_cmd->add_option("--out", conv.out, "Output directory")->required();
  conv_cmd->add_flag("--vocode", conv.vocode, "Also write a Griffin-Lim WAV");
  conv_cmd->add_option("--gl-iters", conv.gl_iters)->capture_default_str()->check(CLI::PositiveNumber);
  conv_cmd->add_option("--threads", conv.threads)->capture_default_str()->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Listening-test statistics");
  eval_cmd->add_option("--scores", ev.scores, "Score records (JSON lines)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--snr-map", ev.snr_map, "utterance<TAB>snr_db|clean")->check(CLI::ExistingFile);
  eval_cmd->add_option("--edges", ev.edges, "Comma-separated SNR bucket edges")->capture_default_str();
  eval_cmd->add_option("--mode", ev.mode, "auto, exact or approx")->capture_default_str();
  eval_cmd->add_option("--exact-threshold", ev.exact_threshold)->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();

  GradArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every layer kind and the full loss");
  gc_cmd->add_option("--eps", gc.eps, "Central-difference step")->capture_default_str();
  gc.seed_opt = gc_cmd->add_option("--seed", gc.seed, "Seed (default: $VOICY_SEED, else 0)");
  gc_cmd->add_option("--max-scalars", gc.max_scalars)->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.tolerance)->capture_default_str();
  gc_cmd->add_flag("--layers-only", gc.layers_only, "Skip the composite loss");
  gc_cmd->add_option("--out", gc.out, "Write gradcheck.tsv and the resolved config here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*toy_cmd) return cmd_toy_corpus(toy);
    if (*build_cmd) return cmd_build_dataset(build);
    if (*feat_cmd) return cmd_features(feat);
    if (*train_cmd) return cmd_train(tr);
    if (*conv_cmd) return cmd_convert(conv);
    if (*eval_cmd) return cmd_eval(ev);
    if (*gc_cmd) return cmd_gradcheck(gc);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
