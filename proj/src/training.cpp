// SPDX-License-Identifier: Apache-2.0
#include "voicy/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <stdexcept>

#include "voicy/parallel.hpp"
#include "voicy/rng.hpp"
#include "voicy/wav.hpp"

namespace voicy {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("train config: steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
  if (holdout_per_speaker < 0) throw std::invalid_argument("train config: holdout must be >= 0");
  if (!(optimizer.learning_rate > 0.0)) throw std::invalid_argument("train config: learning rate must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
    throw std::invalid_argument("train config: moment decays must lie in [0, 1)");
  if (!(optimizer.epsilon > 0.0)) throw std::invalid_argument("train config: epsilon must be positive");
  if (decay_steps < 0) throw std::invalid_argument("train config: decay steps must be >= 0");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0))
    throw std::invalid_argument("train config: final learning-rate fraction must lie in (0, 1]");
}

double TrainConfig::learning_rate_at(std::int64_t step) const {
  if (decay_steps <= 1) return optimizer.learning_rate;
  const double progress = std::clamp(static_cast<double>(step - 1) / (decay_steps - 1), 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return optimizer.learning_rate * (final_lr_fraction + (1.0 - final_lr_fraction) * cosine);
}

ordered_json TrainConfig::to_json() const {
  ordered_json j;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["learning_rate"] = optimizer.learning_rate;
  j["beta1"] = optimizer.beta1;
  j["beta2"] = optimizer.beta2;
  j["epsilon"] = optimizer.epsilon;
  j["seed"] = seed;
  j["holdout_per_speaker"] = holdout_per_speaker;
  j["decay_steps"] = decay_steps;
  j["final_lr_fraction"] = final_lr_fraction;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
    c.optimizer.epsilon = j.value("epsilon", c.optimizer.epsilon);
    c.seed = j.value("seed", c.seed);
    c.holdout_per_speaker = j.value("holdout_per_speaker", c.holdout_per_speaker);
    c.decay_steps = j.value("decay_steps", c.decay_steps);
    c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
  } catch (const json::exception& ex) {
    throw std::invalid_argument(std::string("train config: ") + ex.what());
  }
  c.validate();
  return c;
}

bool TrainingSet::is_heldout(const std::string& id) const {
  return std::binary_search(heldout_ids.begin(), heldout_ids.end(), id);
}

std::vector<std::size_t> TrainingSet::training_sources() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < utterances.size(); ++i)
    if (!is_heldout(utterances[i].id)) out.push_back(i);
  return out;
}

corpus::PhonemeInventory find_inventory(const corpus::Manifest& manifest,
                                        const fs::path& explicit_path) {
  if (!explicit_path.empty()) return corpus::load_inventory(explicit_path);
  std::vector<fs::path> candidates = {manifest.base_dir / "inventory.txt"};
  for (const auto& r : manifest.records) {
    if (r.alignment_path.empty()) continue;
    candidates.push_back(manifest.resolve(r.alignment_path).parent_path().parent_path() / "inventory.txt");
    break;
  }
  for (const auto& c : candidates)
    if (fs::exists(c)) return corpus::load_inventory(c);
  throw std::runtime_error("no phoneme inventory found next to the manifest; pass --inventory");
}

TrainingSet load_training_set(const corpus::Manifest& manifest, const corpus::PhonemeInventory& inventory,
                              const dsp::StftConfig& stft, const dsp::MelConfig& mel,
                              int holdout_per_speaker, int threads) {
  TrainingSet set;
  for (const auto& r : manifest.records) {
    if (r.error) continue;
    Utterance u;
    u.id = r.id;
    u.speaker_id = r.speaker_id;
    u.condition = r.condition;
    u.snr_db = r.snr_db;
    set.utterances.push_back(std::move(u));
  }
  if (set.utterances.empty()) throw std::invalid_argument("training set: manifest has no usable records");

  std::vector<const corpus::ManifestRecord*> sources;
  for (const auto& r : manifest.records)
    if (!r.error) sources.push_back(&r);
  parallel_for(sources.size(), threads, [&](std::size_t i) {
    const auto& r = *sources[i];
    auto& u = set.utterances[i];
    u.log_mel = dsp::mel_spectrogram(read_wav(manifest.resolve(r.audio_path).string()), stft, mel).values;
    u.phonemes = corpus::load_alignment(manifest.resolve(r.alignment_path), inventory).symbols;
  });

  std::map<std::string, std::set<std::string>> by_speaker;
  for (std::size_t i = 0; i < set.utterances.size(); ++i) {
    const auto& u = set.utterances[i];
    const auto [it, inserted] = set.speaker_of.emplace(u.id, u.speaker_id);
    if (!inserted && it->second != u.speaker_id)
      throw std::invalid_argument("training set: utterance '" + u.id + "' has two speakers");
    by_speaker[u.speaker_id].insert(u.id);
    if (u.condition == corpus::Condition::Clean) set.clean[u.id] = i;
  }
  for (const auto& u : set.utterances) {
    const auto it = set.clean.find(u.id);
    if (it == set.clean.end())
      throw std::invalid_argument("training set: utterance '" + u.id + "' has no clean record");
    if (set.utterances[it->second].log_mel.rows() != u.log_mel.rows())
      throw std::invalid_argument("training set: '" + u.id + "' (" + corpus::to_string(u.condition) +
                                  ") and its clean version differ in frame count");
  }
  for (const auto& [speaker, ids] : by_speaker) {
    const std::vector<std::string> sorted(ids.begin(), ids.end());
    const std::size_t keep =
        sorted.size() > static_cast<std::size_t>(holdout_per_speaker) ? sorted.size() - holdout_per_speaker : 0;
    for (std::size_t k = 0; k < sorted.size(); ++k)
      (k < keep ? set.train_ids : set.heldout_ids).push_back(sorted[k]);
  }
  std::sort(set.train_ids.begin(), set.train_ids.end());
  std::sort(set.heldout_ids.begin(), set.heldout_ids.end());
  if (set.train_ids.empty()) throw std::invalid_argument("training set: holdout leaves nothing to train on");
  return set;
}

std::map<std::size_t, Eigen::RowVectorXd> speaker_embeddings(const TrainingSet& set,
                                                             const VoicyModel& model, int threads) {
  std::vector<Eigen::RowVectorXd> out(set.utterances.size());
  parallel_for(out.size(), threads,
               [&](std::size_t i) { out[i] = model.encode_speaker(set.utterances[i].log_mel); });
  std::map<std::size_t, Eigen::RowVectorXd> cache;
  for (std::size_t i = 0; i < out.size(); ++i) cache.emplace(i, std::move(out[i]));
  return cache;
}

std::vector<UtterancePair> sample_batch(const TrainingSet& set,
                                        const std::map<std::size_t, Eigen::RowVectorXd>& speaker_cache,
                                        const TrainConfig& cfg, std::int64_t step) {
  const auto sources = set.training_sources();
  // Same-speaker, same-condition references among training records.
  std::map<std::pair<std::string, corpus::Condition>, std::vector<std::size_t>> pool;
  for (std::size_t i : sources) pool[{set.utterances[i].speaker_id, set.utterances[i].condition}].push_back(i);

  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
  std::vector<UtterancePair> batch;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const std::size_t src = sources[rng.index(sources.size())];
    const Utterance& u = set.utterances[src];
    const auto& refs = pool.at({u.speaker_id, u.condition});
    std::size_t ref = src;
    if (refs.size() >= 2) {
      std::size_t pick = rng.index(refs.size() - 1);
      if (refs[pick] == src) pick = refs.size() - 1;
      ref = refs[pick];
    }
    UtterancePair pair;
    pair.source = u.log_mel;
    pair.clean_target = set.utterances[set.clean.at(u.id)].log_mel;
    pair.speaker_ref = set.utterances[ref].log_mel;
    pair.phonemes = u.phonemes;
    if (const auto it = speaker_cache.find(ref); it != speaker_cache.end())
      pair.speaker_embedding = it->second;
    batch.push_back(std::move(pair));
  }
  return batch;
}

void train(VoicyModel& model, grad::Adam<double>& optimizer, const TrainingSet& set,
           const TrainConfig& cfg, int threads, const StepCallback& on_step) {
  cfg.validate();
  const auto cache = speaker_embeddings(set, model, threads);
  while (optimizer.state().step < cfg.steps) {
    const std::int64_t step = optimizer.state().step + 1;
    const auto batch = sample_batch(set, cache, cfg, step);
    optimizer.state().config.learning_rate = cfg.learning_rate_at(step);
    const LossReport r = train_step(model, optimizer, batch, threads);
    if (on_step) on_step(step, r);
  }
}

double mean_phonetic_gap(const VoicyModel& model, const TrainingSet& set,
                         const std::vector<std::size_t>& records, int threads) {
  if (records.empty()) throw std::invalid_argument("phonetic gap: no records");
  std::vector<double> gaps(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const auto& u = set.utterances[records[i]];
    gaps[i] = (model.encode_asr(u.log_mel) - model.encode_phonetic(u.phonemes)).cwiseAbs().mean();
  });
  double total = 0.0;
  for (double g : gaps) total += g;
  return total / static_cast<double>(gaps.size());
}

Checkpoint make_checkpoint(const VoicyModel& model, const grad::Adam<double>& optimizer,
                           const TrainConfig& cfg) {
  Checkpoint ckpt;
  ckpt.params = model.parameters();
  ckpt.optimizer = optimizer.state();
  // Step count is omitted so a resumed run and a straight run agree byte for byte.
  ordered_json train = cfg.to_json();
  train.erase("steps");
  ordered_json config;
  config["format"] = "voicy-model";
  config["model"] = model.config().to_json();
  config["training"] = train;
  ckpt.config = json::parse(config.dump());
  return ckpt;
}

std::pair<VoicyModel, grad::OptimizerState<double>> restore_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.config.contains("model"))
    throw std::runtime_error("checkpoint: embedded config has no model section");
  VoicyModel model(ModelConfig::from_json(ckpt.config.at("model")), ckpt.params);
  for (const auto& [path, m] : ckpt.optimizer.first_moment)
    if (!model.parameters().at(path).trainable)
      throw std::runtime_error("checkpoint: optimizer state for frozen parameter '" + path + "'");
  return {std::move(model), ckpt.optimizer};
}

TrainConfig checkpoint_train_config(const Checkpoint& ckpt) {
  return TrainConfig::from_json(ckpt.config.value("training", json::object()));
}

std::string loss_log_header() { return "step\tL\tL_recon\tL_phonetic\tL_content\n"; }

std::string loss_log_row(std::int64_t step, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld\t%.17g\t%.17g\t%.17g\t%.17g\n", static_cast<long long>(step),
                r.total, r.recon, r.phonetic, r.content);
  return buf;
}

}  // namespace voicy
