// SPDX-License-Identifier: Apache-2.0
//
// Dataset assembly and the training loop on top of the model.
#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "voicy/checkpoint.hpp"
#include "voicy/corpus.hpp"
#include "voicy/model.hpp"

namespace voicy {

struct TrainConfig {
  int steps = 500;
  int batch_size = 8;
  grad::AdamConfig optimizer{2e-3, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
  int holdout_per_speaker = 0;  // last k utterance ids of each speaker
  // Cosine decay from the base rate to final_lr_fraction of it over
  // decay_steps (0 or 1 disables it), constant afterwards. Independent of `steps` so a run can be
  // split and resumed without changing the schedule.
  int decay_steps = 500;
  double final_lr_fraction = 0.1;

  /// Learning rate used for optimizer step `step` (1-based).
  double learning_rate_at(std::int64_t step) const;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct Utterance {
  std::string id;
  std::string speaker_id;
  corpus::Condition condition = corpus::Condition::Clean;
  Eigen::MatrixXd log_mel;
  std::vector<int> phonemes;
  std::optional<double> snr_db;
};

/// Every condition of every utterance, with clean siblings indexed by id.
struct TrainingSet {
  std::vector<Utterance> utterances;           // manifest order
  std::map<std::string, std::size_t> clean;    // id -> index of the clean record
  std::vector<std::string> train_ids;          // sorted
  std::vector<std::string> heldout_ids;        // sorted
  std::map<std::string, std::string> speaker_of;

  bool is_heldout(const std::string& id) const;
  /// Indices of records usable as training sources (training ids, any condition).
  std::vector<std::size_t> training_sources() const;
};

/// Reads audio and alignments, extracts log-mels (in parallel) and splits
/// ids into training and held-out sets. Records carrying an error field are
/// skipped.
TrainingSet load_training_set(const corpus::Manifest& manifest, const corpus::PhonemeInventory& inventory,
                              const dsp::StftConfig& stft, const dsp::MelConfig& mel,
                              int holdout_per_speaker, int threads = 1);

/// Inventory lookup order: explicit path, manifest directory, then the parent
/// of the first alignment file's directory.
corpus::PhonemeInventory find_inventory(const corpus::Manifest& manifest,
                                        const std::filesystem::path& explicit_path = {});

/// Builds the pairs for one step. The draw depends only on (seed, step), so a
/// resumed run sees the same batches as an uninterrupted one.
std::vector<UtterancePair> sample_batch(const TrainingSet& set,
                                        const std::map<std::size_t, Eigen::RowVectorXd>& speaker_cache,
                                        const TrainConfig& cfg, std::int64_t step);

/// Frozen speaker-encoder outputs for every record.
std::map<std::size_t, Eigen::RowVectorXd> speaker_embeddings(const TrainingSet& set,
                                                             const VoicyModel& model, int threads = 1);

using StepCallback = std::function<void(std::int64_t step, const LossReport&)>;

/// Runs optimizer steps until optimizer.state().step reaches cfg.steps.
void train(VoicyModel& model, grad::Adam<double>& optimizer, const TrainingSet& set,
           const TrainConfig& cfg, int threads, const StepCallback& on_step = {});

/// Mean |R - P| over the given record indices.
double mean_phonetic_gap(const VoicyModel& model, const TrainingSet& set,
                         const std::vector<std::size_t>& records, int threads = 1);

Checkpoint make_checkpoint(const VoicyModel& model, const grad::Adam<double>& optimizer,
                           const TrainConfig& cfg);
/// Restores model and optimizer; validates every parameter against the
/// embedded model config.
std::pair<VoicyModel, grad::OptimizerState<double>> restore_checkpoint(const Checkpoint& ckpt);
TrainConfig checkpoint_train_config(const Checkpoint& ckpt);

/// "step\tL\tL_recon\tL_phonetic\tL_content" rows.
std::string loss_log_header();
std::string loss_log_row(std::int64_t step, const LossReport& r);

}  // namespace voicy
