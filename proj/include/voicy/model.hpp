// SPDX-License-Identifier: Apache-2.0
//
// The five Voicy modules, the composite training loss and the
// transcript-free conversion path.
//
// Module parameters live under fixed path prefixes:
//   speaker/   frozen speaker encoder (unit-norm utterance embedding)
//   content/   content encoder (temporally downsampled code)
//   phonetic/  phoneme-sequence encoder (sentence-level vector)
//   asr/       acoustic encoder trained to predict the phonetic vector
//   decoder/   mel decoder
//
// Every encoder sees per-bin standardized log-mels; the decoder emits
// standardized log-mels. The public encode/decode helpers take and return
// raw log-mel matrices (frames x mels) and handle the standardization.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "voicy/dsp.hpp"
#include "voicy/grad.hpp"
#include "voicy/layers.hpp"
#include "voicy/optim.hpp"

namespace voicy {

struct ModelConfig {
  int n_mels = 80;
  int min_frames = 8;

  int speaker_hidden = 64;
  int speaker_dim = 64;

  int content_channels = 64;
  int content_kernel = 5;
  int content_hidden = 32;  // per direction
  int content_dim = 32;
  int downsample = 16;

  int asr_channels = 64;
  int asr_kernel = 5;
  int asr_hidden = 32;  // per direction

  int phonetic_embedding = 64;
  int phonetic_hidden = 64;
  int linguistic_dim = 64;  // shared by the phonetic and acoustic vectors

  int decoder_channels = 96;
  int decoder_kernel = 5;
  int decoder_hidden = 96;

  double beta = 1.0;    // weight of the phonetic distillation term
  double lambda = 1.0;  // weight of the content consistency term

  std::uint64_t seed = 0;
  std::uint64_t speaker_seed = 20;

  dsp::StftConfig stft;
  dsp::MelConfig mel;
  int sample_rate_hz = 24000;

  std::string inventory_id = "toy-8";
  int inventory_size = 9;

  std::vector<double> feature_mean;   // empty: identity standardization
  std::vector<double> feature_scale;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Per-bin mean and standard deviation (floored at 1e-3) over all frames.
void fit_standardization(ModelConfig& config, const std::vector<Eigen::MatrixXd>& log_mels);

grad::Graph speaker_graph(const ModelConfig& c);
grad::Graph content_graph(const ModelConfig& c);
grad::Graph asr_graph(const ModelConfig& c);
grad::Graph phonetic_graph(const ModelConfig& c);  // up to the recurrent layer
grad::Graph decoder_graph(const ModelConfig& c, int n_frames);

struct UtterancePair {
  Eigen::MatrixXd source;        // raw log-mel of the (possibly degraded) input
  Eigen::MatrixXd clean_target;  // raw log-mel of the clean version
  Eigen::MatrixXd speaker_ref;   // raw log-mel of another utterance by the same speaker
  std::vector<int> phonemes;
  std::optional<Eigen::RowVectorXd> speaker_embedding;  // precomputed from speaker_ref
};

/// Values that enter the loss through stop-gradient: the phonetic vector
/// (target of the acoustic encoder) and the source content code (target of
/// the content consistency term).
struct DetachedTargets {
  Eigen::RowVectorXd phonetic;
  Eigen::MatrixXd content;
};

struct LossReport {
  double total = 0.0;
  double recon = 0.0;
  double phonetic = 0.0;
  double content = 0.0;
};

class VoicyModel {
 public:
  using Tape = grad::Tape<double>;

  /// Fresh model: every module initialized from its own seed stream, the
  /// speaker encoder frozen.
  static VoicyModel create(const ModelConfig& config);

  /// Validates that `params` holds exactly the expected paths and shapes
  /// and that the speaker encoder is frozen.
  VoicyModel(ModelConfig config, grad::Parameters params);

  const ModelConfig& config() const { return config_; }
  const grad::Parameters& parameters() const { return params_; }
  grad::Parameters& parameters() { return params_; }

  Eigen::MatrixXd standardize(const Eigen::MatrixXd& log_mel) const;
  Eigen::MatrixXd destandardize(const Eigen::MatrixXd& features) const;
  Eigen::MatrixXd one_hot(const std::vector<int>& phonemes) const;

  // Tape builders over standardized features.
  grad::Var speaker_on(Tape& tape, grad::Var features) const;
  grad::Var content_on(Tape& tape, grad::Var features) const;
  grad::Var asr_on(Tape& tape, grad::Var features) const;
  grad::Var phonetic_on(Tape& tape, grad::Var one_hot) const;
  grad::Var decode_on(Tape& tape, grad::Var content, grad::Var speaker, grad::Var linguistic,
                      int n_frames) const;

  Eigen::RowVectorXd encode_speaker(const Eigen::MatrixXd& log_mel) const;
  Eigen::MatrixXd encode_content(const Eigen::MatrixXd& log_mel) const;
  Eigen::RowVectorXd encode_asr(const Eigen::MatrixXd& log_mel) const;
  Eigen::RowVectorXd encode_phonetic(const std::vector<int>& phonemes) const;
  /// Returns a raw log-mel with exactly n_frames rows.
  Eigen::MatrixXd decode(const Eigen::MatrixXd& content, const Eigen::RowVectorXd& speaker,
                         const Eigen::RowVectorXd& linguistic, int n_frames) const;

  /// Loss of one pair; fills `grads` (trainable parameters only) when given.
  /// `fixed` replaces the detached targets with given values, which makes
  /// the loss a plain function of the parameters for finite differencing;
  /// `observed` receives the targets actually used.
  LossReport compute_loss(const UtterancePair& pair, grad::Gradients<double>* grads = nullptr,
                          const DetachedTargets* fixed = nullptr, DetachedTargets* observed = nullptr) const;

  /// Source log-mel converted toward the voice of the reference log-mel.
  Eigen::MatrixXd convert(const Eigen::MatrixXd& source_log_mel,
                          const Eigen::MatrixXd& target_ref_log_mel) const;

 private:
  void require_frames(const Eigen::MatrixXd& m, int min, const char* what) const;

  ModelConfig config_;
  grad::Parameters params_;
};

/// One optimizer update over the batch-mean loss. Items are evaluated on
/// separate tapes (in parallel when threads > 1) and their gradients summed
/// in index order. Throws "diverged" and leaves model and optimizer
/// untouched on a non-finite loss or gradient.
LossReport train_step(VoicyModel& model, grad::Adam<double>& optimizer,
                      const std::vector<UtterancePair>& batch, int threads = 1);

struct Conversion {
  dsp::MelSpectrogram mel;
  std::optional<dsp::Waveform> waveform;
};

/// Zero-shot conversion from audio. Uses the acoustic encoder in place of
/// the phonetic one; no transcript is involved.
Conversion convert(const VoicyModel& model, const dsp::Waveform& source,
                   const dsp::Waveform& target_ref, bool vocode, int griffin_lim_iters = 32);

}  // namespace voicy
