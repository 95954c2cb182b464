// SPDX-License-Identifier: Apache-2.0
#include "voicy/model.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "voicy/parallel.hpp"
#include "voicy/rng.hpp"

namespace voicy {

using grad::Graph;
using grad::LayerSpec;
using grad::Var;
using nlohmann::json;
using nlohmann::ordered_json;

void ModelConfig::validate() const {
  const auto positive = [](int v, const char* name) {
    if (v <= 0) throw std::invalid_argument(std::string("model config: ") + name + " must be positive");
  };
  positive(n_mels, "n_mels");
  positive(min_frames, "min_frames");
  positive(speaker_hidden, "speaker_hidden");
  positive(speaker_dim, "speaker_dim");
  positive(content_channels, "content_channels");
  positive(content_kernel, "content_kernel");
  positive(content_hidden, "content_hidden");
  positive(content_dim, "content_dim");
  positive(downsample, "downsample");
  positive(asr_channels, "asr_channels");
  positive(asr_kernel, "asr_kernel");
  positive(asr_hidden, "asr_hidden");
  positive(phonetic_embedding, "phonetic_embedding");
  positive(phonetic_hidden, "phonetic_hidden");
  positive(linguistic_dim, "linguistic_dim");
  positive(decoder_channels, "decoder_channels");
  positive(decoder_kernel, "decoder_kernel");
  positive(decoder_hidden, "decoder_hidden");
  positive(inventory_size, "inventory_size");
  if (!(beta >= 0.0) || !(lambda >= 0.0))
    throw std::invalid_argument("model config: beta and lambda must be >= 0");
  if (n_mels != mel.n_mels) throw std::invalid_argument("model config: n_mels differs from mel config");
  if (feature_mean.size() != feature_scale.size() ||
      (!feature_mean.empty() && feature_mean.size() != static_cast<std::size_t>(n_mels)))
    throw std::invalid_argument("model config: standardization needs one mean and scale per mel bin");
  for (double s : feature_scale)
    if (!(s > 0.0) || !std::isfinite(s))
      throw std::invalid_argument("model config: standardization scale must be positive");
  for (double m : feature_mean)
    if (!std::isfinite(m)) throw std::invalid_argument("model config: non-finite standardization mean");
  stft.validate();
  mel.validate(sample_rate_hz);
}

ordered_json ModelConfig::to_json() const {
  ordered_json j;
  j["n_mels"] = n_mels;
  j["min_frames"] = min_frames;
  j["speaker"] = {{"hidden", speaker_hidden}, {"dim", speaker_dim}, {"seed", speaker_seed}};
  j["content"] = {{"channels", content_channels}, {"kernel", content_kernel},
                  {"hidden", content_hidden},     {"dim", content_dim},
                  {"downsample", downsample}};
  j["asr"] = {{"channels", asr_channels}, {"kernel", asr_kernel}, {"hidden", asr_hidden}};
  j["phonetic"] = {{"embedding", phonetic_embedding}, {"hidden", phonetic_hidden}};
  j["linguistic_dim"] = linguistic_dim;
  j["decoder"] = {{"channels", decoder_channels}, {"kernel", decoder_kernel}, {"hidden", decoder_hidden}};
  j["loss"] = {{"beta", beta}, {"lambda", lambda}};
  j["seed"] = seed;
  j["stft"] = {{"fft_size", stft.fft_size}, {"win_size", stft.win_size}, {"hop_size", stft.hop_size}};
  j["mel"] = {{"n_mels", mel.n_mels},
              {"f_min_hz", mel.f_min_hz},
              {"f_max_hz", mel.f_max_hz},
              {"log_floor", mel.log_floor}};
  j["sample_rate_hz"] = sample_rate_hz;
  j["inventory"] = {{"id", inventory_id}, {"size", inventory_size}};
  j["standardization"] = {{"mean", feature_mean}, {"scale", feature_scale}};
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_mels = j.at("n_mels").get<int>();
    c.min_frames = j.at("min_frames").get<int>();
    const auto& s = j.at("speaker");
    c.speaker_hidden = s.at("hidden").get<int>();
    c.speaker_dim = s.at("dim").get<int>();
    c.speaker_seed = s.at("seed").get<std::uint64_t>();
    const auto& e = j.at("content");
    c.content_channels = e.at("channels").get<int>();
    c.content_kernel = e.at("kernel").get<int>();
    c.content_hidden = e.at("hidden").get<int>();
    c.content_dim = e.at("dim").get<int>();
    c.downsample = e.at("downsample").get<int>();
    const auto& a = j.at("asr");
    c.asr_channels = a.at("channels").get<int>();
    c.asr_kernel = a.at("kernel").get<int>();
    c.asr_hidden = a.at("hidden").get<int>();
    const auto& p = j.at("phonetic");
    c.phonetic_embedding = p.at("embedding").get<int>();
    c.phonetic_hidden = p.at("hidden").get<int>();
    c.linguistic_dim = j.at("linguistic_dim").get<int>();
    const auto& d = j.at("decoder");
    c.decoder_channels = d.at("channels").get<int>();
    c.decoder_kernel = d.at("kernel").get<int>();
    c.decoder_hidden = d.at("hidden").get<int>();
    c.beta = j.at("loss").at("beta").get<double>();
    c.lambda = j.at("loss").at("lambda").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.stft.fft_size = j.at("stft").at("fft_size").get<int>();
    c.stft.win_size = j.at("stft").at("win_size").get<int>();
    c.stft.hop_size = j.at("stft").at("hop_size").get<int>();
    c.mel.n_mels = j.at("mel").at("n_mels").get<int>();
    c.mel.f_min_hz = j.at("mel").at("f_min_hz").get<double>();
    c.mel.f_max_hz = j.at("mel").at("f_max_hz").get<double>();
    c.mel.log_floor = j.at("mel").at("log_floor").get<double>();
    c.sample_rate_hz = j.at("sample_rate_hz").get<int>();
    c.inventory_id = j.at("inventory").at("id").get<std::string>();
    c.inventory_size = j.at("inventory").at("size").get<int>();
    c.feature_mean = j.at("standardization").at("mean").get<std::vector<double>>();
    c.feature_scale = j.at("standardization").at("scale").get<std::vector<double>>();
  } catch (const json::exception& ex) {
    throw std::invalid_argument(std::string("model config: ") + ex.what());
  }
  c.validate();
  return c;
}

void fit_standardization(ModelConfig& config, const std::vector<Eigen::MatrixXd>& log_mels) {
  if (log_mels.empty()) throw std::invalid_argument("standardization: no features");
  const Eigen::Index bins = log_mels.front().cols();
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(bins), sq = Eigen::ArrayXd::Zero(bins);
  double frames = 0.0;
  for (const auto& m : log_mels) {
    if (m.cols() != bins) throw std::invalid_argument("standardization: inconsistent mel count");
    sum += m.colwise().sum().transpose().array();
    frames += static_cast<double>(m.rows());
  }
  const Eigen::ArrayXd mean = sum / frames;
  for (const auto& m : log_mels)
    sq += (m.rowwise() - mean.transpose().matrix()).array().square().colwise().sum().transpose();
  const Eigen::ArrayXd sd = (sq / frames).sqrt().max(1e-3);
  config.feature_mean.assign(mean.data(), mean.data() + bins);
  config.feature_scale.assign(sd.data(), sd.data() + bins);
}

Graph speaker_graph(const ModelConfig& c) {
  return {LayerSpec::gru_cell("speaker/gru", c.n_mels, c.speaker_hidden),
          LayerSpec::mean_pool_time(),
          LayerSpec::linear("speaker/proj", c.speaker_hidden, c.speaker_dim)};
}

Graph content_graph(const ModelConfig& c) {
  return {LayerSpec::conv1d("content/conv", c.n_mels, c.content_channels, c.content_kernel),
          LayerSpec::activation_layer(grad::ActivationKind::Relu),
          LayerSpec::bidirectional("content/blstm", grad::CellKind::Lstm, c.content_channels,
                                   c.content_hidden),
          LayerSpec::temporal_downsample(c.downsample),
          LayerSpec::linear("content/proj", 2 * c.content_hidden, c.content_dim)};
}

Graph asr_graph(const ModelConfig& c) {
  return {LayerSpec::conv1d("asr/conv", c.n_mels, c.asr_channels, c.asr_kernel),
          LayerSpec::activation_layer(grad::ActivationKind::Relu),
          LayerSpec::bidirectional("asr/blstm", grad::CellKind::Lstm, c.asr_channels, c.asr_hidden),
          LayerSpec::mean_pool_time(),
          LayerSpec::linear("asr/proj", 2 * c.asr_hidden, c.linguistic_dim)};
}

Graph phonetic_graph(const ModelConfig& c) {
  return {LayerSpec::linear("phonetic/embed", c.inventory_size, c.phonetic_embedding, false),
          LayerSpec::gru_cell("phonetic/gru", c.phonetic_embedding, c.phonetic_hidden),
          LayerSpec::linear("phonetic/proj", c.phonetic_hidden, c.linguistic_dim)};
}

Graph decoder_graph(const ModelConfig& c, int n_frames) {
  // Nodes 0..2 are the content code, speaker vector and linguistic vector.
  LayerSpec up = LayerSpec::temporal_upsample(c.downsample, n_frames);
  up.inputs = {0};
  return {up,
          LayerSpec::concat({3, 1, 2}),
          LayerSpec::conv1d("decoder/conv", c.content_dim + c.speaker_dim + c.linguistic_dim,
                            c.decoder_channels, c.decoder_kernel),
          LayerSpec::activation_layer(grad::ActivationKind::Relu),
          LayerSpec::gru_cell("decoder/gru", c.decoder_channels, c.decoder_hidden),
          LayerSpec::linear("decoder/out", c.decoder_hidden, c.n_mels)};
}

namespace {

std::vector<grad::ParamShape> expected_shapes(const ModelConfig& c) {
  std::vector<grad::ParamShape> out;
  for (const Graph& g : {speaker_graph(c), content_graph(c), asr_graph(c), phonetic_graph(c),
                         decoder_graph(c, c.downsample)})
    for (const auto& layer : g)
      for (auto& s : grad::parameter_shapes(layer)) out.push_back(std::move(s));
  return out;
}

bool is_speaker_path(const std::string& path) { return path.rfind("speaker/", 0) == 0; }

}  // namespace

VoicyModel VoicyModel::create(const ModelConfig& config) {
  config.validate();
  grad::Parameters params;
  grad::init_parameters(speaker_graph(config), params, config.speaker_seed, false);
  grad::init_parameters(content_graph(config), params, config.seed);
  grad::init_parameters(asr_graph(config), params, config.seed);
  grad::init_parameters(phonetic_graph(config), params, config.seed);
  grad::init_parameters(decoder_graph(config, config.downsample), params, config.seed);
  return VoicyModel(config, std::move(params));
}

VoicyModel::VoicyModel(ModelConfig config, grad::Parameters params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const auto shapes = expected_shapes(config_);
  std::set<std::string> expected;
  for (const auto& s : shapes) {
    expected.insert(s.path);
    if (!params_.contains(s.path))
      throw std::invalid_argument("model: missing parameter '" + s.path + "'");
    const auto& p = params_.at(s.path);
    if (p.value.rows() != s.rows || p.value.cols() != s.cols)
      throw std::invalid_argument("model: parameter '" + s.path + "' has shape " +
                                  grad::shape_str(p.value.rows(), p.value.cols()) + ", expected " +
                                  grad::shape_str(s.rows, s.cols));
    if (!p.value.allFinite()) throw std::invalid_argument("model: non-finite parameter '" + s.path + "'");
    if (is_speaker_path(s.path) && p.trainable)
      throw std::invalid_argument("model: speaker encoder parameter '" + s.path + "' must be frozen");
  }
  for (const auto& [path, p] : params_)
    if (!expected.contains(path)) throw std::invalid_argument("model: unexpected parameter '" + path + "'");
}

Eigen::MatrixXd VoicyModel::standardize(const Eigen::MatrixXd& log_mel) const {
  if (log_mel.cols() != config_.n_mels)
    throw std::invalid_argument("model: expected " + std::to_string(config_.n_mels) +
                                " mel bins, got " + std::to_string(log_mel.cols()));
  if (config_.feature_mean.empty()) return log_mel;
  const Eigen::Map<const Eigen::RowVectorXd> mean(config_.feature_mean.data(), config_.n_mels);
  const Eigen::Map<const Eigen::RowVectorXd> scale(config_.feature_scale.data(), config_.n_mels);
  return ((log_mel.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

Eigen::MatrixXd VoicyModel::destandardize(const Eigen::MatrixXd& features) const {
  if (config_.feature_mean.empty()) return features;
  const Eigen::Map<const Eigen::RowVectorXd> mean(config_.feature_mean.data(), config_.n_mels);
  const Eigen::Map<const Eigen::RowVectorXd> scale(config_.feature_scale.data(), config_.n_mels);
  return ((features.array().rowwise() * scale.array()).matrix().rowwise() + mean);
}

Eigen::MatrixXd VoicyModel::one_hot(const std::vector<int>& phonemes) const {
  if (phonemes.empty()) throw std::invalid_argument("phonetic encoder: empty phoneme sequence");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(phonemes.size()),
                                            config_.inventory_size);
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    const int k = phonemes[i];
    if (k < 0 || k >= config_.inventory_size)
      throw std::invalid_argument("phonetic encoder: phoneme index " + std::to_string(k) +
                                  " is outside inventory '" + config_.inventory_id + "' of size " +
                                  std::to_string(config_.inventory_size));
    m(static_cast<Eigen::Index>(i), k) = 1.0;
  }
  return m;
}

void VoicyModel::require_frames(const Eigen::MatrixXd& m, int min, const char* what) const {
  if (m.rows() < min)
    throw std::invalid_argument(std::string(what) + ": needs at least " + std::to_string(min) +
                                " frames, got " + std::to_string(m.rows()));
}

Var VoicyModel::speaker_on(Tape& tape, Var features) const {
  return tape.l2_normalize_rows(grad::run_graph(tape, speaker_graph(config_), {features}).back());
}

Var VoicyModel::content_on(Tape& tape, Var features) const {
  return grad::run_graph(tape, content_graph(config_), {features}).back();
}

Var VoicyModel::asr_on(Tape& tape, Var features) const {
  return grad::run_graph(tape, asr_graph(config_), {features}).back();
}

Var VoicyModel::phonetic_on(Tape& tape, Var one_hot) const {
  const Var states = grad::run_graph(tape, phonetic_graph(config_), {one_hot}).back();
  return tape.select_row(states, tape.value(states).rows() - 1);
}

Var VoicyModel::decode_on(Tape& tape, Var content, Var speaker, Var linguistic, int n_frames) const {
  const auto expect = [&](Var v, Eigen::Index rows, Eigen::Index cols, const char* what) {
    const auto& m = tape.value(v);
    if (m.rows() != rows || m.cols() != cols)
      throw std::invalid_argument(std::string("decoder: ") + what + " is " +
                                  grad::shape_str(m.rows(), m.cols()) + ", expected " +
                                  grad::shape_str(rows, cols));
  };
  if (n_frames < 1) throw std::invalid_argument("decoder: n_frames must be positive");
  expect(content, (n_frames + config_.downsample - 1) / config_.downsample, config_.content_dim,
         "content code");
  expect(speaker, 1, config_.speaker_dim, "speaker embedding");
  expect(linguistic, 1, config_.linguistic_dim, "linguistic embedding");
  return grad::run_graph(tape, decoder_graph(config_, n_frames), {content, speaker, linguistic}).back();
}

Eigen::RowVectorXd VoicyModel::encode_speaker(const Eigen::MatrixXd& log_mel) const {
  require_frames(log_mel, config_.min_frames, "speaker encoder");
  Tape tape(params_);
  return tape.value(speaker_on(tape, tape.constant(standardize(log_mel))));
}

Eigen::MatrixXd VoicyModel::encode_content(const Eigen::MatrixXd& log_mel) const {
  require_frames(log_mel, config_.downsample, "content encoder");
  Tape tape(params_);
  return tape.value(content_on(tape, tape.constant(standardize(log_mel))));
}

Eigen::RowVectorXd VoicyModel::encode_asr(const Eigen::MatrixXd& log_mel) const {
  require_frames(log_mel, config_.min_frames, "acoustic encoder");
  Tape tape(params_);
  return tape.value(asr_on(tape, tape.constant(standardize(log_mel))));
}

Eigen::RowVectorXd VoicyModel::encode_phonetic(const std::vector<int>& phonemes) const {
  Tape tape(params_);
  return tape.value(phonetic_on(tape, tape.constant(one_hot(phonemes))));
}

Eigen::MatrixXd VoicyModel::decode(const Eigen::MatrixXd& content, const Eigen::RowVectorXd& speaker,
                                   const Eigen::RowVectorXd& linguistic, int n_frames) const {
  Tape tape(params_);
  const Var out = decode_on(tape, tape.constant(content), tape.constant(speaker),
                            tape.constant(linguistic), n_frames);
  return destandardize(tape.value(out));
}

LossReport VoicyModel::compute_loss(const UtterancePair& pair, grad::Gradients<double>* grads,
                                    const DetachedTargets* fixed, DetachedTargets* observed) const {
  if (pair.source.rows() != pair.clean_target.rows())
    throw std::invalid_argument("loss: source has " + std::to_string(pair.source.rows()) +
                                " frames but clean target has " +
                                std::to_string(pair.clean_target.rows()));
  require_frames(pair.source, std::max(config_.min_frames, config_.downsample), "loss: source");
  const int n = static_cast<int>(pair.source.rows());

  Tape tape(params_);
  const Var source = tape.constant(standardize(pair.source));
  const Var target = tape.constant(standardize(pair.clean_target));
  Var speaker;
  if (pair.speaker_embedding) {
    speaker = tape.constant(*pair.speaker_embedding);
  } else {
    require_frames(pair.speaker_ref, config_.min_frames, "loss: speaker reference");
    speaker = speaker_on(tape, tape.constant(standardize(pair.speaker_ref)));
  }
  const Var content = content_on(tape, source);
  const Var phonetic = phonetic_on(tape, tape.constant(one_hot(pair.phonemes)));
  const Var recon_out = decode_on(tape, content, speaker, phonetic, n);
  const Var recon = tape.mse(recon_out, target);
  const Var asr = asr_on(tape, source);
  const Var phonetic_target = fixed ? tape.constant(fixed->phonetic) : tape.stop_gradient(phonetic);
  const Var content_target = fixed ? tape.constant(fixed->content) : tape.stop_gradient(content);
  const Var phon = tape.mae(asr, phonetic_target);
  const Var cont = tape.mae(content_on(tape, recon_out), content_target);
  if (observed) {
    observed->phonetic = tape.value(phonetic_target);
    observed->content = tape.value(content_target);
  }
  const Var total =
      tape.weighted_sum({{1.0, recon}, {config_.beta, phon}, {config_.lambda, cont}});

  LossReport r;
  r.total = tape.scalar(total);
  r.recon = tape.scalar(recon);
  r.phonetic = tape.scalar(phon);
  r.content = tape.scalar(cont);
  if (grads) *grads = tape.backward(total);
  return r;
}

Eigen::MatrixXd VoicyModel::convert(const Eigen::MatrixXd& source_log_mel,
                                    const Eigen::MatrixXd& target_ref_log_mel) const {
  require_frames(source_log_mel, std::max(config_.min_frames, config_.downsample), "convert: source");
  require_frames(target_ref_log_mel, config_.min_frames, "convert: target reference");
  Tape tape(params_);
  const Var source = tape.constant(standardize(source_log_mel));
  const Var speaker = speaker_on(tape, tape.constant(standardize(target_ref_log_mel)));
  const Var out = decode_on(tape, content_on(tape, source), speaker, asr_on(tape, source),
                            static_cast<int>(source_log_mel.rows()));
  return destandardize(tape.value(out));
}

LossReport train_step(VoicyModel& model, grad::Adam<double>& optimizer,
                      const std::vector<UtterancePair>& batch, int threads) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<LossReport> reports(batch.size());
  std::vector<grad::Gradients<double>> grads(batch.size());
  parallel_for(batch.size(), threads,
               [&](std::size_t i) { reports[i] = model.compute_loss(batch[i], &grads[i]); });

  const double scale = 1.0 / static_cast<double>(batch.size());
  LossReport mean;
  grad::Gradients<double> total = std::move(grads[0]);
  mean.total = reports[0].total;
  mean.recon = reports[0].recon;
  mean.phonetic = reports[0].phonetic;
  mean.content = reports[0].content;
  for (std::size_t i = 1; i < batch.size(); ++i) {
    for (auto& [path, g] : grads[i]) total.at(path) += g;
    mean.total += reports[i].total;
    mean.recon += reports[i].recon;
    mean.phonetic += reports[i].phonetic;
    mean.content += reports[i].content;
  }
  for (auto& [path, g] : total) g *= scale;
  mean.total *= scale;
  mean.recon *= scale;
  mean.phonetic *= scale;
  mean.content *= scale;
  if (!std::isfinite(mean.total)) throw std::runtime_error("diverged: non-finite loss");
  optimizer.step(model.parameters(), total);
  return mean;
}

Conversion convert(const VoicyModel& model, const dsp::Waveform& source,
                   const dsp::Waveform& target_ref, bool vocode, int griffin_lim_iters) {
  const ModelConfig& c = model.config();
  for (const auto* w : {&source, &target_ref})
    if (w->sample_rate_hz != c.sample_rate_hz)
      throw std::invalid_argument("convert: expected " + std::to_string(c.sample_rate_hz) +
                                  " Hz audio, got " + std::to_string(w->sample_rate_hz));
  const auto src = dsp::mel_spectrogram(source, c.stft, c.mel);
  const auto ref = dsp::mel_spectrogram(target_ref, c.stft, c.mel);
  Conversion out;
  out.mel = src;
  out.mel.values = model.convert(src.values, ref.values);
  if (vocode) out.waveform = dsp::griffin_lim(out.mel, c.stft, c.mel, griffin_lim_iters);
  return out;
}

}  // namespace voicy
