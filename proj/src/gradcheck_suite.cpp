// SPDX-License-Identifier: Apache-2.0
#include "voicy/gradcheck_suite.hpp"

#include <cmath>

namespace voicy {

using grad::ActivationKind;
using grad::CellKind;
using grad::Graph;
using grad::LayerSpec;
using Mat = Eigen::MatrixXd;

namespace {

/// Uniform values with magnitude in [0.05, 1.05], so relu never sits on its kink.
Mat away_from_zero(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double u = rng.uniform(-1.0, 1.0);
    m.data()[i] = (u < 0 ? -1.0 : 1.0) * (0.05 + std::abs(u));
  }
  return m;
}

GradCheckCase check(const std::string& name, const Graph& g, const std::vector<Mat>& inputs,
                    const grad::GradCheckConfig& cfg) {
  grad::Parameters params;
  grad::init_parameters(g, params, derive_seed(cfg.seed, name));
  // Non-zero biases so their gradients are exercised too.
  for (auto& [path, p] : params)
    if (p.value.rows() == 1) p.value = 0.3 * away_from_zero(1, p.value.cols(), derive_seed(cfg.seed, path));
  return {name, grad::gradient_check_graph(g, params, inputs, cfg)};
}

}  // namespace

ModelConfig gradcheck_model_config(std::uint64_t seed) {
  ModelConfig c;
  c.speaker_hidden = 6;
  c.speaker_dim = 5;
  c.content_channels = 6;
  c.content_kernel = 3;
  c.content_hidden = 4;
  c.content_dim = 3;
  c.downsample = 8;
  c.asr_channels = 6;
  c.asr_kernel = 3;
  c.asr_hidden = 4;
  c.phonetic_embedding = 5;
  c.phonetic_hidden = 6;
  c.linguistic_dim = 4;
  c.decoder_channels = 6;
  c.decoder_kernel = 3;
  c.decoder_hidden = 6;
  c.inventory_size = 5;
  c.inventory_id = "gradcheck";
  c.beta = 0.7;
  c.lambda = 1.3;
  c.seed = seed;
  c.speaker_seed = derive_seed(seed, "speaker");
  return c;
}

UtterancePair gradcheck_pair(const ModelConfig& config, int frames, std::uint64_t seed) {
  UtterancePair pair;
  pair.source = away_from_zero(frames, config.n_mels, derive_seed(seed, "source"));
  pair.clean_target = away_from_zero(frames, config.n_mels, derive_seed(seed, "target"));
  pair.speaker_ref = away_from_zero(frames, config.n_mels, derive_seed(seed, "reference"));
  Rng rng(derive_seed(seed, "phonemes"));
  for (int i = 0; i < 6; ++i) pair.phonemes.push_back(static_cast<int>(rng.index(config.inventory_size)));
  return pair;
}

grad::GradCheckReport gradient_check_loss(VoicyModel& model, const UtterancePair& pair,
                                          const grad::GradCheckConfig& cfg) {
  grad::Gradients<double> analytic;
  DetachedTargets targets;
  model.compute_loss(pair, &analytic, nullptr, &targets);
  // Stop-gradient means "constant at the current point": difference the loss
  // with the detached targets pinned.
  const std::function<double(const grad::Parameters&)> loss = [&](const grad::Parameters&) {
    return model.compute_loss(pair, nullptr, &targets).total;
  };
  return grad::gradient_check(model.parameters(), loss, analytic, cfg);
}

std::vector<GradCheckCase> run_gradcheck_suite(const grad::GradCheckConfig& cfg, bool include_model) {
  const auto x = [&](Eigen::Index rows, Eigen::Index cols, const char* tag) {
    return away_from_zero(rows, cols, derive_seed(cfg.seed, tag));
  };
  std::vector<GradCheckCase> out;
  out.push_back(check("linear", {LayerSpec::linear("linear", 6, 7)}, {x(16, 6, "a")}, cfg));
  out.push_back(check("conv1d", {LayerSpec::conv1d("conv", 6, 5, 5)}, {x(16, 6, "b")}, cfg));
  out.push_back(check("gru_cell", {LayerSpec::gru_cell("gru", 6, 5)}, {x(16, 6, "c")}, cfg));
  out.push_back(check("lstm_cell", {LayerSpec::lstm_cell("lstm", 6, 5)}, {x(16, 6, "d")}, cfg));
  out.push_back(check("bidirectional_recurrent",
                      {LayerSpec::bidirectional("bi_gru", CellKind::Gru, 6, 4),
                       LayerSpec::bidirectional("bi_lstm", CellKind::Lstm, 8, 3)},
                      {x(16, 6, "e")}, cfg));
  for (const auto& [name, act] : {std::pair{"activation_tanh", ActivationKind::Tanh},
                                 std::pair{"activation_relu", ActivationKind::Relu},
                                 std::pair{"activation_sigmoid", ActivationKind::Sigmoid}})
    out.push_back(check(name, {LayerSpec::activation_layer(act), LayerSpec::linear("post", 6, 4)},
                        {x(16, 6, name)}, cfg));
  out.push_back(check("temporal_downsample",
                      {LayerSpec::linear("pre", 6, 4), LayerSpec::temporal_downsample(3)}, {x(16, 6, "f")}, cfg));
  out.push_back(check("temporal_upsample",
                      {LayerSpec::linear("pre", 6, 4), LayerSpec::temporal_downsample(4),
                       LayerSpec::temporal_upsample(4, 16)},
                      {x(16, 6, "g")}, cfg));
  out.push_back(check("mean_pool_time", {LayerSpec::linear("pre", 6, 4), LayerSpec::mean_pool_time()},
                      {x(16, 6, "h")}, cfg));
  LayerSpec seq = LayerSpec::linear("seq", 6, 3);
  seq.inputs = {0};
  LayerSpec row = LayerSpec::linear("row", 2, 2);
  row.inputs = {1};
  out.push_back(check("concat", {seq, row, LayerSpec::concat({2, 3}), LayerSpec::gru_cell("gru", 5, 4)},
                      {x(16, 6, "i"), x(1, 2, "j")}, cfg));
  if (include_model) {
    const ModelConfig mc = gradcheck_model_config(cfg.seed);
    VoicyModel model = VoicyModel::create(mc);
    // Non-zero biases, as above.
    for (auto& [path, p] : model.parameters())
      if (p.trainable && p.value.rows() == 1)
        p.value = 0.3 * away_from_zero(1, p.value.cols(), derive_seed(cfg.seed, path));
    out.push_back({"voicy_loss", gradient_check_loss(model, gradcheck_pair(mc, 32, cfg.seed), cfg)});
  }
  return out;
}

}  // namespace voicy
