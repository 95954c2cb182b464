// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "voicy/gradcheck.hpp"
#include "voicy/layers.hpp"
#include "voicy/optim.hpp"

using namespace voicy;
using namespace voicy::grad;
using Mat = Eigen::MatrixXd;

namespace {

Mat random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.uniform(-1.0, 1.0);
  return m;
}

/// Values bounded away from zero, so relu never sits on its kink.
Mat away_from_zero(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Mat m = random_matrix(rows, cols, seed);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = (m.data()[i] < 0 ? -1.0 : 1.0) * (0.05 + std::abs(m.data()[i]));
  return m;
}

double check_graph(const Graph& g, const std::vector<Mat>& inputs, std::uint64_t seed) {
  Parameters params;
  init_parameters(g, params, seed);
  // Non-zero biases exercise their gradients.
  for (auto& [path, p] : params)
    if (p.value.rows() == 1) p.value = random_matrix(1, p.value.cols(), derive_seed(seed, path), 0.3);
  GradCheckConfig cfg;
  cfg.step = 1e-5;
  cfg.seed = seed;
  const auto report = gradient_check_graph(g, params, inputs, cfg);
  INFO("worst ", report.worst.path, " analytic ", report.worst.analytic, " numeric ",
       report.worst.numeric);
  CHECK(report.checked > 0);
  return report.max_relative_error;
}

}  // namespace

TEST_CASE("identity linear and centred conv are identities") {
  Parameters params;
  params.add("lin/w", Mat::Identity(4, 4));
  params.add("lin/b", Mat::Zero(1, 4));
  Mat conv_w = Mat::Zero(4, 3 * 4);
  conv_w.middleCols(4, 4) = Mat::Identity(4, 4);  // tap j = 1 is the centre of a width-3 kernel
  params.add("conv/w", conv_w);
  params.add("conv/b", Mat::Zero(1, 4));
  const Mat x = random_matrix(7, 4, 1);
  auto run = forward(Graph{LayerSpec::linear("lin", 4, 4), LayerSpec::conv1d("conv", 4, 4, 3)},
                     params, {x});
  CHECK((run.tape->value(run.nodes[1]) - x).cwiseAbs().maxCoeff() == 0.0);
  CHECK((run.value() - x).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("gru with zero parameters keeps a zero state") {
  Parameters params;
  init_parameters(Graph{LayerSpec::gru_cell("gru", 3, 5)}, params, 1);
  for (auto& [path, p] : params) p.value.setZero();
  auto run = forward(Graph{LayerSpec::gru_cell("gru", 3, 5)}, params, {random_matrix(1, 3, 2)});
  CHECK(run.value().rows() == 1);
  CHECK(run.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gru single step matches the hand-written equations") {
  Parameters params;
  const Graph g{LayerSpec::gru_cell("gru", 2, 2)};
  init_parameters(g, params, 4);
  for (auto& [path, p] : params) p.value = random_matrix(p.value.rows(), p.value.cols(), derive_seed(9, path));
  const Mat x = random_matrix(1, 2, 5);
  auto run = forward(g, params, {x});
  const Mat& wx = params.at("gru/wx").value;
  const Mat& bx = params.at("gru/bx").value;
  const Mat& bh = params.at("gru/bh").value;
  const auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int j = 0; j < 2; ++j) {
    const double gx_r = (x * wx.row(j).transpose())(0) + bx(0, j);
    const double gx_z = (x * wx.row(2 + j).transpose())(0) + bx(0, 2 + j);
    const double gx_n = (x * wx.row(4 + j).transpose())(0) + bx(0, 4 + j);
    const double r = sig(gx_r + bh(0, j));
    const double z = sig(gx_z + bh(0, 2 + j));
    const double n = std::tanh(gx_n + r * bh(0, 4 + j));
    CHECK(run.value()(0, j) == doctest::Approx((1.0 - z) * n).epsilon(1e-14));
  }
}

TEST_CASE("linear weight gradient has outer-product structure") {
  Parameters params;
  params.add("lin/w", (Mat(2, 2) << 1, 2, 3, 4).finished());
  params.add("lin/b", Mat::Zero(1, 2));
  const Mat x = (Mat(1, 2) << 5, -7).finished();
  Tape<double> tape(params);
  const Var y = tape.linear(tape.constant(x), tape.param("lin/w"), tape.param("lin/b"));
  const auto grads = tape.backward(tape.sum(y));
  // d sum(x W^T + b) / dW(i, j) = x(j); / db = 1.
  CHECK(grads.at("lin/w") == (Mat(2, 2) << 5, -7, 5, -7).finished());
  CHECK(grads.at("lin/b") == Mat::Ones(1, 2));
}

TEST_CASE("unused parameters get exact zeros; frozen ones get nothing; tapes are single use") {
  Parameters params;
  params.add("a", random_matrix(2, 2, 1));
  params.add("unused", random_matrix(2, 2, 2));
  params.add("frozen", random_matrix(2, 2, 3), false);
  Tape<double> tape(params);
  const Var y = tape.add(tape.param("a"), tape.param("frozen"));
  const auto grads = tape.backward(tape.sum_squares(y));
  CHECK(grads.count("frozen") == 0);
  REQUIRE(grads.count("unused") == 1);
  CHECK(grads.at("unused").cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS(tape.backward(tape.sum_squares(y)));
}

TEST_CASE("shape errors name the layer") {
  Parameters params;
  const Graph g{LayerSpec::linear("first", 3, 4), LayerSpec::linear("second", 5, 2)};
  init_parameters(g, params, 1);
  CHECK_THROWS_WITH(forward(g, params, {random_matrix(2, 3, 1)}), doctest::Contains("second"));
}

TEST_CASE("backward is linear in the loss") {
  const Graph g{LayerSpec::conv1d("c", 3, 4, 3), LayerSpec::activation_layer(ActivationKind::Tanh),
                LayerSpec::bidirectional("rnn", CellKind::Gru, 4, 3)};
  Parameters params;
  init_parameters(g, params, 2);
  const Mat x = random_matrix(6, 3, 3);
  auto r1 = forward(g, params, {x});
  const Mat c1 = random_matrix(6, 6, 4), c2 = random_matrix(6, 6, 5);
  const auto g1 = backward(r1, c1);
  auto r2 = forward(g, params, {x});
  const auto g2 = backward(r2, c2);
  auto r3 = forward(g, params, {x});
  const auto g3 = backward(r3, Mat(0.5 * c1 - 2.0 * c2));
  for (const auto& [path, v] : g3)
    CHECK((v - (0.5 * g1.at(path) - 2.0 * g2.at(path))).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("gradient check: linear + tanh stack") {
  const Graph g{LayerSpec::linear("l1", 6, 8), LayerSpec::activation_layer(ActivationKind::Tanh),
                LayerSpec::linear("l2", 8, 3)};
  CHECK(check_graph(g, {random_matrix(5, 6, 1)}, 1) < 1e-6);
}

TEST_CASE("gradient check: relu away from the kink") {
  // A single linear layer feeding relu keeps pre-activations away from zero
  // only if they are checked; use relu directly on bounded-away inputs.
  const Graph g{LayerSpec::activation_layer(ActivationKind::Relu), LayerSpec::linear("l", 4, 3)};
  CHECK(check_graph(g, {away_from_zero(6, 4, 2)}, 2) < 1e-5);
}

TEST_CASE("gradient check: bidirectional recurrent layers over 8 steps") {
  CHECK(check_graph({LayerSpec::bidirectional("bi", CellKind::Gru, 4, 5)}, {random_matrix(8, 4, 3)}, 3) <
        1e-4);
  CHECK(check_graph({LayerSpec::bidirectional("bi", CellKind::Lstm, 4, 5)}, {random_matrix(8, 4, 4)}, 4) <
        1e-4);
}

TEST_CASE("gradient check: every layer kind") {
  const Mat x = random_matrix(16, 6, 5);
  CHECK(check_graph({LayerSpec::linear("l", 6, 7)}, {x}, 10) < 1e-4);
  CHECK(check_graph({LayerSpec::conv1d("c", 6, 5, 5)}, {x}, 11) < 1e-4);
  CHECK(check_graph({LayerSpec::gru_cell("g", 6, 5)}, {x}, 12) < 1e-4);
  CHECK(check_graph({LayerSpec::lstm_cell("l", 6, 5)}, {x}, 13) < 1e-4);
  CHECK(check_graph({LayerSpec::linear("l", 6, 4), LayerSpec::activation_layer(ActivationKind::Sigmoid)},
                    {x}, 14) < 1e-4);
  CHECK(check_graph({LayerSpec::linear("l", 6, 4), LayerSpec::temporal_downsample(3)}, {x}, 15) < 1e-4);
  CHECK(check_graph({LayerSpec::linear("l", 6, 4), LayerSpec::temporal_downsample(4),
                     LayerSpec::temporal_upsample(4, 16)},
                    {x}, 16) < 1e-4);
  CHECK(check_graph({LayerSpec::linear("l", 6, 4), LayerSpec::mean_pool_time()}, {x}, 17) < 1e-4);
  // Two-input graph: node 0 is the sequence, node 1 a broadcast row.
  LayerSpec seq = LayerSpec::linear("seq", 6, 3);
  seq.inputs = {0};
  LayerSpec row = LayerSpec::linear("row", 2, 2);
  row.inputs = {1};
  CHECK(check_graph({seq, row, LayerSpec::concat({2, 3}), LayerSpec::gru_cell("g", 5, 4)},
                    {x, random_matrix(1, 2, 6)}, 18) < 1e-4);
}

TEST_CASE("gradient check: 64 units over 16 steps, subsampled") {
  const Graph g{LayerSpec::bidirectional("bi", CellKind::Lstm, 64, 64), LayerSpec::linear("out", 128, 8)};
  Parameters params;
  init_parameters(g, params, 7);
  GradCheckConfig cfg;
  cfg.step = 1e-5;
  cfg.max_scalars = 400;
  const auto report = gradient_check_graph(g, params, {random_matrix(16, 64, 8)}, cfg);
  CHECK(report.total_scalars > 400);
  CHECK(report.checked == 400);
  CHECK(report.max_relative_error < 1e-4);
}

TEST_CASE("adam: first step, zero gradient, freezing and divergence") {
  Parameters params;
  params.add("w", Mat::Constant(1, 1, 0.5));
  params.add("frozen", Mat::Constant(1, 1, 2.0), false);
  Adam<double> opt;
  opt.step(params, {{"w", Mat::Constant(1, 1, 1.0)}});
  // m_hat = v_hat = 1, so the step is lr / (1 + eps).
  CHECK(params.at("w").value(0, 0) == doctest::Approx(0.5 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(std::abs(0.5 - params.at("w").value(0, 0) - 1e-3) < 1e-10);
  CHECK(opt.state().step == 1);

  Parameters fresh;
  fresh.add("w", Mat::Constant(2, 2, 0.25));
  Adam<double> opt2;
  opt2.step(fresh, {{"w", Mat::Zero(2, 2)}});
  CHECK(fresh.at("w").value == Mat::Constant(2, 2, 0.25));

  CHECK_THROWS(opt.step(params, {{"frozen", Mat::Constant(1, 1, 1.0)}}));
  CHECK(params.at("frozen").value(0, 0) == 2.0);
  const Mat before = params.at("w").value;
  CHECK_THROWS_WITH(opt.step(params, {{"w", Mat::Constant(1, 1, std::nan(""))}}),
                    doctest::Contains("diverged"));
  CHECK(params.at("w").value == before);
  CHECK(opt.state().step == 1);
}

TEST_CASE("frozen parameters survive many optimizer steps bit-identically") {
  const Graph g{LayerSpec::linear("train", 3, 3), LayerSpec::linear("frozen", 3, 2)};
  Parameters params;
  init_parameters(g, params, 3);
  params.set_trainable("frozen", false);
  const Parameters start = params;
  Adam<double> opt;
  for (int i = 0; i < 25; ++i) {
    auto run = forward(g, params, {random_matrix(4, 3, i)});
    opt.step(params, backward(run, Mat(Mat::Ones(4, 2))));
  }
  CHECK(params.at("frozen/w").value == start.at("frozen/w").value);
  CHECK(params.at("frozen/b").value == start.at("frozen/b").value);
  CHECK(params.at("train/w").value != start.at("train/w").value);
}
