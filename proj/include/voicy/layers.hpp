// SPDX-License-Identifier: Apache-2.0
//
// Declarative layer graphs over the tape: a graph is a list of LayerSpec
// nodes, each reading one or more earlier nodes (graph inputs come first).
#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "voicy/grad.hpp"
#include "voicy/rng.hpp"

namespace voicy::grad {

enum class LayerKind {
  Linear,
  Conv1d,
  GruCell,
  LstmCell,
  BidirectionalRecurrent,
  Activation,
  TemporalDownsample,
  TemporalUpsample,
  Concat,
  MeanPoolTime,
};

enum class ActivationKind { Tanh, Relu, Sigmoid };

std::string to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Linear;
  std::string name;  // parameter path prefix
  int in = 0;        // input channels (parametric layers)
  int out = 0;       // output channels; hidden size per direction for recurrent layers
  int kernel = 1;
  bool bias = true;
  ActivationKind activation = ActivationKind::Tanh;
  CellKind cell = CellKind::Gru;
  int factor = 1;
  int length = 0;           // upsample output rows; 0 means rows * factor
  std::vector<int> inputs;  // node indices; empty reads the previous node

  static LayerSpec linear(std::string name, int in, int out, bool bias = true);
  static LayerSpec conv1d(std::string name, int in, int out, int kernel);
  static LayerSpec gru_cell(std::string name, int in, int hidden);
  static LayerSpec lstm_cell(std::string name, int in, int hidden);
  static LayerSpec bidirectional(std::string name, CellKind cell, int in, int hidden);
  static LayerSpec activation_layer(ActivationKind act);
  static LayerSpec temporal_downsample(int factor);
  static LayerSpec temporal_upsample(int factor, int length = 0);
  static LayerSpec concat(std::vector<int> inputs);
  static LayerSpec mean_pool_time();
};

using Graph = std::vector<LayerSpec>;

struct ParamShape {
  std::string path;
  Eigen::Index rows;
  Eigen::Index cols;
  bool is_bias;
};

std::vector<ParamShape> parameter_shapes(const LayerSpec& layer);

/// Glorot-uniform weights in +-sqrt(6 / (rows + cols)), zero biases. Each
/// tensor draws from its own stream keyed by path, so adding a layer never
/// changes the initialization of another.
template <typename Scalar>
Matrix<Scalar> glorot_uniform(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<Scalar>(rng.uniform(-limit, limit));
  return m;
}

template <typename Scalar>
void init_parameters(const Graph& graph, BasicParameters<Scalar>& params, std::uint64_t seed,
                     bool trainable = true) {
  for (const auto& layer : graph) {
    for (const auto& shape : parameter_shapes(layer)) {
      if (shape.is_bias)
        params.add(shape.path, Matrix<Scalar>::Zero(shape.rows, shape.cols), trainable);
      else
        params.add(shape.path,
                   glorot_uniform<Scalar>(shape.rows, shape.cols, derive_seed(seed, shape.path)),
                   trainable);
    }
  }
}

/// Applies one layer to already-recorded inputs.
template <typename Scalar>
Var apply_layer(Tape<Scalar>& tape, const LayerSpec& layer, const std::vector<Var>& in) {
  const auto fail = [&](const std::string& what) {
    return std::invalid_argument("layer '" + layer.name + "' (" + to_string(layer.kind) +
                                 "): " + what);
  };
  if (in.empty()) throw fail("no input");
  const auto expect_channels = [&](Var x) {
    const auto& v = tape.value(x);
    if (layer.in > 0 && v.cols() != layer.in)
      throw fail("expected input " + shape_str(v.rows(), layer.in) + ", got " +
                 shape_str(v.rows(), v.cols()));
  };
  const auto p = [&](const std::string& suffix) { return tape.param(layer.name + "/" + suffix); };
  const auto cell = [&](CellKind kind, const std::string& prefix, Var x, bool reverse) {
    const auto q = [&](const std::string& s) { return tape.param(prefix + "/" + s); };
    if (kind == CellKind::Gru) return tape.gru(x, q("wx"), q("wh"), q("bx"), q("bh"), reverse);
    return tape.lstm(x, q("wx"), q("wh"), q("b"), reverse);
  };

  switch (layer.kind) {
    case LayerKind::Linear:
      expect_channels(in[0]);
      return tape.linear(in[0], p("w"), layer.bias ? p("b") : Var{});
    case LayerKind::Conv1d:
      expect_channels(in[0]);
      return tape.conv1d(in[0], p("w"), layer.bias ? p("b") : Var{}, layer.kernel);
    case LayerKind::GruCell:
      expect_channels(in[0]);
      return cell(CellKind::Gru, layer.name, in[0], false);
    case LayerKind::LstmCell:
      expect_channels(in[0]);
      return cell(CellKind::Lstm, layer.name, in[0], false);
    case LayerKind::BidirectionalRecurrent: {
      expect_channels(in[0]);
      Var fwd = cell(layer.cell, layer.name + "/fwd", in[0], false);
      Var bwd = cell(layer.cell, layer.name + "/bwd", in[0], true);
      return tape.concat({fwd, bwd});
    }
    case LayerKind::Activation:
      switch (layer.activation) {
        case ActivationKind::Tanh: return tape.tanh(in[0]);
        case ActivationKind::Relu: return tape.relu(in[0]);
        case ActivationKind::Sigmoid: return tape.sigmoid(in[0]);
      }
      break;
    case LayerKind::TemporalDownsample:
      return tape.downsample(in[0], layer.factor);
    case LayerKind::TemporalUpsample: {
      const Eigen::Index rows =
          layer.length > 0 ? layer.length : tape.value(in[0]).rows() * layer.factor;
      return tape.upsample(in[0], layer.factor, rows);
    }
    case LayerKind::Concat:
      return tape.concat(in);
    case LayerKind::MeanPoolTime:
      return tape.mean_pool_time(in[0]);
  }
  throw fail("unsupported layer");
}

template <typename Scalar>
struct GraphRun {
  std::unique_ptr<Tape<Scalar>> tape;
  std::vector<Var> nodes;  // graph inputs, then one node per layer

  Var output() const { return nodes.back(); }
  const Matrix<Scalar>& value() const { return tape->value(output()); }
};

/// Records `graph` on an existing tape. Returns the input vars followed by
/// one var per layer.
template <typename Scalar>
std::vector<Var> run_graph(Tape<Scalar>& tape, const Graph& graph, std::vector<Var> nodes) {
  if (nodes.empty()) throw std::invalid_argument("forward: graph needs at least one input");
  for (const auto& layer : graph) {
    std::vector<Var> in;
    if (layer.inputs.empty()) {
      in.push_back(nodes.back());
    } else {
      for (int idx : layer.inputs) {
        if (idx < 0 || idx >= static_cast<int>(nodes.size()))
          throw std::invalid_argument("layer '" + layer.name + "': input index " +
                                      std::to_string(idx) + " is not an earlier node");
        in.push_back(nodes[idx]);
      }
    }
    nodes.push_back(apply_layer(tape, layer, in));
  }
  return nodes;
}

template <typename Scalar>
GraphRun<Scalar> forward(const Graph& graph, const BasicParameters<Scalar>& params,
                         const std::vector<Matrix<Scalar>>& inputs) {
  GraphRun<Scalar> run;
  run.tape = std::make_unique<Tape<Scalar>>(params);
  std::vector<Var> in;
  for (const auto& x : inputs) in.push_back(run.tape->constant(x));
  run.nodes = run_graph(*run.tape, graph, std::move(in));
  return run;
}

/// Gradients of <loss_grad, output> with respect to every trainable
/// parameter.
template <typename Scalar>
Gradients<Scalar> backward(GraphRun<Scalar>& run, const Matrix<Scalar>& loss_grad) {
  return run.tape->backward(run.output(), loss_grad);
}

}  // namespace voicy::grad
