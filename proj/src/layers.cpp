// SPDX-License-Identifier: Apache-2.0
#include "voicy/layers.hpp"

namespace voicy::grad {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear: return "linear";
    case LayerKind::Conv1d: return "conv1d";
    case LayerKind::GruCell: return "gru_cell";
    case LayerKind::LstmCell: return "lstm_cell";
    case LayerKind::BidirectionalRecurrent: return "bidirectional_recurrent";
    case LayerKind::Activation: return "activation";
    case LayerKind::TemporalDownsample: return "temporal_downsample";
    case LayerKind::TemporalUpsample: return "temporal_upsample";
    case LayerKind::Concat: return "concat";
    case LayerKind::MeanPoolTime: return "mean_pool_time";
  }
  return "unknown";
}

LayerSpec LayerSpec::linear(std::string name, int in, int out, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::Linear;
  l.name = std::move(name);
  l.in = in;
  l.out = out;
  l.bias = bias;
  return l;
}

LayerSpec LayerSpec::conv1d(std::string name, int in, int out, int kernel) {
  LayerSpec l;
  l.kind = LayerKind::Conv1d;
  l.name = std::move(name);
  l.in = in;
  l.out = out;
  l.kernel = kernel;
  return l;
}

LayerSpec LayerSpec::gru_cell(std::string name, int in, int hidden) {
  LayerSpec l;
  l.kind = LayerKind::GruCell;
  l.name = std::move(name);
  l.in = in;
  l.out = hidden;
  l.cell = CellKind::Gru;
  return l;
}

LayerSpec LayerSpec::lstm_cell(std::string name, int in, int hidden) {
  LayerSpec l = gru_cell(std::move(name), in, hidden);
  l.kind = LayerKind::LstmCell;
  l.cell = CellKind::Lstm;
  return l;
}

LayerSpec LayerSpec::bidirectional(std::string name, CellKind cell, int in, int hidden) {
  LayerSpec l = gru_cell(std::move(name), in, hidden);
  l.kind = LayerKind::BidirectionalRecurrent;
  l.cell = cell;
  return l;
}

LayerSpec LayerSpec::activation_layer(ActivationKind act) {
  LayerSpec l;
  l.kind = LayerKind::Activation;
  l.name = "activation";
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::temporal_downsample(int factor) {
  LayerSpec l;
  l.kind = LayerKind::TemporalDownsample;
  l.name = "downsample";
  l.factor = factor;
  return l;
}

LayerSpec LayerSpec::temporal_upsample(int factor, int length) {
  LayerSpec l;
  l.kind = LayerKind::TemporalUpsample;
  l.name = "upsample";
  l.factor = factor;
  l.length = length;
  return l;
}

LayerSpec LayerSpec::concat(std::vector<int> inputs) {
  LayerSpec l;
  l.kind = LayerKind::Concat;
  l.name = "concat";
  l.inputs = std::move(inputs);
  return l;
}

LayerSpec LayerSpec::mean_pool_time() {
  LayerSpec l;
  l.kind = LayerKind::MeanPoolTime;
  l.name = "mean_pool_time";
  return l;
}

namespace {

void cell_shapes(std::vector<ParamShape>& out, const std::string& prefix, CellKind cell, int in,
                 int hidden) {
  const int gates = cell == CellKind::Gru ? 3 : 4;
  out.push_back({prefix + "/wx", gates * hidden, in, false});
  out.push_back({prefix + "/wh", gates * hidden, hidden, false});
  if (cell == CellKind::Gru) {
    out.push_back({prefix + "/bx", 1, gates * hidden, true});
    out.push_back({prefix + "/bh", 1, gates * hidden, true});
  } else {
    out.push_back({prefix + "/b", 1, gates * hidden, true});
  }
}

}  // namespace

std::vector<ParamShape> parameter_shapes(const LayerSpec& layer) {
  std::vector<ParamShape> out;
  switch (layer.kind) {
    case LayerKind::Linear:
      out.push_back({layer.name + "/w", layer.out, layer.in, false});
      if (layer.bias) out.push_back({layer.name + "/b", 1, layer.out, true});
      break;
    case LayerKind::Conv1d:
      out.push_back({layer.name + "/w", layer.out, layer.kernel * layer.in, false});
      if (layer.bias) out.push_back({layer.name + "/b", 1, layer.out, true});
      break;
    case LayerKind::GruCell:
      cell_shapes(out, layer.name, CellKind::Gru, layer.in, layer.out);
      break;
    case LayerKind::LstmCell:
      cell_shapes(out, layer.name, CellKind::Lstm, layer.in, layer.out);
      break;
    case LayerKind::BidirectionalRecurrent:
      cell_shapes(out, layer.name + "/fwd", layer.cell, layer.in, layer.out);
      cell_shapes(out, layer.name + "/bwd", layer.cell, layer.in, layer.out);
      break;
    default:
      break;
  }
  return out;
}

}  // namespace voicy::grad
