// SPDX-License-Identifier: Apache-2.0
//
// Adam with bias correction over BasicParameters.
#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "voicy/grad.hpp"

namespace voicy::grad {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct OptimizerState {
  AdamConfig config;
  std::int64_t step = 0;
  std::map<std::string, Matrix<Scalar>> first_moment;
  std::map<std::string, Matrix<Scalar>> second_moment;

  bool operator==(const OptimizerState& other) const {
    return config.learning_rate == other.config.learning_rate &&
           config.beta1 == other.config.beta1 && config.beta2 == other.config.beta2 &&
           config.epsilon == other.config.epsilon && step == other.step &&
           first_moment == other.first_moment && second_moment == other.second_moment;
  }
};

template <typename Scalar>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) { state_.config = config; }
  explicit Adam(OptimizerState<Scalar> state) : state_(std::move(state)) {}

  const OptimizerState<Scalar>& state() const { return state_; }
  OptimizerState<Scalar>& state() { return state_; }

  /// Applies one update. Throws "diverged" on any non-finite gradient, and
  /// rejects gradients for frozen or unknown parameters. Parameters are left
  /// untouched when it throws.
  void step(BasicParameters<Scalar>& params, const Gradients<Scalar>& grads) {
    for (const auto& [path, g] : grads) {
      if (!params.contains(path)) throw std::invalid_argument("adam: unknown parameter '" + path + "'");
      const auto& p = params.at(path);
      if (!p.trainable)
        throw std::invalid_argument("adam: gradient for frozen parameter '" + path + "'");
      if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
        throw std::invalid_argument("adam: gradient shape " + shape_str(g.rows(), g.cols()) +
                                    " does not match '" + path + "' " +
                                    shape_str(p.value.rows(), p.value.cols()));
      if (!g.allFinite())
        throw std::runtime_error("diverged: non-finite gradient for '" + path + "'");
    }
    const AdamConfig& c = state_.config;
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const Scalar corr1 = static_cast<Scalar>(1.0 - std::pow(c.beta1, t));
    const Scalar corr2 = static_cast<Scalar>(1.0 - std::pow(c.beta2, t));
    const Scalar b1 = static_cast<Scalar>(c.beta1), b2 = static_cast<Scalar>(c.beta2);
    const Scalar lr = static_cast<Scalar>(c.learning_rate), eps = static_cast<Scalar>(c.epsilon);
    for (const auto& [path, g] : grads) {
      auto& value = params.at(path).value;
      auto& m = state_.first_moment[path];
      auto& v = state_.second_moment[path];
      if (m.size() == 0) m = Matrix<Scalar>::Zero(g.rows(), g.cols());
      if (v.size() == 0) v = Matrix<Scalar>::Zero(g.rows(), g.cols());
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
      value.array() -= lr * (m.array() / corr1) / ((v.array() / corr2).sqrt() + eps);
    }
  }

 private:
  OptimizerState<Scalar> state_;
};

}  // namespace voicy::grad
