// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checking.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "voicy/layers.hpp"
#include "voicy/rng.hpp"

namespace voicy::grad {

struct GradCheckConfig {
  double step = 1e-4;
  std::size_t max_scalars = 10000;  // beyond this, a seeded subsample is checked
  double denominator_floor = 1e-6;  // keeps near-zero pairs from inflating the ratio
  std::uint64_t seed = 0;
  // A scalar whose error exceeds refine_above is differenced again with
  // step / refine_factor and keeps the smaller error. Truncation error and
  // kinks straddled by the wider step (relu, |x|) shrink under refinement; a
  // wrong analytic gradient does not.
  double refine_above = 1e-5;
  double refine_factor = 10.0;
};

struct GradCheckEntry {
  std::string path;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  std::size_t total_scalars = 0;
  std::size_t checked = 0;
  std::size_t refined = 0;
  double max_relative_error = 0.0;
  GradCheckEntry worst;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares `analytic` against central differences of `loss`, perturbing
/// trainable scalars of `params` in place (restored afterwards).
template <typename Scalar>
GradCheckReport gradient_check(BasicParameters<Scalar>& params,
                               const std::function<double(const BasicParameters<Scalar>&)>& loss,
                               const Gradients<Scalar>& analytic, const GradCheckConfig& cfg = {}) {
  struct Slot {
    std::string path;
    Eigen::Index index;
  };
  std::vector<Slot> slots;
  for (const auto& [path, p] : params)
    if (p.trainable)
      for (Eigen::Index i = 0; i < p.value.size(); ++i) slots.push_back({path, i});

  GradCheckReport report;
  report.total_scalars = slots.size();
  if (slots.size() > cfg.max_scalars) {
    Rng rng(derive_seed(cfg.seed, "gradcheck-subsample"));
    for (std::size_t i = 0; i < cfg.max_scalars; ++i)
      std::swap(slots[i], slots[i + rng.index(slots.size() - i)]);
    slots.resize(cfg.max_scalars);
  }
  for (const auto& slot : slots) {
    auto& value = params.at(slot.path).value;
    const Eigen::Index rows = value.rows();
    Scalar& x = value.data()[slot.index];
    const Scalar saved = x;
    const auto central = [&](double h) {
      x = saved + static_cast<Scalar>(h);
      const double up = loss(params);
      x = saved - static_cast<Scalar>(h);
      const double down = loss(params);
      x = saved;
      return (up - down) / (2.0 * h);
    };
    const auto it = analytic.find(slot.path);
    const double a = it == analytic.end() ? 0.0 : static_cast<double>(it->second.data()[slot.index]);
    double numeric = central(cfg.step);
    double err = relative_error(a, numeric, cfg.denominator_floor);
    if (err > cfg.refine_above && cfg.refine_factor > 1.0) {
      const double fine = central(cfg.step / cfg.refine_factor);
      const double fine_err = relative_error(a, fine, cfg.denominator_floor);
      ++report.refined;
      if (fine_err < err) {
        numeric = fine;
        err = fine_err;
      }
    }
    ++report.checked;
    if (err >= report.max_relative_error) {
      report.max_relative_error = err;
      report.worst = {slot.path, slot.index % rows, slot.index / rows, a, numeric, err};
    }
  }
  return report;
}

/// Checks a layer graph under the scalar loss <C, y>, with C a seeded random
/// matrix of the output's shape.
template <typename Scalar>
GradCheckReport gradient_check_graph(const Graph& graph, BasicParameters<Scalar>& params,
                                     const std::vector<Matrix<Scalar>>& inputs,
                                     const GradCheckConfig& cfg = {}) {
  Matrix<Scalar> projection;
  {
    auto run = forward(graph, params, inputs);
    const auto& y = run.value();
    Rng rng(derive_seed(cfg.seed, "gradcheck-projection"));
    projection.resize(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < projection.size(); ++i)
      projection.data()[i] = static_cast<Scalar>(rng.normal());
  }
  auto run = forward(graph, params, inputs);
  const Gradients<Scalar> analytic = backward(run, projection);
  const std::function<double(const BasicParameters<Scalar>&)> loss =
      [&](const BasicParameters<Scalar>& p) {
        auto r = forward(graph, p, inputs);
        return static_cast<double>(r.value().cwiseProduct(projection).sum());
      };
  return gradient_check(params, loss, analytic, cfg);
}

}  // namespace voicy::grad
