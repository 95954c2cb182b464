// SPDX-License-Identifier: Apache-2.0
//
// Slow, obviously-correct reference implementations used only by tests.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace oracle {

/// O(N^2) DFT of a real frame, non-negative frequencies only.
inline std::vector<std::complex<double>> direct_dft(const std::vector<double>& x, int n_fft) {
  std::vector<std::complex<double>> out(n_fft / 2 + 1);
  for (int k = 0; k <= n_fft / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n) {
      const double angle = -2.0 * std::numbers::pi * k * static_cast<double>(n) / n_fft;
      acc += x[n] * std::complex<double>(std::cos(angle), std::sin(angle));
    }
    out[k] = acc;
  }
  return out;
}

inline Eigen::VectorXd direct_convolve(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(a.size() + b.size() - 1);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return out;
}

inline double power(const Eigen::VectorXd& x) { return x.squaredNorm() / static_cast<double>(x.size()); }

}  // namespace oracle
