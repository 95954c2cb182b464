// SPDX-License-Identifier: Apache-2.0
//
// NumPy .npy (format 1.0) for 2-D float64 matrices in C order.
#pragma once

#include <Eigen/Dense>

#include <filesystem>

namespace voicy {

void write_npy(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_npy(const std::filesystem::path& path);

}  // namespace voicy
