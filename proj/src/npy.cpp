// SPDX-License-Identifier: Apache-2.0
#include "voicy/npy.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <regex>
#include <stdexcept>
#include <string>
#include <vector>

namespace voicy {

static_assert(std::endian::native == std::endian::little, "npy I/O assumes a little-endian host");

namespace {
constexpr char kMagic[] = "\x93NUMPY";
}

void write_npy(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(m.rows()) +
                       ", " + std::to_string(m.cols()) + "), }";
  // Magic (6) + version (2) + length (2) + header must be a multiple of 64.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, 6);
  out.put('\x01');
  out.put('\x00');
  const auto len = static_cast<std::uint16_t>(header.size());
  out.put(static_cast<char>(len & 0xff));
  out.put(static_cast<char>(len >> 8));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Eigen::MatrixXd read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 6) != 0) throw std::runtime_error(path.string() + ": not an .npy file");
  std::size_t header_len = 0;
  if (magic[6] == 1) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    header_len = b[0] | (b[1] << 8);
  } else if (magic[6] == 2 || magic[6] == 3) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    header_len = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::size_t>(b[3]) << 24);
  } else {
    throw std::runtime_error(path.string() + ": unsupported .npy version");
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error(path.string() + ": truncated header");
  if (header.find("'<f8'") == std::string::npos)
    throw std::runtime_error(path.string() + ": only little-endian float64 is supported");
  const bool fortran = header.find("'fortran_order': True") != std::string::npos;
  std::smatch match;
  const std::regex shape_re(R"('shape':\s*\((\d+),\s*(\d+)\))");
  if (!std::regex_search(header, match, shape_re))
    throw std::runtime_error(path.string() + ": only 2-D arrays are supported");
  const Eigen::Index rows = std::stol(match[1]);
  const Eigen::Index cols = std::stol(match[2]);
  std::vector<double> data(static_cast<std::size_t>(rows * cols));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw std::runtime_error(path.string() + ": truncated data");
  if (fortran) return Eigen::Map<const Eigen::MatrixXd>(data.data(), rows, cols);
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(data.data(), rows,
                                                                                                  cols);
}

}  // namespace voicy
