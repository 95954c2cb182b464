// SPDX-License-Identifier: Apache-2.0
#include "voicy/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "voicy/rng.hpp"

namespace voicy {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'V', 'O', 'I', 'C', 'Y', 'C', 'K', 'P'};
constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i)
      buf_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void matrix_shape(const Eigen::MatrixXd& m) {
    le(std::uint32_t{2});
    le(static_cast<std::uint64_t>(m.rows()));
    le(static_cast<std::uint64_t>(m.cols()));
  }
  void matrix_values(const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw std::runtime_error("checkpoint: truncated file");
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const auto n = le<std::uint32_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::pair<Eigen::Index, Eigen::Index> matrix_shape() {
    const auto rank = le<std::uint32_t>();
    if (rank != 2) throw std::runtime_error("checkpoint: unsupported tensor rank " + std::to_string(rank));
    const auto rows = le<std::uint64_t>();
    const auto cols = le<std::uint64_t>();
    if (rows > (1ULL << 32) || cols > (1ULL << 32)) throw std::runtime_error("checkpoint: implausible shape");
    need(rows * cols * 8);
    return {static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
  }
  Eigen::MatrixXd matrix_values(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = f64();
    return m;
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

fs::path checkpoint_sidecar_path(const fs::path& path) {
  fs::path p = path;
  p.replace_extension(".json");
  if (p == path) p += ".json";
  return p;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.le(kCheckpointVersion);
  w.le(static_cast<std::uint64_t>(ckpt.params.size()));
  for (const auto& [name, p] : ckpt.params) {
    w.str(name);
    w.le(kDtypeF64);
    w.le(static_cast<std::uint8_t>(p.trainable ? 1 : 0));
    w.matrix_shape(p.value);
    w.matrix_values(p.value);
  }
  const auto& opt = ckpt.optimizer;
  w.le(static_cast<std::uint64_t>(opt.step));
  w.f64(opt.config.learning_rate);
  w.f64(opt.config.beta1);
  w.f64(opt.config.beta2);
  w.f64(opt.config.epsilon);
  w.le(static_cast<std::uint64_t>(opt.first_moment.size()));
  for (const auto& [name, m] : opt.first_moment) {
    const auto it = opt.second_moment.find(name);
    if (it == opt.second_moment.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw std::invalid_argument("checkpoint: inconsistent optimizer moments for '" + name + "'");
    w.str(name);
    w.matrix_shape(m);
    w.matrix_values(m);
    w.matrix_values(it->second);
  }
  const std::string config = ckpt.config.dump();
  w.le(static_cast<std::uint64_t>(config.size()));
  w.bytes(config.data(), config.size());
  w.le(fnv1a64(w.buffer()));

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
  }

  nlohmann::ordered_json side;
  side["format"] = "voicy-checkpoint";
  side["version"] = kCheckpointVersion;
  side["step"] = opt.step;
  side["optimizer"] = {{"learning_rate", opt.config.learning_rate},
                       {"beta1", opt.config.beta1},
                       {"beta2", opt.config.beta2},
                       {"epsilon", opt.config.epsilon}};
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  for (const auto& [name, p] : ckpt.params)
    params.push_back({{"path", name},
                      {"dtype", "f64"},
                      {"shape", {p.value.rows(), p.value.cols()}},
                      {"trainable", p.trainable}});
  side["parameters"] = params;
  side["config"] = ckpt.config;
  std::ofstream out(checkpoint_sidecar_path(path), std::ios::trunc);
  out << side.dump(2) << "\n";
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + 4 + 8 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: " + path.string() + " is not a checkpoint (bad magic)");
  const std::size_t body = buf.size() - 8;
  Reader digest_reader(buf, buf.size());
  {
    std::string tail = buf.substr(body);
    Reader t(tail, 8);
    if (t.le<std::uint64_t>() != fnv1a64(std::string_view(buf.data(), body)))
      throw std::runtime_error("checkpoint: checksum mismatch in " + path.string());
  }
  Reader r(buf, body);
  char magic[8];
  r.raw(magic, sizeof(magic));
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ckpt;
  const auto n_params = r.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const std::string name = r.str();
    const auto dtype = r.le<std::uint8_t>();
    if (dtype != kDtypeF64) throw std::runtime_error("checkpoint: unsupported dtype for '" + name + "'");
    const bool trainable = r.le<std::uint8_t>() != 0;
    const auto [rows, cols] = r.matrix_shape();
    Eigen::MatrixXd value = r.matrix_values(rows, cols);
    if (!value.allFinite()) throw std::runtime_error("checkpoint: non-finite values in '" + name + "'");
    if (ckpt.params.contains(name)) throw std::runtime_error("checkpoint: duplicate parameter '" + name + "'");
    ckpt.params.add(name, std::move(value), trainable);
  }
  auto& opt = ckpt.optimizer;
  opt.step = static_cast<std::int64_t>(r.le<std::uint64_t>());
  opt.config.learning_rate = r.f64();
  opt.config.beta1 = r.f64();
  opt.config.beta2 = r.f64();
  opt.config.epsilon = r.f64();
  const auto n_moments = r.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_moments; ++i) {
    const std::string name = r.str();
    const auto [rows, cols] = r.matrix_shape();
    if (!ckpt.params.contains(name))
      throw std::runtime_error("checkpoint: optimizer state for unknown parameter '" + name + "'");
    const auto& p = ckpt.params.at(name).value;
    if (p.rows() != rows || p.cols() != cols)
      throw std::runtime_error("checkpoint: optimizer state shape mismatch for '" + name + "'");
    opt.first_moment[name] = r.matrix_values(rows, cols);
    r.need(static_cast<std::size_t>(rows * cols * 8));
    opt.second_moment[name] = r.matrix_values(rows, cols);
  }
  const auto config_len = r.le<std::uint64_t>();
  r.need(config_len);
  std::string config(config_len, '\0');
  r.raw(config.data(), config_len);
  if (r.pos() != body) throw std::runtime_error("checkpoint: trailing bytes before digest");
  try {
    ckpt.config = nlohmann::json::parse(config);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("checkpoint: invalid embedded config: ") + e.what());
  }
  return ckpt;
}

}  // namespace voicy
