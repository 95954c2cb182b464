// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// Every value on a tape is a 2-D matrix laid out as time x channels (a
// single vector is a 1 x C row). The op set is closed: exactly what the
// encoders and decoder need, with hand-written backward rules. Recurrent
// layers are fused sequence ops with explicit backpropagation through time.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace voicy::grad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
}

template <typename Scalar>
struct Parameter {
  Matrix<Scalar> value;
  bool trainable = true;
};

/// Named parameter store, ordered by path so iteration is deterministic.
template <typename Scalar>
class BasicParameters {
 public:
  using Map = std::map<std::string, Parameter<Scalar>>;

  void add(const std::string& path, Matrix<Scalar> value, bool trainable = true) {
    if (!value.allFinite()) throw std::invalid_argument("parameter " + path + " is not finite");
    if (!entries_.emplace(path, Parameter<Scalar>{std::move(value), trainable}).second)
      throw std::invalid_argument("duplicate parameter " + path);
  }
  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const Parameter<Scalar>& at(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter " + path);
    return it->second;
  }
  Parameter<Scalar>& at(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter " + path);
    return it->second;
  }
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [path, p] : entries_)
      if (path.rfind(prefix, 0) == 0) p.trainable = trainable;
  }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [path, p] : entries_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }
  typename Map::const_iterator begin() const { return entries_.begin(); }
  typename Map::const_iterator end() const { return entries_.end(); }
  typename Map::iterator begin() { return entries_.begin(); }
  typename Map::iterator end() { return entries_.end(); }

  bool operator==(const BasicParameters& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (auto a = entries_.begin(), b = other.entries_.begin(); a != entries_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.trainable != b->second.trainable) return false;
      if (a->second.value.rows() != b->second.value.rows() ||
          a->second.value.cols() != b->second.value.cols())
        return false;
      if (a->second.value != b->second.value) return false;
    }
    return true;
  }

 private:
  Map entries_;
};

template <typename Scalar>
using Gradients = std::map<std::string, Matrix<Scalar>>;

using Parameters = BasicParameters<double>;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class CellKind { Gru, Lstm };

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Vec = ColVector<Scalar>;

  explicit Tape(const BasicParameters<Scalar>& params) : params_(&params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Mat& value(Var v) const { return node(v).value; }
  Scalar scalar(Var v) const {
    const Mat& m = value(v);
    if (m.size() != 1) throw std::logic_error("tape: value is not a scalar");
    return m(0, 0);
  }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Mat value) {
    if (!value.allFinite()) throw std::invalid_argument("tape: non-finite constant");
    return push(std::move(value), false, {});
  }

  /// Leaf for a stored parameter; repeated requests return the same node.
  Var param(const std::string& path) {
    auto it = param_nodes_.find(path);
    if (it != param_nodes_.end()) return it->second;
    const auto& p = params_->at(path);
    Var v = push(p.value, p.trainable, {});
    param_nodes_.emplace(path, v);
    return v;
  }

  Var stop_gradient(Var x) { return push(value(x), false, {}); }

  // -- elementwise -------------------------------------------------------

  Var add(Var a, Var b) {
    require_same(a, b, "add");
    Var y = push(value(a) + value(b), any_grad({a, b}), {});
    set_backward(y, [this, a, b, y] {
      accumulate(a, grad_of(y));
      accumulate(b, grad_of(y));
    });
    return y;
  }

  /// a * x + b, elementwise.
  Var affine(Var x, Scalar a, Scalar b) {
    Var y = push((value(x).array() * a + b).matrix(), any_grad({x}), {});
    set_backward(y, [this, x, y, a] { accumulate(x, grad_of(y) * a); });
    return y;
  }

  Var tanh(Var x) {
    Var y = push(value(x).array().tanh().matrix(), any_grad({x}), {});
    set_backward(y, [this, x, y] {
      const auto& out = value(y).array();
      accumulate(x, (grad_of(y).array() * (Scalar(1) - out * out)).matrix());
    });
    return y;
  }

  Var sigmoid(Var x) {
    Var y = push(sigmoid_of(value(x)), any_grad({x}), {});
    set_backward(y, [this, x, y] {
      const auto& out = value(y).array();
      accumulate(x, (grad_of(y).array() * out * (Scalar(1) - out)).matrix());
    });
    return y;
  }

  Var relu(Var x) {
    Var y = push(value(x).cwiseMax(Scalar(0)), any_grad({x}), {});
    set_backward(y, [this, x, y] {
      accumulate(x, (grad_of(y).array() * (value(x).array() > Scalar(0)).template cast<Scalar>())
                        .matrix());
    });
    return y;
  }

  // -- dense layers -------------------------------------------------------

  /// y = x W^T + b; x: T x in, W: out x in, b: 1 x out (optional).
  Var linear(Var x, Var w, Var b = {}) {
    const Mat& X = value(x);
    const Mat& W = value(w);
    if (X.cols() != W.cols())
      throw std::invalid_argument("linear: input " + shape_str(X.rows(), X.cols()) +
                                  " does not match weight " + shape_str(W.rows(), W.cols()));
    Mat out = X * W.transpose();
    if (b.valid()) {
      const Mat& B = value(b);
      if (B.rows() != 1 || B.cols() != W.rows())
        throw std::invalid_argument("linear: bias " + shape_str(B.rows(), B.cols()) +
                                    ", expected " + shape_str(1, W.rows()));
      out.rowwise() += B.row(0);
    }
    Var y = push(std::move(out), any_grad({x, w, b}), {});
    set_backward(y, [this, x, w, b, y] {
      const Mat& g = grad_of(y);
      if (needs(w)) accumulate(w, g.transpose() * value(x));
      if (b.valid() && needs(b)) accumulate(b, g.colwise().sum());
      if (needs(x)) accumulate(x, g * value(w));
    });
    return y;
  }

  /// Same-length 1-D convolution over time with zero padding.
  /// W: out x (kernel * in), column j * in + c holds tap j of channel c;
  /// output row t sees input rows t - kernel/2 ... t + (kernel-1) - kernel/2.
  Var conv1d(Var x, Var w, Var b, int kernel) {
    const Mat& X = value(x);
    const Mat& W = value(w);
    const Eigen::Index in = X.cols();
    if (kernel < 1 || W.cols() != kernel * in)
      throw std::invalid_argument("conv1d: input " + shape_str(X.rows(), X.cols()) +
                                  " with kernel " + std::to_string(kernel) + " needs weight " +
                                  shape_str(W.rows(), kernel * in) + ", got " +
                                  shape_str(W.rows(), W.cols()));
    Mat cols = im2col(X, kernel);
    Mat out = cols * W.transpose();
    if (b.valid()) {
      const Mat& B = value(b);
      if (B.rows() != 1 || B.cols() != W.rows())
        throw std::invalid_argument("conv1d: bias " + shape_str(B.rows(), B.cols()) +
                                    ", expected " + shape_str(1, W.rows()));
      out.rowwise() += B.row(0);
    }
    Var y = push(std::move(out), any_grad({x, w, b}), {});
    set_backward(y, [this, x, w, b, y, kernel, cols = std::move(cols)] {
      const Mat& g = grad_of(y);
      if (needs(w)) accumulate(w, g.transpose() * cols);
      if (b.valid() && needs(b)) accumulate(b, g.colwise().sum());
      if (needs(x)) accumulate(x, col2im(g * value(w), value(x).rows(), value(x).cols(), kernel));
    });
    return y;
  }

  // -- recurrent layers ---------------------------------------------------

  /// GRU over the rows of x (gate order r, z, n):
  ///   r = s(Wx_r x + bx_r + Wh_r h + bh_r), z likewise,
  ///   n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n)),  h' = (1 - z) n + z h.
  /// wx: 3H x in, wh: 3H x H, bx/bh: 1 x 3H. Initial state is zero unless
  /// h0 (1 x H) is given. With reverse = true the sequence is consumed from
  /// the last row, and output row t is still the state at input row t.
  Var gru(Var x, Var wx, Var wh, Var bx, Var bh, bool reverse = false, Var h0 = {}) {
    const Mat& X = value(x);
    const Mat& Wx = value(wx);
    const Mat& Wh = value(wh);
    const Eigen::Index H = Wh.cols();
    check_recurrent("gru", X, Wx, Wh, 3, {&value(bx), &value(bh)});
    const Eigen::Index T = X.rows();
    Mat gx = Wx * X.transpose();  // 3H x T
    gx.colwise() += value(bx).row(0).transpose();
    const Vec bhv = value(bh).row(0).transpose();

    auto cache = std::make_shared<RecurrentCache>();
    cache->gates.resize(3 * H, T);  // r, z, n
    cache->aux.resize(H, T);        // Wh_n h + bh_n
    cache->h_prev.resize(H, T);
    if (h0.valid() && (value(h0).rows() != 1 || value(h0).cols() != H))
      throw std::invalid_argument("gru: initial state must be " + shape_str(1, H));
    Mat out(T, H);
    Vec h = h0.valid() ? Vec(value(h0).row(0).transpose()) : Vec(Vec::Zero(H));
    for (Eigen::Index s = 0; s < T; ++s) {
      const Eigen::Index t = reverse ? T - 1 - s : s;
      const Vec gh = Wh * h + bhv;
      const Vec r = sigmoid_vec(gx.col(t).segment(0, H) + gh.segment(0, H));
      const Vec z = sigmoid_vec(gx.col(t).segment(H, H) + gh.segment(H, H));
      const Vec n = (gx.col(t).segment(2 * H, H).array() + r.array() * gh.segment(2 * H, H).array())
                        .tanh()
                        .matrix();
      cache->h_prev.col(t) = h;
      h = ((Scalar(1) - z.array()) * n.array() + z.array() * h.array()).matrix();
      cache->gates.col(t) << r, z, n;
      cache->aux.col(t) = gh.segment(2 * H, H);
      out.row(t) = h.transpose();
    }
    Var y = push(std::move(out), any_grad({x, wx, wh, bx, bh, h0}), {});
    set_backward(y, [this, x, wx, wh, bx, bh, h0, y, reverse, cache, H, T] {
      const Mat& g = grad_of(y);
      const Mat& Whm = value(wh);
      Mat dgx(3 * H, T);
      Mat dWh = Mat::Zero(3 * H, H);
      Vec dbh = Vec::Zero(3 * H);
      Vec carry = Vec::Zero(H);
      for (Eigen::Index s = T - 1; s >= 0; --s) {
        const Eigen::Index t = reverse ? T - 1 - s : s;
        const Vec dh = g.row(t).transpose() + carry;
        const auto r = cache->gates.col(t).segment(0, H).array();
        const auto z = cache->gates.col(t).segment(H, H).array();
        const auto n = cache->gates.col(t).segment(2 * H, H).array();
        const auto hp = cache->h_prev.col(t).array();
        const Vec dn_pre = (dh.array() * (Scalar(1) - z) * (Scalar(1) - n * n)).matrix();
        const Vec dz_pre = (dh.array() * (hp - n) * z * (Scalar(1) - z)).matrix();
        const Vec dr_pre =
            (dn_pre.array() * cache->aux.col(t).array() * r * (Scalar(1) - r)).matrix();
        Vec dgh(3 * H);
        dgh << dr_pre, dz_pre, (dn_pre.array() * r).matrix();
        dgx.col(t) << dr_pre, dz_pre, dn_pre;
        dWh.noalias() += dgh * cache->h_prev.col(t).transpose();
        dbh += dgh;
        carry = (dh.array() * z).matrix() + Whm.transpose() * dgh;
      }
      finish_recurrent(x, wx, wh, bx, dgx, dWh);
      if (needs(bh)) accumulate(bh, dbh.transpose());
      if (h0.valid() && needs(h0)) accumulate(h0, carry.transpose());
    });
    return y;
  }

  /// LSTM over the rows of x (gate order i, f, g, o):
  ///   c' = f * c + i * g,  h' = o * tanh(c').
  /// wx: 4H x in, wh: 4H x H, b: 1 x 4H. Zero initial state.
  Var lstm(Var x, Var wx, Var wh, Var b, bool reverse = false) {
    const Mat& X = value(x);
    const Mat& Wx = value(wx);
    const Mat& Wh = value(wh);
    const Eigen::Index H = Wh.cols();
    check_recurrent("lstm", X, Wx, Wh, 4, {&value(b)});
    const Eigen::Index T = X.rows();
    Mat gx = Wx * X.transpose();
    gx.colwise() += value(b).row(0).transpose();

    auto cache = std::make_shared<RecurrentCache>();
    cache->gates.resize(4 * H, T);  // i, f, g, o
    cache->aux.resize(H, T);        // c
    cache->h_prev.resize(H, T);
    cache->c_prev.resize(H, T);
    Mat out(T, H);
    Vec h = Vec::Zero(H), c = Vec::Zero(H);
    for (Eigen::Index s = 0; s < T; ++s) {
      const Eigen::Index t = reverse ? T - 1 - s : s;
      const Vec pre = gx.col(t) + Wh * h;
      const Vec i = sigmoid_vec(pre.segment(0, H));
      const Vec f = sigmoid_vec(pre.segment(H, H));
      const Vec gg = pre.segment(2 * H, H).array().tanh().matrix();
      const Vec o = sigmoid_vec(pre.segment(3 * H, H));
      cache->h_prev.col(t) = h;
      cache->c_prev.col(t) = c;
      c = (f.array() * c.array() + i.array() * gg.array()).matrix();
      h = (o.array() * c.array().tanh()).matrix();
      cache->gates.col(t) << i, f, gg, o;
      cache->aux.col(t) = c;
      out.row(t) = h.transpose();
    }
    Var y = push(std::move(out), any_grad({x, wx, wh, b}), {});
    set_backward(y, [this, x, wx, wh, b, y, reverse, cache, H, T] {
      const Mat& g = grad_of(y);
      const Mat& Whm = value(wh);
      Mat dgx(4 * H, T);
      Mat dWh = Mat::Zero(4 * H, H);
      Vec dh_carry = Vec::Zero(H), dc_carry = Vec::Zero(H);
      for (Eigen::Index s = T - 1; s >= 0; --s) {
        const Eigen::Index t = reverse ? T - 1 - s : s;
        const Vec dh = g.row(t).transpose() + dh_carry;
        const auto i = cache->gates.col(t).segment(0, H).array();
        const auto f = cache->gates.col(t).segment(H, H).array();
        const auto gg = cache->gates.col(t).segment(2 * H, H).array();
        const auto o = cache->gates.col(t).segment(3 * H, H).array();
        const auto tc = cache->aux.col(t).array().tanh();
        const auto dc = (dc_carry.array() + dh.array() * o * (Scalar(1) - tc * tc)).eval();
        Vec dpre(4 * H);
        dpre << (dc * gg * i * (Scalar(1) - i)).matrix(),
            (dc * cache->c_prev.col(t).array() * f * (Scalar(1) - f)).matrix(),
            (dc * i * (Scalar(1) - gg * gg)).matrix(),
            (dh.array() * tc * o * (Scalar(1) - o)).matrix();
        dgx.col(t) = dpre;
        dWh.noalias() += dpre * cache->h_prev.col(t).transpose();
        dh_carry = Whm.transpose() * dpre;
        dc_carry = (dc * f).matrix();
      }
      finish_recurrent(x, wx, wh, b, dgx, dWh);
    });
    return y;
  }

  // -- shape ops ----------------------------------------------------------

  /// Column-wise concatenation. Single-row inputs are broadcast to the row
  /// count of the tallest input; all other inputs must share that count.
  Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Eigen::Index rows = 1, cols = 0;
    for (Var p : parts) {
      rows = std::max(rows, value(p).rows());
      cols += value(p).cols();
    }
    for (Var p : parts)
      if (value(p).rows() != 1 && value(p).rows() != rows)
        throw std::invalid_argument("concat: input with " + std::to_string(value(p).rows()) +
                                    " rows cannot join " + std::to_string(rows) + " rows");
    Mat out(rows, cols);
    Eigen::Index offset = 0;
    for (Var p : parts) {
      const Mat& v = value(p);
      if (v.rows() == rows)
        out.middleCols(offset, v.cols()) = v;
      else
        out.middleCols(offset, v.cols()) = v.row(0).replicate(rows, 1);
      offset += v.cols();
    }
    Var y = push(std::move(out), any_grad(parts), {});
    set_backward(y, [this, parts, y, rows] {
      const Mat& g = grad_of(y);
      Eigen::Index offset = 0;
      for (Var p : parts) {
        const Eigen::Index c = value(p).cols();
        if (needs(p)) {
          if (value(p).rows() == rows)
            accumulate(p, g.middleCols(offset, c));
          else
            accumulate(p, g.middleCols(offset, c).colwise().sum());
        }
        offset += c;
      }
    });
    return y;
  }

  Var mean_pool_time(Var x) {
    const Mat& X = value(x);
    if (X.rows() < 1) throw std::invalid_argument("mean_pool_time: empty input");
    Var y = push(X.colwise().mean(), any_grad({x}), {});
    set_backward(y, [this, x, y] {
      const Eigen::Index T = value(x).rows();
      accumulate(x, grad_of(y).replicate(T, 1) / Scalar(T));
    });
    return y;
  }

  /// Block means over `factor` consecutive rows; the last block may be short.
  Var downsample(Var x, int factor) {
    const Mat& X = value(x);
    if (factor < 1) throw std::invalid_argument("downsample: factor must be >= 1");
    const Eigen::Index T = X.rows();
    const Eigen::Index blocks = (T + factor - 1) / factor;
    Mat out(blocks, X.cols());
    for (Eigen::Index k = 0; k < blocks; ++k) {
      const Eigen::Index start = k * factor;
      const Eigen::Index len = std::min<Eigen::Index>(factor, T - start);
      out.row(k) = X.middleRows(start, len).colwise().mean();
    }
    Var y = push(std::move(out), any_grad({x}), {});
    set_backward(y, [this, x, y, factor] {
      const Mat& g = grad_of(y);
      const Eigen::Index T = value(x).rows();
      Mat dx(T, g.cols());
      for (Eigen::Index k = 0; k < g.rows(); ++k) {
        const Eigen::Index start = k * factor;
        const Eigen::Index len = std::min<Eigen::Index>(factor, T - start);
        dx.middleRows(start, len) = g.row(k).replicate(len, 1) / Scalar(len);
      }
      accumulate(x, dx);
    });
    return y;
  }

  /// Repeats each row `factor` times and keeps the first `rows` rows. The
  /// input must have exactly ceil(rows / factor) rows.
  Var upsample(Var x, int factor, Eigen::Index rows) {
    const Mat& X = value(x);
    if (factor < 1 || rows < 1) throw std::invalid_argument("upsample: invalid factor or length");
    if (X.rows() != (rows + factor - 1) / factor)
      throw std::invalid_argument("upsample: " + std::to_string(X.rows()) +
                                  " rows cannot produce " + std::to_string(rows) +
                                  " rows at factor " + std::to_string(factor));
    Mat out(rows, X.cols());
    for (Eigen::Index t = 0; t < rows; ++t) out.row(t) = X.row(t / factor);
    Var y = push(std::move(out), any_grad({x}), {});
    set_backward(y, [this, x, y, factor] {
      const Mat& g = grad_of(y);
      Mat dx = Mat::Zero(value(x).rows(), g.cols());
      for (Eigen::Index t = 0; t < g.rows(); ++t) dx.row(t / factor) += g.row(t);
      accumulate(x, dx);
    });
    return y;
  }

  Var select_row(Var x, Eigen::Index row) {
    const Mat& X = value(x);
    if (row < 0 || row >= X.rows()) throw std::invalid_argument("select_row: out of range");
    Var y = push(X.row(row), any_grad({x}), {});
    set_backward(y, [this, x, y, row] {
      Mat dx = Mat::Zero(value(x).rows(), value(x).cols());
      dx.row(row) = grad_of(y);
      accumulate(x, dx);
    });
    return y;
  }

  Var l2_normalize_rows(Var x) {
    const Mat& X = value(x);
    const Vec norms = X.rowwise().norm();
    if (!(norms.array() > Scalar(0)).all())
      throw std::invalid_argument("l2_normalize_rows: zero-norm row");
    Mat out = norms.cwiseInverse().asDiagonal() * X;
    Var y = push(std::move(out), any_grad({x}), {});
    set_backward(y, [this, x, y, norms] {
      const Mat& g = grad_of(y);
      const Mat& Y = value(y);
      const Vec dots = (g.array() * Y.array()).rowwise().sum();
      accumulate(x, norms.cwiseInverse().asDiagonal() * (g - dots.asDiagonal() * Y));
    });
    return y;
  }

  // -- reductions and losses ---------------------------------------------

  Var sum(Var x) {
    Var y = push(Mat::Constant(1, 1, value(x).sum()), any_grad({x}), {});
    set_backward(y, [this, x, y] {
      accumulate(x, Mat::Constant(value(x).rows(), value(x).cols(), grad_of(y)(0, 0)));
    });
    return y;
  }

  /// Frobenius inner product with a constant matrix.
  Var dot(Var x, const Mat& weights) {
    require_shape(x, weights.rows(), weights.cols(), "dot");
    Var y = push(Mat::Constant(1, 1, value(x).cwiseProduct(weights).sum()), any_grad({x}), {});
    set_backward(y, [this, x, y, weights] { accumulate(x, weights * grad_of(y)(0, 0)); });
    return y;
  }

  Var sum_squares(Var x) {
    Var y = push(Mat::Constant(1, 1, value(x).squaredNorm()), any_grad({x}), {});
    set_backward(y, [this, x, y] { accumulate(x, value(x) * (Scalar(2) * grad_of(y)(0, 0))); });
    return y;
  }

  /// Mean squared error over all entries.
  Var mse(Var a, Var b) {
    require_same(a, b, "mse");
    const Mat diff = value(a) - value(b);
    const Scalar n = Scalar(diff.size());
    Var y = push(Mat::Constant(1, 1, diff.squaredNorm() / n), any_grad({a, b}), {});
    set_backward(y, [this, a, b, y, diff, n] {
      const Mat d = diff * (Scalar(2) * grad_of(y)(0, 0) / n);
      if (needs(a)) accumulate(a, d);
      if (needs(b)) accumulate(b, -d);
    });
    return y;
  }

  /// Mean absolute error over all entries; the subgradient at 0 is 0.
  Var mae(Var a, Var b) {
    require_same(a, b, "mae");
    const Mat diff = value(a) - value(b);
    const Scalar n = Scalar(diff.size());
    Var y = push(Mat::Constant(1, 1, diff.cwiseAbs().sum() / n), any_grad({a, b}), {});
    set_backward(y, [this, a, b, y, diff, n] {
      const Mat d = diff.unaryExpr([](Scalar v) {
                          return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0));
                        }) *
                    (grad_of(y)(0, 0) / n);
      if (needs(a)) accumulate(a, d);
      if (needs(b)) accumulate(b, -d);
    });
    return y;
  }

  /// sum_k coef_k * x_k over 1 x 1 values, accumulated left to right.
  Var weighted_sum(const std::vector<std::pair<Scalar, Var>>& terms) {
    Scalar total = Scalar(0);
    std::vector<Var> vars;
    for (const auto& [c, v] : terms) {
      require_shape(v, 1, 1, "weighted_sum");
      total += c * scalar(v);
      vars.push_back(v);
    }
    Var y = push(Mat::Constant(1, 1, total), any_grad(vars), {});
    set_backward(y, [this, terms, y] {
      for (const auto& [c, v] : terms) accumulate(v, grad_of(y) * c);
    });
    return y;
  }

  // -- backward -----------------------------------------------------------

  /// Propagates `seed` (same shape as `output`) back through the tape. A
  /// tape can be differentiated once. Returns one entry per trainable
  /// parameter in the store (zero when unused); frozen parameters get none.
  Gradients<Scalar> backward(Var output, const Mat& seed) {
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    consumed_ = true;
    require_shape(output, seed.rows(), seed.cols(), "backward seed");
    accumulate(output, seed);
    for (int id = output.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward && n.grad.size() != 0) n.backward();
    }
    Gradients<Scalar> grads;
    for (const auto& [path, p] : *params_) {
      if (!p.trainable) continue;
      auto it = param_nodes_.find(path);
      if (it != param_nodes_.end() && nodes_[it->second.id].grad.size() != 0)
        grads.emplace(path, nodes_[it->second.id].grad);
      else
        grads.emplace(path, Mat::Zero(p.value.rows(), p.value.cols()));
    }
    return grads;
  }

  Gradients<Scalar> backward(Var output) { return backward(output, Mat::Ones(1, 1)); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  struct RecurrentCache {
    Mat gates, aux, h_prev, c_prev;
  };

  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw std::out_of_range("tape: invalid variable");
    return nodes_[v.id];
  }

  Var push(Mat value, bool needs_grad, std::function<void()> backward) {
    if (consumed_) throw std::logic_error("tape: cannot record after backward");
    nodes_.push_back(Node{std::move(value), Mat(), needs_grad, std::move(backward)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename Fn>
  void set_backward(Var y, Fn&& fn) {
    if (nodes_[y.id].needs_grad) nodes_[y.id].backward = std::forward<Fn>(fn);
  }

  bool needs(Var v) const { return v.valid() && nodes_[v.id].needs_grad; }

  bool any_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (needs(v)) return true;
    return false;
  }
  bool any_grad(const std::vector<Var>& vars) const {
    for (Var v : vars)
      if (needs(v)) return true;
    return false;
  }

  const Mat& grad_of(Var v) const { return nodes_[v.id].grad; }

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    if (!needs(v)) return;
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void require_same(Var a, Var b, const char* op) const {
    require_shape(b, value(a).rows(), value(a).cols(), op);
  }

  void require_shape(Var v, Eigen::Index rows, Eigen::Index cols, const char* op) const {
    const Mat& m = value(v);
    if (m.rows() != rows || m.cols() != cols)
      throw std::invalid_argument(std::string(op) + ": shape " + shape_str(m.rows(), m.cols()) +
                                  ", expected " + shape_str(rows, cols));
  }

  static Mat sigmoid_of(const Mat& x) {
    return (Scalar(1) / (Scalar(1) + (-x.array()).exp())).matrix();
  }
  template <typename Derived>
  static Vec sigmoid_vec(const Eigen::MatrixBase<Derived>& x) {
    return (Scalar(1) / (Scalar(1) + (-x.array()).exp())).matrix();
  }

  static Mat im2col(const Mat& X, int kernel) {
    const Eigen::Index T = X.rows(), in = X.cols();
    const int pad = kernel / 2;
    Mat cols = Mat::Zero(T, kernel * in);
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index shift = j - pad;
      const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
      const Eigen::Index hi = std::min<Eigen::Index>(T, T - shift);
      if (hi > lo) cols.block(lo, j * in, hi - lo, in) = X.middleRows(lo + shift, hi - lo);
    }
    return cols;
  }

  static Mat col2im(const Mat& dcols, Eigen::Index T, Eigen::Index in, int kernel) {
    const int pad = kernel / 2;
    Mat dx = Mat::Zero(T, in);
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index shift = j - pad;
      const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
      const Eigen::Index hi = std::min<Eigen::Index>(T, T - shift);
      if (hi > lo) dx.middleRows(lo + shift, hi - lo) += dcols.block(lo, j * in, hi - lo, in);
    }
    return dx;
  }

  void check_recurrent(const char* op, const Mat& X, const Mat& Wx, const Mat& Wh, int gates,
                       std::initializer_list<const Mat*> biases) const {
    const Eigen::Index H = Wh.cols();
    if (X.rows() < 1) throw std::invalid_argument(std::string(op) + ": empty sequence");
    if (Wh.rows() != gates * H || Wx.rows() != gates * H || Wx.cols() != X.cols())
      throw std::invalid_argument(std::string(op) + ": input " + shape_str(X.rows(), X.cols()) +
                                  " with weights " + shape_str(Wx.rows(), Wx.cols()) + " / " +
                                  shape_str(Wh.rows(), Wh.cols()) + " (expected " +
                                  shape_str(gates * H, X.cols()) + " / " +
                                  shape_str(gates * H, H) + ")");
    for (const Mat* b : biases)
      if (b->rows() != 1 || b->cols() != gates * H)
        throw std::invalid_argument(std::string(op) + ": bias " + shape_str(b->rows(), b->cols()) +
                                    ", expected " + shape_str(1, gates * H));
  }

  void finish_recurrent(Var x, Var wx, Var wh, Var bx, const Mat& dgx, const Mat& dWh) {
    if (needs(wx)) accumulate(wx, dgx * value(x));
    if (needs(bx)) accumulate(bx, dgx.rowwise().sum().transpose());
    if (needs(wh)) accumulate(wh, dWh);
    if (needs(x)) accumulate(x, (value(wx).transpose() * dgx).transpose());
  }

  const BasicParameters<Scalar>* params_;
  std::vector<Node> nodes_;
  std::map<std::string, Var> param_nodes_;
  bool consumed_ = false;
};

}  // namespace voicy::grad
