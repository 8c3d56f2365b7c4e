#include "kitl/numcore/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace kitl::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

[[noreturn]] void shape_fail(std::string_view op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

std::string two_shapes(const Shape& a, const Shape& b) {
  return shape_str(a) + " vs " + shape_str(b);
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows) {
  return ConstMatMap<T>(t.ptr(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(t.size() / rows));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows) {
  return MatMap<T>(t.ptr(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(t.size() / rows));
}

template <typename T>
std::size_t as_index(T v, std::size_t bound, std::string_view op) {
  if (!(v >= T{0}) || v != std::floor(v) || static_cast<std::size_t>(v) >= bound) {
    shape_fail(op, "index value " + std::to_string(static_cast<double>(v)) +
                       " outside [0, " + std::to_string(bound) + ")");
  }
  return static_cast<std::size_t>(v);
}

// ---------------------------------------------------------------------------

template <typename T>
class MatMulOp final : public Op<T> {
 public:
  MatMulOp(bool ta, bool tb) : ta_(ta), tb_(tb) {}
  std::string_view name() const override { return "matmul"; }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& a = *in[0];
    const Tensor<T>& b = *in[1];
    if (a.rank() != 2 || b.rank() != 2) {
      shape_fail(name(), "operands must be matrices, got " +
                             two_shapes(a.shape(), b.shape()));
    }
    const std::size_t m = ta_ ? a.dim(1) : a.dim(0);
    const std::size_t ka = ta_ ? a.dim(0) : a.dim(1);
    const std::size_t kb = tb_ ? b.dim(1) : b.dim(0);
    const std::size_t n = tb_ ? b.dim(0) : b.dim(1);
    if (ka != kb) {
      shape_fail(name(), "inner dimensions differ: " +
                             two_shapes(a.shape(), b.shape()));
    }
    out.resize({m, n});
    auto A = as_matrix(a, a.dim(0));
    auto B = as_matrix(b, b.dim(0));
    auto C = as_matrix(out, m);
    if (!ta_ && !tb_) C.noalias() = A * B;
    else if (ta_ && !tb_) C.noalias() = A.transpose() * B;
    else if (!ta_ && tb_) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    const Tensor<T>& a = *in[0];
    const Tensor<T>& b = *in[1];
    auto A = as_matrix(a, a.dim(0));
    auto B = as_matrix(b, b.dim(0));
    auto G = as_matrix(gout, gout.dim(0));
    if (gin[0]) {
      auto dA = as_matrix(*gin[0], a.dim(0));
      // d op(A) = G op(B)^T
      if (!ta_ && !tb_) dA.noalias() += G * B.transpose();
      else if (!ta_ && tb_) dA.noalias() += G * B;
      else if (ta_ && !tb_) dA.noalias() += B * G.transpose();
      else dA.noalias() += B.transpose() * G.transpose();
    }
    if (gin[1]) {
      auto dB = as_matrix(*gin[1], b.dim(0));
      // d op(B) = op(A)^T G
      if (!ta_ && !tb_) dB.noalias() += A.transpose() * G;
      else if (ta_ && !tb_) dB.noalias() += A * G;
      else if (!ta_ && tb_) dB.noalias() += G.transpose() * A;
      else dB.noalias() += G.transpose() * A.transpose();
    }
  }

 private:
  bool ta_;
  bool tb_;
};

template <typename T>
class AddBiasOp final : public Op<T> {
 public:
  std::string_view name() const override { return "add_bias"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& b = *in[1];
    if (b.rank() != 1 || x.rank() < 1 || x.shape().back() != b.dim(0)) {
      shape_fail(name(), "bias must match the last axis: " +
                             two_shapes(x.shape(), b.shape()));
    }
    out = x;
    const std::size_t d = b.size();
    auto O = as_matrix(out, out.size() / d);
    O.rowwise() += ConstVecMap<T>(b.ptr(), d).transpose();
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    const std::size_t d = in[1]->size();
    if (gin[0]) VecMap<T>(gin[0]->ptr(), gout.size()) += ConstVecMap<T>(gout.ptr(), gout.size());
    if (gin[1]) {
      auto G = as_matrix(gout, gout.size() / d);
      VecMap<T>(gin[1]->ptr(), d) += G.colwise().sum().transpose();
    }
  }
};

enum class Binary { add, sub, mul };

template <typename T>
class BinaryOp final : public Op<T> {
 public:
  explicit BinaryOp(Binary kind) : kind_(kind) {}
  std::string_view name() const override {
    switch (kind_) {
      case Binary::add: return "add";
      case Binary::sub: return "sub";
      default: return "mul";
    }
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& a = *in[0];
    const Tensor<T>& b = *in[1];
    if (a.shape() != b.shape()) {
      shape_fail(name(), "operand shapes differ: " + two_shapes(a.shape(), b.shape()));
    }
    out.resize(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
      switch (kind_) {
        case Binary::add: out[i] = a[i] + b[i]; break;
        case Binary::sub: out[i] = a[i] - b[i]; break;
        case Binary::mul: out[i] = a[i] * b[i]; break;
      }
    }
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    const std::size_t n = gout.size();
    for (std::size_t i = 0; i < n; ++i) {
      const T g = gout[i];
      switch (kind_) {
        case Binary::add:
          if (gin[0]) (*gin[0])[i] += g;
          if (gin[1]) (*gin[1])[i] += g;
          break;
        case Binary::sub:
          if (gin[0]) (*gin[0])[i] += g;
          if (gin[1]) (*gin[1])[i] -= g;
          break;
        case Binary::mul:
          if (gin[0]) (*gin[0])[i] += g * (*in[1])[i];
          if (gin[1]) (*gin[1])[i] += g * (*in[0])[i];
          break;
      }
    }
  }

 private:
  Binary kind_;
};

template <typename T>
class ScaleOp final : public Op<T> {
 public:
  explicit ScaleOp(T factor) : factor_(factor) {}
  std::string_view name() const override { return "scale"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    out.resize(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor_ * (*in[0])[i];
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += factor_ * gout[i];
  }

 private:
  T factor_;
};

template <typename T>
class ExpOp final : public Op<T> {
 public:
  std::string_view name() const override { return "exp"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    out.resize(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp((*in[0])[i]);
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>& out,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += out[i] * gout[i];
  }
};

template <typename T>
class LogOp final : public Op<T> {
 public:
  std::string_view name() const override { return "log"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    out.resize(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log((*in[0])[i]);
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] / (*in[0])[i];
  }
};

template <typename T>
class ReduceOp final : public Op<T> {
 public:
  explicit ReduceOp(bool average) : average_(average) {}
  std::string_view name() const override { return average_ ? "mean" : "sum"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    // Sequential extended-precision sum: a one-element change perturbs the
    // result by at most its own rounding.
    long double s = 0;
    for (T v : x.data()) s += v;
    if (average_) s /= static_cast<long double>(x.size());
    out = Tensor<T>::scalar(static_cast<T>(s));
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    T g = gout[0];
    if (average_) g /= static_cast<T>(in[0]->size());
    for (auto& v : gin[0]->data()) v += g;
  }

 private:
  bool average_;
};

template <typename T>
class ReluOp final : public Op<T> {
 public:
  std::string_view name() const override { return "relu"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    out.resize(in[0]->shape());
    const T* x = in[0]->ptr();
    T* y = out.ptr();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    std::uint64_t word = 0;
    int bits = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const bool on = x[i] > T{0};
      y[i] = on ? x[i] : T{0};
      word = (word << 1) | (on ? 1u : 0u);
      if (++bits == 64) {
        h = mix_hash(h, word);
        word = 0;
        bits = 0;
      }
    }
    signature_ = mix_hash(h, word);
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const T* x = in[0]->ptr();
    T* dx = gin[0]->ptr();
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (x[i] > T{0}) dx[i] += gout[i];
    }
  }
  std::uint64_t kink_signature() const override { return signature_; }

 private:
  std::uint64_t signature_ = 0;
};

template <typename T>
class Conv2dOp final : public Op<T> {
 public:
  std::string_view name() const override { return "conv2d"; }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& w = *in[1];
    const Tensor<T>& b = *in[2];
    if (x.rank() != 4 || w.rank() != 4 || w.dim(0) != w.dim(1) ||
        w.dim(0) % 2 == 0 || w.dim(2) != x.dim(3)) {
      shape_fail(name(), "input/filter mismatch: " + two_shapes(x.shape(), w.shape()));
    }
    if (b.rank() != 1 || b.dim(0) != w.dim(3)) {
      shape_fail(name(), "bias/filter mismatch: " + two_shapes(b.shape(), w.shape()));
    }
    n_ = x.dim(0);
    h_ = x.dim(1);
    w_ = x.dim(2);
    c_ = x.dim(3);
    k_ = w.dim(0);
    f_ = w.dim(3);
    im2col(x);
    out.resize({n_, h_, w_, f_});
    auto O = as_matrix(out, n_ * h_ * w_);
    auto Wm = ConstMatMap<T>(w.ptr(), k_ * k_ * c_, f_);
    O.noalias() = cols_ * Wm;
    O.rowwise() += ConstVecMap<T>(b.ptr(), f_).transpose();
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    const Tensor<T>& w = *in[1];
    auto G = as_matrix(gout, n_ * h_ * w_);
    if (gin[1]) {
      MatMap<T>(gin[1]->ptr(), k_ * k_ * c_, f_).noalias() += cols_.transpose() * G;
    }
    if (gin[2]) VecMap<T>(gin[2]->ptr(), f_) += G.colwise().sum().transpose();
    if (gin[0]) {
      auto Wm = ConstMatMap<T>(w.ptr(), k_ * k_ * c_, f_);
      dcols_.noalias() = G * Wm.transpose();
      col2im(*gin[0]);
    }
  }

 private:
  void im2col(const Tensor<T>& x) {
    const std::size_t kkc = k_ * k_ * c_;
    cols_.resize(static_cast<Eigen::Index>(n_ * h_ * w_), static_cast<Eigen::Index>(kkc));
    const long pad = static_cast<long>(k_ / 2);
    const T* src = x.ptr();
    for (std::size_t n = 0; n < n_; ++n) {
      for (std::size_t i = 0; i < h_; ++i) {
        for (std::size_t j = 0; j < w_; ++j) {
          T* row = cols_.data() + ((n * h_ + i) * w_ + j) * kkc;
          for (std::size_t ki = 0; ki < k_; ++ki) {
            const long si = static_cast<long>(i + ki) - pad;
            for (std::size_t kj = 0; kj < k_; ++kj) {
              const long sj = static_cast<long>(j + kj) - pad;
              T* dst = row + (ki * k_ + kj) * c_;
              if (si < 0 || sj < 0 || si >= static_cast<long>(h_) ||
                  sj >= static_cast<long>(w_)) {
                std::fill(dst, dst + c_, T{0});
              } else {
                const T* s = src + ((n * h_ + si) * w_ + sj) * c_;
                std::copy(s, s + c_, dst);
              }
            }
          }
        }
      }
    }
  }

  void col2im(Tensor<T>& dx) const {
    const std::size_t kkc = k_ * k_ * c_;
    const long pad = static_cast<long>(k_ / 2);
    T* dst = dx.ptr();
    for (std::size_t n = 0; n < n_; ++n) {
      for (std::size_t i = 0; i < h_; ++i) {
        for (std::size_t j = 0; j < w_; ++j) {
          const T* row = dcols_.data() + ((n * h_ + i) * w_ + j) * kkc;
          for (std::size_t ki = 0; ki < k_; ++ki) {
            const long si = static_cast<long>(i + ki) - pad;
            if (si < 0 || si >= static_cast<long>(h_)) continue;
            for (std::size_t kj = 0; kj < k_; ++kj) {
              const long sj = static_cast<long>(j + kj) - pad;
              if (sj < 0 || sj >= static_cast<long>(w_)) continue;
              const T* s = row + (ki * k_ + kj) * c_;
              T* d = dst + ((n * h_ + si) * w_ + sj) * c_;
              for (std::size_t c = 0; c < c_; ++c) d[c] += s[c];
            }
          }
        }
      }
    }
  }

  std::size_t n_ = 0, h_ = 0, w_ = 0, c_ = 0, k_ = 0, f_ = 0;
  RowMat<T> cols_;
  RowMat<T> dcols_;
};

template <typename T>
class MaxPool2Op final : public Op<T> {
 public:
  std::string_view name() const override { return "max_pool2"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    if (x.rank() != 4 || x.dim(1) < 2 || x.dim(2) < 2) {
      shape_fail(name(), "expects NHWC input with spatial extents >= 2, got " +
                             shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::size_t oh = h / 2, ow = w / 2;
    out.resize({n, oh, ow, c});
    winner_.resize(out.size());
    std::uint64_t sig = 0x84222325cbf29ce4ULL;
    std::size_t o = 0;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t base = ((b * h + 2 * i) * w + 2 * j) * c;
          const std::size_t offs[4] = {0, c, w * c, w * c + c};
          for (std::size_t ch = 0; ch < c; ++ch, ++o) {
            std::size_t best = base + ch;
            T bv = x[best];
            for (int q = 1; q < 4; ++q) {
              const std::size_t idx = base + offs[q] + ch;
              if (x[idx] > bv) {
                bv = x[idx];
                best = idx;
              }
            }
            out[o] = bv;
            winner_[o] = best;
            sig = mix_hash(sig, best);
          }
        }
      }
    }
    signature_ = sig;
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t o = 0; o < gout.size(); ++o) (*gin[0])[winner_[o]] += gout[o];
  }
  std::uint64_t kink_signature() const override { return signature_; }

 private:
  std::vector<std::size_t> winner_;
  std::uint64_t signature_ = 0;
};

template <typename T>
class BatchNormTrainOp final : public Op<T> {
 public:
  explicit BatchNormTrainOp(T eps) : eps_(eps) {}
  std::string_view name() const override { return "batch_norm"; }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& gamma = *in[1];
    const Tensor<T>& beta = *in[2];
    const std::size_t c = gamma.size();
    if (x.rank() < 2 || x.shape().back() != c || beta.size() != c) {
      shape_fail(name(), "channel mismatch: " + two_shapes(x.shape(), gamma.shape()));
    }
    const std::size_t m = x.size() / c;
    auto X = as_matrix(x, m);
    mean_ = Tensor<T>({c});
    var_ = Tensor<T>({c});
    auto mu = VecMap<T>(mean_.ptr(), c);
    mu = X.colwise().mean().transpose();
    RowMat<T> centered = X.rowwise() - mu.transpose();
    VecMap<T>(var_.ptr(), c) =
        centered.array().square().colwise().sum().transpose() / static_cast<T>(m);
    inv_std_.resize(c);
    for (std::size_t j = 0; j < c; ++j) inv_std_[j] = T{1} / std::sqrt(var_[j] + eps_);
    xhat_ = centered;
    for (Eigen::Index j = 0; j < xhat_.cols(); ++j) xhat_.col(j) *= inv_std_[j];
    out.resize(x.shape());
    auto O = as_matrix(out, m);
    O = xhat_;
    for (std::size_t j = 0; j < c; ++j) {
      O.col(j) = O.col(j) * gamma[j] + RowMat<T>::Constant(m, 1, beta[j]);
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    const Tensor<T>& gamma = *in[1];
    const std::size_t c = gamma.size();
    const std::size_t m = gout.size() / c;
    auto G = as_matrix(gout, m);
    if (gin[1]) {
      for (std::size_t j = 0; j < c; ++j) {
        (*gin[1])[j] += (G.col(j).array() * xhat_.col(j).array()).sum();
      }
    }
    if (gin[2]) VecMap<T>(gin[2]->ptr(), c) += G.colwise().sum().transpose();
    if (gin[0]) {
      auto dX = as_matrix(*gin[0], m);
      const T inv_m = T{1} / static_cast<T>(m);
      for (std::size_t j = 0; j < c; ++j) {
        auto dxhat = G.col(j).array() * gamma[j];
        const T s1 = dxhat.sum();
        const T s2 = (dxhat * xhat_.col(j).array()).sum();
        dX.col(j).array() += inv_std_[j] * inv_m *
                             (static_cast<T>(m) * dxhat - s1 - xhat_.col(j).array() * s2);
      }
    }
  }

  const Tensor<T>& mean() const { return mean_; }
  const Tensor<T>& variance() const { return var_; }

 private:
  T eps_;
  Tensor<T> mean_;
  Tensor<T> var_;
  std::vector<T> inv_std_;
  RowMat<T> xhat_;
};

template <typename T>
class BatchNormEvalOp final : public Op<T> {
 public:
  explicit BatchNormEvalOp(T eps) : eps_(eps) {}
  std::string_view name() const override { return "batch_norm_eval"; }
  bool differentiable_input(std::size_t i) const override { return i < 3; }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    const std::size_t c = in[1]->size();
    for (std::size_t i = 1; i < 5; ++i) {
      if (in[i]->size() != c) {
        shape_fail(name(), "parameter length mismatch: " +
                               two_shapes(in[i]->shape(), in[1]->shape()));
      }
    }
    if (x.rank() < 2 || x.shape().back() != c) {
      shape_fail(name(), "channel mismatch: " + two_shapes(x.shape(), in[1]->shape()));
    }
    scale_.resize(c);
    shift_.resize(c);
    for (std::size_t j = 0; j < c; ++j) {
      scale_[j] = (*in[1])[j] / std::sqrt((*in[4])[j] + eps_);
      shift_[j] = (*in[2])[j] - (*in[3])[j] * scale_[j];
    }
    out.resize(x.shape());
    const std::size_t m = x.size() / c;
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        out[r * c + j] = x[r * c + j] * scale_[j] + shift_[j];
      }
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    const Tensor<T>& x = *in[0];
    const std::size_t c = in[1]->size();
    const std::size_t m = x.size() / c;
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        const T g = gout[r * c + j];
        if (gin[0]) (*gin[0])[r * c + j] += g * scale_[j];
        if (gin[1]) {
          const T inv_std = T{1} / std::sqrt((*in[4])[j] + eps_);
          (*gin[1])[j] += g * (x[r * c + j] - (*in[3])[j]) * inv_std;
        }
        if (gin[2]) (*gin[2])[j] += g;
      }
    }
  }

 private:
  T eps_;
  std::vector<T> scale_;
  std::vector<T> shift_;
};

template <typename T>
class FlattenOp final : public Op<T> {
 public:
  std::string_view name() const override { return "flatten"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    if (x.rank() < 1) shape_fail(name(), "scalar input");
    out = x.reshaped({x.dim(0), x.row_width()});
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    VecMap<T>(gin[0]->ptr(), gout.size()) += ConstVecMap<T>(gout.ptr(), gout.size());
  }
};

template <typename T>
class L2NormalizeOp final : public Op<T> {
 public:
  explicit L2NormalizeOp(T eps) : eps_(eps) {}
  std::string_view name() const override { return "l2_normalize"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    if (x.rank() != 2) shape_fail(name(), "expects a matrix, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), d = x.dim(1);
    norms_.assign(n, T{0});
    clamped_.assign(n, 0);
    out.resize(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
      T ss = 0;
      for (std::size_t j = 0; j < d; ++j) ss += x[i * d + j] * x[i * d + j];
      T norm = std::sqrt(ss);
      if (norm <= eps_) {
        if (eps_ <= T{0}) {
          shape_fail(name(), "row " + std::to_string(i) + " has zero norm");
        }
        norm = eps_;
        clamped_[i] = 1;
      }
      norms_[i] = norm;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / norm;
    }
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>& out,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const std::size_t n = out.dim(0), d = out.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const T* y = out.ptr() + i * d;
      const T* g = gout.ptr() + i * d;
      T* dx = gin[0]->ptr() + i * d;
      if (clamped_[i]) {
        for (std::size_t j = 0; j < d; ++j) dx[j] += g[j] / norms_[i];
        continue;
      }
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < d; ++j) dx[j] += (g[j] - y[j] * dot) / norms_[i];
    }
  }
  std::uint64_t kink_signature() const override {
    std::uint64_t h = 0;
    for (char c : clamped_) h = mix_hash(h, static_cast<std::uint64_t>(c));
    return h;
  }

 private:
  T eps_;
  std::vector<T> norms_;
  std::vector<char> clamped_;
};

template <typename T>
class LogSoftmaxOp final : public Op<T> {
 public:
  std::string_view name() const override { return "log_softmax"; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    if (x.rank() != 2) shape_fail(name(), "expects a matrix, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    out.resize(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = x.ptr() + i * c;
      const T mx = *std::max_element(row, row + c);
      T s = 0;
      for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
      // Subtracting the maximum first keeps the result exactly invariant
      // to row shifts that are themselves exact.
      const T log_s = std::log(s);
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mx) - log_s;
    }
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>& out,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const std::size_t n = out.dim(0), c = out.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      T gs = 0;
      for (std::size_t j = 0; j < c; ++j) gs += gout[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        (*gin[0])[i * c + j] += gout[i * c + j] - std::exp(out[i * c + j]) * gs;
      }
    }
  }
};

template <typename T>
class NllMeanOp final : public Op<T> {
 public:
  std::string_view name() const override { return "nll_mean"; }
  bool differentiable_input(std::size_t i) const override { return i == 0; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& lp = *in[0];
    const Tensor<T>& labels = *in[1];
    if (lp.rank() != 2 || labels.size() != lp.dim(0)) {
      shape_fail(name(), "labels must have one entry per row: " +
                             two_shapes(lp.shape(), labels.shape()));
    }
    const std::size_t n = lp.dim(0), c = lp.dim(1);
    long double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += lp[i * c + as_index(labels[i], c, name())];
    out = Tensor<T>::scalar(static_cast<T>(-s / static_cast<long double>(n)));
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const std::size_t n = in[0]->dim(0), c = in[0]->dim(1);
    const T g = -gout[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      (*gin[0])[i * c + static_cast<std::size_t>((*in[1])[i])] += g;
    }
  }
};

template <typename T>
class SelectRowsOp final : public Op<T> {
 public:
  std::string_view name() const override { return "select_rows"; }
  bool differentiable_input(std::size_t i) const override { return i == 0; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& idx = *in[1];
    if (x.rank() < 1) shape_fail(name(), "scalar input");
    const std::size_t w = x.row_width();
    Shape shape = x.shape();
    shape[0] = idx.size();
    out.resize(shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::size_t r = as_index(idx[i], x.dim(0), name());
      std::copy(x.ptr() + r * w, x.ptr() + (r + 1) * w, out.ptr() + i * w);
    }
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const std::size_t w = in[0]->row_width();
    const Tensor<T>& idx = *in[1];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::size_t r = static_cast<std::size_t>(idx[i]);
      for (std::size_t j = 0; j < w; ++j) (*gin[0])[r * w + j] += gout[i * w + j];
    }
  }
};

}  // namespace

template <typename T>
NodeId matmul(Graph<T>& g, NodeId a, NodeId b, bool ta, bool tb) {
  return g.template emplace<MatMulOp<T>>({a, b}, ta, tb);
}
template <typename T>
NodeId add_bias(Graph<T>& g, NodeId x, NodeId bias) {
  return g.template emplace<AddBiasOp<T>>({x, bias});
}
template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  return g.template emplace<BinaryOp<T>>({a, b}, Binary::add);
}
template <typename T>
NodeId sub(Graph<T>& g, NodeId a, NodeId b) {
  return g.template emplace<BinaryOp<T>>({a, b}, Binary::sub);
}
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b) {
  return g.template emplace<BinaryOp<T>>({a, b}, Binary::mul);
}
template <typename T>
NodeId scale(Graph<T>& g, NodeId x, T factor) {
  return g.template emplace<ScaleOp<T>>({x}, factor);
}
template <typename T>
NodeId exp(Graph<T>& g, NodeId x) {
  return g.template emplace<ExpOp<T>>({x});
}
template <typename T>
NodeId log(Graph<T>& g, NodeId x) {
  return g.template emplace<LogOp<T>>({x});
}
template <typename T>
NodeId sum(Graph<T>& g, NodeId x) {
  return g.template emplace<ReduceOp<T>>({x}, false);
}
template <typename T>
NodeId mean(Graph<T>& g, NodeId x) {
  return g.template emplace<ReduceOp<T>>({x}, true);
}
template <typename T>
NodeId relu(Graph<T>& g, NodeId x) {
  return g.template emplace<ReluOp<T>>({x});
}
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId filter, NodeId bias) {
  return g.template emplace<Conv2dOp<T>>({x, filter, bias});
}
template <typename T>
NodeId max_pool2(Graph<T>& g, NodeId x) {
  return g.template emplace<MaxPool2Op<T>>({x});
}
template <typename T>
NodeId batch_norm_train(Graph<T>& g, NodeId x, NodeId gamma, NodeId beta, T eps) {
  return g.template emplace<BatchNormTrainOp<T>>({x, gamma, beta}, eps);
}
template <typename T>
NodeId batch_norm_eval(Graph<T>& g, NodeId x, NodeId gamma, NodeId beta,
                       NodeId running_mean, NodeId running_var, T eps) {
  return g.template emplace<BatchNormEvalOp<T>>(
      {x, gamma, beta, running_mean, running_var}, eps);
}
template <typename T>
BatchStats<T> batch_norm_stats(const Graph<T>& g, NodeId node) {
  const auto* op = dynamic_cast<const BatchNormTrainOp<T>*>(g.op(node));
  if (!op) throw GraphError("node " + std::to_string(node) + " is not a batch_norm");
  if (!g.evaluated()) throw GraphError("batch_norm_stats requested before forward");
  return {op->mean(), op->variance()};
}
template <typename T>
NodeId flatten(Graph<T>& g, NodeId x) {
  return g.template emplace<FlattenOp<T>>({x});
}
template <typename T>
NodeId l2_normalize_rows(Graph<T>& g, NodeId x, T eps) {
  return g.template emplace<L2NormalizeOp<T>>({x}, eps);
}
template <typename T>
NodeId log_softmax_rows(Graph<T>& g, NodeId x) {
  return g.template emplace<LogSoftmaxOp<T>>({x});
}
template <typename T>
NodeId nll_mean(Graph<T>& g, NodeId lp, NodeId labels) {
  return g.template emplace<NllMeanOp<T>>({lp, labels});
}
template <typename T>
NodeId select_rows(Graph<T>& g, NodeId x, NodeId idx) {
  return g.template emplace<SelectRowsOp<T>>({x, idx});
}

#define KITL_INSTANTIATE_OPS(T)                                                  \
  template NodeId matmul<T>(Graph<T>&, NodeId, NodeId, bool, bool);              \
  template NodeId add_bias<T>(Graph<T>&, NodeId, NodeId);                        \
  template NodeId add<T>(Graph<T>&, NodeId, NodeId);                             \
  template NodeId sub<T>(Graph<T>&, NodeId, NodeId);                             \
  template NodeId mul<T>(Graph<T>&, NodeId, NodeId);                             \
  template NodeId scale<T>(Graph<T>&, NodeId, T);                                \
  template NodeId exp<T>(Graph<T>&, NodeId);                                     \
  template NodeId log<T>(Graph<T>&, NodeId);                                     \
  template NodeId sum<T>(Graph<T>&, NodeId);                                     \
  template NodeId mean<T>(Graph<T>&, NodeId);                                    \
  template NodeId relu<T>(Graph<T>&, NodeId);                                    \
  template NodeId conv2d<T>(Graph<T>&, NodeId, NodeId, NodeId);                  \
  template NodeId max_pool2<T>(Graph<T>&, NodeId);                               \
  template NodeId batch_norm_train<T>(Graph<T>&, NodeId, NodeId, NodeId, T);     \
  template NodeId batch_norm_eval<T>(Graph<T>&, NodeId, NodeId, NodeId, NodeId,  \
                                     NodeId, T);                                 \
  template BatchStats<T> batch_norm_stats<T>(const Graph<T>&, NodeId);           \
  template NodeId flatten<T>(Graph<T>&, NodeId);                                 \
  template NodeId l2_normalize_rows<T>(Graph<T>&, NodeId, T);                    \
  template NodeId log_softmax_rows<T>(Graph<T>&, NodeId);                        \
  template NodeId nll_mean<T>(Graph<T>&, NodeId, NodeId);                        \
  template NodeId select_rows<T>(Graph<T>&, NodeId, NodeId);

KITL_INSTANTIATE_OPS(float)
KITL_INSTANTIATE_OPS(double)

#undef KITL_INSTANTIATE_OPS

}  // namespace kitl::ops
