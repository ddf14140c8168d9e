#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kanmix/bspline.hpp"
#include "kanmix/errors.hpp"
#include "kanmix/rng.hpp"
#include "kanmix/tensor.hpp"

namespace kanmix {

/// Logistic function, evaluated without overflow for any finite x.
template <typename Real>
Real sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <typename Real>
Real silu(Real x) {
  return x * sigmoid(x);
}

template <typename Real>
Real silu_derivative(Real x) {
  const Real s = sigmoid(x);
  return s * (Real(1) + x * (Real(1) - s));
}

namespace detail {

template <typename Real>
inline void axpy(Real alpha, const Real* x, Real* y, std::size_t n) {
  for (std::size_t p = 0; p < n; ++p) y[p] += alpha * x[p];
}

template <typename Real>
inline Real dot(const Real* a, const Real* b, std::size_t n) {
  Real acc[8] = {};
  std::size_t p = 0;
  for (; p + 8 <= n; p += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[p + l] * b[p + l];
  }
  for (std::size_t l = 0; p < n; ++p, ++l) acc[l] += a[p] * b[p];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// y += s * a[0] + sum_q b[q] * a[q+1], where a[q] are rows of length n
// starting at `a0` and `aq` respectively. K1 is the number of local bases;
// 0 selects the runtime count `k1`.
template <int K1, typename Real>
inline void edge_forward(Real s, const Real* a0, const Real* b, const Real* aq, std::size_t k1,
                         std::size_t n, Real* y) {
  const std::size_t kk = K1 > 0 ? static_cast<std::size_t>(K1) : k1;
  for (std::size_t j = 0; j < n; ++j) {
    Real t = s * a0[j];
    for (std::size_t q = 0; q < kk; ++q) t += b[q] * aq[q * n + j];
    y[j] += t;
  }
}

// Gradient of one edge block: da0 += s * g, daq += b[q] * g, and returns
// g . (ds * a0 + sum_q db[q] * aq). `t` is scratch of length n.
template <int K1, typename Real>
inline Real edge_backward(Real s, Real ds, const Real* b, const Real* db, const Real* a0,
                          const Real* aq, Real* da0, Real* daq, std::size_t k1, std::size_t n,
                          const Real* g, Real* t) {
  const std::size_t kk = K1 > 0 ? static_cast<std::size_t>(K1) : k1;
  axpy(s, g, da0, n);
  for (std::size_t q = 0; q < kk; ++q) axpy(b[q], g, daq + q * n, n);
  for (std::size_t j = 0; j < n; ++j) t[j] = ds * a0[j];
  for (std::size_t q = 0; q < kk; ++q) axpy(db[q], aq + q * n, t, n);
  return dot(t, g, n);
}

}  // namespace detail

/// A layer whose every input->output edge carries its own learnable
/// activation phi(x) = w * (silu(x) + sum_t c_t B_t(x)).
///
/// Output j is the sum of the edge activations from all inputs:
///   y_j = sum_i w[j,i] * (silu(x_i) + sum_t c[j,i,t] B_t(x_i)).
/// All edges share one spline grid. Leading input axes are batch axes.
///
/// Internally each input expands to a feature block [silu(x), B_0(x) .. B_{K-1}(x)]
/// of which only silu and k+1 bases are nonzero. The edge parameters fold into
/// a matrix A[i*(K+1) + q, j] = w[j,i] * [1, c[j,i,:]]_q, and each nonzero
/// feature adds one scaled row of A to the output. Every output sums its terms
/// in the same order whatever the batch size.
template <typename Real>
class KanLinear {
 public:
  KanLinear() = default;

  KanLinear(std::size_t in_features, std::size_t out_features, SplineGrid<Real> grid)
      : in_(in_features),
        out_(out_features),
        grid_(std::move(grid)),
        w_(Shape{checked(out_features), checked(in_features)}),
        c_(Shape{out_features, in_features, grid_.basis_count()}) {
    w_.enable_grad();
    c_.enable_grad();
  }

  /// Random initialization fully determined by `seed`:
  /// w ~ U[-1/sqrt(n), 1/sqrt(n)], c ~ N(0, (0.1/sqrt(n))^2).
  static KanLinear init(std::size_t in_features, std::size_t out_features,
                        SplineGrid<Real> grid, std::uint64_t seed) {
    KanLinear layer(in_features, out_features, std::move(grid));
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    for (auto& v : layer.w_.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
    const double sd = 0.1 / std::sqrt(static_cast<double>(in_features));
    for (auto& v : layer.c_.data()) v = static_cast<Real>(sd * rng.normal());
    return layer;
  }

  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }
  const SplineGrid<Real>& grid() const noexcept { return grid_; }
  std::size_t param_count() const noexcept { return w_.numel() + c_.numel(); }

  Tensor<Real>& weight() noexcept { return w_; }
  Tensor<Real>& coeffs() noexcept { return c_; }
  const Tensor<Real>& weight() const noexcept { return w_; }
  const Tensor<Real>& coeffs() const noexcept { return c_; }

  void zero_grad() {
    w_.zero_grad();
    c_.zero_grad();
  }

  Tensor<Real> forward(const Tensor<Real>& x);

  /// Accumulates parameter gradients for the most recent forward call and
  /// returns the gradient with respect to that call's input.
  Tensor<Real> backward(const Tensor<Real>& dy);

  void clear_cache() {
    cached_ = false;
    silu_ = {};
    dsilu_ = {};
    first_ = {};
    basis_ = {};
    dbasis_ = {};
  }

  std::size_t cache_bytes() const {
    return (silu_.size() + dsilu_.size() + basis_.size() + dbasis_.size() + folded_.size()) *
               sizeof(Real) +
           first_.size() * sizeof(long);
  }

 private:
  static std::size_t checked(std::size_t d) {
    if (d == 0) throw InvalidDim("KanLinear dimensions must be >= 1");
    return d;
  }

  std::size_t block() const { return grid_.basis_count() + 1; }

  void fold_parameters();

  template <typename F>
  void dispatch_order(F& run) const {
    switch (grid_.order()) {
      case 1: run.template operator()<2>(); break;
      case 2: run.template operator()<3>(); break;
      case 3: run.template operator()<4>(); break;
      case 4: run.template operator()<5>(); break;
      default: run.template operator()<0>(); break;
    }
  }

  std::size_t in_ = 0;
  std::size_t out_ = 0;
  SplineGrid<Real> grid_;
  Tensor<Real> w_;
  Tensor<Real> c_;

  // Cache of the last forward call.
  bool cached_ = false;
  Shape in_shape_;
  std::size_t rows_ = 0;
  std::vector<Real> silu_;    // [rows, in]
  std::vector<Real> dsilu_;   // [rows, in]
  std::vector<long> first_;   // [rows, in]; window start, within [0, K - k - 1]
  std::vector<Real> basis_;   // [rows, in, k+1]; bases first .. first+k
  std::vector<Real> dbasis_;  // [rows, in, k+1]
  std::vector<Real> folded_;  // [in * (K+1), out]
};

template <typename Real>
void KanLinear<Real>::fold_parameters() {
  const std::size_t nb = grid_.basis_count();
  const std::size_t f = block();
  folded_.resize(in_ * f * out_);
  for (std::size_t j = 0; j < out_; ++j) {
    for (std::size_t i = 0; i < in_; ++i) {
      const Real w = w_[j * in_ + i];
      const Real* c = c_.data().data() + (j * in_ + i) * nb;
      Real* a = folded_.data() + i * f * out_ + j;
      a[0] = w;
      for (std::size_t t = 0; t < nb; ++t) a[(1 + t) * out_] = w * c[t];
    }
  }
}

template <typename Real>
Tensor<Real> KanLinear<Real>::forward(const Tensor<Real>& x) {
  if (x.rank() == 0 || x.last_dim() != in_) {
    throw ShapeMismatch("KanLinear expects last axis " + std::to_string(in_) + ", got " +
                        shape_str(x.shape()));
  }
  const long nb = static_cast<long>(grid_.basis_count());
  const std::size_t f = block();
  const std::size_t k1 = static_cast<std::size_t>(grid_.order()) + 1;
  rows_ = x.numel() / in_;
  in_shape_ = x.shape();

  silu_.resize(rows_ * in_);
  dsilu_.resize(rows_ * in_);
  first_.resize(rows_ * in_);
  basis_.resize(rows_ * in_ * k1);
  dbasis_.resize(rows_ * in_ * k1);

  Real local[SplineGrid<Real>::kMaxOrder + 1];
  Real dlocal[SplineGrid<Real>::kMaxOrder + 1];
  for (std::size_t e = 0; e < rows_ * in_; ++e) {
    const Real xv = x[e];
    const Real sg = sigmoid(xv);
    silu_[e] = xv * sg;
    dsilu_[e] = sg * (Real(1) + xv * (Real(1) - sg));
    Real* vals = basis_.data() + e * k1;
    Real* dvals = dbasis_.data() + e * k1;
    long first = 0;
    if (grid_.eval_local(xv, first, std::span<Real>(local, k1), std::span<Real>(dlocal, k1))) {
      // Shift the window of k+1 bases so it lies inside [0, K); bases that
      // fall off the ends read as zero.
      const long start = std::clamp(first, 0L, nb - static_cast<long>(k1));
      for (std::size_t q = 0; q < k1; ++q) {
        const long src = start + static_cast<long>(q) - first;
        const bool ok = src >= 0 && src < static_cast<long>(k1);
        vals[q] = ok ? local[src] : Real(0);
        dvals[q] = ok ? dlocal[src] : Real(0);
      }
      first = start;
    } else {
      first = 0;
      std::fill(vals, vals + k1, Real(0));
      std::fill(dvals, dvals + k1, Real(0));
    }
    first_[e] = first;
  }

  fold_parameters();

  Shape out_shape = x.shape();
  out_shape.back() = out_;
  Tensor<Real> y(std::move(out_shape), Real(0));
  auto run = [&]<int K1>() {
    for (std::size_t r = 0; r < rows_; ++r) {
      Real* yr = y.data().data() + r * out_;
      for (std::size_t i = 0; i < in_; ++i) {
        const std::size_t e = r * in_ + i;
        const Real* a = folded_.data() + i * f * out_;
        detail::edge_forward<K1>(silu_[e], a, basis_.data() + e * k1,
                                 a + (1 + static_cast<std::size_t>(first_[e])) * out_, k1, out_, yr);
      }
    }
  };
  dispatch_order(run);
  cached_ = true;
  return y;
}

template <typename Real>
Tensor<Real> KanLinear<Real>::backward(const Tensor<Real>& dy) {
  if (!cached_) throw StaleCache("KanLinear::backward called without a preceding forward");
  if (dy.numel() != rows_ * out_ || dy.last_dim() != out_) {
    throw ShapeMismatch("KanLinear::backward: upstream gradient shape " + shape_str(dy.shape()));
  }
  const std::size_t nb = grid_.basis_count();
  const std::size_t f = block();
  const std::size_t k1 = static_cast<std::size_t>(grid_.order()) + 1;

  // dA[p, :] = sum_r feature[r, p] * dy[r, :], plus the input gradient
  // dx = silu'(x) * (A[silu] . dy) + sum_t B'_t(x) * (A[t] . dy).
  std::vector<Real> dfold(in_ * f * out_, Real(0));
  Tensor<Real> dx(in_shape_);
  std::vector<Real> scratch(out_);
  auto run = [&]<int K1>() {
    for (std::size_t r = 0; r < rows_; ++r) {
      const Real* g = dy.data().data() + r * out_;
      for (std::size_t i = 0; i < in_; ++i) {
        const std::size_t e = r * in_ + i;
        const std::size_t off = (1 + static_cast<std::size_t>(first_[e])) * out_;
        const Real* a = folded_.data() + i * f * out_;
        Real* da = dfold.data() + i * f * out_;
        dx[e] = detail::edge_backward<K1>(silu_[e], dsilu_[e], basis_.data() + e * k1,
                                          dbasis_.data() + e * k1, a, a + off, da, da + off, k1,
                                          out_, g, scratch.data());
      }
    }
  };
  dispatch_order(run);

  // Unfold: A0 = w, At = w * c_t.
  auto wg = w_.grad();
  auto cg = c_.grad();
  for (std::size_t j = 0; j < out_; ++j) {
    for (std::size_t i = 0; i < in_; ++i) {
      const std::size_t edge = j * in_ + i;
      const Real* da = dfold.data() + i * f * out_ + j;
      const Real* c = c_.data().data() + edge * nb;
      const Real w = w_[edge];
      Real acc = da[0];
      for (std::size_t t = 0; t < nb; ++t) {
        const Real d = da[(1 + t) * out_];
        acc += d * c[t];
        cg[edge * nb + t] += d * w;
      }
      wg[edge] += acc;
    }
  }
  return dx;
}

}  // namespace kanmix
