#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "kanmix/errors.hpp"

namespace kanmix {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array with an optional gradient buffer of identical size.
///
/// The last axis is contiguous: element (i0, ..., i_{r-1}) lives at
/// sum_a i_a * prod_{b>a} shape[b].
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<Real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeMismatch("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t last_dim() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  std::vector<Real>& storage() noexcept { return data_; }
  const std::vector<Real>& storage() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  bool has_grad() const noexcept { return grad_.has_value(); }
  void enable_grad() {
    if (!grad_) grad_.emplace(data_.size(), Real(0));
  }
  std::span<Real> grad() {
    enable_grad();
    return *grad_;
  }
  std::span<const Real> grad() const {
    if (!grad_) throw StaleCache("tensor has no gradient buffer");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), Real(0));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw ShapeMismatch("tensor axes must be positive: " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<Real> data_;
  std::optional<std::vector<Real>> grad_;
};

template <typename Real>
bool all_finite(const Tensor<Real>& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](Real v) { return std::isfinite(v); });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& t, Shape new_shape) {
  if (shape_numel(new_shape) != t.numel()) {
    throw ShapeMismatch("cannot reshape " + shape_str(t.shape()) + " to " +
                        shape_str(new_shape));
  }
  return Tensor<Real>(std::move(new_shape), t.storage());
}

/// Swaps the final two axes; element (..., i, j) of the result is (..., j, i)
/// of the input.
template <typename Real>
Tensor<Real> transpose_last_two(const Tensor<Real>& t) {
  if (t.rank() < 2) throw RankError("transpose_last_two needs rank >= 2, got " +
                                    std::to_string(t.rank()));
  const std::size_t rows = t.dim(t.rank() - 2);
  const std::size_t cols = t.dim(t.rank() - 1);
  const std::size_t batch = t.numel() / (rows * cols);
  Shape out_shape = t.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor<Real> out(std::move(out_shape));
  const Real* src = t.data().data();
  Real* dst = out.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* s = src + b * rows * cols;
    Real* d = dst + b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) d[j * rows + i] = s[i * cols + j];
  }
  return out;
}

namespace detail {
// Splits a shape around `axis` into (outer, axis length, inner) extents.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& shape,
                                                                    std::size_t axis) {
  if (axis >= shape.size()) {
    throw RankError("axis " + std::to_string(axis) + " out of range for shape " +
                    shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= shape[a];
  for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];
  return {outer, shape[axis], inner};
}
}  // namespace detail

/// Arithmetic mean over `axis`; the axis is removed from the result. Sums run
/// in index order so results are reproducible bit-for-bit.
template <typename Real>
Tensor<Real> mean_axis(const Tensor<Real>& t, std::size_t axis) {
  auto [outer, len, inner] = detail::split_axis(t.shape(), axis);
  Shape out_shape = t.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<Real> out(std::move(out_shape));
  const Real inv = Real(1) / static_cast<Real>(len);
  const Real* src = t.data().data();
  Real* dst = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    Real* d = dst + o * inner;
    for (std::size_t l = 0; l < len; ++l) {
      const Real* s = src + (o * len + l) * inner;
      for (std::size_t i = 0; i < inner; ++i) d[i] += s[i];
    }
    for (std::size_t i = 0; i < inner; ++i) d[i] *= inv;
  }
  return out;
}

/// Gradient of mean_axis: spreads each upstream value evenly over the axis.
template <typename Real>
Tensor<Real> mean_axis_backward(const Tensor<Real>& grad_out, const Shape& input_shape,
                                std::size_t axis) {
  auto [outer, len, inner] = detail::split_axis(input_shape, axis);
  if (grad_out.numel() != outer * inner) {
    throw ShapeMismatch("mean_axis_backward: upstream gradient has wrong size");
  }
  Tensor<Real> dx(input_shape);
  const Real inv = Real(1) / static_cast<Real>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i)
        dx[(o * len + l) * inner + i] = grad_out[o * inner + i] * inv;
  return dx;
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename Real>
struct LayerNormGrads {
  Tensor<Real> dx;
  std::vector<Real> dgain;
  std::vector<Real> dbias;
};

/// Normalizes every last-axis slice with its biased variance, then applies
/// gain and bias.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, std::span<const Real> gain,
                        std::span<const Real> bias, Real eps = Real(kLayerNormEps)) {
  const std::size_t d = x.last_dim();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeMismatch("layer_norm: gain/bias length must equal last axis " +
                        std::to_string(d));
  }
  Tensor<Real> y(x.shape());
  const std::size_t rows = x.numel() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xs = x.data().data() + r * d;
    Real* ys = y.data().data() + r * d;
    Real mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xs[i];
    mean /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xs[i] - mean) * (xs[i] - mean);
    var /= static_cast<Real>(d);
    const Real rstd = Real(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) ys[i] = gain[i] * (xs[i] - mean) * rstd + bias[i];
  }
  return y;
}

/// Backward companion of layer_norm. Recomputes slice statistics from `x`.
template <typename Real>
LayerNormGrads<Real> layer_norm_backward(const Tensor<Real>& x, std::span<const Real> gain,
                                         const Tensor<Real>& dy,
                                         Real eps = Real(kLayerNormEps)) {
  const std::size_t d = x.last_dim();
  if (gain.size() != d) throw ShapeMismatch("layer_norm_backward: gain length");
  if (dy.shape() != x.shape()) throw ShapeMismatch("layer_norm_backward: dy shape");
  LayerNormGrads<Real> g{Tensor<Real>(x.shape()), std::vector<Real>(d, 0),
                         std::vector<Real>(d, 0)};
  std::vector<Real> xhat(d);
  const std::size_t rows = x.numel() / d;
  const Real inv_d = Real(1) / static_cast<Real>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xs = x.data().data() + r * d;
    const Real* dys = dy.data().data() + r * d;
    Real* dxs = g.dx.data().data() + r * d;
    Real mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xs[i];
    mean *= inv_d;
    Real var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xs[i] - mean) * (xs[i] - mean);
    var *= inv_d;
    const Real rstd = Real(1) / std::sqrt(var + eps);
    Real sum_g = 0, sum_gx = 0;
    for (std::size_t i = 0; i < d; ++i) {
      xhat[i] = (xs[i] - mean) * rstd;
      const Real gi = dys[i] * gain[i];
      sum_g += gi;
      sum_gx += gi * xhat[i];
      g.dgain[i] += dys[i] * xhat[i];
      g.dbias[i] += dys[i];
    }
    // dx = rstd * (g - mean(g) - xhat * mean(g * xhat))
    for (std::size_t i = 0; i < d; ++i) {
      dxs[i] = rstd * (dys[i] * gain[i] - sum_g * inv_d - xhat[i] * sum_gx * inv_d);
    }
  }
  return g;
}

/// Learnable layer norm over the last axis; caches its input for backward.
template <typename Real>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim, Real eps = Real(kLayerNormEps))
      : gain_(Shape{dim}, Real(1)), bias_(Shape{dim}, Real(0)), eps_(eps) {
    gain_.enable_grad();
    bias_.enable_grad();
  }

  std::size_t dim() const { return gain_.numel(); }
  Tensor<Real>& gain() { return gain_; }
  Tensor<Real>& bias() { return bias_; }
  const Tensor<Real>& gain() const { return gain_; }
  const Tensor<Real>& bias() const { return bias_; }

  Tensor<Real> forward(const Tensor<Real>& x) {
    input_ = x;
    return layer_norm<Real>(x, gain_.data(), bias_.data(), eps_);
  }

  /// Accumulates gain/bias gradients and returns the input gradient.
  Tensor<Real> backward(const Tensor<Real>& dy) {
    if (!input_) throw StaleCache("LayerNorm::backward called before forward");
    auto g = layer_norm_backward<Real>(*input_, gain_.data(), dy, eps_);
    auto gg = gain_.grad();
    auto bg = bias_.grad();
    for (std::size_t i = 0; i < dim(); ++i) {
      gg[i] += g.dgain[i];
      bg[i] += g.dbias[i];
    }
    return std::move(g.dx);
  }

  void clear_cache() { input_.reset(); }
  std::size_t cache_bytes() const { return input_ ? input_->numel() * sizeof(Real) : 0; }

 private:
  Tensor<Real> gain_;
  Tensor<Real> bias_;
  Real eps_ = Real(kLayerNormEps);
  std::optional<Tensor<Real>> input_;
};

}  // namespace kanmix
