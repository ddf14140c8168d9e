#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kanmix/errors.hpp"

namespace kanmix {

/// Uniform B-spline knot vector of order k over [x_min, x_max] with G interior
/// intervals, padded by k knots at the same spacing on both sides.
///
/// Knot j sits at x_min + (j - k) * h for j = 0 .. G + 2k, h = (x_max - x_min) / G.
/// Basis function i (0 <= i < G + k) is supported on [t_i, t_{i+k+1}).
template <typename Real>
class SplineGrid {
 public:
  static constexpr int kMaxOrder = 30;

  SplineGrid() : SplineGrid(3, 5, Real(-1), Real(1)) {}

  SplineGrid(int order, int grid_size, Real x_min, Real x_max)
      : order_(order), grid_size_(grid_size), x_min_(x_min), x_max_(x_max) {
    if (order < 1 || order > kMaxOrder) {
      throw InvalidGrid("spline order must be in [1, " + std::to_string(kMaxOrder) + "], got " +
                        std::to_string(order));
    }
    if (grid_size < 1) {
      throw InvalidGrid("grid size must be >= 1, got " + std::to_string(grid_size));
    }
    if (!(x_min < x_max) || !std::isfinite(x_min) || !std::isfinite(x_max)) {
      throw InvalidGrid("grid range must satisfy x_min < x_max");
    }
    step_ = (x_max - x_min) / static_cast<Real>(grid_size);
    knots_.resize(static_cast<std::size_t>(grid_size + 2 * order + 1));
    for (std::size_t j = 0; j < knots_.size(); ++j) knots_[j] = knot(static_cast<long>(j));
  }

  int order() const noexcept { return order_; }
  int grid_size() const noexcept { return grid_size_; }
  Real x_min() const noexcept { return x_min_; }
  Real x_max() const noexcept { return x_max_; }
  Real step() const noexcept { return step_; }
  std::size_t basis_count() const noexcept {
    return static_cast<std::size_t>(grid_size_ + order_);
  }
  std::span<const Real> knots() const noexcept { return knots_; }

  /// Knot position for any integer index, including virtual ones beyond the
  /// stored vector. Stored knots use the same expression, so they agree exactly.
  Real knot(long j) const noexcept {
    return x_min_ + static_cast<Real>(j - order_) * step_;
  }

  friend bool operator==(const SplineGrid& a, const SplineGrid& b) {
    return a.order_ == b.order_ && a.grid_size_ == b.grid_size_ && a.x_min_ == b.x_min_ &&
           a.x_max_ == b.x_max_;
  }

  /// Evaluates the k+1 basis functions that can be nonzero at x, and their
  /// derivatives when `derivs` is non-empty. Entry r belongs to basis index
  /// `first + r`; indices outside [0, basis_count) must be ignored by callers.
  /// Returns false when x lies outside the extended knot span (all bases zero).
  ///
  /// Knot ties use the right-limit convention; the single exception is
  /// x == x_max, which takes the left limit so the closed range keeps its
  /// partition of unity.
  bool eval_local(Real x, long& first, std::span<Real> values, std::span<Real> derivs) const;

 private:
  int order_;
  int grid_size_;
  Real x_min_;
  Real x_max_;
  Real step_{};
  std::vector<Real> knots_;
};

template <typename Real>
SplineGrid<Real> make_grid(int order, int grid_size, Real x_min, Real x_max) {
  return SplineGrid<Real>(order, grid_size, x_min, x_max);
}

namespace detail {

// Cox-de Boor on uniform knots in the local coordinate u in [0, 1] of the
// current span. After degree j, n[r] holds B_{mu-j+r, j}(x); every
// denominator is j * h, so only multiplications remain. `lower` receives
// the degree k-1 values.
template <int K, typename Real>
inline void uniform_basis(Real u, int k_runtime, Real* n, Real* lower) {
  const int k = K > 0 ? K : k_runtime;
  n[0] = Real(1);
  for (int j = 1; j <= k; ++j) {
    if (j == k) {
      for (int r = 0; r < k; ++r) lower[r] = n[r];
    }
    const Real inv_j = Real(1) / static_cast<Real>(j);
    Real saved = 0;
    for (int r = 0; r < j; ++r) {
      const Real temp = n[r] * inv_j;
      n[r] = saved + (static_cast<Real>(r + 1) - u) * temp;
      saved = (u + static_cast<Real>(j - r - 1)) * temp;
    }
    n[j] = saved;
  }
}

}  // namespace detail

template <typename Real>
bool SplineGrid<Real>::eval_local(Real x, long& first, std::span<Real> values,
                                  std::span<Real> derivs) const {
  const int k = order_;
  if (!(x >= knots_.front()) || !(x < knots_.back())) return false;

  // Span mu with t_mu <= x < t_{mu+1}, and the offset u inside it.
  const long last_span = static_cast<long>(grid_size_) + 2L * k - 1;
  Real s = (x - knots_.front()) / step_;
  long mu = static_cast<long>(s);
  if (x == x_max_) mu = grid_size_ + k - 1;
  mu = std::clamp(mu, 0L, last_span);
  const Real u = s - static_cast<Real>(mu);

  Real n[kMaxOrder + 2];
  Real lower[kMaxOrder + 2];
  switch (k) {
    case 1: detail::uniform_basis<1>(u, k, n, lower); break;
    case 2: detail::uniform_basis<2>(u, k, n, lower); break;
    case 3: detail::uniform_basis<3>(u, k, n, lower); break;
    case 4: detail::uniform_basis<4>(u, k, n, lower); break;
    default: detail::uniform_basis<0>(u, k, n, lower); break;
  }
  first = mu - k;
  for (int r = 0; r <= k; ++r) values[static_cast<std::size_t>(r)] = n[r];

  if (!derivs.empty()) {
    // B'_{i,k} = k * (B_{i,k-1} / (t_{i+k} - t_i) - B_{i+1,k-1} / (t_{i+k+1} - t_{i+1})).
    // lower[r] holds B_{mu-k+1+r, k-1} for r = 0 .. k-1. Uniform knots make
    // both denominators k * h, so the prefactor collapses to 1 / h.
    const Real scale = Real(1) / step_;
    for (int r = 0; r <= k; ++r) {
      const Real a = r >= 1 ? lower[r - 1] : Real(0);
      const Real b = r < k ? lower[r] : Real(0);
      derivs[static_cast<std::size_t>(r)] = scale * (a - b);
    }
  }
  return true;
}

/// Full basis vector B_0(x) .. B_{G+k-1}(x).
template <typename Real>
std::vector<Real> basis_eval(const SplineGrid<Real>& grid, Real x) {
  const auto k = static_cast<std::size_t>(grid.order());
  std::vector<Real> out(grid.basis_count(), Real(0));
  std::vector<Real> local(k + 1);
  long first = 0;
  if (!grid.eval_local(x, first, local, {})) return out;
  for (std::size_t r = 0; r <= k; ++r) {
    const long idx = first + static_cast<long>(r);
    if (idx >= 0 && idx < static_cast<long>(out.size())) out[static_cast<std::size_t>(idx)] = local[r];
  }
  return out;
}

/// Full derivative vector dB_0/dx .. dB_{G+k-1}/dx.
template <typename Real>
std::vector<Real> basis_derivative(const SplineGrid<Real>& grid, Real x) {
  const auto k = static_cast<std::size_t>(grid.order());
  std::vector<Real> out(grid.basis_count(), Real(0));
  std::vector<Real> local(k + 1), dlocal(k + 1);
  long first = 0;
  if (!grid.eval_local(x, first, local, dlocal)) return out;
  for (std::size_t r = 0; r <= k; ++r) {
    const long idx = first + static_cast<long>(r);
    if (idx >= 0 && idx < static_cast<long>(out.size())) out[static_cast<std::size_t>(idx)] = dlocal[r];
  }
  return out;
}

}  // namespace kanmix
