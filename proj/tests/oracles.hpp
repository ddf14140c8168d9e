#pragma once

// Independent reference computations used by the tests. Nothing here calls
// into the library's evaluation paths.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace kanmix::oracle {

/// Textbook recursive Cox-de Boor with half-open degree-0 indicators.
inline double cox_de_boor(const std::vector<double>& t, std::size_t i, int k, double x) {
  if (k == 0) return (t[i] <= x && x < t[i + 1]) ? 1.0 : 0.0;
  double left = 0.0, right = 0.0;
  const double d1 = t[i + k] - t[i];
  const double d2 = t[i + k + 1] - t[i + 1];
  if (d1 > 0) left = (x - t[i]) / d1 * cox_de_boor(t, i, k - 1, x);
  if (d2 > 0) right = (t[i + k + 1] - x) / d2 * cox_de_boor(t, i + 1, k - 1, x);
  return left + right;
}

/// Uniform extended knots built from scratch: x_min + (j - k) * h.
inline std::vector<double> uniform_knots(int k, int g, double lo, double hi) {
  std::vector<double> t(static_cast<std::size_t>(g + 2 * k + 1));
  const double h = (hi - lo) / g;
  for (std::size_t j = 0; j < t.size(); ++j) t[j] = lo + (static_cast<double>(j) - k) * h;
  return t;
}

inline std::vector<double> basis(int k, int g, double lo, double hi, double x) {
  const auto t = uniform_knots(k, g, lo, hi);
  std::vector<double> out(static_cast<std::size_t>(g + k));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cox_de_boor(t, i, k, x);
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

/// y_j = sum_i w[j][i] * (silu(x_i) + sum_t c[j][i][t] * B_t(x_i)), evaluated
/// edge by edge with the recursive basis.
inline std::vector<double> kan_layer(const std::vector<double>& w, const std::vector<double>& c,
                                     std::size_t n, std::size_t m, int k, int g, double lo,
                                     double hi, const std::vector<double>& x) {
  const std::size_t nb = static_cast<std::size_t>(g + k);
  std::vector<double> y(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto b = basis(k, g, lo, hi, x[i]);
      double spline = 0.0;
      for (std::size_t t = 0; t < nb; ++t) spline += c[(j * n + i) * nb + t] * b[t];
      y[j] += w[j * n + i] * (silu(x[i]) + spline);
    }
  }
  return y;
}

inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_error(double a, double b, double floor = 1e-8) {
  const double d = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / d;
}

}  // namespace kanmix::oracle
