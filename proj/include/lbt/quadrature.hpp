#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace lbt {

/// One-dimensional quadrature rule on a reference or physical interval.
struct QuadRule1D {
  std::vector<double> points;
  std::vector<double> weights;

  std::size_t size() const { return points.size(); }
};

namespace detail {

/// Legendre polynomial P_n and its derivative at x, by the three-term recurrence.
inline std::pair<double, double> legendre_with_derivative(int n, double x) {
  double p0 = 1.0, p1 = x;
  if (n == 0) return {1.0, 0.0};
  for (int k = 2; k <= n; ++k) {
    const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
    p0 = p1;
    p1 = p2;
  }
  const double dp = n * (x * p1 - p0) / (x * x - 1.0);
  return {p1, dp};
}

}  // namespace detail

/// Value of the Legendre polynomial P_n(x).
inline double legendre(int n, double x) {
  if (n == 0) return 1.0;
  double p0 = 1.0, p1 = x;
  for (int k = 2; k <= n; ++k) {
    const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
    p0 = p1;
    p1 = p2;
  }
  return p1;
}

/// Derivative P_n'(x), including the endpoint limits P_n'(+-1).
inline double legendre_derivative(int n, double x) {
  if (n == 0) return 0.0;
  if (std::abs(std::abs(x) - 1.0) < 1e-14) {
    const double at_one = 0.5 * n * (n + 1.0);
    if (x > 0) return at_one;
    return (n % 2 == 0) ? -at_one : at_one;  // P_n'(-1) = (-1)^(n-1) n(n+1)/2
  }
  return detail::legendre_with_derivative(n, x).second;
}

/// n-point Gauss-Legendre rule on [-1,1]; exact for polynomials of degree 2n-1.
inline QuadRule1D gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: need at least one point");
  QuadRule1D rule;
  rule.points.resize(n);
  rule.weights.resize(n);
  const int m = (n + 1) / 2;
  for (int i = 0; i < m; ++i) {
    // Chebyshev initial guess, then Newton
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double p, dp;
    for (int it = 0; it < 100; ++it) {
      std::tie(p, dp) = detail::legendre_with_derivative(n, x);
      const double dx = p / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    std::tie(p, dp) = detail::legendre_with_derivative(n, x);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.points[i] = -x;
    rule.weights[i] = w;
    rule.points[n - 1 - i] = x;
    rule.weights[n - 1 - i] = w;
  }
  return rule;
}

/// Gauss-Legendre rule mapped onto [a,b].
inline QuadRule1D gauss_legendre(int n, double a, double b) {
  QuadRule1D ref = gauss_legendre(n);
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ref.points[i] = mid + half * ref.points[i];
    ref.weights[i] *= half;
  }
  return ref;
}

/// Extra quadrature points added on top of the polynomial-exactness baseline,
/// for non-polynomial data (mapped angular elements, scattering kernels,
/// manufactured sources).
struct QuadratureConfig {
  int spatial_extra = 0;
  int angular_extra = 2;
  int energy_extra = 0;
  int face_extra = 0;
  /// extra points (per axis) when assembling load vectors from closed-form data
  int load_extra = 2;

  int spatial_points(int p) const { return p + 2 + spatial_extra; }
  int angular_points(int q) const { return std::max(q + 2 + angular_extra, 4); }
  int energy_points(int r) const { return r + 2 + energy_extra; }
  int face_points(int p) const { return p + 2 + face_extra; }
};

}  // namespace lbt
