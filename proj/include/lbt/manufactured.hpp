#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>

#include "lbt/fespace.hpp"
#include "lbt/physics.hpp"
#include "lbt/quadrature.hpp"

namespace lbt {

/// A transport problem with a closed-form solution; the source and inflow
/// data are derived so the solution satisfies the equation exactly.
struct ManufacturedProblem {
  CrossSectionModel model;
  std::function<double(const PhasePoint&)> exact;
  std::function<double(const PhasePoint&)> source;
  std::function<double(const PhasePoint&)> inflow;
};

namespace detail {

struct XYKey {
  double x, y;
  bool operator==(const XYKey& o) const { return x == o.x && y == o.y; }
};
struct XYHash {
  std::size_t operator()(const XYKey& k) const {
    std::uint64_t a, b;
    std::memcpy(&a, &k.x, 8);
    std::memcpy(&b, &k.y, 8);
    return std::hash<std::uint64_t>()(a * 0x9e3779b97f4a7c15ull ^ b);
  }
};

}  // namespace detail

/// Isotropic mono-energetic benchmark on (0,L)^2 with total cross-section
/// sigma and scattering ratio c: alpha = (1-c) sigma, beta = c sigma, and the
/// exact solution u(x,mu) = exp(-(x.mu)^2).
inline ManufacturedProblem mono_benchmark(double L, double sigma, double c,
                                          int scatter_nodes = 512) {
  if (!(L > 0)) throw std::invalid_argument("mono_benchmark: domain side must be positive");
  ManufacturedProblem prob;
  const double alpha = (1.0 - c) * sigma;
  const double beta = c * sigma;
  prob.model = CrossSectionModel::mono(alpha, beta);

  auto exact = [](const PhasePoint& p) {
    const double t = p.x * p.mu1 + p.y * p.mu2;
    return std::exp(-t * t);
  };
  prob.exact = exact;
  prob.inflow = exact;

  // angular average of the exact solution, cached per spatial point
  auto cache = std::make_shared<
      std::unordered_map<detail::XYKey, double, detail::XYHash>>();
  auto mean_u = [cache, scatter_nodes](double x, double y) {
    const detail::XYKey key{x, y};
    auto it = cache->find(key);
    if (it != cache->end()) return it->second;
    double sum = 0.0;
    for (int k = 0; k < scatter_nodes; ++k) {
      const double psi = (k + 0.5) * 2.0 * M_PI / scatter_nodes;
      const double t = x * std::cos(psi) + y * std::sin(psi);
      sum += std::exp(-t * t);
    }
    const double v = sum / scatter_nodes;  // (1/2pi) integral
    (*cache)[key] = v;
    return v;
  };

  prob.source = [mean_u, sigma, beta](const PhasePoint& p) {
    const double t = p.x * p.mu1 + p.y * p.mu2;
    const double u = std::exp(-t * t);
    const double streaming = -2.0 * t * u;  // mu . grad u
    return streaming + sigma * u - beta * mean_u(p.x, p.y);
  };
  return prob;
}

/// Poly-energetic Compton benchmark: water electron density, Klein-Nishina
/// kernel, exact solution exp(-kk (E/E_max x.mu)^2) psi(E/E_max) with the
/// mollifier psi(s) = exp(-1/(1-s^2)).
inline ManufacturedProblem compton_benchmark(const EnergyMesh& energy, double alpha = 0.0,
                                             bool truncate_beta = false,
                                             double kk = 0.16,
                                             const ComptonData& data = {}) {
  ManufacturedProblem prob;
  prob.model = CrossSectionModel::compton(data, energy, alpha, truncate_beta);
  const double e_max = energy.e_max();

  auto mollifier = [](double s) {
    const double s2 = s * s;
    if (s2 >= 1.0) return 0.0;
    return std::exp(-1.0 / (1.0 - s2));
  };
  auto exact = [kk, e_max, mollifier](const PhasePoint& p) {
    const double t = (p.E / e_max) * (p.x * p.mu1 + p.y * p.mu2);
    return std::exp(-kk * t * t) * mollifier(p.E / e_max);
  };
  prob.exact = exact;
  prob.inflow = exact;

  const CrossSectionModel model = prob.model;
  const double me = data.electron_rest_energy;
  const double re = data.classical_electron_radius;
  const double rho = data.electron_density;

  // in-scatter integral: incoming energies collapse onto the kinematic root
  // E'(E, cos tau) with Jacobian (E'/E)^2, truncated to E' <= E_max
  auto scatter_u = [exact, me, re, e_max](const PhasePoint& p) {
    const double thresh = 1.0 - me * (1.0 / p.E - 1.0 / e_max);
    if (thresh >= 1.0) return 0.0;
    const double lo = std::max(thresh, -1.0);
    const double tau_star = std::acos(lo);
    const double psi = std::atan2(p.mu2, p.mu1);
    // composite Gauss over the admissible angular window; the exact solution
    // can be sharply peaked in angle, so use short panels
    const int panels = std::max(4, static_cast<int>(std::ceil(tau_star / (M_PI / 16))));
    const QuadRule1D base = gauss_legendre(8);
    double sum = 0.0;
    for (int side = -1; side <= 1; side += 2)
      for (int pnl = 0; pnl < panels; ++pnl) {
        const double a = tau_star * pnl / panels, b = tau_star * (pnl + 1) / panels;
        for (std::size_t kq = 0; kq < base.size(); ++kq) {
          const double tau = side * (0.5 * (b - a) * base.points[kq] + 0.5 * (a + b));
          const double w = 0.5 * (b - a) * base.weights[kq];
          const double ctau = std::cos(tau);
          const double ein = compton_inverse_kinematics(p.E, ctau, me);
          if (!std::isfinite(ein) || ein > e_max) continue;
          const double jac = (ein / p.E) * (ein / p.E);
          const double kern = klein_nishina(ein, p.E, ctau, re);
          const double mu1p = std::cos(psi + tau), mu2p = std::sin(psi + tau);
          sum += w * kern * jac * exact({p.x, p.y, mu1p, mu2p, ein});
        }
      }
    return sum;
  };

  prob.source = [exact, scatter_u, model, kk, e_max, rho](const PhasePoint& p) {
    const double t = p.x * p.mu1 + p.y * p.mu2;
    const double s = p.E / e_max;
    const double u = exact(p);
    const double streaming = -2.0 * kk * s * s * t * u;
    const double sig = model.alpha(p.x, p.y, p.E) + model.beta(p.x, p.y, p.E);
    return streaming + sig * u - rho * scatter_u(p);
  };
  return prob;
}

}  // namespace lbt
