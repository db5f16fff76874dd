#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_map>
#include <vector>

#include "lbt/errors.hpp"
#include "lbt/mesh.hpp"
#include "lbt/quadrature.hpp"

namespace lbt {

// ---------------------------------------------------------------------------
// Compton scattering data and kinematics
// ---------------------------------------------------------------------------

/// Physical constants for Klein-Nishina Compton scattering.  Lengths in cm,
/// energies in keV; the electron density default is that of water.
struct ComptonData {
  double electron_density = 3.34281e23;       // e/cm^3
  double classical_electron_radius = 2.81794e-13;  // cm
  double electron_rest_energy = 511.0;        // keV

  void validate() const {
    if (!(electron_density > 0) || !(classical_electron_radius > 0) ||
        !(electron_rest_energy > 0))
      throw InvalidDataError("ComptonData: all constants must be strictly positive");
  }
};

/// Outgoing energy of a photon of energy e_in scattered through angle
/// phi with cos(phi) = cos_phi.
inline double compton_kinematics(double e_in, double cos_phi, double rest_energy = 511.0) {
  return e_in / (1.0 + (e_in / rest_energy) * (1.0 - cos_phi));
}

/// Incoming energy that scatters to e_out through cos_phi; +inf when no
/// admissible incoming energy exists.
inline double compton_inverse_kinematics(double e_out, double cos_phi,
                                         double rest_energy = 511.0) {
  const double den = rest_energy - e_out * (1.0 - cos_phi);
  if (den <= 0.0) return std::numeric_limits<double>::infinity();
  return e_out * rest_energy / den;
}

/// Klein-Nishina differential cross-section per electron,
/// (r_e^2/2) (E/E')^2 (E/E' + E'/E - sin^2 phi).
inline double klein_nishina(double e_in, double e_out, double cos_phi,
                            double classical_electron_radius = 2.81794e-13) {
  const double ratio = e_out / e_in;
  const double sin2 = 1.0 - cos_phi * cos_phi;
  return 0.5 * classical_electron_radius * classical_electron_radius * ratio * ratio *
         (ratio + 1.0 / ratio - sin2);
}

// ---------------------------------------------------------------------------
// Cross-section model
// ---------------------------------------------------------------------------

/// Cross-section data for the transport problem: absorption, scattering
/// kernel, and the derived fields beta (out-scatter), gamma (in-scatter) and
/// alphabar = alpha + (beta-gamma)/2.
///
/// Two kinds are supported.  The mono-energetic kind carries a kernel
/// theta(cos phi) = beta (1 + a1 cos phi) / (2 pi) on the circle.  The
/// poly-energetic kind is the Klein-Nishina Compton kernel with its kinematic
/// Dirac constraint eliminated analytically: in-scatter integrals collapse
/// onto the incoming-energy root with Jacobian (E'/E)^2.
class CrossSectionModel {
 public:
  enum class Kind { Mono, Compton };

  /// Mono-energetic model with constant absorption and scattering and a
  /// kernel shape theta(c) ~ (1 + a1 c).
  static CrossSectionModel mono(double alpha, double beta, double a1 = 0.0) {
    if (alpha < 0 || beta < 0)
      throw std::invalid_argument("mono model: cross-sections must be non-negative");
    if (std::abs(a1) > 1.0)
      throw std::invalid_argument("mono model: |a1| <= 1 required for a non-negative kernel");
    CrossSectionModel m;
    m.kind_ = Kind::Mono;
    m.alpha_ = alpha;
    m.beta_ = beta;
    m.a1_ = a1;
    return m;
  }

  /// Mono-energetic model with a position/energy-dependent absorption field;
  /// scattering stays spatially constant so the kernel structure is unchanged.
  static CrossSectionModel mono_variable_absorption(
      std::function<double(double, double, double)> alpha_fn, double beta,
      double a1 = 0.0) {
    CrossSectionModel m = mono(0.0, beta, a1);
    m.alpha_fn_ = std::move(alpha_fn);
    return m;
  }

  /// Compton model over the energy interval of `energy`.  `truncate_beta`
  /// restricts the out-scatter integral to outgoing energies inside the
  /// domain; the default counts all energy losses, which keeps the
  /// coercivity weight positive (out-scatter below E_min acts as removal).
  static CrossSectionModel compton(const ComptonData& data, const EnergyMesh& energy,
                                   double alpha = 0.0, bool truncate_beta = false) {
    data.validate();
    CrossSectionModel m;
    m.kind_ = Kind::Compton;
    m.alpha_ = alpha;
    m.compton_ = data;
    m.e_min_ = energy.e_min();
    m.e_max_ = energy.e_max();
    m.truncate_beta_ = truncate_beta;
    m.beta_cache_ = std::make_shared<std::unordered_map<double, double>>();
    m.gamma_cache_ = std::make_shared<std::unordered_map<double, double>>();
    return m;
  }

  Kind kind() const { return kind_; }
  bool is_mono() const { return kind_ == Kind::Mono; }
  bool downscatter_only() const { return kind_ == Kind::Compton; }
  const ComptonData& compton_data() const { return compton_; }
  double e_min() const { return e_min_; }
  double e_max() const { return e_max_; }

  double alpha(double x, double y, double E) const {
    return alpha_fn_ ? alpha_fn_(x, y, E) : alpha_;
  }

  double beta(double x, double y, double E) const {
    if (kind_ == Kind::Mono) return beta_;
    return electron_density(x, y) * beta_per_density(E);
  }

  double gamma(double x, double y, double E) const {
    if (kind_ == Kind::Mono) return beta_;  // mono kernels have beta == gamma
    return electron_density(x, y) * gamma_per_density(E);
  }

  double alphabar(double x, double y, double E) const {
    return alpha(x, y, E) + 0.5 * (beta(x, y, E) - gamma(x, y, E));
  }

  /// Spatial density factor of the kernel (piecewise-constant in benchmarks).
  double electron_density(double /*x*/, double /*y*/) const {
    return kind_ == Kind::Compton ? compton_.electron_density : 1.0;
  }

  /// Mono-energetic kernel value theta(cos phi), without the density factor.
  double mono_kernel(double cos_phi) const {
    if (kind_ != Kind::Mono)
      throw UnsupportedOperationError("mono_kernel: model is poly-energetic");
    return beta_ * (1.0 + a1_ * cos_phi) / (2.0 * M_PI);
  }

  /// Klein-Nishina kernel value, per unit electron density, for incoming
  /// energy e_in and the kinematically determined outgoing energy.
  double compton_kernel(double e_in, double cos_phi) const {
    const double e_out = compton_kinematics(e_in, cos_phi, compton_.electron_rest_energy);
    return klein_nishina(e_in, e_out, cos_phi, compton_.classical_electron_radius);
  }

  /// Checks alphabar > 0 at the supplied (x,y,E) samples; throws InvalidDataError
  /// with the worst offender otherwise.  Called by the discretisation before
  /// building weighted bases.
  void require_coercive(const std::vector<std::array<double, 3>>& samples) const {
    double worst = std::numeric_limits<double>::infinity();
    std::array<double, 3> at{0, 0, 0};
    for (const auto& s : samples) {
      const double ab = alphabar(s[0], s[1], s[2]);
      if (ab < worst) {
        worst = ab;
        at = s;
      }
    }
    if (!(worst > 0.0))
      throw InvalidDataError("cross-section model: alphabar = " + std::to_string(worst) +
                             " <= 0 at E = " + std::to_string(at[2]) +
                             " keV; the coercivity assumption fails on this energy domain");
  }

 private:
  Kind kind_ = Kind::Mono;
  double alpha_ = 0.0;
  std::function<double(double, double, double)> alpha_fn_;  // optional override
  double beta_ = 0.0;  // mono only
  double a1_ = 0.0;    // mono kernel shape
  ComptonData compton_;
  double e_min_ = 0.0, e_max_ = 0.0;
  bool truncate_beta_ = false;
  // caches keyed by exact energy value; deterministic and shared across copies
  std::shared_ptr<std::unordered_map<double, double>> beta_cache_;
  std::shared_ptr<std::unordered_map<double, double>> gamma_cache_;

  static constexpr int kCircleNodes = 512;

  /// beta(E)/rho: integral over outgoing directions of the collapsed kernel.
  double beta_per_density(double E) const {
    auto it = beta_cache_->find(E);
    if (it != beta_cache_->end()) return it->second;
    double v;
    if (!truncate_beta_) {
      // integrand smooth and 2pi-periodic: midpoint rule is spectrally accurate
      double sum = 0.0;
      for (int k = 0; k < kCircleNodes; ++k) {
        const double tau = (k + 0.5) * 2.0 * M_PI / kCircleNodes;
        sum += compton_kernel(E, std::cos(tau));
      }
      v = sum * 2.0 * M_PI / kCircleNodes;
    } else {
      // restrict to outgoing energies >= E_min: E_out(E,cos tau) >= E_min
      // on |tau| <= tau*, split there and use Gauss on the smooth piece
      const double me = compton_.electron_rest_energy;
      const double thresh = 1.0 - me * (1.0 / e_min_ - 1.0 / E);  // cos tau >= thresh
      if (thresh >= 1.0) {
        v = 0.0;
      } else if (thresh <= -1.0) {
        v = beta_untruncated(E);
      } else {
        const double tau_star = std::acos(thresh);
        QuadRule1D rule = gauss_legendre(64, 0.0, tau_star);
        double sum = 0.0;
        for (std::size_t k = 0; k < rule.size(); ++k)
          sum += rule.weights[k] * compton_kernel(E, std::cos(rule.points[k]));
        v = 2.0 * sum;
      }
    }
    (*beta_cache_)[E] = v;
    return v;
  }

  double beta_untruncated(double E) const {
    double sum = 0.0;
    for (int k = 0; k < kCircleNodes; ++k) {
      const double tau = (k + 0.5) * 2.0 * M_PI / kCircleNodes;
      sum += compton_kernel(E, std::cos(tau));
    }
    return sum * 2.0 * M_PI / kCircleNodes;
  }

  /// gamma(E)/rho: integral over incoming directions of the kernel collapsed
  /// onto the incoming-energy root, Jacobian (E'/E)^2, truncated to E' <= E_max.
  double gamma_per_density(double E) const {
    auto it = gamma_cache_->find(E);
    if (it != gamma_cache_->end()) return it->second;
    const double me = compton_.electron_rest_energy;
    // admissible cos tau: root exists (den > 0) and E' <= E_max
    // E'(E,c) <= E_max  <=>  1 - c <= me (1/E - 1/E_max)
    const double thresh = 1.0 - me * (1.0 / E - 1.0 / e_max_);
    double v = 0.0;
    if (thresh < 1.0) {
      const double lo = std::max(thresh, -1.0);
      const double tau_star = std::acos(lo);
      QuadRule1D rule = gauss_legendre(64, 0.0, tau_star);
      double sum = 0.0;
      for (std::size_t k = 0; k < rule.size(); ++k) {
        const double c = std::cos(rule.points[k]);
        const double e_in = compton_inverse_kinematics(E, c, me);
        if (!std::isfinite(e_in)) continue;
        const double jac = (e_in / E) * (e_in / E);
        sum += rule.weights[k] *
               klein_nishina(e_in, E, c, compton_.classical_electron_radius) * jac;
      }
      v = 2.0 * sum;
    }
    (*gamma_cache_)[E] = v;
    return v;
  }
};

/// Convenience constructor matching the isotropic benchmark setup.
inline CrossSectionModel isotropic_model(double alpha, double beta) {
  return CrossSectionModel::mono(alpha, beta, 0.0);
}

// ---------------------------------------------------------------------------
// Kernel moments and contraction constants
// ---------------------------------------------------------------------------

/// Circular-harmonic moments of a mono-energetic kernel,
/// theta_l = int_0^{2pi} theta(cos tau) cos(l tau) dtau.  These are the
/// eigenvalues of the scattering operator on the angular Fourier modes, so
/// theta_0 = beta.
inline std::vector<double> kernel_moments(const CrossSectionModel& model, int l_max) {
  if (!model.is_mono())
    throw UnsupportedOperationError("kernel_moments: defined for mono-energetic kernels only");
  const int n = std::max(256, 8 * (l_max + 1));
  std::vector<double> moments(l_max + 1, 0.0);
  for (int k = 0; k < n; ++k) {
    const double tau = (k + 0.5) * 2.0 * M_PI / n;
    const double th = model.mono_kernel(std::cos(tau));
    for (int l = 0; l <= l_max; ++l) moments[l] += th * std::cos(l * tau);
  }
  for (int l = 0; l <= l_max; ++l) moments[l] *= 2.0 * M_PI / n;
  return moments;
}

/// r(theta, omega) = sup_l |theta_l / beta - omega| over all moment indices;
/// moments beyond the supplied list are treated as zero.
inline double kernel_moment_bound(const std::vector<double>& moments, double beta,
                                  double omega) {
  double r = std::abs(omega);  // tail of vanishing moments
  for (double th : moments) r = std::max(r, std::abs(th / beta - omega));
  return r;
}

/// Contraction and estimator constants for the iterative schemes.
struct ContractionConstants {
  double q_beta = 0.0;        // sup beta/(alpha+beta)
  double q_gamma = 0.0;       // sup gamma/(alpha+beta)
  double c = 0.0;             // sqrt(q_beta q_gamma), contraction of source iteration
  double r_gamma = 0.0;       // sup gamma/alphabar
  double r_beta = 0.0;        // sup beta/alpha (mono; +inf when alpha == 0)
  double q_beta_omega = 0.0;  // sup beta/(alpha+(1-omega)beta) (mono)
  double r_theta_omega = 0.0; // kernel moment bound r(theta,omega) (mono)
  double c_mono = 0.0;        // sup beta/(alpha+beta) (mono)
  double c_mono_omega = 0.0;  // r(theta,omega) c_mono / (1 - omega c_mono)
  double omega = 0.0;
  bool convergent = false;    // c < 1
};

/// Evaluates the suprema over the supplied (x,y,E) sample points (callers pass
/// the volume quadrature points of the discretisation).
inline ContractionConstants contraction_constants(
    const CrossSectionModel& model, const std::vector<std::array<double, 3>>& samples,
    double omega = 0.5) {
  if (samples.empty()) throw std::invalid_argument("contraction_constants: no sample points");
  ContractionConstants k;
  k.omega = omega;
  const double inf = std::numeric_limits<double>::infinity();
  for (const auto& s : samples) {
    const double a = model.alpha(s[0], s[1], s[2]);
    const double b = model.beta(s[0], s[1], s[2]);
    const double g = model.gamma(s[0], s[1], s[2]);
    const double ab = model.alphabar(s[0], s[1], s[2]);
    if (a + b > 0) {
      k.q_beta = std::max(k.q_beta, b / (a + b));
      k.q_gamma = std::max(k.q_gamma, g / (a + b));
    }
    k.r_gamma = std::max(k.r_gamma, ab > 0 ? g / ab : (g > 0 ? inf : 0.0));
    if (model.is_mono()) {
      k.r_beta = std::max(k.r_beta, a > 0 ? b / a : (b > 0 ? inf : 0.0));
      const double den = a + (1.0 - omega) * b;
      k.q_beta_omega = std::max(k.q_beta_omega, den > 0 ? b / den : (b > 0 ? inf : 0.0));
    }
  }
  k.c = std::sqrt(k.q_beta * k.q_gamma);
  k.convergent = k.c < 1.0;
  if (model.is_mono()) {
    k.c_mono = k.q_beta;
    const auto m = kernel_moments(model, 8);
    k.r_theta_omega = m[0] > 0 ? kernel_moment_bound(m, m[0], omega)
                               : std::max(omega, 1.0 - omega);
    k.c_mono_omega = k.r_theta_omega * k.c_mono / (1.0 - omega * k.c_mono);
  }
  return k;
}

}  // namespace lbt
