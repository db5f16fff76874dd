#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lbt/operators.hpp"
#include "lbt/physics.hpp"

namespace lbt {

enum class EstimatorKind { SourceIteration, RelaxedSourceIteration, Residual };

inline const char* estimator_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::SourceIteration: return "si";
    case EstimatorKind::RelaxedSourceIteration: return "gsi";
    case EstimatorKind::Residual: return "residual";
  }
  return "?";
}

/// effectivity = estimate / true_error; not applicable for zero true error.
inline std::optional<double> effectivity(double estimate, double true_error) {
  if (!(true_error > 0.0)) return std::nullopt;
  return estimate / true_error;
}

/// Solver-error bound for source iteration from the difference of two
/// consecutive iterates: sqrt(r_gamma) ||sqrt(beta) (u_next - u_prev)||.
inline double si_error_estimate(const OperatorSet& ops, const ContractionConstants& k,
                                const Vector& diff) {
  if (std::isinf(k.r_gamma)) return std::numeric_limits<double>::infinity();
  return std::sqrt(k.r_gamma) * ops.m_norm(diff);
}

/// Solver-error bound for the relaxed (generalised) iteration:
/// r(theta,omega) sqrt(r_beta) ||sqrt(beta) (u_next - u_prev)||.
/// Returns +inf when alpha vanishes (r_beta unbounded); the iteration itself
/// may still contract.
inline double gsi_error_estimate(const OperatorSet& ops, const ContractionConstants& k,
                                 const Vector& diff) {
  if (std::isinf(k.r_beta)) return std::numeric_limits<double>::infinity();
  return k.r_theta_omega * std::sqrt(k.r_beta) * ops.m_norm(diff);
}

/// Per-element contributions eta_kappa of the residual estimator.
struct LocalEstimates {
  std::vector<double> eta;  // indexed by FeSpace::element_id
  double global = 0.0;      // sqrt(sum eta^2)

  void save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("LocalEstimates: cannot open " + path);
    out << "element,eta\n";
    char buf[64];
    for (std::size_t e = 0; e < eta.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", e, eta[e]);
      out << buf;
    }
  }
};

/// Residual-based solver-error bound ||sqrt(alphabar) r_h(u)|| where r_h
/// solves the weighted-mass problem against the residual functional.  The
/// local problems reuse the per-element weighted-mass factorisations; in the
/// orthonormal basis mode they are identities and the global value equals the
/// Euclidean norm of the coefficient residual.
inline double residual_error_estimate(const OperatorSet& ops, const Vector& load,
                                      const Vector& u, LocalEstimates* local = nullptr) {
  const FeSpace& s = ops.space();
  Vector rhat = load - (ops.apply_A(u) - ops.apply_S(u));
  Vector r = ops.solve_Mhat(rhat);
  const int nloc = s.n_local();
  const long n_elems = s.n_dofs() / nloc;
  double sum = 0.0;
  if (local) local->eta.assign(n_elems, 0.0);
  for (long e = 0; e < n_elems; ++e) {
    const double eta2 = r.segment(e * nloc, nloc).dot(rhat.segment(e * nloc, nloc));
    const double eta = std::sqrt(std::max(eta2, 0.0));
    if (local) local->eta[e] = eta;
    sum += eta2;
  }
  const double global = std::sqrt(std::max(sum, 0.0));
  if (local) local->global = global;
  return global;
}

/// Residual estimator restricted to one group block (for group-sequential
/// solves): load_g must already contain the in-scatter source from the
/// resolved higher-energy groups.
inline double residual_error_estimate_group(const OperatorSet& ops, int g,
                                            const Vector& load_with_sources,
                                            const Vector& u) {
  const FeSpace& s = ops.space();
  Vector au(u.size());
  au.setZero();
  ops.apply_A_group(g, u, au);
  Vector su = Vector::Zero(u.size());
  ops.apply_S_block(g, g, u, su);
  Vector rhat = Vector::Zero(u.size());
  const long off = s.group_offset(g), len = s.group_size();
  rhat.segment(off, len) = load_with_sources.segment(off, len) - au.segment(off, len) +
                           su.segment(off, len);
  Vector r = ops.solve_Mhat(rhat);
  return std::sqrt(std::max(r.segment(off, len).dot(rhat.segment(off, len)), 0.0));
}

/// Strong-form assembly of the element-local residual problem: the volume
/// residual f + S[u] - mu.grad(u) - (alpha+beta) u against the local basis,
/// plus the inflow jump term and the inflow boundary term, followed by one
/// local weighted-mass solve.  The data terms (f against the basis and the
/// weak boundary data) enter through the element block of the assembled load
/// vector; the iterate's terms are assembled here in strong form, so the
/// result reproduces the global r_h restricted to the element to roundoff.
/// Returns eta_kappa; `r_local` (optional) receives the local expansion of r_h.
inline double local_residual(const OperatorSet& ops, const Vector& load, const Vector& u,
                             int g, int arc, int kx, Vector* r_local = nullptr) {
  const FeSpace& s = ops.space();
  const auto& mesh = s.mesh();
  const int nloc = s.n_local();
  const auto& el = mesh.spatial.elements[kx];
  const auto& arcel = mesh.angular.elements[arc];
  const double elo = mesh.energy.group_lo(g), ew = mesh.energy.group_width(g);
  const double ss = s.spatial_scale();
  const double es = s.energy_scale(g);
  const auto& anodes = s.angular_nodes(arc);
  const auto& av = s.angular_values(arc);

  // data terms: f and g_D tested against this element's basis
  Vector acc = load.segment(s.block_offset(g, arc, kx), nloc);
  // in-scatter S[u] tested against this element's basis
  Vector su = Vector::Zero(s.n_dofs());
  for (int gs = 0; gs <= g; ++gs) ops.apply_S_block(g, gs, u, su);
  acc += su.segment(s.block_offset(g, arc, kx), nloc);

  // raw coefficients of u on this element
  const Vector uraw = s.transform(g, arc, kx).transpose() *
                      Vector(u.segment(s.block_offset(g, arc, kx), nloc));
  // quadrature terms are assembled against the raw basis and mapped at the end
  Vector raw_acc = Vector::Zero(nloc);

  const double jac = (el.hx * el.hy / 4.0) * (ew / 2.0);
  // volume term: -(mu.grad u + (alpha+beta) u) v
  for (int k = 0; k < s.n_spatial_nodes(); ++k) {
    const double xi = s.spatial_node_xi(k), eta = s.spatial_node_eta(k);
    const double x = el.x0 + 0.5 * el.hx * (1.0 + xi);
    const double y = el.y0 + 0.5 * el.hy * (1.0 + eta);
    for (std::size_t ka = 0; ka < anodes.size(); ++ka)
      for (std::size_t le = 0; le < s.energy_rule().size(); ++le) {
        const double E = elo + 0.5 * ew * (1.0 + s.energy_rule().points[le]);
        const double w = s.spatial_node_weight(k) * anodes[ka].weight *
                         s.energy_rule().weights[le] * jac;
        double uval = 0, ugx = 0, ugy = 0;
        for (int ie = 0; ie < s.n_energy_basis(); ++ie)
          for (int im = 0; im < s.n_angular_basis(); ++im) {
            const double ang_en = av(static_cast<int>(ka), im) *
                                  s.energy_values()(static_cast<int>(le), ie) * es;
            for (int i = 0; i < s.n_spatial_basis(); ++i) {
              const double cc = uraw[s.local_index(i, im, ie)] * ang_en;
              uval += cc * s.spatial_values()(k, i) * ss;
              ugx += cc * s.spatial_grad_xi()(k, i) * (2.0 / el.hx) * ss;
              ugy += cc * s.spatial_grad_eta()(k, i) * (2.0 / el.hy) * ss;
            }
          }
        const double sig = s.model().alpha(x, y, E) + s.model().beta(x, y, E);
        const double wv =
            -w * ((anodes[ka].mu1 * ugx + anodes[ka].mu2 * ugy) + sig * uval);
        for (int ie = 0; ie < s.n_energy_basis(); ++ie)
          for (int im = 0; im < s.n_angular_basis(); ++im) {
            const double ang_en = av(static_cast<int>(ka), im) *
                                  s.energy_values()(static_cast<int>(le), ie) * es;
            for (int i = 0; i < s.n_spatial_basis(); ++i)
              raw_acc[s.local_index(i, im, ie)] += wv * s.spatial_values()(k, i) * ss * ang_en;
          }
      }
  }

  // inflow faces: interior |mu.n| (u_upwind - u_inside) v, boundary -|mu.n| u_inside v
  // (the g_D part of the boundary term already sits in the load block)
  const auto& qf = s.face_rule();
  const std::array<Side, 2> inflow = {arcel.sign_x > 0 ? Side::Left : Side::Right,
                                      arcel.sign_y > 0 ? Side::Bottom : Side::Top};
  for (Side sd : inflow) {
    const int axis = side_axis(sd);
    const int nb = el.neighbor[static_cast<int>(sd)];
    const double hface = axis == 0 ? el.hy : el.hx;
    const auto& tr_in = s.spatial_trace(sd);
    const auto& tr_nb = s.spatial_trace(opposite(sd));
    Vector nbraw;
    if (nb >= 0)
      nbraw = s.transform(g, arc, nb).transpose() *
              Vector(u.segment(s.block_offset(g, arc, nb), nloc));
    for (std::size_t kf = 0; kf < qf.size(); ++kf) {
      for (std::size_t ka = 0; ka < anodes.size(); ++ka) {
        const double mun = axis == 0 ? anodes[ka].mu1 : anodes[ka].mu2;
        for (std::size_t le = 0; le < s.energy_rule().size(); ++le) {
          const double w = qf.weights[kf] * (hface / 2.0) * anodes[ka].weight *
                           std::abs(mun) * s.energy_rule().weights[le] * (ew / 2.0);
          double uin = 0, uup = 0;
          for (int ie = 0; ie < s.n_energy_basis(); ++ie)
            for (int im = 0; im < s.n_angular_basis(); ++im) {
              const double ang_en = av(static_cast<int>(ka), im) *
                                    s.energy_values()(static_cast<int>(le), ie) * es;
              for (int i = 0; i < s.n_spatial_basis(); ++i) {
                uin += uraw[s.local_index(i, im, ie)] * tr_in(static_cast<int>(kf), i) * ss *
                       ang_en;
                if (nb >= 0)
                  uup += nbraw[s.local_index(i, im, ie)] * tr_nb(static_cast<int>(kf), i) *
                         ss * ang_en;
              }
            }
          const double wv = w * (uup - uin);  // uup = 0 on the boundary
          for (int ie = 0; ie < s.n_energy_basis(); ++ie)
            for (int im = 0; im < s.n_angular_basis(); ++im) {
              const double ang_en = av(static_cast<int>(ka), im) *
                                    s.energy_values()(static_cast<int>(le), ie) * es;
              for (int i = 0; i < s.n_spatial_basis(); ++i)
                raw_acc[s.local_index(i, im, ie)] +=
                    wv * tr_in(static_cast<int>(kf), i) * ss * ang_en;
            }
        }
      }
    }
  }

  acc += s.transform(g, arc, kx) * raw_acc;

  // local weighted-mass solve; identity blocks in the orthonormal mode
  Vector r;
  if (s.mode() == BasisMode::WeightedOrthonormal) {
    r = acc;
  } else {
    r = s.weighted_mass_chol(s.element_id(g, arc, kx)).solve(acc);
  }
  if (r_local) *r_local = r;
  return std::sqrt(std::max(r.dot(acc), 0.0));
}

}  // namespace lbt
