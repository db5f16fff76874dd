#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lbt/estimators.hpp"
#include "lbt/operators.hpp"

namespace lbt {

/// Termination control: estimator tolerance, iteration cap, or both --
/// whichever triggers first wins.
struct StoppingRule {
  std::optional<double> tolerance;  // on the a posteriori estimator
  int max_iterations = 50;
};

/// One estimator evaluation along a solve, with the true error and
/// effectivity when a reference solution is available.
struct IterationRecord {
  int iteration = 0;
  double estimate = 0.0;
  EstimatorKind kind = EstimatorKind::SourceIteration;
  std::optional<double> true_error;
  std::optional<double> effectivity;
};

struct SolveReport {
  std::string solver;
  bool converged = false;
  /// false when the estimator is applied per energy group with inexact
  /// upstream fluxes, in which case it is no longer a guaranteed upper bound
  bool guaranteed = true;
  int iterations = 0;
  double final_estimate = std::numeric_limits<double>::infinity();
  std::vector<IterationRecord> history;
  std::string note;
  double wall_seconds = 0.0;

  void save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("SolveReport: cannot open " + path);
    out << "iteration,estimate,true_error,effectivity\n";
    char buf[128];
    for (const auto& rec : history) {
      std::snprintf(buf, sizeof buf, "%d,%.17g", rec.iteration, rec.estimate);
      out << buf;
      if (rec.true_error) {
        std::snprintf(buf, sizeof buf, ",%.17g", *rec.true_error);
        out << buf;
      } else {
        out << ",";
      }
      if (rec.effectivity) {
        std::snprintf(buf, sizeof buf, ",%.17g", *rec.effectivity);
        out << buf;
      } else {
        out << ",";
      }
      out << "\n";
    }
  }
};

struct SolveOptions {
  const Vector* initial_guess = nullptr;
  /// DG-norm error against a reference, recorded per iteration when given
  std::function<double(const Vector&)> true_error;
  bool record_history = true;
};

inline ContractionConstants solver_constants(const FeSpace& space, double omega = 0.5) {
  return contraction_constants(space.model(), space.volume_sample_points(), omega);
}

namespace detail {

struct RichardsonCallbacks {
  std::function<Vector(const Vector&)> solve_p;   // preconditioner
  std::function<Vector(const Vector&)> apply_k;   // lagged operator
  std::function<Vector(const Vector&)> apply_sys; // A - S (for nonzero initial guesses)
  std::function<double(const Vector&)> estimate;  // from the preconditioned residual
};

/// Residual-recast preconditioned Richardson iteration:
///   u_{n+1} = u_n + r_n,  r_{n+1} = P^{-1} K r_n,
/// which generates the same iterates as u_{n+1} = P^{-1}(K u_n + F).
inline std::pair<Vector, SolveReport> richardson(const RichardsonCallbacks& cb,
                                                 const Vector& rhs,
                                                 const StoppingRule& stop,
                                                 const SolveOptions& opts,
                                                 const std::string& name,
                                                 EstimatorKind kind) {
  const auto t0 = std::chrono::steady_clock::now();
  SolveReport report;
  report.solver = name;

  Vector u;
  Vector r;
  if (opts.initial_guess) {
    u = *opts.initial_guess;
    r = cb.solve_p(rhs - cb.apply_sys(u));
  } else {
    u = Vector::Zero(rhs.size());
    r = cb.solve_p(rhs);
  }

  for (int it = 1; it <= stop.max_iterations; ++it) {
    const double est = cb.estimate(r);
    u += r;
    report.iterations = it;
    report.final_estimate = est;
    if (opts.record_history || opts.true_error) {
      IterationRecord rec;
      rec.iteration = it;
      rec.estimate = est;
      rec.kind = kind;
      if (opts.true_error) {
        rec.true_error = opts.true_error(u);
        rec.effectivity = effectivity(est, *rec.true_error);
      }
      report.history.push_back(rec);
    }
    if (stop.tolerance && est <= *stop.tolerance) {
      report.converged = true;
      break;
    }
    if (it == stop.max_iterations) break;
    r = cb.solve_p(cb.apply_k(r));
  }
  if (!stop.tolerance) report.converged = true;  // fixed-iteration mode ran to plan
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(u), std::move(report)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Source iteration
// ---------------------------------------------------------------------------

inline std::pair<Vector, SolveReport> source_iteration(const OperatorSet& ops,
                                                       const ContractionConstants& k,
                                                       const Vector& rhs,
                                                       const StoppingRule& stop,
                                                       const SolveOptions& opts = {}) {
  detail::RichardsonCallbacks cb;
  cb.solve_p = [&](const Vector& v) { return ops.solve_A(v); };
  cb.apply_k = [&](const Vector& v) { return ops.apply_S(v); };
  cb.apply_sys = [&](const Vector& v) -> Vector {
    return ops.apply_A(v) - ops.apply_S(v);
  };
  cb.estimate = [&](const Vector& d) { return si_error_estimate(ops, k, d); };
  return detail::richardson(cb, rhs, stop, opts, "si", EstimatorKind::SourceIteration);
}

// ---------------------------------------------------------------------------
// Generalised (relaxed) source iteration, mono-energetic only
// ---------------------------------------------------------------------------

inline std::pair<Vector, SolveReport> generalised_source_iteration(
    const OperatorSet& ops, const ContractionConstants& k, double omega,
    const Vector& rhs, const StoppingRule& stop, const SolveOptions& opts = {}) {
  if (!ops.space().model().is_mono())
    throw UnsupportedOperationError(
        "generalised source iteration is defined for mono-energetic problems only");
  if (omega < 0.0 || omega >= 1.0)
    throw std::invalid_argument("generalised source iteration: omega must lie in [0,1)");
  const OperatorSet::Relaxed relaxed = ops.relaxed(omega);
  detail::RichardsonCallbacks cb;
  cb.solve_p = [&](const Vector& v) { return relaxed.solve(v); };
  cb.apply_k = [&](const Vector& v) { return relaxed.apply_K(v); };
  cb.apply_sys = [&](const Vector& v) -> Vector {
    return ops.apply_A(v) - ops.apply_S(v);
  };
  cb.estimate = [&](const Vector& d) { return gsi_error_estimate(ops, k, d); };
  return detail::richardson(cb, rhs, stop, opts, "gsi",
                            EstimatorKind::RelaxedSourceIteration);
}

// ---------------------------------------------------------------------------
// GMRES (no restarts) with Givens-rotation residual recurrence
// ---------------------------------------------------------------------------

struct GmresResult {
  Vector solution;                 // argmin over the Krylov space
  int iterations = 0;
  bool converged = false;
  bool happy_breakdown = false;
  bool lost_orthogonality = false;
  std::vector<double> residuals;   // recurrence values per iteration
  std::vector<Vector> basis;       // orthonormal Krylov basis (diagnostics)
};

/// Standard GMRES on op(z) = b with modified Gram-Schmidt (one conditional
/// re-orthogonalisation pass) and the Givens residual recurrence.  The
/// tolerance is absolute on ||b - op(z)||_2.  No restarts; the Krylov basis
/// grows until the tolerance or the iteration cap.
inline GmresResult gmres(const std::function<Vector(const Vector&)>& op, const Vector& b,
                         std::optional<double> tol, int max_iterations,
                         const std::function<void(int, double, const Vector&)>&
                             per_iteration = nullptr) {
  if (max_iterations < 1)
    throw std::invalid_argument("gmres: need at least one iteration");
  GmresResult res;
  const long n = b.size();
  const double beta0 = b.norm();
  if (beta0 == 0.0 || (tol && beta0 <= *tol)) {
    res.solution = Vector::Zero(n);
    res.converged = true;
    res.residuals.push_back(beta0);
    return res;
  }

  const int m = max_iterations;
  std::vector<Vector>& v = res.basis;
  v.reserve(m + 1);
  v.push_back(b / beta0);
  Matrix r_factor = Matrix::Zero(m + 1, m);  // triangularised Hessenberg
  Vector g = Vector::Zero(m + 1);
  g[0] = beta0;
  std::vector<double> cs(m), sn(m);

  auto reconstruct = [&](int j) {
    // solve the leading (j+1) x (j+1) triangular system and expand
    Vector y = r_factor.topLeftCorner(j + 1, j + 1)
                   .triangularView<Eigen::Upper>()
                   .solve(g.head(j + 1));
    Vector z = Vector::Zero(n);
    for (int i = 0; i <= j; ++i) z += y[i] * v[i];
    return z;
  };

  double resid = beta0;
  int j = 0;
  for (; j < m; ++j) {
    Vector w = op(v[j]);
    const double norm_before = w.norm();
    Vector h = Vector::Zero(j + 2);
    for (int i = 0; i <= j; ++i) {
      h[i] = v[i].dot(w);
      w -= h[i] * v[i];
    }
    if (w.norm() < 0.5 * norm_before) {
      const double after_first = w.norm();
      for (int i = 0; i <= j; ++i) {
        const double dh = v[i].dot(w);
        w -= dh * v[i];
        h[i] += dh;
      }
      // a second collapse means the vector lies numerically in the span
      if (w.norm() < 0.5 * after_first) res.lost_orthogonality = true;
    }
    h[j + 1] = w.norm();
    const bool happy = h[j + 1] <= 1e-14 * beta0;
    if (!happy) v.push_back(w / h[j + 1]);

    // apply accumulated rotations, then the new one
    for (int i = 0; i < j; ++i) {
      const double t = cs[i] * h[i] + sn[i] * h[i + 1];
      h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
      h[i] = t;
    }
    const double rho = std::hypot(h[j], h[j + 1]);
    cs[j] = h[j] / rho;
    sn[j] = h[j + 1] / rho;
    h[j] = rho;
    h[j + 1] = 0.0;
    g[j + 1] = -sn[j] * g[j];
    g[j] = cs[j] * g[j];
    r_factor.col(j).head(j + 2) = h;

    resid = std::abs(g[j + 1]);
    res.residuals.push_back(resid);
    res.iterations = j + 1;
    if (per_iteration) per_iteration(j + 1, resid, reconstruct(j));
    if (happy) {
      res.happy_breakdown = true;
      res.converged = true;
      break;
    }
    if (tol && resid <= *tol) {
      res.converged = true;
      break;
    }
  }
  if (!tol && res.iterations == m) res.converged = true;
  res.solution = reconstruct(std::min(res.iterations, m) - 1);
  return res;
}

/// Right-preconditioned GMRES in the weighted norm: runs gmres on
/// Linv (A - S) P^{-1} L with P = A, right-hand side Linv F, and maps the
/// auxiliary solution back through u = P^{-1} L z.  The recurrence residual
/// then equals the weighted residual norm ||sqrt(alphabar) r_h(u)||, i.e. the
/// residual-based solver error bound, so reaching TOL certifies the DG-norm
/// solver error.
inline std::pair<Vector, SolveReport> gmres_weighted(const OperatorSet& ops,
                                                     const Vector& rhs,
                                                     const StoppingRule& stop,
                                                     const SolveOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  SolveReport report;
  report.solver = "gmres";
  auto op = [&](const Vector& z) {
    const Vector t = ops.solve_A(ops.apply_L(z));
    return ops.apply_Linv(ops.apply_A(t) - ops.apply_S(t));
  };
  auto back_map = [&](const Vector& z) { return ops.solve_A(ops.apply_L(z)); };

  std::function<void(int, double, const Vector&)> cb = nullptr;
  if (opts.record_history || opts.true_error) {
    cb = [&](int it, double resid, const Vector& z) {
      IterationRecord rec;
      rec.iteration = it;
      rec.estimate = resid;
      rec.kind = EstimatorKind::Residual;
      if (opts.true_error) {
        rec.true_error = opts.true_error(back_map(z));
        rec.effectivity = effectivity(resid, *rec.true_error);
      }
      report.history.push_back(rec);
    };
  }

  GmresResult res = gmres(op, ops.apply_Linv(rhs), stop.tolerance, stop.max_iterations, cb);
  report.converged = res.converged;
  report.iterations = res.iterations;
  report.final_estimate = res.residuals.empty() ? 0.0 : res.residuals.back();
  if (res.happy_breakdown) report.note = "happy breakdown (exact solve)";
  if (res.lost_orthogonality) report.note += "[orthogonality re-established once]";
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {back_map(res.solution), std::move(report)};
}

// ---------------------------------------------------------------------------
// Group-sequential outer loop for downscatter-only kernels
// ---------------------------------------------------------------------------

enum class InnerSolver { SourceIteration, Gmres };

/// Solves the multigroup system in order of decreasing energy.  Group g sees
/// the already-resolved higher-energy groups through the scattering source
/// sum S_{g,g'} u_{g'}; each group subproblem (A_g - S_gg) u_g = rhs_g is
/// handled by the chosen inner solver with a per-group stopping rule.  The
/// per-group estimates are no longer guaranteed bounds for the global error
/// because the upstream group fluxes are themselves inexact; reports carry
/// guaranteed = false.
inline std::pair<Vector, std::vector<SolveReport>> group_sequential_solve(
    const OperatorSet& ops, const ContractionConstants& k, const Vector& rhs,
    InnerSolver inner, const StoppingRule& per_group_stop,
    const SolveOptions& opts = {}) {
  const FeSpace& s = ops.space();
  if (!s.model().downscatter_only() && s.n_groups() > 1)
    throw UnsupportedOperationError(
        "group-sequential solve requires a downscatter-only kernel");
  Vector u = Vector::Zero(s.n_dofs());
  std::vector<SolveReport> reports;
  reports.reserve(s.n_groups());

  for (int g = 0; g < s.n_groups(); ++g) {
    // in-scatter source from resolved higher-energy groups
    Vector load = Vector::Zero(s.n_dofs());
    const long off = s.group_offset(g), len = s.group_size();
    load.segment(off, len) = rhs.segment(off, len);
    for (int gs = 0; gs < g; ++gs) ops.apply_S_block(g, gs, u, load);

    SolveReport rep;
    if (inner == InnerSolver::SourceIteration) {
      detail::RichardsonCallbacks cb;
      cb.solve_p = [&](const Vector& v) {
        Vector out = Vector::Zero(v.size());
        ops.solve_A_group(g, v, out);
        return out;
      };
      cb.apply_k = [&](const Vector& v) {
        Vector out = Vector::Zero(v.size());
        ops.apply_S_block(g, g, v, out);
        return out;
      };
      cb.apply_sys = [&](const Vector& v) {
        Vector av = Vector::Zero(v.size());
        ops.apply_A_group(g, v, av);
        Vector sv = Vector::Zero(v.size());
        ops.apply_S_block(g, g, v, sv);
        return Vector(av - sv);
      };
      cb.estimate = [&](const Vector& d) { return si_error_estimate(ops, k, d); };
      auto [ug, r] = detail::richardson(cb, load, per_group_stop, opts, "si",
                                        EstimatorKind::SourceIteration);
      u.segment(off, len) += ug.segment(off, len);
      rep = std::move(r);
    } else {
      auto op = [&](const Vector& z) {
        const Vector lz = ops.apply_L(z);
        Vector t = Vector::Zero(z.size());
        ops.solve_A_group(g, lz, t);
        Vector at = Vector::Zero(z.size());
        ops.apply_A_group(g, t, at);
        Vector st = Vector::Zero(z.size());
        ops.apply_S_block(g, g, t, st);
        return Vector(ops.apply_Linv(at - st));
      };
      const auto t0 = std::chrono::steady_clock::now();
      GmresResult res =
          gmres(op, ops.apply_Linv(load), per_group_stop.tolerance,
                per_group_stop.max_iterations, nullptr);
      Vector lz = ops.apply_L(res.solution);
      Vector ug = Vector::Zero(s.n_dofs());
      ops.solve_A_group(g, lz, ug);
      u.segment(off, len) += ug.segment(off, len);
      rep.solver = "gmres";
      rep.converged = res.converged;
      rep.iterations = res.iterations;
      rep.final_estimate = res.residuals.empty() ? 0.0 : res.residuals.back();
      for (std::size_t i = 0; i < res.residuals.size(); ++i)
        rep.history.push_back({static_cast<int>(i + 1), res.residuals[i],
                               EstimatorKind::Residual, {}, {}});
      rep.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    rep.guaranteed = s.n_groups() == 1;
    rep.note = "group " + std::to_string(g + 1);
    if (!rep.guaranteed)
      rep.note += "; per-group estimate, not a guaranteed global bound";
    reports.push_back(std::move(rep));
  }
  return {std::move(u), std::move(reports)};
}

// ---------------------------------------------------------------------------
// Reference solutions
// ---------------------------------------------------------------------------

/// Discrete reference for true-error studies: a dense direct solve when the
/// problem fits under the cap, otherwise a converged iterative solution
/// (GMRES driven to near machine precision), with the kind recorded.
inline std::pair<Vector, std::string> reference_solution(const OperatorSet& ops,
                                                         const Vector& rhs,
                                                         long dense_cap = 4096) {
  const FeSpace& s = ops.space();
  if (s.n_dofs() <= dense_cap) {
    const Matrix a = ops.assemble_dense(OperatorSet::Which::A, dense_cap);
    const Matrix sc = ops.assemble_dense(OperatorSet::Which::S, dense_cap);
    Eigen::PartialPivLU<Matrix> lu(a - sc);
    return {lu.solve(rhs), "dense-direct"};
  }
  StoppingRule stop;
  stop.tolerance = 1e-13;
  stop.max_iterations = 600;
  if (s.n_groups() == 1) {
    auto [u, rep] = gmres_weighted(ops, rhs, stop, {});
    return {u, "gmres-converged(tol=1e-13)"};
  }
  ContractionConstants k = solver_constants(s);
  auto [u, reps] = group_sequential_solve(ops, k, rhs, InnerSolver::Gmres, stop, {});
  return {u, "group-gmres-converged(tol=1e-13/group)"};
}

}  // namespace lbt
