#pragma once

#include <Eigen/Dense>
#include <Eigen/LU>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lbt/errors.hpp"
#include "lbt/fespace.hpp"
#include "lbt/mesh.hpp"
#include "lbt/physics.hpp"

namespace lbt {

/// Operation counters for structural cost checks.
struct OpCounts {
  long apply_A = 0;
  long solve_A = 0;
  long apply_S = 0;
  long apply_M = 0;
  long apply_Mhat = 0;
  long apply_L = 0;
  long apply_Linv = 0;
};

/// Enumeration order of spatial elements inside a sweep; both are valid
/// topological orders on a Cartesian grid.
enum class SweepOrder { RowMajor, ColMajor };

/// Matrix-free actions of the discrete operators.  A is block lower
/// triangular over spatial elements within each (group, angular element)
/// block, S couples angle-energy blocks densely (downscatter-triangular in
/// the group indices for Compton kernels), and M / Mhat are block diagonal
/// per product element.
class OperatorSet {
 public:
  enum class Which { A, S, M, Mhat };

  explicit OperatorSet(const FeSpace& space, SweepOrder order = SweepOrder::RowMajor)
      : s_(space), sweep_order_(order) {
    build_spatial_factors();
    build_angular_factors();
    build_transport_blocks();
    build_scattering();
    build_mass_blocks();
  }

  const FeSpace& space() const { return s_; }
  mutable OpCounts counts;

  // --- transport operator ---------------------------------------------------

  Vector apply_A(const Vector& v) const {
    check_size(v);
    ++counts.apply_A;
    Vector out(v.size());
    for (int g = 0; g < s_.n_groups(); ++g) apply_A_group_impl(g, v, out, 0, 0);
    return out;
  }

  /// Action of A restricted to one group; `in`/`out` are full-size vectors.
  void apply_A_group(int g, const Vector& in, Vector& out) const {
    ++counts.apply_A;
    apply_A_group_impl(g, in, out, 0, 0);
  }

  /// Transport solve (sweep).  apply_A(solve_A(b)) == b up to roundoff.
  Vector solve_A(const Vector& rhs) const {
    check_size(rhs);
    ++counts.solve_A;
    Vector out(rhs.size());
    for (int g = 0; g < s_.n_groups(); ++g) solve_group_impl(g, rhs, out, lu_);
    return out;
  }

  void solve_A_group(int g, const Vector& rhs, Vector& out) const {
    ++counts.solve_A;
    solve_group_impl(g, rhs, out, lu_);
  }

  // --- scattering -----------------------------------------------------------

  Vector apply_S(const Vector& v) const {
    check_size(v);
    ++counts.apply_S;
    Vector out = Vector::Zero(v.size());
    for (int g = 0; g < s_.n_groups(); ++g)
      for (int gs = 0; gs <= g; ++gs) apply_S_block_impl(g, gs, v, out);
    return out;
  }

  /// Adds the (dst <- src) group block of S applied to `v` into `out`.
  void apply_S_block(int g_dst, int g_src, const Vector& v, Vector& out) const {
    if (g_src > g_dst)
      return;  // downscatter-only kernels have no up-coupling
    ++counts.apply_S;
    apply_S_block_impl(g_dst, g_src, v, out);
  }

  // --- mass operators ---------------------------------------------------------

  Vector apply_M(const Vector& v) const {
    check_size(v);
    ++counts.apply_M;
    Vector out(v.size());
    for (long e = 0; e < n_elements_; ++e)
      out.segment(e * nloc_, nloc_).noalias() = mbeta_[e] * v.segment(e * nloc_, nloc_);
    return out;
  }

  /// beta-weighted mass quadratic form, sqrt(v . M v).
  double m_norm(const Vector& v) const { return std::sqrt(v.dot(apply_M(v))); }

  Vector apply_Mhat(const Vector& v) const {
    check_size(v);
    ++counts.apply_Mhat;
    if (s_.mode() == BasisMode::WeightedOrthonormal) return v;
    Vector out(v.size());
    for (long e = 0; e < n_elements_; ++e)
      out.segment(e * nloc_, nloc_).noalias() =
          s_.weighted_mass_block(e) * v.segment(e * nloc_, nloc_);
    return out;
  }

  Vector apply_L(const Vector& v) const {
    check_size(v);
    ++counts.apply_L;
    if (s_.mode() == BasisMode::WeightedOrthonormal) return v;
    Vector out(v.size());
    for (long e = 0; e < n_elements_; ++e)
      out.segment(e * nloc_, nloc_).noalias() =
          Matrix(s_.weighted_mass_chol(e).matrixL()) * v.segment(e * nloc_, nloc_);
    return out;
  }

  Vector apply_Linv(const Vector& v) const {
    check_size(v);
    ++counts.apply_Linv;
    if (s_.mode() == BasisMode::WeightedOrthonormal) return v;
    Vector out(v.size());
    for (long e = 0; e < n_elements_; ++e)
      out.segment(e * nloc_, nloc_) =
          s_.weighted_mass_chol(e).matrixL().solve(v.segment(e * nloc_, nloc_));
    return out;
  }

  Vector solve_Mhat(const Vector& v) const {
    if (s_.mode() == BasisMode::WeightedOrthonormal) return v;
    Vector out(v.size());
    for (long e = 0; e < n_elements_; ++e)
      out.segment(e * nloc_, nloc_) =
          s_.weighted_mass_chol(e).solve(v.segment(e * nloc_, nloc_));
    return out;
  }

  // --- relaxed operators (A - omega M), (S - omega M) -----------------------

  class Relaxed {
   public:
    Relaxed(const OperatorSet& ops, double omega) : ops_(&ops), omega_(omega) {
      const auto& s = ops.s_;
      lu_.resize(ops.n_elements_);
      for (int g = 0; g < s.n_groups(); ++g)
        for (int a = 0; a < s.n_arcs(); ++a)
          for (int kx = 0; kx < s.n_spatial_elements(); ++kx) {
            const long e = s.element_id(g, a, kx);
            lu_[e].compute(ops.dblock_[e] - omega * ops.mbeta_[e]);
          }
    }

    double omega() const { return omega_; }

    Vector solve(const Vector& rhs) const {
      ops_->check_size(rhs);
      ++ops_->counts.solve_A;
      Vector out(rhs.size());
      for (int g = 0; g < ops_->s_.n_groups(); ++g)
        ops_->solve_group_impl(g, rhs, out, lu_);
      return out;
    }

    void solve_group(int g, const Vector& rhs, Vector& out) const {
      ++ops_->counts.solve_A;
      ops_->solve_group_impl(g, rhs, out, lu_);
    }

    /// (S - omega M) v
    Vector apply_K(const Vector& v) const {
      return ops_->apply_S(v) - omega_ * ops_->apply_M(v);
    }

   private:
    const OperatorSet* ops_;
    double omega_;
    std::vector<Eigen::PartialPivLU<Matrix>> lu_;
  };

  Relaxed relaxed(double omega) const { return Relaxed(*this, omega); }

  // --- load vector -----------------------------------------------------------

  /// Assembles the load functional against the basis: volume source f plus
  /// weak inflow boundary data g_D.  Uses quadrature boosted by `load_extra`.
  Vector assemble_load(const std::function<double(const PhasePoint&)>& f,
                       const std::function<double(const PhasePoint&)>& g_dirichlet) const;

  // --- dense oracle ----------------------------------------------------------

  /// Dense assembly of one operator by direct quadrature over basis pairs.
  /// Independent of the factorised matrix-free path; intended as a test
  /// oracle and for small-problem direct solves.  Refuses N > max_dofs.
  Matrix assemble_dense(Which which, long max_dofs = 4096) const;

  /// Writes a dense matrix as "row col value" triplets.
  static void export_triplets(const Matrix& m, const std::string& path, double drop_tol = 0.0) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("export_triplets: cannot open " + path);
    char buf[80];
    for (long i = 0; i < m.rows(); ++i)
      for (long j = 0; j < m.cols(); ++j)
        if (std::abs(m(i, j)) >= drop_tol) {
          std::snprintf(buf, sizeof buf, "%ld %ld %.17g\n", i, j, m(i, j));
          out << buf;
        }
  }

 private:
  friend class Relaxed;

  const FeSpace& s_;
  SweepOrder sweep_order_;
  long n_elements_ = 0;
  int nloc_ = 0, npx_ = 0, nam_ = 0, nen_ = 0, nae_ = 0;

  // spatial reference factors (congruent elements)
  std::array<Matrix, 2> dx_;   // streaming: int (d_ax test) trial dx
  std::array<Matrix, 4> tgram_;  // trace Gram per side
  std::array<Matrix, 4> xgram_;  // trace x neighbour-trace Gram per side
  std::vector<Matrix> grho_;     // per spatial element: density-weighted Gram

  // angular factors per arc
  std::vector<Matrix> gmu_, vmu1_, vmu2_, fmu1_, fmu2_;

  // transport blocks per product element
  std::vector<Matrix> dblock_;
  std::vector<Eigen::PartialPivLU<Matrix>> lu_;
  struct Coupling {
    Side side;
    int neighbor;  // spatial element id
    Matrix block;  // already includes the -|mu.n| inflow sign
  };
  std::vector<std::array<std::optional<Coupling>, 2>> coupling_;
  std::vector<std::vector<int>> sweep_;  // per arc: spatial sweep order

  // scattering: per (g_dst, g_src <= g_dst) dense angular-energy coupling
  std::vector<std::vector<Matrix>> kblocks_;

  // beta-weighted mass blocks per element (orthonormal basis)
  std::vector<Matrix> mbeta_;

  void check_size(const Vector& v) const {
    if (v.size() != s_.n_dofs())
      throw std::invalid_argument("operator: coefficient vector has wrong layout size");
  }

  int angular_energy_index(int arc, int im, int ie) const {
    return arc * nam_ * nen_ + im + nam_ * ie;
  }

  // ------------------------------------------------------------------ setup

  void build_spatial_factors() {
    nloc_ = s_.n_local();
    npx_ = s_.n_spatial_basis();
    nam_ = s_.n_angular_basis();
    nen_ = s_.n_energy_basis();
    nae_ = s_.n_arcs() * nam_ * nen_;
    n_elements_ = static_cast<long>(s_.n_groups()) * s_.n_arcs() * s_.n_spatial_elements();

    const auto& el = s_.mesh().spatial.elements[0];
    const double jac2 = el.hx * el.hy / 4.0;
    const double ss = s_.spatial_scale();
    dx_[0] = Matrix::Zero(npx_, npx_);
    dx_[1] = Matrix::Zero(npx_, npx_);
    for (int k = 0; k < s_.n_spatial_nodes(); ++k) {
      const double w = s_.spatial_node_weight(k) * jac2;
      for (int i = 0; i < npx_; ++i)
        for (int j = 0; j < npx_; ++j) {
          dx_[0](i, j) += w * s_.spatial_grad_xi()(k, i) * (2.0 / el.hx) * ss *
                          s_.spatial_values()(k, j) * ss;
          dx_[1](i, j) += w * s_.spatial_grad_eta()(k, i) * (2.0 / el.hy) * ss *
                          s_.spatial_values()(k, j) * ss;
        }
    }
    const auto& qf = s_.face_rule();
    for (int sd = 0; sd < 4; ++sd) {
      const Side side = static_cast<Side>(sd);
      const double hface = side_axis(side) == 0 ? el.hy : el.hx;
      const auto& tr = s_.spatial_trace(side);
      const auto& trn = s_.spatial_trace(opposite(side));
      tgram_[sd] = Matrix::Zero(npx_, npx_);
      xgram_[sd] = Matrix::Zero(npx_, npx_);
      for (std::size_t k = 0; k < qf.size(); ++k) {
        const double w = qf.weights[k] * hface / 2.0;
        for (int i = 0; i < npx_; ++i)
          for (int j = 0; j < npx_; ++j) {
            tgram_[sd](i, j) += w * tr(k, i) * ss * tr(k, j) * ss;
            xgram_[sd](i, j) += w * tr(k, i) * ss * trn(k, j) * ss;
          }
      }
    }
    // density-weighted spatial Gram for the scattering operator
    grho_.resize(s_.n_spatial_elements());
    for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
      const auto& e = s_.mesh().spatial.elements[kx];
      grho_[kx] = Matrix::Zero(npx_, npx_);
      for (int k = 0; k < s_.n_spatial_nodes(); ++k) {
        const double x = e.x0 + 0.5 * e.hx * (1.0 + s_.spatial_node_xi(k));
        const double y = e.y0 + 0.5 * e.hy * (1.0 + s_.spatial_node_eta(k));
        const double w =
            s_.spatial_node_weight(k) * jac2 * s_.model().electron_density(x, y);
        for (int i = 0; i < npx_; ++i)
          for (int j = 0; j < npx_; ++j)
            grho_[kx](i, j) += w * s_.spatial_values()(k, i) * ss * s_.spatial_values()(k, j) * ss;
      }
    }
  }

  void build_angular_factors() {
    const int na = s_.n_arcs();
    gmu_.resize(na);
    vmu1_.resize(na);
    vmu2_.resize(na);
    fmu1_.resize(na);
    fmu2_.resize(na);
    for (int a = 0; a < na; ++a) {
      gmu_[a] = Matrix::Zero(nam_, nam_);
      vmu1_[a] = Matrix::Zero(nam_, nam_);
      vmu2_[a] = Matrix::Zero(nam_, nam_);
      fmu1_[a] = Matrix::Zero(nam_, nam_);
      fmu2_[a] = Matrix::Zero(nam_, nam_);
      const auto& nodes = s_.angular_nodes(a);
      const auto& av = s_.angular_values(a);
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const double w = nodes[k].weight;
        for (int m = 0; m < nam_; ++m)
          for (int n = 0; n < nam_; ++n) {
            const double p = av(k, m) * av(k, n);
            gmu_[a](m, n) += w * p;
            vmu1_[a](m, n) += w * nodes[k].mu1 * p;
            vmu2_[a](m, n) += w * nodes[k].mu2 * p;
            fmu1_[a](m, n) += w * std::abs(nodes[k].mu1) * p;
            fmu2_[a](m, n) += w * std::abs(nodes[k].mu2) * p;
          }
      }
    }
  }

  /// expand a spatial-only matrix to the (x,E) block (identity in energy)
  Matrix xe_from_spatial(const Matrix& sx) const {
    Matrix out = Matrix::Zero(npx_ * nen_, npx_ * nen_);
    for (int e = 0; e < nen_; ++e)
      out.block(e * npx_, e * npx_, npx_, npx_) = sx;
    return out;
  }

  void build_transport_blocks() {
    dblock_.resize(n_elements_);
    lu_.resize(n_elements_);
    coupling_.resize(n_elements_);
    sweep_.resize(s_.n_arcs());

    const int n = s_.mesh().spatial.n_per_axis;
    for (int a = 0; a < s_.n_arcs(); ++a) {
      const auto& arc = s_.mesh().angular.elements[a];
      std::vector<int>& order = sweep_[a];
      order.reserve(static_cast<std::size_t>(n) * n);
      if (sweep_order_ == SweepOrder::RowMajor) {
        for (int jy = 0; jy < n; ++jy)
          for (int jx = 0; jx < n; ++jx)
            order.push_back(s_.mesh().spatial.index(arc.sign_x > 0 ? jx : n - 1 - jx,
                                                    arc.sign_y > 0 ? jy : n - 1 - jy));
      } else {
        for (int jx = 0; jx < n; ++jx)
          for (int jy = 0; jy < n; ++jy)
            order.push_back(s_.mesh().spatial.index(arc.sign_x > 0 ? jx : n - 1 - jx,
                                                    arc.sign_y > 0 ? jy : n - 1 - jy));
      }
    }

    for (int g = 0; g < s_.n_groups(); ++g)
      for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
        const Matrix wxe = s_.xe_gram(g, kx, [&](double x, double y, double E) {
          return s_.model().alpha(x, y, E) + s_.model().beta(x, y, E);
        });
        for (int a = 0; a < s_.n_arcs(); ++a) {
          const auto& arc = s_.mesh().angular.elements[a];
          const long e = s_.element_id(g, a, kx);
          const auto& elem = s_.mesh().spatial.elements[kx];

          Matrix raw = s_.combine(wxe, gmu_[a]);
          raw -= s_.combine(xe_from_spatial(dx_[0]), vmu1_[a]);
          raw -= s_.combine(xe_from_spatial(dx_[1]), vmu2_[a]);

          const std::array<Side, 2> outflow = {
              arc.sign_x > 0 ? Side::Right : Side::Left,
              arc.sign_y > 0 ? Side::Top : Side::Bottom};
          for (Side sd : outflow)
            raw += s_.combine(xe_from_spatial(tgram_[static_cast<int>(sd)]),
                              side_axis(sd) == 0 ? fmu1_[a] : fmu2_[a]);

          const Matrix& c = s_.transform(g, a, kx);
          dblock_[e] = c * raw * c.transpose();
          lu_[e].compute(dblock_[e]);

          const std::array<Side, 2> inflow = {
              arc.sign_x > 0 ? Side::Left : Side::Right,
              arc.sign_y > 0 ? Side::Bottom : Side::Top};
          for (int which = 0; which < 2; ++which) {
            const Side sd = inflow[which];
            const int nb = elem.neighbor[static_cast<int>(sd)];
            if (nb < 0) continue;
            Matrix craw = -s_.combine(xe_from_spatial(xgram_[static_cast<int>(sd)]),
                                      side_axis(sd) == 0 ? fmu1_[a] : fmu2_[a]);
            coupling_[e][which] =
                Coupling{sd, nb, c * craw * s_.transform(g, a, nb).transpose()};
          }
        }
      }
  }

  void build_scattering() {
    const int ng = s_.n_groups();
    kblocks_.assign(ng, {});
    for (int g = 0; g < ng; ++g) kblocks_[g].assign(g + 1, Matrix());

    if (s_.model().is_mono()) {
      Matrix k = Matrix::Zero(nae_, nae_);
      for (int at = 0; at < s_.n_arcs(); ++at) {
        const auto& tn = s_.angular_nodes(at);
        const auto& tv = s_.angular_values(at);
        for (int as = 0; as < s_.n_arcs(); ++as) {
          const auto& sn = s_.angular_nodes(as);
          const auto& sv = s_.angular_values(as);
          for (std::size_t kt = 0; kt < tn.size(); ++kt)
            for (std::size_t ks = 0; ks < sn.size(); ++ks) {
              const double c = tn[kt].mu1 * sn[ks].mu1 + tn[kt].mu2 * sn[ks].mu2;
              const double w =
                  tn[kt].weight * sn[ks].weight * s_.model().mono_kernel(c);
              for (int im = 0; im < nam_; ++im)
                for (int jm = 0; jm < nam_; ++jm)
                  for (int ie = 0; ie < nen_; ++ie)  // kernel energy-independent
                    k(angular_energy_index(at, im, ie),
                      angular_energy_index(as, jm, ie)) += w * tv(kt, im) * sv(ks, jm);
            }
        }
      }
      kblocks_[0][0] = std::move(k);
      return;
    }

    // Compton: collapse the outgoing-energy integral onto the kinematic curve
    const auto& emesh = s_.mesh().energy;
    const double me = s_.model().compton_data().electron_rest_energy;
    const double re = s_.model().compton_data().classical_electron_radius;
    for (int g = 0; g < ng; ++g)
      for (int gs = 0; gs <= g; ++gs) kblocks_[g][gs] = Matrix::Zero(nae_, nae_);

    const auto& qe = s_.energy_rule();
    for (int gs = 0; gs < ng; ++gs) {
      const double elo = emesh.group_lo(gs), ew = emesh.group_width(gs);
      const double es_src = s_.energy_scale(gs);
      for (int as = 0; as < s_.n_arcs(); ++as) {
        const auto& sn = s_.angular_nodes(as);
        const auto& sv = s_.angular_values(as);
        for (std::size_t ks = 0; ks < sn.size(); ++ks)
          for (std::size_t le = 0; le < qe.size(); ++le) {
            const double ein = elo + 0.5 * ew * (1.0 + qe.points[le]);
            const double wsrc = sn[ks].weight * qe.weights[le] * (ew / 2.0);
            for (int at = 0; at < s_.n_arcs(); ++at) {
              const auto& tn = s_.angular_nodes(at);
              const auto& tv = s_.angular_values(at);
              for (std::size_t kt = 0; kt < tn.size(); ++kt) {
                const double c = tn[kt].mu1 * sn[ks].mu1 + tn[kt].mu2 * sn[ks].mu2;
                const double eout = compton_kinematics(ein, c, me);
                const int gt = emesh.locate_or_none(eout);
                if (gt < 0) continue;  // scattered out of the energy domain
                const double kern = klein_nishina(ein, eout, c, re);
                const double w = wsrc * tn[kt].weight * kern;
                const double ehat =
                    2.0 * (eout - emesh.group_lo(gt)) / emesh.group_width(gt) - 1.0;
                const double es_dst = s_.energy_scale(gt);
                Matrix& kb = kblocks_[gt][gs];
                for (int ie = 0; ie < nen_; ++ie) {
                  // outgoing-energy basis at the kinematic point
                  const double pe =
                      legendre(ie, ehat) * std::sqrt((2.0 * ie + 1.0) / 2.0) * es_dst;
                  for (int im = 0; im < nam_; ++im) {
                    const double ti = w * tv(kt, im) * pe;
                    for (int je = 0; je < nen_; ++je) {
                      const double pj = legendre(je, qe.points[le]) *
                                        std::sqrt((2.0 * je + 1.0) / 2.0) * es_src;
                      for (int jm = 0; jm < nam_; ++jm)
                        kb(angular_energy_index(at, im, ie),
                           angular_energy_index(as, jm, je)) += ti * pj * sv(ks, jm);
                    }
                  }
                }
              }
            }
          }
      }
    }
  }

  void build_mass_blocks() {
    mbeta_.resize(n_elements_);
    for (int g = 0; g < s_.n_groups(); ++g)
      for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
        const Matrix mxe = s_.xe_gram(g, kx, [&](double x, double y, double E) {
          return s_.model().beta(x, y, E);
        });
        for (int a = 0; a < s_.n_arcs(); ++a) {
          const long e = s_.element_id(g, a, kx);
          const Matrix& c = s_.transform(g, a, kx);
          mbeta_[e] = c * s_.combine(mxe, gmu_[a]) * c.transpose();
        }
      }
  }

  // ------------------------------------------------------------------ actions

  void apply_A_group_impl(int g, const Vector& in, Vector& out, int, int) const {
    for (int a = 0; a < s_.n_arcs(); ++a)
      for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
        const long e = s_.element_id(g, a, kx);
        const long off = s_.block_offset(g, a, kx);
        out.segment(off, nloc_).noalias() = dblock_[e] * in.segment(off, nloc_);
        for (const auto& cp : coupling_[e])
          if (cp)
            out.segment(off, nloc_).noalias() +=
                cp->block * in.segment(s_.block_offset(g, a, cp->neighbor), nloc_);
      }
  }

  void solve_group_impl(int g, const Vector& rhs, Vector& out,
                        const std::vector<Eigen::PartialPivLU<Matrix>>& lu) const {
    Vector local(nloc_);
    for (int a = 0; a < s_.n_arcs(); ++a)
      for (int kx : sweep_[a]) {
        const long e = s_.element_id(g, a, kx);
        const long off = s_.block_offset(g, a, kx);
        local = rhs.segment(off, nloc_);
        for (const auto& cp : coupling_[e])
          if (cp)
            local.noalias() -=
                cp->block * out.segment(s_.block_offset(g, a, cp->neighbor), nloc_);
        out.segment(off, nloc_) = lu[e].solve(local);
        if (!out.segment(off, nloc_).allFinite())
          throw NumericalBreakdownError("transport sweep: singular local block", e);
      }
  }

  void apply_S_block_impl(int g_dst, int g_src, const Vector& in, Vector& out) const {
    const Matrix& kb = s_.model().is_mono() ? kblocks_[0][0] : kblocks_[g_dst][g_src];
    const int nx = s_.n_spatial_elements();
    const int cols_per_arc = nam_ * nen_;
    Matrix xsrc(npx_, nae_), y(npx_, nae_), raw(npx_, cols_per_arc);
    for (int kx = 0; kx < nx; ++kx) {
      // gather raw coefficients of the source group on this spatial element
      for (int a = 0; a < s_.n_arcs(); ++a) {
        Vector r = s_.transform(g_src, a, kx).transpose() *
                   Vector(in.segment(s_.block_offset(g_src, a, kx), nloc_));
        xsrc.middleCols(a * cols_per_arc, cols_per_arc) =
            Eigen::Map<Matrix>(r.data(), npx_, cols_per_arc);
      }
      y.noalias() = grho_[kx] * (xsrc * kb.transpose());
      for (int a = 0; a < s_.n_arcs(); ++a) {
        raw = y.middleCols(a * cols_per_arc, cols_per_arc);
        out.segment(s_.block_offset(g_dst, a, kx), nloc_).noalias() +=
            s_.transform(g_dst, a, kx) *
            Eigen::Map<Vector>(raw.data(), nloc_);
      }
    }
  }

 public:
  /// Expose the per-arc spatial sweep order (used by tests).
  const std::vector<int>& sweep_order(int arc) const { return sweep_[arc]; }
};

// ---------------------------------------------------------------------------
// Load vector
// ---------------------------------------------------------------------------

inline Vector OperatorSet::assemble_load(
    const std::function<double(const PhasePoint&)>& f,
    const std::function<double(const PhasePoint&)>& g_dirichlet) const {
  const auto& mesh = s_.mesh();
  const auto& quad = s_.quadrature();
  const int extra = quad.load_extra;
  const QuadRule1D qs = gauss_legendre(quad.spatial_points(s_.degrees().p) + extra);
  const QuadRule1D qf = gauss_legendre(quad.face_points(s_.degrees().p) + extra);
  const QuadRule1D qe = gauss_legendre(quad.energy_points(s_.degrees().r) + extra);
  const int nqa = quad.angular_points(s_.degrees().q) + extra;

  Vector out = Vector::Zero(s_.n_dofs());

  auto raw_at = [&](double xi, double eta, double shat, double ehat, int g, Vector& raw) {
    s_.raw_basis(xi, eta, shat, ehat, g, raw);
  };

  Vector raw(nloc_), acc(nloc_);
  for (int g = 0; g < s_.n_groups(); ++g) {
    const double elo = mesh.energy.group_lo(g), ew = mesh.energy.group_width(g);
    for (int a = 0; a < s_.n_arcs(); ++a) {
      const auto anodes = angular_quadrature(mesh.angular.elements[a], nqa);
      for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
        const auto& el = mesh.spatial.elements[kx];
        const double jac = (el.hx * el.hy / 4.0) * (ew / 2.0);
        acc.setZero();
        for (std::size_t ki = 0; ki < qs.size(); ++ki)
          for (std::size_t kj = 0; kj < qs.size(); ++kj) {
            const double xi = qs.points[ki], eta = qs.points[kj];
            const double x = el.x0 + 0.5 * el.hx * (1.0 + xi);
            const double y = el.y0 + 0.5 * el.hy * (1.0 + eta);
            const double wxy = qs.weights[ki] * qs.weights[kj];
            for (const auto& an : anodes)
              for (std::size_t le = 0; le < qe.size(); ++le) {
                const double E = elo + 0.5 * ew * (1.0 + qe.points[le]);
                const double fv = f({x, y, an.mu1, an.mu2, E});
                if (fv == 0.0) continue;
                const double w = wxy * an.weight * qe.weights[le] * jac * fv;
                raw_at(xi, eta, an.shat, qe.points[le], g, raw);
                acc += w * raw;
              }
          }
        // weak inflow boundary data
        const auto& arc = mesh.angular.elements[a];
        for (int sd = 0; sd < 4; ++sd) {
          if (el.neighbor[sd] >= 0) continue;
          const Side side = static_cast<Side>(sd);
          const int axis = side_axis(side);
          const double nsign = side_sign(side);
          const int musign = axis == 0 ? arc.sign_x : arc.sign_y;
          if (musign * nsign >= 0) continue;  // outflow boundary: no data term
          const double hface = axis == 0 ? el.hy : el.hx;
          for (std::size_t kf = 0; kf < qf.size(); ++kf) {
            const double t = qf.points[kf];
            double xi = 0, eta = 0;
            switch (side) {
              case Side::Left: xi = -1; eta = t; break;
              case Side::Right: xi = 1; eta = t; break;
              case Side::Bottom: xi = t; eta = -1; break;
              case Side::Top: xi = t; eta = 1; break;
            }
            const double x = el.x0 + 0.5 * el.hx * (1.0 + xi);
            const double y = el.y0 + 0.5 * el.hy * (1.0 + eta);
            for (const auto& an : anodes) {
              const double mun = axis == 0 ? an.mu1 : an.mu2;
              for (std::size_t le = 0; le < qe.size(); ++le) {
                const double E = elo + 0.5 * ew * (1.0 + qe.points[le]);
                const double gv = g_dirichlet({x, y, an.mu1, an.mu2, E});
                if (gv == 0.0) continue;
                const double w = qf.weights[kf] * (hface / 2.0) * an.weight *
                                 std::abs(mun) * qe.weights[le] * (ew / 2.0) * gv;
                raw_at(xi, eta, an.shat, qe.points[le], g, raw);
                acc += w * raw;
              }
            }
          }
        }
        out.segment(s_.block_offset(g, a, kx), nloc_).noalias() =
            s_.transform(g, a, kx) * acc;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense assembly oracle
// ---------------------------------------------------------------------------

inline Matrix OperatorSet::assemble_dense(Which which, long max_dofs) const {
  const long n = s_.n_dofs();
  if (n > max_dofs)
    throw std::invalid_argument("assemble_dense: problem size " + std::to_string(n) +
                                " exceeds the dense cap " + std::to_string(max_dofs));
  const auto& mesh = s_.mesh();
  const double ss = s_.spatial_scale();
  Matrix out = Matrix::Zero(n, n);

  // raw basis value and gradient vectors at a full tensor node
  auto raw_vectors = [&](int g, int kx, int k, std::size_t ka, int arc, std::size_t le,
                         Vector& val, Vector* gx, Vector* gy) {
    const auto& el = mesh.spatial.elements[kx];
    const double es = s_.energy_scale(g);
    const auto& av = s_.angular_values(arc);
    val.resize(nloc_);
    if (gx) gx->resize(nloc_);
    if (gy) gy->resize(nloc_);
    for (int ie = 0; ie < nen_; ++ie)
      for (int im = 0; im < nam_; ++im)
        for (int i = 0; i < npx_; ++i) {
          const int idx = s_.local_index(i, im, ie);
          const double ang_en =
              av(static_cast<int>(ka), im) * s_.energy_values()(static_cast<int>(le), ie) * es;
          val[idx] = s_.spatial_values()(k, i) * ss * ang_en;
          if (gx) (*gx)[idx] = s_.spatial_grad_xi()(k, i) * (2.0 / el.hx) * ss * ang_en;
          if (gy) (*gy)[idx] = s_.spatial_grad_eta()(k, i) * (2.0 / el.hy) * ss * ang_en;
        }
  };

  if (which == Which::A) {
    Vector val, gx, gy;
    for (int g = 0; g < s_.n_groups(); ++g) {
      const double elo = mesh.energy.group_lo(g), ew = mesh.energy.group_width(g);
      for (int a = 0; a < s_.n_arcs(); ++a) {
        const auto& anodes = s_.angular_nodes(a);
        std::vector<Matrix> rawdiag(s_.n_spatial_elements(),
                                    Matrix::Zero(nloc_, nloc_));
        // volume terms
        for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
          const auto& el = mesh.spatial.elements[kx];
          const double jac = (el.hx * el.hy / 4.0) * (ew / 2.0);
          for (int k = 0; k < s_.n_spatial_nodes(); ++k) {
            const double x = el.x0 + 0.5 * el.hx * (1.0 + s_.spatial_node_xi(k));
            const double y = el.y0 + 0.5 * el.hy * (1.0 + s_.spatial_node_eta(k));
            for (std::size_t ka = 0; ka < anodes.size(); ++ka)
              for (std::size_t le = 0; le < s_.energy_rule().size(); ++le) {
                const double E = elo + 0.5 * ew * (1.0 + s_.energy_rule().points[le]);
                const double w = s_.spatial_node_weight(k) * anodes[ka].weight *
                                 s_.energy_rule().weights[le] * jac;
                const double sig = s_.model().alpha(x, y, E) + s_.model().beta(x, y, E);
                raw_vectors(g, kx, k, ka, a, le, val, &gx, &gy);
                const Vector stream = anodes[ka].mu1 * gx + anodes[ka].mu2 * gy;
                rawdiag[kx].noalias() += w * (sig * val - stream) * val.transpose();
              }
          }
        }
        // face terms: upwind fluxes
        const auto& arc = mesh.angular.elements[a];
        const auto& qf = s_.face_rule();
        for (const auto& face : mesh.spatial.faces) {
          const int axis = side_axis(face.side);
          const int musign = axis == 0 ? arc.sign_x : arc.sign_y;
          const bool in_is_upwind = musign * side_sign(face.side) > 0;
          const int up = in_is_upwind ? face.elem_in : face.elem_out;
          const int down = in_is_upwind ? face.elem_out : face.elem_in;
          const Side up_side = in_is_upwind ? face.side : opposite(face.side);
          if (up < 0) continue;  // inflow boundary: handled by the load vector
          const auto& el = mesh.spatial.elements[face.elem_in];
          const double hface = axis == 0 ? el.hy : el.hx;
          Matrix tdiag = Matrix::Zero(nloc_, nloc_);
          Matrix coup = Matrix::Zero(nloc_, nloc_);
          const auto& tr_up = s_.spatial_trace(up_side);
          const auto& tr_down = down >= 0 ? s_.spatial_trace(opposite(up_side)) : tr_up;
          const auto& av = s_.angular_values(a);
          const double es = s_.energy_scale(g);
          Vector vu(nloc_), vd(nloc_);
          for (std::size_t kf = 0; kf < qf.size(); ++kf)
            for (std::size_t ka = 0; ka < anodes.size(); ++ka) {
              const double mun = axis == 0 ? anodes[ka].mu1 : anodes[ka].mu2;
              for (std::size_t le = 0; le < s_.energy_rule().size(); ++le) {
                const double w = qf.weights[kf] * (hface / 2.0) * anodes[ka].weight *
                                 std::abs(mun) * s_.energy_rule().weights[le] * (ew / 2.0);
                for (int ie = 0; ie < nen_; ++ie)
                  for (int im = 0; im < nam_; ++im) {
                    const double ang_en = av(static_cast<int>(ka), im) *
                                          s_.energy_values()(static_cast<int>(le), ie) * es;
                    for (int i = 0; i < npx_; ++i) {
                      const int idx = s_.local_index(i, im, ie);
                      vu[idx] = tr_up(static_cast<int>(kf), i) * ss * ang_en;
                      vd[idx] = tr_down(static_cast<int>(kf), i) * ss * ang_en;
                    }
                  }
                tdiag.noalias() += w * vu * vu.transpose();
                if (down >= 0) coup.noalias() -= w * vd * vu.transpose();
              }
            }
          rawdiag[up] += tdiag;
          if (down >= 0) {
            const Matrix& cd = s_.transform(g, a, down);
            const Matrix& cu = s_.transform(g, a, up);
            out.block(s_.block_offset(g, a, down), s_.block_offset(g, a, up), nloc_, nloc_) +=
                cd * coup * cu.transpose();
          }
        }
        for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
          const Matrix& c = s_.transform(g, a, kx);
          out.block(s_.block_offset(g, a, kx), s_.block_offset(g, a, kx), nloc_, nloc_) +=
              c * rawdiag[kx] * c.transpose();
        }
      }
    }
    return out;
  }

  if (which == Which::M || which == Which::Mhat) {
    Vector val;
    for (int g = 0; g < s_.n_groups(); ++g) {
      const double elo = mesh.energy.group_lo(g), ew = mesh.energy.group_width(g);
      for (int a = 0; a < s_.n_arcs(); ++a) {
        const auto& anodes = s_.angular_nodes(a);
        for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
          const auto& el = mesh.spatial.elements[kx];
          const double jac = (el.hx * el.hy / 4.0) * (ew / 2.0);
          Matrix raw = Matrix::Zero(nloc_, nloc_);
          for (int k = 0; k < s_.n_spatial_nodes(); ++k) {
            const double x = el.x0 + 0.5 * el.hx * (1.0 + s_.spatial_node_xi(k));
            const double y = el.y0 + 0.5 * el.hy * (1.0 + s_.spatial_node_eta(k));
            for (std::size_t ka = 0; ka < anodes.size(); ++ka)
              for (std::size_t le = 0; le < s_.energy_rule().size(); ++le) {
                const double E = elo + 0.5 * ew * (1.0 + s_.energy_rule().points[le]);
                const double coeff = which == Which::M ? s_.model().beta(x, y, E)
                                                       : s_.model().alphabar(x, y, E);
                const double w = s_.spatial_node_weight(k) * anodes[ka].weight *
                                 s_.energy_rule().weights[le] * jac * coeff;
                raw_vectors(g, kx, k, ka, a, le, val, nullptr, nullptr);
                raw.noalias() += w * val * val.transpose();
              }
          }
          const Matrix& c = s_.transform(g, a, kx);
          out.block(s_.block_offset(g, a, kx), s_.block_offset(g, a, kx), nloc_, nloc_) =
              c * raw * c.transpose();
        }
      }
    }
    return out;
  }

  // scattering: diagonal in space, dense over angle (and lower triangular in groups)
  const auto& emesh = mesh.energy;
  const bool mono = s_.model().is_mono();
  const double me = mono ? 0.0 : s_.model().compton_data().electron_rest_energy;
  const double re = mono ? 0.0 : s_.model().compton_data().classical_electron_radius;
  for (int kx = 0; kx < s_.n_spatial_elements(); ++kx) {
    const auto& el = mesh.spatial.elements[kx];
    const double jac2 = el.hx * el.hy / 4.0;
    // spatial density-weighted node data
    for (int gs = 0; gs < s_.n_groups(); ++gs) {
      const double elo = emesh.group_lo(gs), ew = emesh.group_width(gs);
      const double es_src = s_.energy_scale(gs);
      for (int as = 0; as < s_.n_arcs(); ++as) {
        const auto& snodes = s_.angular_nodes(as);
        const auto& svls = s_.angular_values(as);
        for (int at = 0; at < s_.n_arcs(); ++at) {
          const auto& tnodes = s_.angular_nodes(at);
          const auto& tvls = s_.angular_values(at);
          std::vector<Matrix> rawpair(s_.n_groups());
          for (std::size_t ks = 0; ks < snodes.size(); ++ks)
            for (std::size_t le = 0; le < s_.energy_rule().size(); ++le) {
              const double ein = elo + 0.5 * ew * (1.0 + s_.energy_rule().points[le]);
              const double wsrc = snodes[ks].weight * s_.energy_rule().weights[le] * (ew / 2.0);
              for (std::size_t kt = 0; kt < tnodes.size(); ++kt) {
                const double c = tnodes[kt].mu1 * snodes[ks].mu1 + tnodes[kt].mu2 * snodes[ks].mu2;
                double kern, eout, ehat;
                int gt;
                if (mono) {
                  kern = s_.model().mono_kernel(c);
                  gt = gs;
                  eout = ein;
                  ehat = s_.energy_rule().points[le];
                } else {
                  eout = compton_kinematics(ein, c, me);
                  gt = emesh.locate_or_none(eout);
                  if (gt < 0) continue;
                  kern = klein_nishina(ein, eout, c, re);
                  ehat = 2.0 * (eout - emesh.group_lo(gt)) / emesh.group_width(gt) - 1.0;
                }
                if (rawpair[gt].size() == 0) rawpair[gt] = Matrix::Zero(nloc_, nloc_);
                const double w0 = wsrc * tnodes[kt].weight * kern;
                const double es_dst = s_.energy_scale(gt);
                // accumulate over spatial nodes and local pairs
                for (int k2 = 0; k2 < s_.n_spatial_nodes(); ++k2) {
                  const double x = el.x0 + 0.5 * el.hx * (1.0 + s_.spatial_node_xi(k2));
                  const double y = el.y0 + 0.5 * el.hy * (1.0 + s_.spatial_node_eta(k2));
                  const double w = w0 * s_.spatial_node_weight(k2) * jac2 *
                                   s_.model().electron_density(x, y);
                  for (int ie = 0; ie < nen_; ++ie) {
                    const double pe = (mono ? s_.energy_values()(static_cast<int>(le), ie)
                                            : legendre(ie, ehat) *
                                                  std::sqrt((2.0 * ie + 1.0) / 2.0)) *
                                      es_dst;
                    for (int im = 0; im < nam_; ++im) {
                      const double ti = pe * tvls(static_cast<int>(kt), im);
                      for (int i = 0; i < npx_; ++i) {
                        const double test_v = w * ti * s_.spatial_values()(k2, i) * ss;
                        const int row = s_.local_index(i, im, ie);
                        for (int je = 0; je < nen_; ++je) {
                          const double pj = s_.energy_values()(static_cast<int>(le), je) * es_src;
                          for (int jm = 0; jm < nam_; ++jm) {
                            const double tj = pj * svls(static_cast<int>(ks), jm);
                            for (int j = 0; j < npx_; ++j)
                              rawpair[gt](row, s_.local_index(j, jm, je)) +=
                                  test_v * tj * s_.spatial_values()(k2, j) * ss;
                          }
                        }
                      }
                    }
                  }
                }
              }
            }
          for (int gt = 0; gt < s_.n_groups(); ++gt) {
            if (rawpair[gt].size() == 0) continue;
            const Matrix& ct = s_.transform(gt, at, kx);
            const Matrix& cs = s_.transform(gs, as, kx);
            out.block(s_.block_offset(gt, at, kx), s_.block_offset(gs, as, kx), nloc_, nloc_) +=
                ct * rawpair[gt] * cs.transpose();
          }
        }
      }
    }
  }
  return out;
}

}  // namespace lbt
