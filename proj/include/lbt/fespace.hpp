#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "lbt/errors.hpp"
#include "lbt/mesh.hpp"
#include "lbt/physics.hpp"
#include "lbt/quadrature.hpp"

namespace lbt {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Local polynomial degrees: total degree p in space, tensor degree q on the
/// angular arc parameter, degree r in energy.
struct Degrees {
  int p = 1;
  int q = 1;
  int r = 0;
};

/// Which inner product the per-element basis is orthonormalised against.
/// `WeightedOrthonormal` uses the alphabar-weighted L2 product, which turns
/// the weighted mass operator into the identity; `RawLegendre` uses the plain
/// L2 product, leaving a nontrivial weighted mass and Cholesky weight.
enum class BasisMode { WeightedOrthonormal, RawLegendre };

inline int spatial_dim_2d(int p) { return (p + 1) * (p + 2) / 2; }

/// A point in the space-angle-energy phase space.
struct PhasePoint {
  double x = 0, y = 0;
  double mu1 = 0, mu2 = 0;
  double E = 0;
};

// ---------------------------------------------------------------------------

class FeSpace {
 public:
  FeSpace(ProductMesh mesh, CrossSectionModel model, Degrees deg,
          QuadratureConfig quad = {}, BasisMode mode = BasisMode::WeightedOrthonormal)
      : mesh_(std::move(mesh)),
        model_(std::move(model)),
        deg_(deg),
        quad_(quad),
        mode_(mode) {
    if (deg.p < 0 || deg.q < 0 || deg.r < 0)
      throw std::invalid_argument("FeSpace: polynomial degrees must be non-negative");
    npx_ = spatial_dim_2d(deg.p);
    nam_ = deg.q + 1;
    nen_ = deg.r + 1;
    nloc_ = npx_ * nam_ * nen_;
    n_spatial_ = static_cast<int>(mesh_.spatial.elements.size());
    n_arcs_ = mesh_.angular.n_elements;
    n_groups_ = mesh_.energy.n_groups();
    n_dofs_ = static_cast<long>(n_groups_) * n_arcs_ * n_spatial_ * nloc_;
    build_reference_tables();
    build_element_transforms();
  }

  // --- sizes and indexing ---------------------------------------------------

  const ProductMesh& mesh() const { return mesh_; }
  const CrossSectionModel& model() const { return model_; }
  const Degrees& degrees() const { return deg_; }
  const QuadratureConfig& quadrature() const { return quad_; }
  BasisMode mode() const { return mode_; }

  int n_local() const { return nloc_; }
  int n_spatial_basis() const { return npx_; }
  int n_angular_basis() const { return nam_; }
  int n_energy_basis() const { return nen_; }
  int n_spatial_elements() const { return n_spatial_; }
  int n_arcs() const { return n_arcs_; }
  int n_groups() const { return n_groups_; }
  long n_dofs() const { return n_dofs_; }

  /// Flat element id; blocks are group-major, then angular, then spatial.
  long element_id(int g, int arc, int kx) const {
    return (static_cast<long>(g) * n_arcs_ + arc) * n_spatial_ + kx;
  }
  long block_offset(int g, int arc, int kx) const { return element_id(g, arc, kx) * nloc_; }
  long group_offset(int g) const {
    return static_cast<long>(g) * n_arcs_ * n_spatial_ * nloc_;
  }
  long group_size() const { return static_cast<long>(n_arcs_) * n_spatial_ * nloc_; }
  int local_index(int ix, int im, int ie) const { return ix + npx_ * (im + nam_ * ie); }

  /// Orthonormalising transform of one element: phi_hat = C phi_raw.
  const Matrix& transform(int g, int arc, int kx) const {
    return C_[element_id(g, arc, kx)];
  }
  /// Raw-basis-mode weighted mass block (alphabar Gram) and its Cholesky factor.
  const Matrix& weighted_mass_block(long elem) const { return mhat_[elem]; }
  const Eigen::LLT<Matrix>& weighted_mass_chol(long elem) const {
    if (!mhat_valid_)
      throw InvalidDataError(
          "weighted mass blocks are not positive definite (alphabar <= 0 somewhere); "
          "the weighted-norm machinery is unavailable for this model");
    return mhat_chol_[elem];
  }

  // --- reference quadrature and basis tables --------------------------------

  const QuadRule1D& spatial_rule() const { return qs1_; }
  const QuadRule1D& face_rule() const { return qf1_; }
  const QuadRule1D& energy_rule() const { return qe1_; }
  const std::vector<AngularQuadPoint>& angular_nodes(int arc) const { return aq_[arc]; }

  int n_spatial_nodes() const { return static_cast<int>(svol_.size()); }
  double spatial_node_xi(int k) const { return svol_[k].xi; }
  double spatial_node_eta(int k) const { return svol_[k].eta; }
  /// reference weight on [-1,1]^2; multiply by hx*hy/4 for the physical weight
  double spatial_node_weight(int k) const { return svol_[k].w; }

  /// spatial reference basis values / derivatives at volume node k (row) for
  /// basis function i (column); derivatives are with respect to xi, eta
  const Matrix& spatial_values() const { return sval_; }
  const Matrix& spatial_grad_xi() const { return sgx_; }
  const Matrix& spatial_grad_eta() const { return sgy_; }
  /// trace values on a side at the face-rule nodes
  const Matrix& spatial_trace(Side s) const { return strace_[static_cast<int>(s)]; }
  const Matrix& energy_values() const { return evals_; }
  const Matrix& angular_values(int arc) const { return avals_[arc]; }

  /// physical scale of a spatial basis function (uniform mesh)
  double spatial_scale() const {
    const auto& e = mesh_.spatial.elements[0];
    return 2.0 / std::sqrt(e.hx * e.hy);
  }
  double energy_scale(int g) const { return std::sqrt(2.0 / mesh_.energy.group_width(g)); }

  // --- pointwise raw-basis evaluation ---------------------------------------

  /// raw tensor-Legendre basis values at local coordinates (all in [-1,1])
  void raw_basis(double xi, double eta, double shat, double ehat, int g,
                 Vector& out) const {
    out.resize(nloc_);
    const double ss = spatial_scale();
    const double es = energy_scale(g);
    std::vector<double> px(deg_.p + 1), py(deg_.p + 1), pa(nam_), pe(nen_);
    for (int a = 0; a <= deg_.p; ++a) {
      px[a] = legendre(a, xi) * norm1d(a);
      py[a] = legendre(a, eta) * norm1d(a);
    }
    for (int m = 0; m < nam_; ++m) pa[m] = legendre(m, shat) * norm1d(m);
    for (int e = 0; e < nen_; ++e) pe[e] = legendre(e, ehat) * norm1d(e) * es;
    for (int ie = 0; ie < nen_; ++ie)
      for (int im = 0; im < nam_; ++im)
        for (int i = 0; i < npx_; ++i)
          out[local_index(i, im, ie)] =
              px[sx_deg_[i]] * py[sy_deg_[i]] * ss * pa[im] * pe[ie];
  }

  /// spatial part of the raw basis (values and physical gradients) at (xi,eta)
  void raw_spatial_basis(double xi, double eta, Vector& val, Vector& gx, Vector& gy) const {
    val.resize(npx_);
    gx.resize(npx_);
    gy.resize(npx_);
    const auto& el = mesh_.spatial.elements[0];
    const double ss = spatial_scale();
    for (int i = 0; i < npx_; ++i) {
      const int a = sx_deg_[i], b = sy_deg_[i];
      const double pa = legendre(a, xi) * norm1d(a), pb = legendre(b, eta) * norm1d(b);
      const double da = legendre_derivative(a, xi) * norm1d(a);
      const double db = legendre_derivative(b, eta) * norm1d(b);
      val[i] = pa * pb * ss;
      gx[i] = da * pb * ss * 2.0 / el.hx;
      gy[i] = pa * db * ss * 2.0 / el.hy;
    }
  }

  int spatial_degree_x(int i) const { return sx_deg_[i]; }
  int spatial_degree_y(int i) const { return sy_deg_[i]; }

  /// All volume quadrature points as (x,y,E) samples, e.g. for evaluating
  /// cross-section suprema where the forms are sampled.
  std::vector<std::array<double, 3>> volume_sample_points() const {
    std::vector<std::array<double, 3>> pts;
    for (int g = 0; g < n_groups_; ++g) {
      const double elo = mesh_.energy.group_lo(g), w = mesh_.energy.group_width(g);
      for (const auto& el : mesh_.spatial.elements)
        for (int k = 0; k < n_spatial_nodes(); ++k)
          for (std::size_t le = 0; le < qe1_.size(); ++le)
            pts.push_back({el.x0 + 0.5 * el.hx * (1.0 + svol_[k].xi),
                           el.y0 + 0.5 * el.hy * (1.0 + svol_[k].eta),
                           elo + 0.5 * w * (1.0 + qe1_.points[le])});
    }
    return pts;
  }

 private:
  static double norm1d(int k) { return std::sqrt((2.0 * k + 1.0) / 2.0); }

  void build_reference_tables() {
    // spatial total-degree basis ordering: (a,b) with a+b <= p, a-major
    for (int total = 0; total <= deg_.p; ++total)
      for (int a = total; a >= 0; --a) {
        sx_deg_.push_back(a);
        sy_deg_.push_back(total - a);
      }

    qs1_ = gauss_legendre(quad_.spatial_points(deg_.p));
    qf1_ = gauss_legendre(quad_.face_points(deg_.p));
    qe1_ = gauss_legendre(quad_.energy_points(deg_.r));

    const int ns = static_cast<int>(qs1_.size());
    svol_.reserve(static_cast<std::size_t>(ns) * ns);
    for (int j = 0; j < ns; ++j)
      for (int i = 0; i < ns; ++i)
        svol_.push_back({qs1_.points[i], qs1_.points[j], qs1_.weights[i] * qs1_.weights[j]});

    const int nvs = static_cast<int>(svol_.size());
    sval_.resize(nvs, npx_);
    sgx_.resize(nvs, npx_);
    sgy_.resize(nvs, npx_);
    for (int k = 0; k < nvs; ++k)
      for (int i = 0; i < npx_; ++i) {
        const int a = sx_deg_[i], b = sy_deg_[i];
        sval_(k, i) = legendre(a, svol_[k].xi) * norm1d(a) * legendre(b, svol_[k].eta) * norm1d(b);
        sgx_(k, i) =
            legendre_derivative(a, svol_[k].xi) * norm1d(a) * legendre(b, svol_[k].eta) * norm1d(b);
        sgy_(k, i) =
            legendre(a, svol_[k].xi) * norm1d(a) * legendre_derivative(b, svol_[k].eta) * norm1d(b);
      }

    const int nf = static_cast<int>(qf1_.size());
    for (int s = 0; s < 4; ++s) {
      strace_[s].resize(nf, npx_);
      for (int k = 0; k < nf; ++k) {
        const double t = qf1_.points[k];
        double xi = 0, eta = 0;
        switch (static_cast<Side>(s)) {
          case Side::Left: xi = -1; eta = t; break;
          case Side::Right: xi = 1; eta = t; break;
          case Side::Bottom: xi = t; eta = -1; break;
          case Side::Top: xi = t; eta = 1; break;
        }
        for (int i = 0; i < npx_; ++i) {
          const int a = sx_deg_[i], b = sy_deg_[i];
          strace_[s](k, i) = legendre(a, xi) * norm1d(a) * legendre(b, eta) * norm1d(b);
        }
      }
    }

    evals_.resize(static_cast<int>(qe1_.size()), nen_);
    for (std::size_t k = 0; k < qe1_.size(); ++k)
      for (int e = 0; e < nen_; ++e)
        evals_(static_cast<int>(k), e) = legendre(e, qe1_.points[k]) * norm1d(e);

    const int nqa = quad_.angular_points(deg_.q);
    aq_.resize(n_arcs_);
    avals_.resize(n_arcs_);
    for (int a = 0; a < n_arcs_; ++a) {
      aq_[a] = angular_quadrature(mesh_.angular.elements[a], nqa);
      avals_[a].resize(nqa, nam_);
      for (int k = 0; k < nqa; ++k)
        for (int m = 0; m < nam_; ++m)
          avals_[a](k, m) = legendre(m, aq_[a][k].shat) * norm1d(m);
    }
  }

  void build_element_transforms() {
    const long n_elems = static_cast<long>(n_groups_) * n_arcs_ * n_spatial_;
    C_.resize(n_elems);
    if (mode_ == BasisMode::RawLegendre) {
      mhat_.resize(n_elems);
      mhat_chol_.resize(n_elems);
    }
    // angular dmu-Gram per arc (weight-independent)
    std::vector<Matrix> ga(n_arcs_);
    for (int a = 0; a < n_arcs_; ++a) {
      ga[a] = Matrix::Zero(nam_, nam_);
      for (std::size_t k = 0; k < aq_[a].size(); ++k)
        ga[a] += aq_[a][k].weight * avals_[a].row(k).transpose() * avals_[a].row(k);
    }

    for (int g = 0; g < n_groups_; ++g)
      for (int kx = 0; kx < n_spatial_; ++kx) {
        // (x,E)-Gram with weight alphabar (or 1 in raw mode) for the transform
        Matrix gxe_w = xe_gram(g, kx, [&](double x, double y, double E) {
          return mode_ == BasisMode::WeightedOrthonormal ? model_.alphabar(x, y, E) : 1.0;
        });
        Matrix gxe_ab;
        if (mode_ == BasisMode::RawLegendre)
          gxe_ab = xe_gram(g, kx, [&](double x, double y, double E) {
            return model_.alphabar(x, y, E);
          });
        for (int a = 0; a < n_arcs_; ++a) {
          const long id = element_id(g, a, kx);
          Matrix gram = combine(gxe_w, ga[a]);
          Eigen::LLT<Matrix> llt(gram);
          if (llt.info() != Eigen::Success)
            throw InvalidDataError(
                "basis orthonormalisation: weighted Gram not positive definite "
                "(alphabar <= 0 on element " + std::to_string(id) + ")");
          C_[id] = Matrix(llt.matrixL())
                       .triangularView<Eigen::Lower>()
                       .solve(Matrix::Identity(nloc_, nloc_));
          if (mode_ == BasisMode::RawLegendre) {
            // weighted mass in the working (plain-L2-orthonormal) basis;
            // a degenerate weight only disables the weighted-norm machinery,
            // reported when it is actually used
            mhat_[id] = C_[id] * combine(gxe_ab, ga[a]) * C_[id].transpose();
            mhat_chol_[id].compute(mhat_[id]);
            if (mhat_chol_[id].info() != Eigen::Success) mhat_valid_ = false;
          }
        }
      }
  }

 public:
  /// (x,E)-Gram of the raw spatial x energy basis with a pointwise weight.
  Matrix xe_gram(int g, int kx, const std::function<double(double, double, double)>& w) const {
    const auto& el = mesh_.spatial.elements[kx];
    const double elo = mesh_.energy.group_lo(g), ew = mesh_.energy.group_width(g);
    const double jac = (el.hx * el.hy / 4.0) * (ew / 2.0);
    const int nxe = npx_ * nen_;
    Matrix gram = Matrix::Zero(nxe, nxe);
    Vector col(nxe);
    const double es = energy_scale(g);
    const double ss = spatial_scale();
    for (int k = 0; k < n_spatial_nodes(); ++k) {
      const double x = el.x0 + 0.5 * el.hx * (1.0 + svol_[k].xi);
      const double y = el.y0 + 0.5 * el.hy * (1.0 + svol_[k].eta);
      for (std::size_t le = 0; le < qe1_.size(); ++le) {
        const double E = elo + 0.5 * ew * (1.0 + qe1_.points[le]);
        const double wq = svol_[k].w * qe1_.weights[le] * jac * w(x, y, E);
        if (wq == 0.0) continue;
        for (int e = 0; e < nen_; ++e)
          for (int i = 0; i < npx_; ++i)
            col[i + npx_ * e] = sval_(k, i) * ss * evals_(static_cast<int>(le), e) * es;
        gram.noalias() += wq * col * col.transpose();
      }
    }
    return gram;
  }

  /// Expand an (x,E)-block and an angular block into the full local ordering
  /// ix + npx*(im + nam*ie).
  Matrix combine(const Matrix& xe, const Matrix& ang) const {
    Matrix full(nloc_, nloc_);
    for (int ie = 0; ie < nen_; ++ie)
      for (int im = 0; im < nam_; ++im)
        for (int i = 0; i < npx_; ++i)
          for (int je = 0; je < nen_; ++je)
            for (int jm = 0; jm < nam_; ++jm)
              for (int j = 0; j < npx_; ++j)
                full(local_index(i, im, ie), local_index(j, jm, je)) =
                    xe(i + npx_ * ie, j + npx_ * je) * ang(im, jm);
    return full;
  }

 private:
  ProductMesh mesh_;
  CrossSectionModel model_;
  Degrees deg_;
  QuadratureConfig quad_;
  BasisMode mode_;

  int npx_ = 0, nam_ = 0, nen_ = 0, nloc_ = 0;
  int n_spatial_ = 0, n_arcs_ = 0, n_groups_ = 0;
  long n_dofs_ = 0;

  std::vector<int> sx_deg_, sy_deg_;

  struct SpatialNode {
    double xi, eta, w;
  };
  QuadRule1D qs1_, qf1_, qe1_;
  std::vector<SpatialNode> svol_;
  Matrix sval_, sgx_, sgy_;
  std::array<Matrix, 4> strace_;
  Matrix evals_;
  std::vector<std::vector<AngularQuadPoint>> aq_;
  std::vector<Matrix> avals_;

  std::vector<Matrix> C_;
  std::vector<Matrix> mhat_;
  std::vector<Eigen::LLT<Matrix>> mhat_chol_;
  bool mhat_valid_ = true;
};

// ---------------------------------------------------------------------------
// FeFunction
// ---------------------------------------------------------------------------

/// Coefficient vector in the element-orthonormalised basis, with block views
/// per (group, angular element, spatial element).
struct FeFunction {
  const FeSpace* space = nullptr;
  Vector values;

  FeFunction() = default;
  explicit FeFunction(const FeSpace& s) : space(&s), values(Vector::Zero(s.n_dofs())) {}
  FeFunction(const FeSpace& s, Vector v) : space(&s), values(std::move(v)) {
    if (values.size() != space->n_dofs())
      throw std::invalid_argument("FeFunction: coefficient size mismatch");
  }

  Eigen::VectorBlock<Vector> block(int g, int arc, int kx) {
    return values.segment(space->block_offset(g, arc, kx), space->n_local());
  }
  Eigen::VectorBlock<const Vector> block(int g, int arc, int kx) const {
    return values.segment(space->block_offset(g, arc, kx), space->n_local());
  }

  /// Coefficient dump, one value per line; block order is group-major, then
  /// angular element, then spatial element, then local index.
  void save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_csv: cannot open " + path);
    out << "# lbt coefficient dump, order: group, angular element, spatial element, local\n";
    out << "# n=" << values.size() << "\n";
    char buf[40];
    for (long i = 0; i < values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g\n", values[i]);
      out << buf;
    }
  }

  static FeFunction load_csv(const FeSpace& s, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_csv: cannot open " + path);
    FeFunction f(s);
    std::string line;
    long i = 0;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (i >= f.values.size()) throw std::runtime_error("load_csv: too many values");
      f.values[i++] = std::stod(line);
    }
    if (i != f.values.size()) throw std::runtime_error("load_csv: too few values");
    return f;
  }
};

// ---------------------------------------------------------------------------
// Point evaluation, projection, norms
// ---------------------------------------------------------------------------

/// Value of the finite element function at a phase-space point.
inline double evaluate(const FeFunction& f, const PhasePoint& pt) {
  const FeSpace& s = *f.space;
  const auto& mesh = s.mesh();
  const int kx = mesh.spatial.locate(pt.x, pt.y);
  const double norm = std::hypot(pt.mu1, pt.mu2);
  if (std::abs(norm - 1.0) > 1e-10)
    throw OutOfDomainError("evaluate: direction must be a unit vector");
  const double psi = std::atan2(pt.mu2, pt.mu1);
  const int arc = mesh.angular.locate(psi);
  const int g = s.n_groups() == 1 && s.model().is_mono() ? 0 : mesh.energy.locate(pt.E);

  const auto& el = mesh.spatial.elements[kx];
  const double xi = 2.0 * (pt.x - el.x0) / el.hx - 1.0;
  const double eta = 2.0 * (pt.y - el.y0) / el.hy - 1.0;
  const auto& a = mesh.angular.elements[arc];
  double wrapped = psi;
  while (wrapped < a.psi0 - 1e-12) wrapped += 2.0 * M_PI;
  while (wrapped > a.psi1 + 1e-12) wrapped -= 2.0 * M_PI;
  const double sv = std::tan(wrapped - a.edge * M_PI / 2.0);
  const double shat = (2.0 * sv - (a.s0 + a.s1)) / (a.s1 - a.s0);
  const double ehat =
      s.n_groups() == 1 && s.model().is_mono()
          ? 0.0
          : 2.0 * (pt.E - mesh.energy.group_lo(g)) / mesh.energy.group_width(g) - 1.0;

  Vector raw;
  s.raw_basis(xi, eta, shat, ehat, g, raw);
  const auto coeffs = f.block(g, arc, kx);
  // phi_hat = C phi_raw, so f = coeffs . (C raw) = (C^T coeffs) . raw
  return (s.transform(g, arc, kx).transpose() * Vector(coeffs)).dot(raw);
}

/// Weighted-L2 orthogonal projection of a closed-form function onto the space
/// (weight alphabar in the orthonormal mode, plain L2 in raw mode).
inline FeFunction project(const FeSpace& s,
                          const std::function<double(const PhasePoint&)>& gfun) {
  FeFunction out(s);
  const auto& mesh = s.mesh();
  const double ss = s.spatial_scale();
  Vector raw(s.n_local()), rhs(s.n_local());
  for (int g = 0; g < s.n_groups(); ++g) {
    const double elo = mesh.energy.group_lo(g), ew = mesh.energy.group_width(g);
    const double es = s.energy_scale(g);
    for (int arc = 0; arc < s.n_arcs(); ++arc) {
      const auto& anodes = s.angular_nodes(arc);
      const auto& avals = s.angular_values(arc);
      for (int kx = 0; kx < s.n_spatial_elements(); ++kx) {
        const auto& el = mesh.spatial.elements[kx];
        const double jac = (el.hx * el.hy / 4.0) * (ew / 2.0);
        rhs.setZero();
        for (int k = 0; k < s.n_spatial_nodes(); ++k) {
          const double x = el.x0 + 0.5 * el.hx * (1.0 + s.spatial_node_xi(k));
          const double y = el.y0 + 0.5 * el.hy * (1.0 + s.spatial_node_eta(k));
          for (std::size_t ka = 0; ka < anodes.size(); ++ka)
            for (std::size_t le = 0; le < s.energy_rule().size(); ++le) {
              const double E = elo + 0.5 * ew * (1.0 + s.energy_rule().points[le]);
              const double w0 = s.spatial_node_weight(k) * anodes[ka].weight *
                                s.energy_rule().weights[le] * jac;
              const double wgt = s.mode() == BasisMode::WeightedOrthonormal
                                     ? s.model().alphabar(x, y, E)
                                     : 1.0;
              const double gv =
                  gfun({x, y, anodes[ka].mu1, anodes[ka].mu2, E}) * w0 * wgt;
              if (gv == 0.0) continue;
              for (int ie = 0; ie < s.n_energy_basis(); ++ie)
                for (int im = 0; im < s.n_angular_basis(); ++im)
                  for (int i = 0; i < s.n_spatial_basis(); ++i)
                    rhs[s.local_index(i, im, ie)] +=
                        gv * s.spatial_values()(k, i) * ss * avals(static_cast<int>(ka), im) *
                        s.energy_values()(static_cast<int>(le), ie) * es;
            }
        }
        out.block(g, arc, kx) = s.transform(g, arc, kx) * rhs;
      }
    }
  }
  return out;
}

namespace detail {

/// Shared face-term accumulator for the DG-type norms:
/// 1/2 * [ sum over interior faces of the |mu.n|-weighted upwind jump +
///         sum over boundary faces of the |mu.n|-weighted trace ].
template <typename TraceFn>
double face_norm_squared(const FeSpace& s, TraceFn&& trace_value) {
  const auto& mesh = s.mesh();
  double total = 0.0;
  const auto& qf = s.face_rule();
  for (int g = 0; g < s.n_groups(); ++g)
    for (int arc = 0; arc < s.n_arcs(); ++arc) {
      const auto& anodes = s.angular_nodes(arc);
      for (const auto& face : mesh.spatial.faces) {
        const int axis = side_axis(face.side);
        const double half = 0.5 * (face.a1 - face.a0);
        for (std::size_t ka = 0; ka < anodes.size(); ++ka) {
          const double mun = axis == 0 ? anodes[ka].mu1 : anodes[ka].mu2;
          const double wmu = anodes[ka].weight * std::abs(mun);
          for (std::size_t le = 0; le < s.energy_rule().size(); ++le)
            for (std::size_t kf = 0; kf < qf.size(); ++kf) {
              const double w =
                  wmu * s.energy_rule().weights[le] * 0.5 *
                  s.mesh().energy.group_width(g) * qf.weights[kf] * half;
              if (face.boundary()) {
                const double v =
                    trace_value(g, arc, face.elem_in, face.side, ka, le, kf);
                total += w * v * v;
              } else {
                const double vin =
                    trace_value(g, arc, face.elem_in, face.side, ka, le, kf);
                const double vout = trace_value(g, arc, face.elem_out,
                                                opposite(face.side), ka, le, kf);
                const double jump = vin - vout;
                total += w * jump * jump;
              }
            }
        }
      }
    }
  return 0.5 * total;
}

}  // namespace detail

/// Norm with volume weight w(x,y,E) plus the upwind-jump and boundary face
/// terms: the DG-energy norm uses w = alphabar, the transport norm w = alpha+beta.
inline double weighted_dg_norm(const FeFunction& f,
                               const std::function<double(double, double, double)>& w) {
  const FeSpace& s = *f.space;
  const auto& mesh = s.mesh();
  double vol = 0.0;
  const double ss = s.spatial_scale();
  // volume term
  for (int g = 0; g < s.n_groups(); ++g) {
    const double elo = mesh.energy.group_lo(g), ew = mesh.energy.group_width(g);
    const double es = s.energy_scale(g);
    for (int arc = 0; arc < s.n_arcs(); ++arc) {
      const auto& anodes = s.angular_nodes(arc);
      const auto& avals = s.angular_values(arc);
      for (int kx = 0; kx < s.n_spatial_elements(); ++kx) {
        const auto& el = mesh.spatial.elements[kx];
        const double jac = (el.hx * el.hy / 4.0) * (ew / 2.0);
        const Vector raw = s.transform(g, arc, kx).transpose() * Vector(f.block(g, arc, kx));
        for (int k = 0; k < s.n_spatial_nodes(); ++k) {
          const double x = el.x0 + 0.5 * el.hx * (1.0 + s.spatial_node_xi(k));
          const double y = el.y0 + 0.5 * el.hy * (1.0 + s.spatial_node_eta(k));
          for (std::size_t ka = 0; ka < anodes.size(); ++ka)
            for (std::size_t le = 0; le < s.energy_rule().size(); ++le) {
              const double E = elo + 0.5 * ew * (1.0 + s.energy_rule().points[le]);
              double v = 0.0;
              for (int ie = 0; ie < s.n_energy_basis(); ++ie)
                for (int im = 0; im < s.n_angular_basis(); ++im)
                  for (int i = 0; i < s.n_spatial_basis(); ++i)
                    v += raw[s.local_index(i, im, ie)] * s.spatial_values()(k, i) * ss *
                         avals(static_cast<int>(ka), im) *
                         s.energy_values()(static_cast<int>(le), ie) * es;
              vol += s.spatial_node_weight(k) * anodes[ka].weight *
                     s.energy_rule().weights[le] * jac * w(x, y, E) * v * v;
            }
        }
      }
    }
  }
  // face terms
  std::vector<Vector> raw_cache(static_cast<std::size_t>(s.n_groups()) * s.n_arcs() *
                                s.n_spatial_elements());
  for (int g = 0; g < s.n_groups(); ++g)
    for (int arc = 0; arc < s.n_arcs(); ++arc)
      for (int kx = 0; kx < s.n_spatial_elements(); ++kx)
        raw_cache[s.element_id(g, arc, kx)] =
            s.transform(g, arc, kx).transpose() * Vector(f.block(g, arc, kx));

  const double faces = detail::face_norm_squared(
      s, [&](int g, int arc, int kx, Side side, std::size_t ka, std::size_t le,
             std::size_t kf) {
        const Vector& raw = raw_cache[s.element_id(g, arc, kx)];
        const auto& tr = s.spatial_trace(side);
        const auto& avals = s.angular_values(arc);
        const double es = s.energy_scale(g);
        double v = 0.0;
        for (int ie = 0; ie < s.n_energy_basis(); ++ie)
          for (int im = 0; im < s.n_angular_basis(); ++im)
            for (int i = 0; i < s.n_spatial_basis(); ++i)
              v += raw[s.local_index(i, im, ie)] * tr(static_cast<int>(kf), i) *
                   s.spatial_scale() * avals(static_cast<int>(ka), im) *
                   s.energy_values()(static_cast<int>(le), ie) * es;
        return v;
      });
  return std::sqrt(vol + faces);
}

/// DG-energy norm: sqrt( ||sqrt(alphabar) v||^2 + face terms ).
inline double dg_norm(const FeFunction& f, const CrossSectionModel& model) {
  return weighted_dg_norm(
      f, [&](double x, double y, double E) { return model.alphabar(x, y, E); });
}

/// Transport-operator norm: sqrt( ||sqrt(alpha+beta) v||^2 + face terms ).
inline double a_norm(const FeFunction& f, const CrossSectionModel& model) {
  return weighted_dg_norm(f, [&](double x, double y, double E) {
    return model.alpha(x, y, E) + model.beta(x, y, E);
  });
}

/// Norm of the relaxed iteration, sqrt( ||sqrt(alpha+(1-omega)beta) v||^2 + faces ).
inline double a_omega_norm(const FeFunction& f, const CrossSectionModel& model,
                           double omega) {
  return weighted_dg_norm(f, [&](double x, double y, double E) {
    return model.alpha(x, y, E) + (1.0 - omega) * model.beta(x, y, E);
  });
}

}  // namespace lbt
