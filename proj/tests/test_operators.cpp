#include <catch2/catch_amalgamated.hpp>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <fstream>
#include <random>

#include "lbt/operators.hpp"

using namespace lbt;

namespace {

ProductMesh make_mono_mesh(double L, int nx, int na) {
  return {build_spatial_mesh(L, nx), build_angular_mesh(na), build_energy_mesh(0.0, 1.0, 1)};
}

ProductMesh make_compton_mesh(double L, int nx, int na, int ng) {
  return {build_spatial_mesh(L, nx), build_angular_mesh(na),
          build_energy_mesh(400.0, 1000.0, ng)};
}

Vector random_vector(long n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> dist;
  Vector v(n);
  for (long i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

/// independent quadrature of the weighted volume integral int w v_h^2
double volume_weighted_l2sq(const FeSpace& s, const Vector& coeffs,
                            const std::function<double(double, double, double)>& w) {
  const auto& mesh = s.mesh();
  const double ss = s.spatial_scale();
  double total = 0.0;
  for (int g = 0; g < s.n_groups(); ++g) {
    const double elo = mesh.energy.group_lo(g), ew = mesh.energy.group_width(g);
    const double es = s.energy_scale(g);
    for (int arc = 0; arc < s.n_arcs(); ++arc) {
      const auto& anodes = s.angular_nodes(arc);
      const auto& av = s.angular_values(arc);
      for (int kx = 0; kx < s.n_spatial_elements(); ++kx) {
        const auto& el = mesh.spatial.elements[kx];
        const double jac = (el.hx * el.hy / 4.0) * (ew / 2.0);
        const Vector raw = s.transform(g, arc, kx).transpose() *
                           Vector(coeffs.segment(s.block_offset(g, arc, kx), s.n_local()));
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
                         av(static_cast<int>(ka), im) *
                         s.energy_values()(static_cast<int>(le), ie) * es;
              total += s.spatial_node_weight(k) * anodes[ka].weight *
                       s.energy_rule().weights[le] * jac * w(x, y, E) * v * v;
            }
        }
      }
    }
  }
  return total;
}

}  // namespace

TEST_CASE("matrix-free actions match the dense oracle (mono)") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  FeSpace s(mesh, CrossSectionModel::mono(0.3, 1.2, 0.6), {1, 1, 0});
  OperatorSet ops(s);
  const Matrix ad = ops.assemble_dense(OperatorSet::Which::A);
  const Matrix sd = ops.assemble_dense(OperatorSet::Which::S);
  const Matrix md = ops.assemble_dense(OperatorSet::Which::M);
  for (unsigned seed = 0; seed < 10; ++seed) {
    const Vector v = random_vector(s.n_dofs(), seed);
    REQUIRE((ops.apply_A(v) - ad * v).norm() <= 1e-12 * (ad * v).norm());
    REQUIRE((ops.apply_S(v) - sd * v).norm() <= 1e-12 * (sd * v).norm());
    REQUIRE((ops.apply_M(v) - md * v).norm() <= 1e-12 * (md * v).norm());
  }
}

TEST_CASE("matrix-free actions match the dense oracle (Compton, multigroup)") {
  auto mesh = make_compton_mesh(20.0, 2, 8, 2);
  FeSpace s(mesh, CrossSectionModel::compton({}, mesh.energy), {1, 1, 1});
  OperatorSet ops(s);
  const Matrix ad = ops.assemble_dense(OperatorSet::Which::A);
  const Matrix sd = ops.assemble_dense(OperatorSet::Which::S);
  for (unsigned seed = 0; seed < 5; ++seed) {
    const Vector v = random_vector(s.n_dofs(), 100 + seed);
    REQUIRE((ops.apply_A(v) - ad * v).norm() <= 1e-12 * (ad * v).norm());
    REQUIRE((ops.apply_S(v) - sd * v).norm() <= 1e-12 * (sd * v).norm());
  }
}

TEST_CASE("dense oracle agreement at quadratic energy degree") {
  auto mesh = make_compton_mesh(20.0, 2, 8, 2);
  FeSpace s(mesh, CrossSectionModel::compton({}, mesh.energy), {0, 0, 2});
  OperatorSet ops(s);
  const Matrix ad = ops.assemble_dense(OperatorSet::Which::A);
  const Matrix sd = ops.assemble_dense(OperatorSet::Which::S);
  for (unsigned seed = 0; seed < 3; ++seed) {
    const Vector v = random_vector(s.n_dofs(), 200 + seed);
    REQUIRE((ops.apply_A(v) - ad * v).norm() <= 1e-12 * (ad * v).norm());
    REQUIRE((ops.apply_S(v) - sd * v).norm() <= 1e-12 * (sd * v).norm());
  }
}

TEST_CASE("transport solve inverts the transport operator") {
  auto mesh = make_mono_mesh(1.0, 4, 8);
  FeSpace s(mesh, CrossSectionModel::mono(0.5, 1.0), {1, 1, 0});
  OperatorSet ops(s);
  const Vector v = random_vector(s.n_dofs(), 3);
  const Vector round1 = ops.solve_A(ops.apply_A(v));
  REQUIRE((round1 - v).norm() <= 1e-10 * v.norm());
  const Vector rhs = random_vector(s.n_dofs(), 4);
  const Vector round2 = ops.apply_A(ops.solve_A(rhs));
  REQUIRE((round2 - rhs).norm() <= 1e-10 * rhs.norm());
}

TEST_CASE("single-element transport block matches hand assembly") {
  // p=q=0 on one spatial element: the diagonal entry is
  // [(alpha+beta) |kx| |arc| + h (|dsin psi| + |dcos psi|)] / (alphabar |kx| |arc|)
  const double alpha = 2.0, beta = 0.5, h = 1.0;
  ProductMesh mesh = make_mono_mesh(h, 1, 8);
  QuadratureConfig quad;
  quad.angular_extra = 10;  // the closed-form face factors demand a sharp rule
  FeSpace s(mesh, CrossSectionModel::mono(alpha, beta), {0, 0, 0}, quad);
  OperatorSet ops(s);
  for (int arc = 0; arc < 8; ++arc) {
    const auto& a = mesh.angular.elements[arc];
    const double dsin = std::abs(std::sin(a.psi1) - std::sin(a.psi0));
    const double dcos = std::abs(std::cos(a.psi1) - std::cos(a.psi0));
    const double meas = h * h * a.measure();
    const double expected = ((alpha + beta) * meas + h * (dsin + dcos)) / (alpha * meas);
    Vector e = Vector::Zero(s.n_dofs());
    e[s.block_offset(0, arc, 0)] = 1.0;
    const double diag = ops.apply_A(e)[s.block_offset(0, arc, 0)];
    REQUIRE(diag == Catch::Approx(expected).epsilon(1e-11));
    // the solve is scalar division by the hand-assembled diagonal
    const Vector sol = ops.solve_A(e);
    REQUIRE(sol[s.block_offset(0, arc, 0)] == Catch::Approx(1.0 / expected).epsilon(1e-11));
  }
}

TEST_CASE("sweep results are independent of the spatial enumeration") {
  auto mesh = make_mono_mesh(1.0, 4, 8);
  FeSpace s(mesh, CrossSectionModel::mono(0.4, 1.8), {1, 1, 0});
  OperatorSet row(s, SweepOrder::RowMajor);
  OperatorSet col(s, SweepOrder::ColMajor);
  const Vector rhs = random_vector(s.n_dofs(), 5);
  const Vector ur = row.solve_A(rhs);
  const Vector uc = col.solve_A(rhs);
  REQUIRE((ur - uc).cwiseAbs().maxCoeff() <= 1e-14 * ur.cwiseAbs().maxCoeff());
}

TEST_CASE("scattering of a constant equals the beta-mass action (isotropic)") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  FeSpace s(mesh, CrossSectionModel::mono(0.1, 0.9), {1, 1, 0});
  OperatorSet ops(s);
  FeFunction one = project(s, [](const PhasePoint&) { return 1.0; });
  const Vector sv = ops.apply_S(one.values);
  const Vector mv = ops.apply_M(one.values);
  REQUIRE((sv - mv).norm() <= 1e-12 * mv.norm());
}

TEST_CASE("zero kernel scatters to zero") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  FeSpace s(mesh, CrossSectionModel::mono(1.0, 0.0), {1, 1, 0});
  OperatorSet ops(s);
  const Vector v = random_vector(s.n_dofs(), 6);
  REQUIRE(ops.apply_S(v).norm() == 0.0);
}

TEST_CASE("Compton scattering is strictly downscatter") {
  auto mesh = make_compton_mesh(20.0, 2, 8, 3);
  FeSpace s(mesh, CrossSectionModel::compton({}, mesh.energy), {0, 1, 1});
  OperatorSet ops(s);
  // support on the two lowest-energy groups leaves the top group untouched
  Vector v = random_vector(s.n_dofs(), 7);
  v.segment(s.group_offset(0), s.group_size()).setZero();
  const Vector sv = ops.apply_S(v);
  REQUIRE(sv.segment(s.group_offset(0), s.group_size()).cwiseAbs().maxCoeff() == 0.0);
  // dense blocks above the diagonal vanish identically
  const Matrix sd = ops.assemble_dense(OperatorSet::Which::S);
  for (int g = 0; g < 3; ++g)
    for (int gs = g + 1; gs < 3; ++gs) {
      const Matrix blk = sd.block(s.group_offset(g), s.group_offset(gs), s.group_size(),
                                  s.group_size());
      REQUIRE(blk.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("weighted mass is the identity in the orthonormal basis mode") {
  auto mesh = make_compton_mesh(20.0, 2, 8, 2);
  FeSpace s(mesh, CrossSectionModel::compton({}, mesh.energy), {1, 1, 1});
  OperatorSet ops(s);
  const Matrix mh = ops.assemble_dense(OperatorSet::Which::Mhat);
  REQUIRE((mh - Matrix::Identity(s.n_dofs(), s.n_dofs())).cwiseAbs().maxCoeff() < 1e-12);
  const Vector v = random_vector(s.n_dofs(), 8);
  REQUIRE((ops.apply_Mhat(v) - v).norm() == 0.0);
  REQUIRE((ops.apply_L(v) - v).norm() == 0.0);
}

TEST_CASE("raw basis mode: weighted mass, Cholesky weight and the norm identity") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  // elementwise-constant alphabar, varying across elements
  auto model = CrossSectionModel::mono_variable_absorption(
      [](double x, double y, double) {
        return (x < 0.5 ? 1.0 : 3.0) + (y < 0.5 ? 0.0 : 1.5);
      },
      0.8);
  FeSpace s(mesh, model, {1, 1, 0}, {}, BasisMode::RawLegendre);
  OperatorSet ops(s);
  const Matrix mh = ops.assemble_dense(OperatorSet::Which::Mhat);
  const Vector v = random_vector(s.n_dofs(), 9);
  REQUIRE((ops.apply_Mhat(v) - mh * v).norm() <= 1e-12 * (mh * v).norm());
  // L Linv is the identity
  REQUIRE((ops.apply_L(ops.apply_Linv(v)) - v).norm() <= 1e-12 * v.norm());
  // elementwise-constant weight: L is diagonal with entries sqrt(alphabar)
  for (int arc = 0; arc < 8; arc += 3)
    for (int kx = 0; kx < 4; ++kx) {
      Vector e = Vector::Zero(s.n_dofs());
      const long off = s.block_offset(0, arc, kx);
      e[off + 1] = 1.0;
      const auto& el = mesh.spatial.elements[kx];
      const double ab = model.alphabar(el.center_x(), el.center_y(), 0.5);
      const Vector le = ops.apply_L(e);
      REQUIRE(le[off + 1] == Catch::Approx(std::sqrt(ab)).epsilon(1e-12));
      REQUIRE((le - std::sqrt(ab) * e).norm() < 1e-12);
    }
  // v . Mhat v equals the weighted L2 norm of the function
  const double quadratic = v.dot(ops.apply_Mhat(v));
  const double byquad = volume_weighted_l2sq(
      s, v, [&](double x, double y, double E) { return model.alphabar(x, y, E); });
  REQUIRE(quadratic == Catch::Approx(byquad).epsilon(1e-10));
}

TEST_CASE("beta-mass quadratic form equals the weighted L2 norm") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  const CrossSectionModel model = CrossSectionModel::mono(0.3, 1.7);
  FeSpace s(mesh, model, {1, 1, 0});
  OperatorSet ops(s);
  const Vector v = random_vector(s.n_dofs(), 10);
  const double byquad = volume_weighted_l2sq(
      s, v, [&](double x, double y, double E) { return model.beta(x, y, E); });
  REQUIRE(ops.m_norm(v) == Catch::Approx(std::sqrt(byquad)).epsilon(1e-10));
}

TEST_CASE("coercivity and the transport-norm identity on random functions") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  const CrossSectionModel model = CrossSectionModel::mono(0.2, 1.8);
  FeSpace s(mesh, model, {1, 1, 0});
  OperatorSet ops(s);
  for (unsigned seed = 0; seed < 100; ++seed) {
    FeFunction v(s, random_vector(s.n_dofs(), 1000 + seed));
    const double avv = v.values.dot(ops.apply_A(v.values));
    const double svv = v.values.dot(ops.apply_S(v.values));
    const double dg = dg_norm(v, model);
    const double an = a_norm(v, model);
    REQUIRE(avv - svv >= dg * dg - 1e-10);
    REQUIRE(avv == Catch::Approx(an * an).margin(1e-10 * std::max(1.0, avv)));
  }
}

TEST_CASE("scattering-mass contraction bound (circular harmonics)") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  for (double a1 : {0.0, 1.0}) {
    const CrossSectionModel model = CrossSectionModel::mono(0.25, 1.5, a1);
    FeSpace s(mesh, model, {1, 1, 0});
    OperatorSet ops(s);
    const auto moments = kernel_moments(model, 8);
    for (double omega : {0.0, 0.25, 0.5, 0.75}) {
      const double r = kernel_moment_bound(moments, moments[0], omega);
      for (unsigned seed = 0; seed < 100; ++seed) {
        const Vector w = random_vector(s.n_dofs(), 2000 + seed);
        const Vector v = random_vector(s.n_dofs(), 3000 + seed);
        const double sv = w.dot(ops.apply_S(v));
        const double mv = w.dot(ops.apply_M(v));
        const double mww = w.dot(ops.apply_M(w));
        const double mvv = v.dot(ops.apply_M(v));
        REQUIRE(std::abs(sv - omega * mv) <= r * std::sqrt(mww * mvv) + 1e-10);
      }
    }
  }
}

TEST_CASE("relaxed operators: shifted solve and lagged action") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  FeSpace s(mesh, CrossSectionModel::mono(0.5, 1.5), {1, 1, 0});
  OperatorSet ops(s);
  const double omega = 0.5;
  const auto relaxed = ops.relaxed(omega);
  const Vector v = random_vector(s.n_dofs(), 11);
  // (A - omega M) applied after the relaxed solve is the identity
  const Vector x = relaxed.solve(v);
  const Vector back = ops.apply_A(x) - omega * ops.apply_M(x);
  REQUIRE((back - v).norm() <= 1e-10 * v.norm());
  REQUIRE((relaxed.apply_K(v) - (ops.apply_S(v) - omega * ops.apply_M(v))).norm() == 0.0);
}

TEST_CASE("spectral discs of the iteration operators (isotropic, c = 0.9)") {
  const double sigma = 10.0, c = 0.9;
  auto mesh = make_mono_mesh(1.0, 2, 8);
  FeSpace s(mesh, CrossSectionModel::mono((1 - c) * sigma, c * sigma), {0, 0, 0});
  OperatorSet ops(s);
  const Matrix a = ops.assemble_dense(OperatorSet::Which::A);
  const Matrix sc = ops.assemble_dense(OperatorSet::Which::S);
  const Matrix m = ops.assemble_dense(OperatorSet::Which::M);

  Eigen::EigenSolver<Matrix> eig(a.lu().solve(sc));
  for (long i = 0; i < eig.eigenvalues().size(); ++i) {
    const std::complex<double> l = eig.eigenvalues()[i];
    REQUIRE(std::abs(l - std::complex<double>(c / 2, 0)) <= c / 2 + 1e-8);
  }

  const double omega = 0.5;
  const double r1 = (1 - omega) * c / (2 * (1 - omega * c));
  const double r2 = omega * c / (2 * (1 - omega * c));
  Eigen::EigenSolver<Matrix> eig2((a - omega * m).lu().solve(sc - omega * m));
  for (long i = 0; i < eig2.eigenvalues().size(); ++i) {
    const std::complex<double> l = eig2.eigenvalues()[i];
    const double d1 = std::abs(l - std::complex<double>(r1, 0)) - r1;
    const double d2 = std::abs(l - std::complex<double>(-r2, 0)) - r2;
    REQUIRE(std::min(d1, d2) <= 1e-8);
  }
}

TEST_CASE("isotropic scattering matrix satisfies Mercer's condition") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  FeSpace s(mesh, CrossSectionModel::mono(0.1, 0.9), {0, 1, 0});
  OperatorSet ops(s);
  const Matrix sd = ops.assemble_dense(OperatorSet::Which::S);
  REQUIRE((sd - sd.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * sd.cwiseAbs().maxCoeff());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (sd + sd.transpose()));
  REQUIRE(eig.eigenvalues().minCoeff() >= -1e-10 * sd.norm());
}

TEST_CASE("operator errors: layout mismatch and dense size cap") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  FeSpace s(mesh, CrossSectionModel::mono(1.0, 1.0), {1, 1, 0});
  OperatorSet ops(s);
  Vector bad(10);
  REQUIRE_THROWS_AS(ops.apply_A(bad), std::invalid_argument);
  REQUIRE_THROWS_AS(ops.apply_S(bad), std::invalid_argument);
  REQUIRE_THROWS_AS(ops.assemble_dense(OperatorSet::Which::A, 10), std::invalid_argument);
}

TEST_CASE("operation counters track applications") {
  auto mesh = make_mono_mesh(1.0, 2, 8);
  FeSpace s(mesh, CrossSectionModel::mono(1.0, 1.0), {1, 1, 0});
  OperatorSet ops(s);
  const Vector v = random_vector(s.n_dofs(), 12);
  ops.counts = {};
  ops.apply_A(v);
  ops.apply_S(v);
  ops.solve_A(v);
  ops.apply_M(v);
  REQUIRE(ops.counts.apply_A == 1);
  REQUIRE(ops.counts.apply_S == 1);
  REQUIRE(ops.counts.solve_A == 1);
  REQUIRE(ops.counts.apply_M == 1);
}

TEST_CASE("dense triplet export writes row col value lines") {
  auto mesh = make_mono_mesh(1.0, 1, 8);
  FeSpace s(mesh, CrossSectionModel::mono(1.0, 0.5), {0, 0, 0});
  OperatorSet ops(s);
  const Matrix m = ops.assemble_dense(OperatorSet::Which::M);
  const std::string path = "dense_triplets.txt";
  OperatorSet::export_triplets(m, path, 0.0);
  std::ifstream in(path);
  long row, col;
  double val;
  long count = 0;
  while (in >> row >> col >> val) ++count;
  REQUIRE(count == m.rows() * m.cols());
  std::remove(path.c_str());
}
