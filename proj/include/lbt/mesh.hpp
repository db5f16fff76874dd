#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "lbt/errors.hpp"
#include "lbt/quadrature.hpp"

namespace lbt {

// ---------------------------------------------------------------------------
// Spatial mesh: uniform Cartesian grid of axis-aligned rectangles on (0,L)^2.
// ---------------------------------------------------------------------------

/// Sides of a rectangular element, identified by outward normal direction.
enum class Side : int { Left = 0, Right = 1, Bottom = 2, Top = 3 };

inline Side opposite(Side s) {
  switch (s) {
    case Side::Left: return Side::Right;
    case Side::Right: return Side::Left;
    case Side::Bottom: return Side::Top;
    case Side::Top: return Side::Bottom;
  }
  return Side::Left;
}

/// 0 for faces with normal +-e1, 1 for normal +-e2.
inline int side_axis(Side s) { return (s == Side::Left || s == Side::Right) ? 0 : 1; }

/// Outward normal component along the side's axis (+1 or -1).
inline double side_sign(Side s) { return (s == Side::Right || s == Side::Top) ? 1.0 : -1.0; }

struct SpatialElement {
  int id;
  int ix, iy;        // grid coordinates
  double x0, y0;     // lower-left corner
  double hx, hy;     // side lengths
  // neighbour element id per side, -1 on the domain boundary
  std::array<int, 4> neighbor;

  double area() const { return hx * hy; }
  double center_x() const { return x0 + 0.5 * hx; }
  double center_y() const { return y0 + 0.5 * hy; }
};

struct SpatialFace {
  int elem_in;        // element owning the face record
  int elem_out;       // adjacent element, -1 if boundary
  Side side;          // side of elem_in
  double nx, ny;      // outward normal of elem_in
  double a0, a1;      // extent along the face's tangential coordinate
  bool boundary() const { return elem_out < 0; }
};

struct SpatialMesh {
  double domain_side = 1.0;
  int n_per_axis = 1;
  std::vector<SpatialElement> elements;
  std::vector<SpatialFace> faces;  // interior faces once each, then boundary faces

  int n_interior_faces = 0;
  int n_boundary_faces = 0;

  int index(int ix, int iy) const { return iy * n_per_axis + ix; }
  double h() const { return domain_side / n_per_axis; }

  /// Element containing (x,y); throws if outside the closed domain.
  int locate(double x, double y) const;
};

inline SpatialMesh build_spatial_mesh(double L, int n_per_axis) {
  if (!(L > 0.0)) throw std::invalid_argument("build_spatial_mesh: domain side must be positive");
  if (n_per_axis < 1) throw std::invalid_argument("build_spatial_mesh: need at least one element per axis");
  SpatialMesh mesh;
  mesh.domain_side = L;
  mesh.n_per_axis = n_per_axis;
  const double h = L / n_per_axis;
  mesh.elements.reserve(static_cast<std::size_t>(n_per_axis) * n_per_axis);
  for (int iy = 0; iy < n_per_axis; ++iy)
    for (int ix = 0; ix < n_per_axis; ++ix) {
      SpatialElement e;
      e.id = mesh.index(ix, iy);
      e.ix = ix;
      e.iy = iy;
      e.x0 = ix * h;
      e.y0 = iy * h;
      e.hx = h;
      e.hy = h;
      e.neighbor = {ix > 0 ? mesh.index(ix - 1, iy) : -1,
                    ix < n_per_axis - 1 ? mesh.index(ix + 1, iy) : -1,
                    iy > 0 ? mesh.index(ix, iy - 1) : -1,
                    iy < n_per_axis - 1 ? mesh.index(ix, iy + 1) : -1};
      mesh.elements.push_back(e);
    }
  // interior faces: record once, owned by the lower-index element (Right/Top sides)
  for (const auto& e : mesh.elements) {
    if (e.neighbor[static_cast<int>(Side::Right)] >= 0)
      mesh.faces.push_back({e.id, e.neighbor[static_cast<int>(Side::Right)], Side::Right,
                            1.0, 0.0, e.y0, e.y0 + e.hy});
    if (e.neighbor[static_cast<int>(Side::Top)] >= 0)
      mesh.faces.push_back({e.id, e.neighbor[static_cast<int>(Side::Top)], Side::Top,
                            0.0, 1.0, e.x0, e.x0 + e.hx});
  }
  mesh.n_interior_faces = static_cast<int>(mesh.faces.size());
  for (const auto& e : mesh.elements)
    for (int s = 0; s < 4; ++s)
      if (e.neighbor[s] < 0) {
        const Side side = static_cast<Side>(s);
        const bool vert = side_axis(side) == 0;
        mesh.faces.push_back({e.id, -1, side,
                              vert ? side_sign(side) : 0.0, vert ? 0.0 : side_sign(side),
                              vert ? e.y0 : e.x0, vert ? e.y0 + e.hy : e.x0 + e.hx});
      }
  mesh.n_boundary_faces = static_cast<int>(mesh.faces.size()) - mesh.n_interior_faces;
  return mesh;
}

inline int SpatialMesh::locate(double x, double y) const {
  if (x < 0.0 || x > domain_side || y < 0.0 || y > domain_side)
    throw OutOfDomainError("spatial point outside domain");
  const double hh = h();
  int ix = std::min(static_cast<int>(x / hh), n_per_axis - 1);
  int iy = std::min(static_cast<int>(y / hh), n_per_axis - 1);
  return index(ix, iy);
}

// ---------------------------------------------------------------------------
// Angular mesh: curved arcs obtained by projecting the boundary of the square
// [-1,1]^2 radially onto the unit circle.  Edge e in {0,1,2,3} carries the
// parametrisation mu(s) = R(e*pi/2) (1,s)/sqrt(1+s^2), s in [-1,1], which
// traverses the circle counterclockwise starting at angle -pi/4.  The polar
// angle satisfies psi = e*pi/2 + atan(s), so the mapping Jacobian
// |dmu/ds| = 1/(1+s^2) is absorbed exactly by quadrature in psi.
// ---------------------------------------------------------------------------

struct AngularElement {
  int id;
  int edge;             // square edge 0..3
  double s0, s1;        // parameter interval on the edge
  double psi0, psi1;    // polar angle interval
  int sign_x, sign_y;   // quadrant sign pattern of (mu1, mu2) in the interior
  double measure() const { return psi1 - psi0; }
};

inline std::array<double, 2> direction_on_edge(int edge, double s) {
  const double r = 1.0 / std::sqrt(1.0 + s * s);
  switch (edge & 3) {
    case 0: return {r, s * r};
    case 1: return {-s * r, r};
    case 2: return {-r, -s * r};
    default: return {s * r, -r};
  }
}

struct AngularMesh {
  int n_elements = 0;
  std::vector<AngularElement> elements;

  /// Element containing the direction with polar angle psi (wrapped to [-pi/4, 7pi/4)).
  int locate(double psi) const {
    double a = psi;
    const double lo = -M_PI / 4.0;
    a = std::fmod(a - lo, 2.0 * M_PI);
    if (a < 0) a += 2.0 * M_PI;
    a += lo;
    for (const auto& e : elements)
      if (a >= e.psi0 - 1e-14 && a <= e.psi1 + 1e-14) return e.id;
    throw OutOfDomainError("angular locate failed");
  }
};

inline AngularMesh build_angular_mesh(int n_elements) {
  if (n_elements <= 0 || n_elements % 8 != 0)
    throw std::invalid_argument(
        "build_angular_mesh: element count must be a positive multiple of 8 "
        "so that no arc straddles a quadrant boundary");
  AngularMesh mesh;
  mesh.n_elements = n_elements;
  const int per_edge = n_elements / 4;
  const double ds = 2.0 / per_edge;
  for (int e = 0; e < 4; ++e)
    for (int k = 0; k < per_edge; ++k) {
      AngularElement arc;
      arc.id = e * per_edge + k;
      arc.edge = e;
      arc.s0 = -1.0 + k * ds;
      arc.s1 = -1.0 + (k + 1) * ds;
      arc.psi0 = e * M_PI / 2.0 + std::atan(arc.s0);
      arc.psi1 = e * M_PI / 2.0 + std::atan(arc.s1);
      const auto mid = direction_on_edge(e, 0.5 * (arc.s0 + arc.s1));
      arc.sign_x = mid[0] > 0 ? 1 : -1;
      arc.sign_y = mid[1] > 0 ? 1 : -1;
      mesh.elements.push_back(arc);
    }
  return mesh;
}

/// Quadrature point on the circle belonging to one arc.
struct AngularQuadPoint {
  double mu1, mu2;   // unit direction
  double s;          // square-edge parameter
  double shat;       // reference coordinate of s in the arc's interval
  double weight;     // quadrature weight w.r.t. the angular (arc-length) measure
};

/// Gauss rule for integrals over one curved arc.  Nodes are placed in the
/// polar angle, which integrates the mapping Jacobian exactly; the returned
/// weights therefore sum to the arc measure to machine precision.
inline std::vector<AngularQuadPoint> angular_quadrature(const AngularElement& arc, int n_points) {
  if (n_points < 1) throw std::invalid_argument("angular_quadrature: need at least one point");
  QuadRule1D rule = gauss_legendre(n_points, arc.psi0, arc.psi1);
  std::vector<AngularQuadPoint> pts(rule.size());
  for (std::size_t k = 0; k < rule.size(); ++k) {
    const double psi = rule.points[k];
    const double s = std::tan(psi - arc.edge * M_PI / 2.0);
    const auto mu = direction_on_edge(arc.edge, s);
    pts[k] = {mu[0], mu[1], s, (2.0 * s - (arc.s0 + arc.s1)) / (arc.s1 - arc.s0),
              rule.weights[k]};
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Energy mesh: groups ordered by decreasing energy, kappa_g = (E_g, E_{g-1}).
// ---------------------------------------------------------------------------

struct EnergyMesh {
  std::vector<double> group_edges;  // E_0 > E_1 > ... > E_{N}

  int n_groups() const { return static_cast<int>(group_edges.size()) - 1; }
  double e_max() const { return group_edges.front(); }
  double e_min() const { return group_edges.back(); }
  /// group index 0..N-1; group g spans (group_edges[g+1], group_edges[g])
  double group_hi(int g) const { return group_edges[g]; }
  double group_lo(int g) const { return group_edges[g + 1]; }
  double group_width(int g) const { return group_edges[g] - group_edges[g + 1]; }

  /// Group containing E; energies on an interior edge go to the higher-energy group.
  int locate(double E) const {
    if (E < e_min() - 1e-12 || E > e_max() + 1e-12)
      throw OutOfDomainError("energy outside domain");
    for (int g = 0; g < n_groups(); ++g)
      if (E >= group_lo(g)) return g;
    return n_groups() - 1;
  }

  /// Group of E or -1 when E falls outside [E_min, E_max] (no throw).
  int locate_or_none(double E) const {
    if (E < e_min() || E > e_max()) return -1;
    for (int g = 0; g < n_groups(); ++g)
      if (E >= group_lo(g)) return g;
    return n_groups() - 1;
  }
};

inline EnergyMesh build_energy_mesh(double e_min, double e_max, int n_groups) {
  if (!(e_min >= 0.0) || !(e_min < e_max))
    throw std::invalid_argument("build_energy_mesh: need 0 <= E_min < E_max");
  if (n_groups < 1) throw std::invalid_argument("build_energy_mesh: need at least one group");
  EnergyMesh mesh;
  mesh.group_edges.resize(n_groups + 1);
  const double w = (e_max - e_min) / n_groups;
  for (int g = 0; g <= n_groups; ++g) mesh.group_edges[g] = e_max - g * w;
  mesh.group_edges[n_groups] = e_min;
  return mesh;
}

// ---------------------------------------------------------------------------
// Product mesh
// ---------------------------------------------------------------------------

struct ProductMesh {
  SpatialMesh spatial;
  AngularMesh angular;
  EnergyMesh energy;

  long n_elements() const {
    return static_cast<long>(spatial.elements.size()) * angular.n_elements * energy.n_groups();
  }
};

}  // namespace lbt
