#include "nmcmc/darcy/darcy.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "nmcmc/errors.hpp"

namespace nmcmc::darcy {

StructuredMesh StructuredMesh::unit_square(std::size_t n) {
  require(n >= 2, "mesh needs at least 2 nodes per side");
  StructuredMesh m;
  m.n = n;
  const double step = 1.0 / static_cast<double>(n - 1);
  m.coordinates.reserve(n * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i)
      m.coordinates.push_back({static_cast<double>(i) * step, static_cast<double>(j) * step});
  m.triangles.reserve(2 * (n - 1) * (n - 1));
  for (std::size_t j = 0; j + 1 < n; ++j)
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const std::size_t a = m.node(i, j), b = m.node(i + 1, j), c = m.node(i + 1, j + 1),
                        d = m.node(i, j + 1);
      m.triangles.push_back({a, b, c});
      m.triangles.push_back({a, c, d});
    }
  return m;
}

void CsrMatrix::multiply(std::span<const double> x, std::span<double> y) const {
  for (std::size_t r = 0; r < size; ++r) {
    double acc = 0.0;
    for (std::size_t k = row_offsets[r]; k < row_offsets[r + 1]; ++k)
      acc += values[k] * x[column_indices[k]];
    y[r] = acc;
  }
}

double CsrMatrix::at(std::size_t row, std::size_t col) const {
  const auto first = column_indices.begin() + static_cast<std::ptrdiff_t>(row_offsets[row]);
  const auto last = column_indices.begin() + static_cast<std::ptrdiff_t>(row_offsets[row + 1]);
  const auto it = std::lower_bound(first, last, col);
  if (it == last || *it != col) return 0.0;
  return values[static_cast<std::size_t>(it - column_indices.begin())];
}

namespace {

std::size_t slot(const CsrMatrix& a, std::size_t row, std::size_t col) {
  const auto first = a.column_indices.begin() + static_cast<std::ptrdiff_t>(a.row_offsets[row]);
  const auto last = a.column_indices.begin() + static_cast<std::ptrdiff_t>(a.row_offsets[row + 1]);
  return static_cast<std::size_t>(std::lower_bound(first, last, col) - a.column_indices.begin());
}

CsrMatrix adjacency_pattern(const StructuredMesh& mesh) {
  const std::size_t nn = mesh.node_count();
  std::vector<std::vector<std::size_t>> cols(nn);
  for (const auto& tri : mesh.triangles)
    for (std::size_t a : tri)
      for (std::size_t b : tri) cols[a].push_back(b);
  CsrMatrix m;
  m.size = nn;
  m.row_offsets.assign(nn + 1, 0);
  for (std::size_t r = 0; r < nn; ++r) {
    auto& c = cols[r];
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
    m.row_offsets[r + 1] = m.row_offsets[r] + c.size();
    m.column_indices.insert(m.column_indices.end(), c.begin(), c.end());
  }
  m.values.assign(m.column_indices.size(), 0.0);
  return m;
}

}  // namespace

CsrMatrix assemble_stiffness(const StructuredMesh& mesh, std::span<const double> t) {
  require_dims(t.size() == mesh.node_count(),
               "transmissivity has " + std::to_string(t.size()) + " values, mesh has " +
                   std::to_string(mesh.node_count()) + " nodes");
  for (double v : t) require(v > 0.0 && std::isfinite(v), "transmissivity must be positive");

  CsrMatrix k = adjacency_pattern(mesh);
  for (const auto& tri : mesh.triangles) {
    const Point& p0 = mesh.coordinates[tri[0]];
    const Point& p1 = mesh.coordinates[tri[1]];
    const Point& p2 = mesh.coordinates[tri[2]];
    const double area2 = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    // Gradients of the barycentric basis, scaled by 2*area.
    const std::array<double, 3> bx{p1[1] - p2[1], p2[1] - p0[1], p0[1] - p1[1]};
    const std::array<double, 3> by{p2[0] - p1[0], p0[0] - p2[0], p1[0] - p0[0]};
    const double te = (t[tri[0]] + t[tri[1]] + t[tri[2]]) / 3.0;
    const double coef = te / (2.0 * area2);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b)
        k.values[slot(k, tri[a], tri[b])] += coef * (bx[a] * bx[b] + by[a] * by[b]);
  }
  return k;
}

SparseSystem assemble_system(const StructuredMesh& mesh, std::span<const double> t) {
  const CsrMatrix k = assemble_stiffness(mesh, t);
  const std::size_t nn = mesh.node_count();

  SparseSystem sys;
  sys.boundary_values.assign(nn, 0.0);
  constexpr std::size_t kDirichlet = static_cast<std::size_t>(-1);
  std::vector<std::size_t> reduced(nn, kDirichlet);
  for (std::size_t v = 0; v < nn; ++v) {
    if (mesh.on_inflow(v)) {
      sys.boundary_values[v] = 1.0;
    } else if (!mesh.on_outflow(v)) {
      reduced[v] = sys.free_nodes.size();
      sys.free_nodes.push_back(v);
    }
  }

  CsrMatrix& a = sys.matrix;
  a.size = sys.free_nodes.size();
  a.row_offsets.assign(a.size + 1, 0);
  sys.rhs.assign(a.size, 0.0);
  for (std::size_t r = 0; r < a.size; ++r) {
    const std::size_t v = sys.free_nodes[r];
    for (std::size_t p = k.row_offsets[v]; p < k.row_offsets[v + 1]; ++p) {
      const std::size_t c = k.column_indices[p];
      if (reduced[c] == kDirichlet) {
        sys.rhs[r] -= k.values[p] * sys.boundary_values[c];
      } else {
        a.column_indices.push_back(reduced[c]);
        a.values.push_back(k.values[p]);
      }
    }
    a.row_offsets[r + 1] = a.column_indices.size();
  }
  return sys;
}

HeadSolution solve_system(const SparseSystem& system, double tol) {
  require(tol > 0.0, "solver tolerance must be positive");
  const CsrMatrix& a = system.matrix;
  const std::size_t m = a.size;
  const std::size_t cap = 10 * system.boundary_values.size();

  std::vector<double> x(m, 0.0), r = system.rhs, p = r, ap(m);
  auto dot = [](std::span<const double> u, std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
  };
  const double bnorm = std::sqrt(dot(r, r));
  double rr = bnorm * bnorm;
  std::size_t it = 0;
  if (bnorm > 0.0) {
    while (std::sqrt(rr) > tol * bnorm) {
      if (it == cap)
        throw ConvergenceError("conjugate gradients did not reach tolerance in " +
                               std::to_string(cap) + " iterations");
      a.multiply(p, ap);
      const double pap = dot(p, ap);
      if (!(pap > 0.0)) throw ConvergenceError("conjugate gradients: matrix is not positive definite");
      const double alpha = rr / pap;
      for (std::size_t i = 0; i < m; ++i) {
        x[i] += alpha * p[i];
        r[i] -= alpha * ap[i];
      }
      const double rr_next = dot(r, r);
      const double beta = rr_next / rr;
      rr = rr_next;
      for (std::size_t i = 0; i < m; ++i) p[i] = r[i] + beta * p[i];
      ++it;
    }
  }

  HeadSolution sol;
  sol.h = system.boundary_values;
  for (std::size_t k = 0; k < m; ++k) sol.h[system.free_nodes[k]] = x[k];
  sol.iterations = it;
  sol.relative_residual = bnorm > 0.0 ? std::sqrt(rr) / bnorm : 0.0;
  return sol;
}

HeadSolution solve_heads(const StructuredMesh& mesh, std::span<const double> t, double tol) {
  return solve_system(assemble_system(mesh, t), tol);
}

std::vector<std::size_t> sensor_nodes(const StructuredMesh& mesh) {
  require(mesh.n >= 11 && (mesh.n - 1) % 10 == 0,
          "sensor grid is not nodal on a mesh with " + std::to_string(mesh.n) +
              " nodes per side; n - 1 must be a multiple of 10");
  const std::size_t stride = (mesh.n - 1) / 10;
  std::vector<std::size_t> nodes;
  nodes.reserve(kSensorCount);
  for (std::size_t r = 1; r <= kSensorsPerSide; ++r)
    for (std::size_t c = 1; c <= kSensorsPerSide; ++c)
      nodes.push_back(mesh.node(c * stride, r * stride));
  return nodes;
}

std::vector<double> observe(std::span<const double> h, const StructuredMesh& mesh) {
  require_dims(h.size() == mesh.node_count(), "head vector does not match the mesh");
  std::vector<double> x;
  x.reserve(kSensorCount);
  for (std::size_t v : sensor_nodes(mesh)) x.push_back(h[v]);
  return x;
}

BoundaryFlux boundary_fluxes(const StructuredMesh& mesh, std::span<const double> t,
                             std::span<const double> h) {
  require_dims(h.size() == mesh.node_count(), "head vector does not match the mesh");
  const CsrMatrix k = assemble_stiffness(mesh, t);
  std::vector<double> kh(h.size());
  k.multiply(h, kh);
  BoundaryFlux f;
  for (std::size_t v = 0; v < h.size(); ++v) {
    if (mesh.on_inflow(v)) f.inflow += kh[v];
    if (mesh.on_outflow(v)) f.outflow -= kh[v];
  }
  return f;
}

}  // namespace nmcmc::darcy
