#pragma once

// Steady Darcy flow -div(T grad h) = 0 on the unit square with linear
// triangular elements. h = 1 on x1 = 0, h = 0 on x1 = 1, no-flow on the
// top and bottom edges.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "nmcmc/field/random_field.hpp"

namespace nmcmc::darcy {

using field::Point;

/// n x n nodes on [0,1]^2. Node (i, j) sits at (i/(n-1), j/(n-1)) and has
/// index i + j*n. Each cell is split along its (i,j)-(i+1,j+1) diagonal into
/// [(i,j),(i+1,j),(i+1,j+1)] and [(i,j),(i+1,j+1),(i,j+1)], both
/// counter-clockwise.
struct StructuredMesh {
  std::size_t n = 0;
  std::vector<Point> coordinates;
  std::vector<std::array<std::size_t, 3>> triangles;

  /// ContractError when n < 2.
  static StructuredMesh unit_square(std::size_t n);

  std::size_t node_count() const noexcept { return coordinates.size(); }
  std::size_t node(std::size_t i, std::size_t j) const noexcept { return i + j * n; }
  double element_size() const noexcept { return 1.0 / static_cast<double>(n - 1); }
  bool on_inflow(std::size_t node) const noexcept { return node % n == 0; }
  bool on_outflow(std::size_t node) const noexcept { return node % n == n - 1; }
};

struct CsrMatrix {
  std::size_t size = 0;
  std::vector<std::size_t> row_offsets;
  std::vector<std::size_t> column_indices;
  std::vector<double> values;

  /// y = A x.
  void multiply(std::span<const double> x, std::span<double> y) const;
  double at(std::size_t row, std::size_t col) const;
};

/// Full N_N x N_N stiffness matrix, before boundary conditions. Element
/// transmissivity is the mean of the three nodal values. ContractError on a
/// nonpositive or non-finite t, DimensionError on a length mismatch.
CsrMatrix assemble_stiffness(const StructuredMesh& mesh, std::span<const double> t);

/// Reduced system over the free (non-Dirichlet) nodes.
struct SparseSystem {
  CsrMatrix matrix;
  std::vector<double> rhs;
  /// free_nodes[k] is the mesh node of unknown k.
  std::vector<std::size_t> free_nodes;
  /// Nodal values with Dirichlet data filled in and zeros elsewhere.
  std::vector<double> boundary_values;
};

SparseSystem assemble_system(const StructuredMesh& mesh, std::span<const double> t);

struct HeadSolution {
  std::vector<double> h;
  std::size_t iterations = 0;
  double relative_residual = 0.0;
};

inline constexpr double kDefaultSolverTolerance = 1e-10;

/// Plain conjugate gradients to ||r|| <= tol ||b||, Dirichlet values
/// re-inserted. ConvergenceError after 10 * N_N iterations.
HeadSolution solve_system(const SparseSystem& system, double tol = kDefaultSolverTolerance);

/// assemble_system followed by solve_system.
HeadSolution solve_heads(const StructuredMesh& mesh, std::span<const double> t,
                         double tol = kDefaultSolverTolerance);

inline constexpr std::size_t kSensorsPerSide = 9;
inline constexpr std::size_t kSensorCount = kSensorsPerSide * kSensorsPerSide;

/// Mesh nodes of the 9 x 9 sensor grid at {0.1, ..., 0.9}^2. Sensor r*9 + c
/// sits at (0.1 (c+1), 0.1 (r+1)). ContractError unless (n-1) % 10 == 0.
std::vector<std::size_t> sensor_nodes(const StructuredMesh& mesh);

/// Heads at the sensor nodes.
std::vector<double> observe(std::span<const double> h, const StructuredMesh& mesh);

struct BoundaryFlux {
  /// Flow entering through x1 = 0.
  double inflow = 0.0;
  /// Flow leaving through x1 = 1.
  double outflow = 0.0;
};

/// Boundary fluxes recovered as the reactions K h at the Dirichlet nodes.
BoundaryFlux boundary_fluxes(const StructuredMesh& mesh, std::span<const double> t,
                             std::span<const double> h);

}  // namespace nmcmc::darcy
