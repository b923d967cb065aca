#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "nmcmc/darcy/darcy.hpp"
#include "nmcmc/errors.hpp"

using namespace nmcmc;
using namespace nmcmc::darcy;

namespace {

std::vector<double> constant_field(const StructuredMesh& m, double v) {
  return std::vector<double>(m.node_count(), v);
}

// Transmissivity draws from a KL field on the mesh.
struct FieldSampler {
  field::KLBasis basis;
  Rng rng;

  FieldSampler(const StructuredMesh& m, std::size_t modes, std::uint64_t seed) : rng(seed) {
    const auto pairs = field::eigendecompose_descending(field::build_covariance(m.coordinates, 0.25));
    basis = field::truncate_basis(pairs, modes, 1.0, 1.0);
  }

  std::vector<double> next() {
    std::normal_distribution<double> n01;
    std::vector<double> l(basis.mode_count());
    for (double& v : l) v = n01(rng);
    return field::sample_log_field(basis, l).t;
  }
};

}  // namespace

TEST_CASE("mesh layout") {
  const auto m = StructuredMesh::unit_square(11);
  CHECK(m.node_count() == 121);
  CHECK(m.triangles.size() == 200);
  CHECK(m.element_size() == doctest::Approx(0.1));
  CHECK(m.coordinates[m.node(3, 7)][0] == doctest::Approx(0.3));
  CHECK(m.coordinates[m.node(3, 7)][1] == doctest::Approx(0.7));
  for (const auto& tri : m.triangles) {
    const auto &a = m.coordinates[tri[0]], &b = m.coordinates[tri[1]], &c = m.coordinates[tri[2]];
    const double area2 = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    CHECK(area2 == doctest::Approx(0.01));
  }
  CHECK_THROWS_AS(StructuredMesh::unit_square(1), ContractError);
}

TEST_CASE("assemble_stiffness") {
  const auto m = StructuredMesh::unit_square(9);
  SUBCASE("interior row sums vanish for constant t") {
    const auto k = assemble_stiffness(m, constant_field(m, 2.5));
    for (std::size_t r = 0; r < k.size; ++r) {
      double s = 0.0;
      for (std::size_t p = k.row_offsets[r]; p < k.row_offsets[r + 1]; ++p) s += k.values[p];
      CHECK(std::abs(s) < 1e-12);
    }
  }
  SUBCASE("symmetric for a heterogeneous field") {
    FieldSampler fs(m, 6, 3);
    const auto k = assemble_stiffness(m, fs.next());
    for (std::size_t r = 0; r < k.size; ++r)
      for (std::size_t p = k.row_offsets[r]; p < k.row_offsets[r + 1]; ++p)
        CHECK(k.values[p] == k.at(k.column_indices[p], r));
  }
  SUBCASE("pattern matches mesh adjacency") {
    const auto k = assemble_stiffness(m, constant_field(m, 1.0));
    // Interior node: itself plus six neighbours for this diagonal split.
    const std::size_t v = m.node(4, 4);
    CHECK(k.row_offsets[v + 1] - k.row_offsets[v] == 7);
    auto has = [&](std::size_t c) {
      for (std::size_t p = k.row_offsets[v]; p < k.row_offsets[v + 1]; ++p)
        if (k.column_indices[p] == c) return true;
      return false;
    };
    CHECK(has(m.node(5, 5)));
    CHECK(has(m.node(3, 3)));
    CHECK_FALSE(has(m.node(5, 3)));
    CHECK_FALSE(has(m.node(3, 5)));
  }
  SUBCASE("invalid transmissivity") {
    auto t = constant_field(m, 1.0);
    t[10] = 0.0;
    CHECK_THROWS_AS(assemble_stiffness(m, t), ContractError);
    t[10] = -1.0;
    CHECK_THROWS_AS(assemble_system(m, t), ContractError);
    CHECK_THROWS_AS(assemble_system(m, std::vector<double>(5, 1.0)), DimensionError);
  }
  SUBCASE("doubling t doubles matrix and rhs") {
    FieldSampler fs(m, 4, 8);
    auto t = fs.next();
    const auto s1 = assemble_system(m, t);
    for (double& v : t) v *= 2.0;
    const auto s2 = assemble_system(m, t);
    for (std::size_t p = 0; p < s1.matrix.values.size(); ++p)
      CHECK(s2.matrix.values[p] == doctest::Approx(2.0 * s1.matrix.values[p]).epsilon(1e-14));
    for (std::size_t p = 0; p < s1.rhs.size(); ++p)
      CHECK(s2.rhs[p] == doctest::Approx(2.0 * s1.rhs[p]).epsilon(1e-14));
  }
}

TEST_CASE("constant transmissivity gives h = 1 - x1") {
  for (std::size_t n : {11u, 21u, 41u, 61u}) {
    const auto m = StructuredMesh::unit_square(n);
    const auto sol = solve_heads(m, constant_field(m, 0.7));
    double worst = 0.0;
    for (std::size_t v = 0; v < m.node_count(); ++v)
      worst = std::max(worst, std::abs(sol.h[v] - (1.0 - m.coordinates[v][0])));
    CAPTURE(n);
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("mesh refinement leaves the constant-t solution unchanged at shared points") {
  const auto m21 = StructuredMesh::unit_square(21);
  const auto m41 = StructuredMesh::unit_square(41);
  const auto m61 = StructuredMesh::unit_square(61);
  const auto x21 = observe(solve_heads(m21, constant_field(m21, 1.0)).h, m21);
  const auto x41 = observe(solve_heads(m41, constant_field(m41, 1.0)).h, m41);
  const auto x61 = observe(solve_heads(m61, constant_field(m61, 1.0)).h, m61);
  for (std::size_t s = 0; s < kSensorCount; ++s) {
    CHECK(std::abs(x21[s] - x41[s]) <= 1e-9);
    CHECK(std::abs(x21[s] - x61[s]) <= 1e-9);
  }
}

TEST_CASE("two-band transmissivity matches the series-resistance interface head") {
  // With h = 1 on the left and T = a there, continuity of flux puts the
  // interface head at a / (a + b).
  const double a = 1.0, b = 4.0;
  for (std::size_t n : {21u, 41u}) {
    const auto m = StructuredMesh::unit_square(n);
    std::vector<double> t(m.node_count());
    for (std::size_t v = 0; v < t.size(); ++v) {
      const double x1 = m.coordinates[v][0];
      t[v] = std::abs(x1 - 0.5) < 1e-12 ? 0.5 * (a + b) : (x1 < 0.5 ? a : b);
    }
    const auto sol = solve_heads(m, t);
    const double interface = sol.h[m.node((n - 1) / 2, (n - 1) / 2)];
    CAPTURE(n);
    CHECK(std::abs(interface - a / (a + b)) <= 2.0 * m.element_size());
  }
}

namespace {

double mirror_gap(std::size_t n, double (*t_of)(double, double)) {
  const auto m = StructuredMesh::unit_square(n);
  std::vector<double> t(m.node_count());
  for (std::size_t v = 0; v < t.size(); ++v) t[v] = t_of(m.coordinates[v][0], m.coordinates[v][1]);
  const auto sol = solve_heads(m, t);
  double worst = 0.0;
  for (std::size_t j = 0; j < m.n; ++j)
    for (std::size_t i = 0; i < m.n; ++i)
      worst = std::max(worst, std::abs(sol.h[m.node(i, j)] - sol.h[m.node(i, m.n - 1 - j)]));
  return worst;
}

double uniform(double, double) { return 3.0; }
double layered(double x1, double) { return std::exp(std::sin(5.0 * x1)); }
double symmetric(double x1, double x2) {
  return std::exp(std::sin(5.0 * x1) * std::cos(3.0 * (x2 - 0.5)));
}

}  // namespace

TEST_CASE("x2-symmetric transmissivity gives an x2-symmetric head") {
  CHECK(mirror_gap(21, uniform) <= 1e-9);
  // The fixed diagonal split is not itself mirror-symmetric in x2, so a
  // heterogeneous symmetric field is symmetric only up to discretization
  // error, which must shrink under refinement.
  const double g21 = mirror_gap(21, symmetric), g41 = mirror_gap(41, symmetric);
  CHECK(mirror_gap(41, layered) <= 0.5 * mirror_gap(21, layered));
  MESSAGE("mirror gap n=21: " << g21 << ", n=41: " << g41);
  CHECK(g21 <= 4.0 * (1.0 / 20) * (1.0 / 20));
  CHECK(g41 <= 0.5 * g21);
}

TEST_CASE("observe") {
  const auto m = StructuredMesh::unit_square(21);
  const auto x = observe(solve_heads(m, constant_field(m, 1.0)).h, m);
  REQUIRE(x.size() == 81);
  CHECK(x[4 * 9 + 4] == doctest::Approx(0.5).epsilon(1e-9));
  for (std::size_t c = 0; c < 9; ++c)
    for (std::size_t r = 0; r < 9; ++r) {
      CHECK(std::abs(x[r * 9 + c] - x[c]) <= 1e-9);
      CHECK(x[r * 9 + c] == doctest::Approx(1.0 - 0.1 * static_cast<double>(c + 1)).epsilon(1e-9));
    }
  const auto coarse = StructuredMesh::unit_square(16);
  CHECK_THROWS_AS(observe(constant_field(coarse, 0.0), coarse), ContractError);
  const auto sensors = sensor_nodes(m);
  CHECK(m.coordinates[sensors[9]][0] == doctest::Approx(0.1));
  CHECK(m.coordinates[sensors[9]][1] == doctest::Approx(0.2));
}

TEST_CASE("random KL fields: maximum principle, flux balance, scale invariance") {
  const auto m = StructuredMesh::unit_square(21);
  FieldSampler fs(m, 8, 17);
  double worst_flux = 0.0, worst_scale = 0.0, lo = 1.0, hi = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto t = fs.next();
    const auto sol = solve_heads(m, t);
    lo = std::min(lo, *std::min_element(sol.h.begin(), sol.h.end()));
    hi = std::max(hi, *std::max_element(sol.h.begin(), sol.h.end()));
    const auto flux = boundary_fluxes(m, t, sol.h);
    CHECK(flux.inflow > 0.0);
    worst_flux = std::max(worst_flux, std::abs(flux.inflow - flux.outflow) / flux.inflow);
    if (trial % 10 == 0) {
      const double c = 0.01 + 10.0 * trial;
      for (double& v : t) v *= c;
      const auto scaled = solve_heads(m, t);
      for (std::size_t v = 0; v < sol.h.size(); ++v)
        worst_scale = std::max(worst_scale, std::abs(scaled.h[v] - sol.h[v]));
    }
  }
  CHECK(lo >= -1e-8);
  CHECK(hi <= 1.0 + 1e-8);
  CHECK(worst_flux <= 1e-6);
  CHECK(worst_scale <= 1e-8);
}

TEST_CASE("solver iteration cap") {
  const auto m = StructuredMesh::unit_square(11);
  CHECK_THROWS_AS(solve_system(assemble_system(m, constant_field(m, 1.0)), 0.0), ContractError);
  // 50 unknowns with spread-out eigenvalues need far more than the
  // 10 * N_N = 10 iterations allowed for a one-node mesh record.
  SparseSystem sys;
  sys.matrix.size = 50;
  sys.matrix.row_offsets.push_back(0);
  for (std::size_t i = 0; i < 50; ++i) {
    sys.matrix.column_indices.push_back(i);
    sys.matrix.values.push_back(std::pow(1.3, static_cast<double>(i)));
    sys.matrix.row_offsets.push_back(i + 1);
    sys.free_nodes.push_back(i);
  }
  sys.rhs.assign(50, 1.0);
  sys.boundary_values.assign(1, 0.0);
  CHECK_THROWS_AS(solve_system(sys), ConvergenceError);
}
