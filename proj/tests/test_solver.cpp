#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "relsim/engine.hpp"
#include "relsim/solver.hpp"
#include "support/oracle.hpp"
#include "support/scenes.hpp"

using namespace relsim;

namespace {

// Random symmetric block-sparse system with strictly diagonally dominant
// blocks (hence SPD), built straight from coordinates.
struct RandomSystem {
  BlockSparseHessian h;
  Index s = 0;

  RandomSystem(Index nblocks, int bs, double density, std::uint64_t seed)
      : h(make(nblocks, bs, density, seed)) {
    s = h.total_dofs();
  }

  static BlockSparseHessian make(Index nblocks, int bs, double density, std::uint64_t seed) {
    auto r = test::rng(seed);
    Index s = nblocks * bs;
    std::vector<BlockSparseHessian::BlockCoord> coords;
    for (Index i = 0; i < nblocks; ++i) {
      coords.push_back({bs, bs, i * bs, i * bs});
      for (Index j = i + 1; j < nblocks; ++j)
        if (test::urand(r, 0, 1) < density) coords.push_back({bs, bs, i * bs, j * bs});
    }
    BlockSparseHessian h = BlockSparseHessian::build(std::move(coords), s);
    // fill off-diagonals with small random values, diagonals dominant
    auto rr = test::rng(seed + 1);
    std::vector<MatrixXd> diag(nblocks, MatrixXd::Zero(bs, bs));
    Index bi = 0;
    for (const auto& g : h.groups()) {
      for (Index k = 0; k < g.count; ++k, ++bi) {
        Index row = h.row_coordinate()[bi], col = h.col_coordinate()[bi];
        if (row == col) continue;
        MatrixXd b(bs, bs);
        for (int x = 0; x < bs * bs; ++x) b.data()[x] = test::urand(rr, -1, 1);
        h.add_block(h.value_offset(bs, bs, row, col), b);
        diag[row / bs] += MatrixXd(b.cwiseAbs().rowwise().sum().asDiagonal());
        diag[col / bs] += MatrixXd(b.cwiseAbs().colwise().sum().transpose().asDiagonal());
      }
    }
    for (Index i = 0; i < nblocks; ++i) {
      MatrixXd d(bs, bs);
      for (int x = 0; x < bs * bs; ++x) d.data()[x] = test::urand(rr, -0.2, 0.2);
      d = 0.5 * (d + d.transpose().eval());
      d += diag[i] + MatrixXd::Identity(bs, bs) * (1.0 + test::urand(rr, 0, 1));
      h.add_block(h.value_offset(bs, bs, i * bs, i * bs), d);
    }
    return h;
  }
};

BlockJacobiPreconditioner jacobi_of(const BlockSparseHessian& h, int bs) {
  // build a diag accumulator shim straight from the matrix diagonal
  MatrixXd d = h.to_dense();
  Scene* leak = new Scene("shim");  // layout targets need hosts; keep it alive
  Mesh& m = leak->add_mesh("m");
  PrimitiveType& v = m.add_primitive("v", h.total_dofs() / bs);
  Attr p = v.add_attribute("p", bs, 1);
  leak->add_minimize_target(p);
  static std::vector<GradientLayout>* layouts = new std::vector<GradientLayout>();
  layouts->push_back(build_gradient_layout(leak->minimize_targets()));
  DiagAccumulator acc;
  acc.init(layouts->back());
  for (Index i = 0; i < h.total_dofs() / bs; ++i) acc.add(i * bs, d.block(i * bs, i * bs, bs, bs));
  return BlockJacobiPreconditioner::build(acc);
}

}  // namespace

TEST_CASE("spmv: block identity acts as identity") {
  std::vector<BlockSparseHessian::BlockCoord> coords;
  for (Index i = 0; i < 4; ++i) coords.push_back({3, 3, i * 3, i * 3});
  BlockSparseHessian h = BlockSparseHessian::build(std::move(coords), 12);
  for (Index i = 0; i < 4; ++i)
    h.add_block(h.value_offset(3, 3, i * 3, i * 3), MatrixXd::Identity(3, 3));
  VectorXd x(12);
  for (int i = 0; i < 12; ++i) x[i] = i + 1;
  CHECK((spmv(h, x) - x).norm() == 0.0);
}

TEST_CASE("spmv: single off-diagonal block applies the transpose too") {
  std::vector<BlockSparseHessian::BlockCoord> coords{{3, 3, 0, 3}};
  BlockSparseHessian h = BlockSparseHessian::build(std::move(coords), 6);
  MatrixXd b(3, 3);
  b << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  h.add_block(h.value_offset(3, 3, 0, 3), b);
  VectorXd x(6);
  x << 1, 1, 1, 2, 0, -1;
  VectorXd y = spmv(h, x);
  VectorXd upper = b * x.segment(3, 3);
  VectorXd lower = b.transpose() * x.segment(0, 3);
  CHECK((y.segment(0, 3) - upper).norm() == 0.0);
  CHECK((y.segment(3, 3) - lower).norm() == 0.0);
}

TEST_CASE("spmv equals dense symmetric matvec on random systems") {
  for (auto [nb, bs, seed] : std::vector<std::tuple<Index, int, int>>{{10, 3, 1}, {25, 3, 2}, {8, 9, 3}}) {
    RandomSystem sys(nb, bs, 0.3, seed);
    MatrixXd dense = sys.h.to_dense();
    auto r = test::rng(seed + 10);
    for (int round = 0; round < 5; ++round) {
      VectorXd x(sys.s);
      for (Index i = 0; i < sys.s; ++i) x[i] = test::urand(r, -1, 1);
      VectorXd y = spmv(sys.h, x);
      VectorXd yd = dense * x;
      CHECK((y - yd).norm() <= 1e-12 * std::max(1.0, yd.norm()));
    }
  }
}

TEST_CASE("spmv on assembled matrices, including mixed shapes") {
  test::ContactScene cs(4, 2, 5, /*seed=*/19);
  cs.register_targets();
  cs.register_energy();
  cs.set_pairs({{cs.free_index(0), cs.abd_index(1)},
                {cs.free_index(2), cs.free_index(3)},
                {cs.abd_index(0), cs.abd_index(4)}});
  Engine eng(cs.s);
  eng.refresh_dynamic();
  eng.assemble();
  MatrixXd dense = eng.dense_hessian();
  auto r = test::rng(4);
  for (int round = 0; round < 5; ++round) {
    VectorXd x(dense.rows());
    for (Index i = 0; i < x.size(); ++i) x[i] = test::urand(r, -1, 1);
    VectorXd y = VectorXd::Zero(x.size());
    eng.apply_hessian(x, y);
    CHECK((y - dense * x).norm() <= 1e-12 * std::max(1.0, (dense * x).norm()));
  }

  // parallel shards reduce deterministically
  VectorXd x = VectorXd::LinSpaced(dense.rows(), -1.0, 1.0);
  VectorXd y1 = VectorXd::Zero(x.size());
  eng.apply_hessian(x, y1);
  set_thread_count(4);
  VectorXd y4 = VectorXd::Zero(x.size());
  eng.apply_hessian(x, y4);
  set_thread_count(1);
  CHECK((y1 - y4).norm() <= 1e-12 * std::max(1.0, y1.norm()));

  VectorXd bad(3);
  CHECK_THROWS_AS(spmv(eng.static_hessian(), bad), ValidationError);
}

TEST_CASE("block jacobi inverts diagonal blocks exactly") {
  RandomSystem sys(6, 3, 0.0, 7);  // block diagonal
  BlockJacobiPreconditioner p = jacobi_of(sys.h, 3);
  MatrixXd dense = sys.h.to_dense();
  VectorXd r = VectorXd::LinSpaced(sys.s, 1.0, 2.0);
  VectorXd z = p.apply(r);
  CHECK((dense * z - r).norm() < 1e-10 * r.norm());

  // 2I block inverts to 0.5I
  std::vector<BlockSparseHessian::BlockCoord> coords{{3, 3, 0, 0}};
  BlockSparseHessian h2 = BlockSparseHessian::build(std::move(coords), 3);
  h2.add_block(h2.value_offset(3, 3, 0, 0), 2.0 * MatrixXd::Identity(3, 3));
  BlockJacobiPreconditioner p2 = jacobi_of(h2, 3);
  VectorXd one = VectorXd::Ones(3);
  CHECK((p2.apply(one) - 0.5 * one).norm() < 1e-14);
}

TEST_CASE("zero diagonal block is regularized and flagged") {
  std::vector<BlockSparseHessian::BlockCoord> coords{{3, 3, 0, 0}, {3, 3, 3, 3}};
  BlockSparseHessian h = BlockSparseHessian::build(std::move(coords), 6);
  h.add_block(h.value_offset(3, 3, 0, 0), MatrixXd::Identity(3, 3));
  // block at 3 stays zero (untouched DoF)
  BlockJacobiPreconditioner p = jacobi_of(h, 3);
  CHECK(p.regularized_blocks() == std::vector<Index>{3});
  VectorXd r = VectorXd::Ones(6);
  CHECK(p.apply(r).allFinite());
}

TEST_CASE("non-finite diagonal block raises an error naming the dof range") {
  Scene s("shim");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& v = m.add_primitive("v", 2);
  Attr p = v.add_attribute("p", 3, 1);
  s.add_minimize_target(p);
  GradientLayout layout = build_gradient_layout(s.minimize_targets());
  DiagAccumulator acc;
  acc.init(layout);
  acc.add(0, MatrixXd::Identity(3, 3));
  MatrixXd bad = MatrixXd::Constant(3, 3, std::numeric_limits<double>::quiet_NaN());
  acc.add(3, bad);
  CHECK_THROWS_WITH_AS(BlockJacobiPreconditioner::build(acc), doctest::Contains("[3, 6)"),
                       NumericalError);
}

TEST_CASE("pcg reports divergence with the iteration number on non-finite input") {
  std::vector<BlockSparseHessian::BlockCoord> coords{{3, 3, 0, 0}};
  BlockSparseHessian h = BlockSparseHessian::build(std::move(coords), 3);
  MatrixXd nanblock = MatrixXd::Constant(3, 3, std::numeric_limits<double>::quiet_NaN());
  h.add_block(0, nanblock);
  Scene s("shim");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& v = m.add_primitive("v", 1);
  Attr p = v.add_attribute("p", 3, 1);
  s.add_minimize_target(p);
  BlockJacobiPreconditioner ident =
      BlockJacobiPreconditioner::identity(build_gradient_layout(s.minimize_targets()));
  VectorXd g = VectorXd::Ones(3);
  CHECK_THROWS_WITH_AS(pcg(h, g, ident, 1e-8, 10), doctest::Contains("iteration"), NumericalError);
}

TEST_CASE("pcg: identity system converges in one iteration") {
  std::vector<BlockSparseHessian::BlockCoord> coords;
  for (Index i = 0; i < 5; ++i) coords.push_back({3, 3, i * 3, i * 3});
  BlockSparseHessian h = BlockSparseHessian::build(std::move(coords), 15);
  for (Index i = 0; i < 5; ++i)
    h.add_block(h.value_offset(3, 3, i * 3, i * 3), MatrixXd::Identity(3, 3));
  VectorXd g = VectorXd::LinSpaced(15, -1.0, 3.0);
  PcgResult res = pcg(h, g, jacobi_of(h, 3), 1e-10, 100);
  CHECK(res.converged);
  CHECK(res.iterations == 1);
  CHECK((res.x - g).norm() < 1e-10);
}

TEST_CASE("pcg: block diagonal system converges within two iterations") {
  RandomSystem sys(8, 3, 0.0, 21);
  VectorXd g = VectorXd::LinSpaced(sys.s, 0.5, 1.5);
  PcgResult res = pcg(sys.h, g, jacobi_of(sys.h, 3), 1e-10, 100);
  CHECK(res.converged);
  CHECK(res.iterations <= 2);
}

TEST_CASE("pcg: zero right-hand side returns zero immediately") {
  RandomSystem sys(4, 3, 0.3, 33);
  PcgResult res = pcg(sys.h, VectorXd::Zero(sys.s), jacobi_of(sys.h, 3), 1e-8, 10);
  CHECK(res.converged);
  CHECK(res.iterations == 0);
  CHECK(res.x.norm() == 0.0);
}

TEST_CASE("pcg solves random spd block systems within s iterations") {
  for (std::uint64_t seed : {11, 12, 13, 14}) {
    RandomSystem sys(30, 3, 0.15, seed);  // s = 90
    auto r = test::rng(seed * 3);
    VectorXd g(sys.s);
    for (Index i = 0; i < sys.s; ++i) g[i] = test::urand(r, -1, 1);
    PcgResult res = pcg(sys.h, g, jacobi_of(sys.h, 3), 1e-8, sys.s);
    CHECK(res.converged);
    CHECK(res.iterations <= sys.s);
    VectorXd hx = spmv(sys.h, res.x);
    CHECK((hx - g).norm() <= 1e-8 * g.norm() * 1.01);

    // dense direct-solve oracle agrees
    MatrixXd dense = sys.h.to_dense();
    VectorXd xd = dense.ldlt().solve(g);
    CHECK((res.x - xd).norm() <= 1e-6 * std::max(1.0, xd.norm()));

    // preconditioned residual norm is monotonically nonincreasing
    for (size_t k = 1; k < res.precond_residual_history.size(); ++k)
      CHECK(res.precond_residual_history[k] <=
            res.precond_residual_history[k - 1] * (1.0 + 1e-12));
  }
}

TEST_CASE("minimize step: newton on a quadratic is one-step exact") {
  test::QuadraticScene q(5);
  Engine eng(q.s);
  StepStats stats;
  std::vector<VectorXd> dx = eng.minimize_step(1e-10, -1, &stats);
  REQUIRE(dx.size() == 1);  // one target, registration order
  CHECK(stats.pcg_converged);

  // unnegated: x - dx reaches the anchor
  VectorXd x = eng.gather_targets();
  VectorXd moved = x - dx[0];
  eng.scatter_targets(moved);
  const auto& anchor = q.verts->attribute("anchor").values;
  for (size_t i = 0; i < anchor.size(); ++i) CHECK(moved[i] == doctest::Approx(anchor[i]).epsilon(1e-10));
  eng.assemble(true, false);
  CHECK(eng.gradient().norm() < 1e-10);
}

TEST_CASE("minimize step returns one slice per target in declaration order") {
  test::ContactScene cs(3, 2, 4, /*seed=*/2);
  cs.register_targets();
  cs.register_energy();
  cs.set_pairs({{cs.free_index(0), cs.abd_index(0)}});
  Engine eng(cs.s);
  std::vector<VectorXd> dx = eng.minimize_step(1e-8);
  REQUIRE(dx.size() == 3);
  CHECK(dx[0].size() == 9);   // 3 free vertices
  CHECK(dx[1].size() == 18);  // 2 affine matrices
  CHECK(dx[2].size() == 6);   // 2 translations

  // zero-gradient configuration: all slices vanish
  test::QuadraticScene q(2);
  VectorXd x = VectorXd::Zero(6);
  Engine eq(q.s);
  // move position onto the anchor -> gradient is exactly zero
  const auto& anchor = q.verts->attribute("anchor").values;
  for (int i = 0; i < 6; ++i) x[i] = anchor[i];
  eq.scatter_targets(x);
  std::vector<VectorXd> dz = eq.minimize_step(1e-10);
  CHECK(dz[0].norm() == 0.0);
}

TEST_CASE("block jacobi reduces pcg iterations vs identity preconditioner") {
  // elasticity-style system: springs between consecutive verticesplus anchors
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  Index n = 40;
  PrimitiveType& verts = m.add_primitive("v", n);
  PrimitiveType& springs = m.add_primitive("e", n - 1);
  Attr pos = verts.add_attribute("position", 3, 1);
  auto r = test::rng(5);
  std::vector<double> pv(n * 3);
  for (auto& v : pv) v = test::urand(r, -1, 1);
  pos.update_value(pv);
  Attr anchor = verts.add_constant("anchor", 3, 1);
  std::vector<double> av(n * 3);
  for (auto& v : av) v = test::urand(r, -1, 1);
  anchor.update_value(av);
  Attr mass = verts.add_constant("mass", 1, 1);
  std::vector<double> mv(n);
  for (auto& v : mv) v = test::urand(r, 0.1, 10.0);  // uneven masses: jacobi helps
  mass.update_value(mv);
  s.add_minimize_target(pos);

  std::vector<Index> idx;
  for (Index i = 0; i + 1 < n; ++i) {
    idx.push_back(i);
    idx.push_back(i + 1);
  }
  Connectivity& c = springs.add_connectivity("e2v", verts, idx, 2);
  Attr j = springs.add_attribute("pos", c, pos);
  Attr dvec = j.index(0) - j.index(1);
  s.add_energy(springs.add_attribute("spring", 0.5 * dvec.dot(dvec)));
  Attr da = pos - anchor;
  s.add_energy(verts.add_attribute("anchor_pull", 0.5 * mass * da.dot(da)));

  Engine eng(s);
  eng.assemble();
  BlockJacobiPreconditioner bj = BlockJacobiPreconditioner::build(eng.diag());
  BlockJacobiPreconditioner ident = BlockJacobiPreconditioner::identity(eng.layout());
  auto op = [&](const VectorXd& x, VectorXd& y) { eng.apply_hessian(x, y); };
  PcgResult with_bj = pcg(op, eng.gradient(), bj, 1e-8, 10000);
  PcgResult with_id = pcg(op, eng.gradient(), ident, 1e-8, 10000);
  REQUIRE(with_bj.converged);
  REQUIRE(with_id.converged);
  CHECK(with_bj.iterations < with_id.iterations);
}
