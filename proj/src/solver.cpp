#include "relsim/solver.hpp"

#include <cmath>
#include <thread>

namespace relsim {

namespace {

template <int R, int C>
void spmv_group_fixed(const double* values, const Index* rows, const Index* cols, Index begin, Index end,
                      Index stride, const VectorXd& x, VectorXd& y) {
  using Block = Eigen::Matrix<double, R, C, (C == 1 ? Eigen::ColMajor : Eigen::RowMajor)>;
  for (Index k = begin; k < end; ++k) {
    Eigen::Map<const Block> b(values + k * stride);
    Index r = rows[k], c = cols[k];
    y.segment<R>(r) += b * x.segment<C>(c);
    if (r != c) y.segment<C>(c) += b.transpose() * x.segment<R>(r);
  }
}

void spmv_group_dyn(const double* values, const Index* rows, const Index* cols, Index begin, Index end,
                    int br, int bc, const VectorXd& x, VectorXd& y) {
  using BlockMap =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  Index stride = Index(br) * bc;
  for (Index k = begin; k < end; ++k) {
    BlockMap b(values + k * stride, br, bc);
    Index r = rows[k], c = cols[k];
    y.segment(r, br) += b * x.segment(c, bc);
    if (r != c) y.segment(c, bc) += b.transpose() * x.segment(r, br);
  }
}

void spmv_group(const BlockSparseHessian& h, const BlockSparseHessian::ShapeGroup& g, Index begin,
                Index end, const VectorXd& x, VectorXd& y) {
  const double* values = h.values().data() + g.value_start - g.coord_start * Index(g.rows) * g.cols;
  const Index* rows = h.row_coordinate().data();
  const Index* cols = h.col_coordinate().data();
  Index stride = Index(g.rows) * g.cols;

  // Fixed-size kernels for the block shapes the bundled energies produce.
#define RELSIM_SPMV_CASE(R, C) \
  if (g.rows == R && g.cols == C) return spmv_group_fixed<R, C>(values, rows, cols, begin, end, stride, x, y);
  RELSIM_SPMV_CASE(1, 1)
  RELSIM_SPMV_CASE(2, 2)
  RELSIM_SPMV_CASE(3, 3)
  RELSIM_SPMV_CASE(3, 9)
  RELSIM_SPMV_CASE(9, 9)
  RELSIM_SPMV_CASE(9, 3)
  RELSIM_SPMV_CASE(3, 12)
  RELSIM_SPMV_CASE(12, 12)
#undef RELSIM_SPMV_CASE
  spmv_group_dyn(values, rows, cols, begin, end, g.rows, g.cols, x, y);
}

}  // namespace

void spmv_add(const BlockSparseHessian& h, const VectorXd& x, VectorXd& y) {
  if (x.size() != h.total_dofs() || y.size() != h.total_dofs())
    throw ValidationError("spmv: vector length " + std::to_string(x.size()) + " != system size " +
                          std::to_string(h.total_dofs()));
  int nt = thread_count();
  if (nt <= 1 || h.block_count() < 1024) {
    for (const auto& g : h.groups()) spmv_group(h, g, g.coord_start, g.coord_start + g.count, x, y);
    return;
  }
  // Shard blocks; partial outputs are reduced in shard order.
  std::vector<VectorXd> partials(nt, VectorXd::Zero(y.size()));
  for (const auto& g : h.groups()) {
    Index per = (g.count + nt - 1) / nt;
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t) {
      Index b = g.coord_start + t * per;
      Index e = std::min(g.coord_start + g.count, b + per);
      if (b >= e) break;
      pool.emplace_back([&, b, e, t] { spmv_group(h, g, b, e, x, partials[t]); });
    }
    for (auto& th : pool) th.join();
  }
  for (const VectorXd& p : partials) y += p;
}

VectorXd spmv(const BlockSparseHessian& h, const VectorXd& x) {
  VectorXd y = VectorXd::Zero(h.total_dofs());
  spmv_add(h, x, y);
  return y;
}

// ---------------------------------------------------------------------------
// Block-Jacobi preconditioner

BlockJacobiPreconditioner BlockJacobiPreconditioner::build(const DiagAccumulator& diag) {
  BlockJacobiPreconditioner p;
  p.starts_ = diag.starts;
  p.total_ = diag.layout->total_dofs;
  p.inv_blocks_.reserve(diag.blocks.size());
  for (size_t i = 0; i < diag.blocks.size(); ++i) {
    const MatrixXd& b = diag.blocks[i];
    int m = int(b.rows());
    if (b.isZero(0.0)) {
      // Untouched DoF block: identity fallback, flagged in diagnostics.
      p.inv_blocks_.push_back(MatrixXd::Identity(m, m));
      p.regularized_.push_back(diag.starts[i]);
      continue;
    }
    MatrixXd inv = b.inverse();
    if (!inv.allFinite() || ((b * inv - MatrixXd::Identity(m, m)).norm() > 1e-6 * (1.0 + b.norm()))) {
      double eps = 1e-12 * b.trace() / m;
      if (eps <= 0.0) eps = 1e-12;
      MatrixXd reg = b + eps * MatrixXd::Identity(m, m);
      inv = reg.inverse();
      p.regularized_.push_back(diag.starts[i]);
      if (!inv.allFinite() ||
          ((reg * inv - MatrixXd::Identity(m, m)).norm() > 1e-3 * (1.0 + reg.norm())))
        throw NumericalError("diagonal block at DoF range [" + std::to_string(diag.starts[i]) + ", " +
                             std::to_string(diag.starts[i] + m) + ") is singular");
    }
    p.inv_blocks_.push_back(std::move(inv));
  }
  return p;
}

BlockJacobiPreconditioner BlockJacobiPreconditioner::identity(const GradientLayout& layout) {
  BlockJacobiPreconditioner p;
  p.total_ = layout.total_dofs;
  for (size_t t = 0; t < layout.targets.size(); ++t) {
    int rc = layout.targets[t]->shape.size();
    Index n = layout.targets[t]->host->instance_count();
    for (Index i = 0; i < n; ++i) {
      p.starts_.push_back(layout.boundaries[t] + i * rc);
      p.inv_blocks_.push_back(MatrixXd::Identity(rc, rc));
    }
  }
  return p;
}

VectorXd BlockJacobiPreconditioner::apply(const VectorXd& r) const {
  if (r.size() != total_) throw ValidationError("preconditioner: vector length mismatch");
  VectorXd z(r.size());
  for (size_t i = 0; i < inv_blocks_.size(); ++i) {
    int m = int(inv_blocks_[i].rows());
    z.segment(starts_[i], m) = inv_blocks_[i] * r.segment(starts_[i], m);
  }
  return z;
}

// ---------------------------------------------------------------------------
// PCG

PcgResult pcg(const LinearOperator& apply_h, const VectorXd& g, const BlockJacobiPreconditioner& minv,
              double tol, Index max_iter) {
  PcgResult res;
  Index n = g.size();
  res.x = VectorXd::Zero(n);
  double gnorm = g.norm();
  if (gnorm == 0.0) {
    res.converged = true;
    return res;
  }

  VectorXd r = g;
  VectorXd z = minv.apply(r);
  VectorXd p = z;
  double rz = r.dot(z);
  res.residual_history.push_back(1.0);
  res.precond_residual_history.push_back(std::sqrt(std::max(rz, 0.0)));

  VectorXd hp(n);
  for (Index it = 0; it < max_iter; ++it) {
    hp.setZero();
    apply_h(p, hp);
    double php = p.dot(hp);
    if (!std::isfinite(php) || php <= 0.0) {
      if (php == 0.0) break;  // stagnation on a semidefinite direction
      throw NumericalError("PCG diverged at iteration " + std::to_string(it) +
                           " (non-finite or negative curvature)");
    }
    double alpha = rz / php;
    res.x += alpha * p;
    r -= alpha * hp;
    res.iterations = it + 1;
    double rel = r.norm() / gnorm;
    res.residual_history.push_back(rel);
    if (!std::isfinite(rel))
      throw NumericalError("PCG diverged at iteration " + std::to_string(it) + " (non-finite residual)");
    z = minv.apply(r);
    double rz_new = r.dot(z);
    res.precond_residual_history.push_back(std::sqrt(std::max(rz_new, 0.0)));
    if (rel <= tol) {
      res.converged = true;
      break;
    }
    double beta = rz_new / rz;
    rz = rz_new;
    p = z + beta * p;
  }
  res.relative_residual = res.residual_history.back();
  return res;
}

PcgResult pcg(const BlockSparseHessian& h, const VectorXd& g, const BlockJacobiPreconditioner& minv,
              double tol, Index max_iter) {
  return pcg([&h](const VectorXd& x, VectorXd& y) { spmv_add(h, x, y); }, g, minv, tol, max_iter);
}

}  // namespace relsim
