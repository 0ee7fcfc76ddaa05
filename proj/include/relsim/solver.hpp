#pragma once

#include "relsim/assembly.hpp"

#include <functional>
#include <vector>

namespace relsim {

// y = H_full * x where H_full is the symmetric expansion of the stored upper
// triangle. Inner block products dispatch to fixed-size kernels per shape
// group; parallel shards reduce partial outputs in deterministic order.
void spmv_add(const BlockSparseHessian& h, const VectorXd& x, VectorXd& y);
VectorXd spmv(const BlockSparseHessian& h, const VectorXd& x);

// Per-DoF-block inverted diagonal, aligned with the gradient layout.
class BlockJacobiPreconditioner {
 public:
  static BlockJacobiPreconditioner build(const DiagAccumulator& diag);
  static BlockJacobiPreconditioner identity(const GradientLayout& layout);

  VectorXd apply(const VectorXd& r) const;  // M^-1 r
  Index total_dofs() const { return total_; }
  const std::vector<Index>& regularized_blocks() const { return regularized_; }

 private:
  std::vector<Index> starts_;
  std::vector<MatrixXd> inv_blocks_;
  std::vector<Index> regularized_;  // diagnostics: blocks that needed the epsilon shift
  Index total_ = 0;
};

struct PcgResult {
  VectorXd x;
  Index iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
  std::vector<double> residual_history;         // ||r|| / ||g|| per iteration
  std::vector<double> precond_residual_history;  // sqrt(r^T M^-1 r) per iteration
};

using LinearOperator = std::function<void(const VectorXd&, VectorXd&)>;  // y = H x

PcgResult pcg(const LinearOperator& apply_h, const VectorXd& g, const BlockJacobiPreconditioner& minv,
              double tol, Index max_iter);

PcgResult pcg(const BlockSparseHessian& h, const VectorXd& g, const BlockJacobiPreconditioner& minv,
              double tol, Index max_iter);

}  // namespace relsim
