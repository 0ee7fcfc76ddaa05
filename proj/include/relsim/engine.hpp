#pragma once

#include "relsim/assembly.hpp"
#include "relsim/diff.hpp"
#include "relsim/eval.hpp"
#include "relsim/index_gen.hpp"
#include "relsim/solver.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace relsim {

struct StepStats {
  Index pcg_iterations = 0;
  double pcg_residual = 0.0;
  bool pcg_converged = false;
  double assemble_seconds = 0.0;
  std::vector<double> residual_history;
};

// Compiles a scene's energies once (derivative bundles, evaluation plans,
// placement tables, global structures) and drives Newton linear solves.
// The static group is built a single time; the dynamic group is rebuilt
// whenever the scene's dynamic epoch moves (resize_dynamic).
class Engine {
 public:
  explicit Engine(Scene& scene);

  Scene& scene() { return scene_; }
  Evaluator& evaluator() { return *evaluator_; }
  Differentiator& differentiator() { return *differ_; }
  const GradientLayout& layout() const { return layout_; }

  std::span<CompiledEnergy> static_group() { return static_group_; }
  std::span<CompiledEnergy> dynamic_group() { return dynamic_group_; }
  const BlockSparseHessian& static_hessian() const { return *h_static_; }
  const BlockSparseHessian& dynamic_hessian() const { return *h_dynamic_; }

  // Rebuilds dynamic placement tables and structure if the scene changed.
  void refresh_dynamic();
  bool dynamic_stale() const { return seen_epoch_ != scene_.dynamic_epoch(); }

  // Assembles H (static + dynamic), g and the preconditioner diagonal.
  // Throws if the dynamic structures are stale. With project=false the local
  // Hessians are scattered unprojected (finite-difference verification mode).
  void assemble(bool project = true, bool with_hessian = true);

  const VectorXd& gradient() const { return gradient_; }
  const DiagAccumulator& diag() const { return diag_; }
  MatrixXd dense_hessian() const;  // symmetric expansion of both groups

  double total_energy();

  void apply_hessian(const VectorXd& x, VectorXd& y) const;

  // Solves H dx = g and returns dx sliced per target in registration order,
  // unnegated. Reuses compiled kernels; rebuilds dynamic structures if stale.
  std::vector<VectorXd> minimize_step(double tol = 1e-6, Index max_iter = -1,
                                      StepStats* stats = nullptr);

  // Gathers/scatters target attribute values as one flat vector.
  VectorXd gather_targets() const;
  void scatter_targets(const VectorXd& x);

 private:
  void compile_group(std::vector<CompiledEnergy>& group, const std::vector<const EnergyDecl*>& decls);
  void build_group_structure(std::vector<CompiledEnergy>& group, std::unique_ptr<BlockSparseHessian>& h);

  Scene& scene_;
  std::unique_ptr<Evaluator> evaluator_;
  std::unique_ptr<Differentiator> differ_;
  GradientLayout layout_;
  std::vector<CompiledEnergy> static_group_, dynamic_group_;
  std::unique_ptr<BlockSparseHessian> h_static_, h_dynamic_;
  VectorXd gradient_;
  DiagAccumulator diag_;
  std::uint64_t seen_epoch_ = 0;
};

}  // namespace relsim
