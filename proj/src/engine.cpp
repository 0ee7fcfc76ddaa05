#include "relsim/engine.hpp"

#include <chrono>

namespace relsim {

Engine::Engine(Scene& scene) : scene_(scene) {
  evaluator_ = std::make_unique<Evaluator>(scene);
  differ_ = std::make_unique<Differentiator>(scene);
  layout_ = build_gradient_layout(scene.minimize_targets());
  gradient_ = VectorXd::Zero(layout_.total_dofs);
  diag_.init(layout_);

  auto [stat, dyn] = partition_static_dynamic(scene);
  compile_group(static_group_, stat);
  compile_group(dynamic_group_, dyn);
  build_group_structure(static_group_, h_static_);
  build_group_structure(dynamic_group_, h_dynamic_);
  seen_epoch_ = scene.dynamic_epoch();
}

void Engine::compile_group(std::vector<CompiledEnergy>& group,
                           const std::vector<const EnergyDecl*>& decls) {
  group.clear();
  group.reserve(decls.size());
  for (const EnergyDecl* d : decls) {
    CompiledEnergy e;
    e.decl = d;
    e.bundle = differ_->compile_energy(*d);
    group.push_back(std::move(e));
  }
}

void Engine::build_group_structure(std::vector<CompiledEnergy>& group,
                                   std::unique_ptr<BlockSparseHessian>& h) {
  for (CompiledEnergy& e : group) compute_energy_tables(e, layout_);
  h = std::make_unique<BlockSparseHessian>(build_global_structure(group, layout_));
  for (CompiledEnergy& e : group) build_instance_plans(e, *h);
}

void Engine::refresh_dynamic() {
  if (!dynamic_stale()) return;
  build_group_structure(dynamic_group_, h_dynamic_);
  seen_epoch_ = scene_.dynamic_epoch();
}

void Engine::assemble(bool project, bool with_hessian) {
  if (dynamic_stale())
    throw ValidationError("dynamic structures are stale after resize_dynamic; call refresh_dynamic()");
  gradient_.setZero();
  diag_.reset();
  h_static_->zero_values();
  h_dynamic_->zero_values();
  AssembleOutput out_static{with_hessian ? h_static_.get() : nullptr, &gradient_,
                            with_hessian ? &diag_ : nullptr};
  AssembleOutput out_dynamic{with_hessian ? h_dynamic_.get() : nullptr, &gradient_,
                             with_hessian ? &diag_ : nullptr};
  assemble_group(*evaluator_, static_group_, out_static, project);
  assemble_group(*evaluator_, dynamic_group_, out_dynamic, project);
}

MatrixXd Engine::dense_hessian() const { return h_static_->to_dense() + h_dynamic_->to_dense(); }

double Engine::total_energy() {
  double sum = 0.0;
  for (const EnergyDecl& e : scene_.energies()) sum += evaluator_->total(e.root);
  return sum;
}

void Engine::apply_hessian(const VectorXd& x, VectorXd& y) const {
  spmv_add(*h_static_, x, y);
  spmv_add(*h_dynamic_, x, y);
}

std::vector<VectorXd> Engine::minimize_step(double tol, Index max_iter, StepStats* stats) {
  auto t0 = std::chrono::steady_clock::now();
  refresh_dynamic();
  assemble(/*project=*/true, /*with_hessian=*/true);
  if (stats)
    stats->assemble_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  BlockJacobiPreconditioner minv = BlockJacobiPreconditioner::build(diag_);
  if (max_iter < 0) max_iter = std::max<Index>(2 * layout_.total_dofs, 64);
  PcgResult res = pcg([this](const VectorXd& x, VectorXd& y) { apply_hessian(x, y); }, gradient_, minv,
                      tol, max_iter);
  if (stats) {
    stats->pcg_iterations = res.iterations;
    stats->pcg_residual = res.relative_residual;
    stats->pcg_converged = res.converged;
    stats->residual_history = res.residual_history;
  }

  std::vector<VectorXd> per_target;
  per_target.reserve(layout_.targets.size());
  for (size_t t = 0; t < layout_.targets.size(); ++t) {
    Index b = layout_.boundaries[t], e = layout_.boundaries[t + 1];
    per_target.push_back(res.x.segment(b, e - b));
  }
  return per_target;
}

VectorXd Engine::gather_targets() const {
  VectorXd x(layout_.total_dofs);
  for (size_t t = 0; t < layout_.targets.size(); ++t) {
    const Attribute* a = layout_.targets[t];
    Index b = layout_.boundaries[t];
    std::copy(a->values.begin(), a->values.end(), x.data() + b);
  }
  return x;
}

void Engine::scatter_targets(const VectorXd& x) {
  if (x.size() != layout_.total_dofs) throw ValidationError("scatter_targets: length mismatch");
  for (size_t t = 0; t < layout_.targets.size(); ++t) {
    Attribute* a = const_cast<Attribute*>(layout_.targets[t]);
    Index b = layout_.boundaries[t];
    std::copy(x.data() + b, x.data() + b + Index(a->values.size()), a->values.begin());
  }
}

}  // namespace relsim
