#pragma once

#include "relsim/expr.hpp"
#include "relsim/scene.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace relsim {

// One SSA-like instruction at matrix granularity. Scalar and matrix constants
// are inlined as operands rather than materialized into registers.
struct Operand {
  int reg = -1;
  NodeId cnode = kInvalidNode;  // inline constant when reg < 0
};

struct Instr {
  NodeId node = kInvalidNode;  // payload (op kind, indices, bindings) lives on the graph node
  int out_reg = -1;
  bool is_call = false;  // module call into a separately compiled plan
  std::vector<Operand> ins;
  int module = -1;                  // call target, or the gather source of a Join
  std::vector<int> branch_modules;  // Union branches
};

// A compiled evaluation plan for one expression root over one domain.
// Each register is written exactly once per instance execution.
struct EvalPlan {
  NodeId root = kInvalidNode;
  const Host* domain = nullptr;
  Shape out_shape;
  int num_regs = 0;
  int out_reg = -1;  // -1 when the root itself is an inline constant
  std::vector<Instr> instrs;
  std::vector<int> modules;  // ids of directly referenced modules
  bool linked = false;
};

// Compiles expression DAGs into modular, CSE'd plans and executes them
// per instance without materializing intermediates. JOIN, UNION and named
// attributes compile once into cached modules that plans link against.
class Evaluator {
 public:
  explicit Evaluator(Scene& scene) : scene_(scene) {}

  // Builds (or returns the cached) plan for a root expression and links it.
  const EvalPlan& plan_for(NodeId root);

  // Builds a plan without consulting or filling the whole-plan cache.
  EvalPlan build_plan(NodeId root);

  // Resolves module references and data bindings; validates static storage.
  void link_and_finalize(EvalPlan& plan) const;

  // Evaluates one instance of the plan's domain.
  MatrixXd eval_instance(const EvalPlan& plan, Index instance) const;

  // Evaluates at an instance of `domain`, mapping up the lineage chain when
  // the plan's expression lives on an ancestor (single-instance) host.
  MatrixXd eval_on(const EvalPlan& plan, const Host* domain, Index instance) const;

  // Evaluates all instances, stacked row-major. Parallel over instance ranges.
  InstanceTensor evaluate(NodeId root);
  InstanceTensor evaluate(const Attr& attr);

  double total(NodeId root);  // sum over instances of a per-instance scalar

  const EvalPlan& module(int id) const { return modules_[id]; }
  Index module_count() const { return Index(modules_.size()); }

  std::string dump(const EvalPlan& plan) const;
  std::string dump_with_modules(const EvalPlan& plan) const;

 private:
  int ensure_module(NodeId node);
  EvalPlan compile(NodeId root);

  Scene& scene_;
  std::vector<EvalPlan> modules_;
  std::unordered_map<NodeId, int> module_of_;
  std::unordered_map<NodeId, EvalPlan> plan_cache_;
  std::vector<NodeId> building_;  // cycle guard
};

}  // namespace relsim
