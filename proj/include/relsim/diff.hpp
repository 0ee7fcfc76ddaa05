#pragma once

#include "relsim/expr.hpp"
#include "relsim/index_gen.hpp"
#include "relsim/scene.hpp"

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace relsim {

// Coarsened derivative-reuse graph: energy root, JOIN, UNION and target data
// nodes, with edges to the boundary descendants reachable without crossing
// another boundary node. Non-target data branches are dropped.
struct BoundaryGraph {
  NodeId root = kInvalidNode;
  std::vector<NodeId> nodes;                  // first-encounter DFS order, root first
  std::map<NodeId, std::vector<NodeId>> succ;  // ordered successor lists
  bool empty() const { return succ.empty() || (succ.count(root) && succ.at(root).empty()); }
};

// Jacobian and stacked component Hessians of one boundary pair (v, u).
// The Hessian is stored as p rows, row c holding the row-major q x q Hessian
// of component c; an invalid id marks an identically zero Hessian.
struct LocalDerivative {
  std::vector<NodeId> wrt;  // ordered boundary tuple u
  int p = 0;
  int q = 0;
  NodeId jacobian = kInvalidNode;  // p x q
  NodeId hessian = kInvalidNode;   // p x q^2, invalid when zero
};

// Derivative of a node's value with respect to the target parameter columns
// described by `layout` (width columns in slot order).
struct ComposedDerivative {
  LayoutPtr layout;
  int p = 0;
  int width = 0;
  NodeId jacobian = kInvalidNode;  // p x width
  NodeId hessian = kInvalidNode;   // p x width^2, invalid when zero
};

// Per-energy symbolic gradient/Hessian plus the projection route chosen for
// assembly. `gradient` is the unnegated 1 x width derivative row.
struct DerivativeBundle {
  NodeId energy_root = kInvalidNode;
  LayoutPtr layout;                 // column structure, also drives index generation
  int width = 0;
  NodeId gradient = kInvalidNode;   // invalid => energy has no reachable targets
  NodeId hessian = kInvalidNode;    // width x width fused local Hessian
  ProjectionMode mode = ProjectionMode::FullProject;
  // Reduced/Separated route: H = inner_jacobian^T Project(inner_hessian) inner_jacobian.
  NodeId inner_jacobian = kInvalidNode;  // q_inner x width
  NodeId inner_hessian = kInvalidNode;   // q_inner x q_inner
  int q_inner = 0;

  bool zero() const { return gradient == kInvalidNode; }
};

// Two-pass symbolic differentiation against a fixed target set: boundary
// decomposition, local matrix-level differentiation, chain-rule composition
// with JOIN/UNION lifting, and the reduced-projection rewrite.
class Differentiator {
 public:
  Differentiator(Scene& scene, std::span<const Attribute* const> targets);
  explicit Differentiator(Scene& scene);  // uses the scene's minimize targets

  BoundaryGraph find_boundary_pairs(NodeId energy_root);
  const LocalDerivative& differentiate_pair(NodeId v, std::span<const NodeId> u);
  const ComposedDerivative& compute_derivative(NodeId node);

  // True iff every path from expr to a target uses only linearity-preserving
  // operators, so the chain-rule curvature term provably vanishes.
  bool detect_linearity(NodeId expr);

  DerivativeBundle compose_hessian(NodeId energy_root);
  // Requests a projection mode; Reduced/Separated require a linear inner map.
  void apply_projection_rewrite(DerivativeBundle& bundle, ProjectionMode mode);
  DerivativeBundle compile_energy(const EnergyDecl& decl);

  std::string dump_boundary(const BoundaryGraph& bg) const;

 private:
  bool kept(NodeId id);
  const std::vector<NodeId>& succs_below(NodeId id);
  std::vector<NodeId> expr_succs(NodeId id);
  LayoutPtr layout_of_expr(NodeId id);

  // Forward-mode derivative of `node` w.r.t. scalar parameter j of the tuple.
  NodeId tangent(NodeId node, std::span<const NodeId> u, const std::vector<int>& offsets, int j,
                 std::map<std::pair<NodeId, int>, NodeId>& memo);

  Scene& scene_;
  ExprGraph& g_;
  std::vector<const Attribute*> targets_;
  std::unordered_map<NodeId, bool> kept_;
  std::unordered_map<NodeId, std::vector<NodeId>> succs_;
  std::unordered_map<NodeId, int> linearity_;  // 0 const, 1 linear, 2 nonlinear
  std::map<std::pair<NodeId, std::vector<NodeId>>, LocalDerivative> pair_cache_;
  std::unordered_map<NodeId, ComposedDerivative> composed_;
};

}  // namespace relsim
