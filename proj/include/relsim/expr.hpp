#pragma once

#include "relsim/core.hpp"

#include <deque>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace relsim {

class Host;
class Scene;
class PrimitiveUnion;
struct Attribute;
struct Connectivity;

using NodeId = std::int32_t;
constexpr NodeId kInvalidNode = -1;

enum class Op : std::uint8_t {
  ScalarConst,
  ConstMatrix,
  DataRef,  // data or constant attribute leaf
  Add,
  Sub,
  Mul,  // elementwise on equal shapes, or scalar * matrix when one side is 1x1
  Div,  // elementwise, or matrix / scalar
  MatMul,
  Dot,
  Cross,
  Norm,  // Frobenius
  Det,
  Inverse,
  Transpose,
  Trace,
  Reshape,
  Row,
  Col,
  IndexRow,  // row i of a k x (rc) JOIN result, reshaped to r x c
  Stack,     // scalars -> matrix, row-major order
  Log,
  Exp,
  Sin,
  Cos,
  Select,  // (lhs, rhs, then, else) with a comparison kind
  Join,
  Union,
  Project,  // symmetric eigenvalue clamp to the PSD cone
  // Derivative-plumbing operators, emitted by the differentiator:
  ConcatCols,      // children p x 1 -> p x n
  StackRows,       // children 1 x m -> n x m
  PadCols,         // append zero columns up to a target width
  EmbedBlock,      // place child at (row0, col0) inside a zero (rows x cols) matrix
  BlockDiagExpand, // k x (p*w) -> (k*p) x (k*w), row l becomes diagonal block l
  JoinHessExpand,  // k x (p*w*w) -> (k*p) x (k*w)^2, per-instance Hessian lift
};

enum class CmpKind : std::uint8_t { GE, LE, GT, LT, EQ };

const char* op_name(Op op);

struct Node {
  Op op;
  Shape shape;
  Host* host = nullptr;
  std::vector<NodeId> children;
  // Operator payload (which fields matter depends on op):
  double scalar = 0.0;               // ScalarConst
  MatrixXd cmat;                     // ConstMatrix
  bool zero = false;                 // ConstMatrix that is identically zero
  const Attribute* attr = nullptr;   // DataRef
  const Connectivity* conn = nullptr;        // Join
  const PrimitiveUnion* udomain = nullptr;   // Union
  int i0 = 0, i1 = 0, i2 = 0, i3 = 0;  // indices / reshape target / expand dims
  CmpKind cmp = CmpKind::GE;         // Select
  std::string name;                  // set when registered as a named attribute
};

// Immutable, content-deduplicated DAG of symbolic per-instance expressions.
// Construction requires exclusive access; finished graphs are freely shared.
class ExprGraph {
 public:
  explicit ExprGraph(Scene& scene) : scene_(scene) {}

  const Node& node(NodeId id) const { return nodes_[id]; }
  Node& node_mut(NodeId id) { return nodes_[id]; }
  Index size() const { return Index(nodes_.size()); }
  Scene& scene() { return scene_; }

  NodeId scalar_const(double v);
  NodeId const_matrix(const MatrixXd& m);
  NodeId zero_matrix(int rows, int cols);
  NodeId identity_matrix(int n);
  NodeId data_ref(const Attribute& attr);

  // Generic operator application with shape inference, lineage validation and
  // content-hash deduplication. Payload fields are read per op kind.
  NodeId apply(Op op, std::span<const NodeId> children, int i0 = 0, int i1 = 0, int i2 = 0,
               CmpKind cmp = CmpKind::GE);

  NodeId join(const Connectivity& conn, NodeId source);
  NodeId make_union(const PrimitiveUnion& domain, std::span<const NodeId> children);
  NodeId embed_block(NodeId block, int row0, int col0, int rows, int cols);

  bool is_zero(NodeId id) const;
  bool is_const_scalar(NodeId id) const;

  // GraphViz dump of the subgraph reachable from root (kind, shape, host).
  std::string to_dot(NodeId root) const;

 private:
  NodeId intern(Node n);
  Host* infer_host(Op op, std::span<const NodeId> children) const;
  Shape infer_shape(Op op, std::span<const NodeId> children, int i0, int i1, int i2) const;

  Scene& scene_;
  std::deque<Node> nodes_;  // deque keeps node references stable while the graph grows
  std::unordered_map<std::uint64_t, std::vector<NodeId>> dedup_;
};

// Lightweight handle used to build expressions fluently. Mirrors the frontend
// attribute API: any computation over handles yields a new symbolic attribute.
class Attr {
 public:
  Attr() = default;
  Attr(Scene* scene, NodeId node) : scene_(scene), node_(node) {}

  bool valid() const { return scene_ != nullptr && node_ != kInvalidNode; }
  NodeId node() const { return node_; }
  Scene& scene() const { return *scene_; }
  Shape shape() const;
  Host* host() const;

  // Data access (data/constant attributes only).
  void update_value(std::span<const double> values) const;
  void update_value(const MatrixXd& single_instance) const;

  Attr dot(Attr rhs) const;
  Attr cross(Attr rhs) const;
  Attr norm() const;
  Attr det() const;
  Attr inverse() const;
  Attr transpose() const;
  Attr trace() const;
  Attr reshape(int rows, int cols) const;
  Attr row(int i) const;
  Attr col(int j) const;
  Attr index(int i) const;
  Attr log() const;
  Attr exp() const;
  Attr sin() const;
  Attr cos() const;
  Attr matmul(Attr rhs) const;

  friend Attr operator+(Attr a, Attr b);
  friend Attr operator-(Attr a, Attr b);
  friend Attr operator*(Attr a, Attr b);  // elementwise or scalar
  friend Attr operator/(Attr a, Attr b);
  friend Attr operator-(Attr a);

  friend Attr operator*(double s, Attr a);
  friend Attr operator*(Attr a, double s);
  friend Attr operator+(Attr a, double s);
  friend Attr operator-(Attr a, double s);
  friend Attr operator/(Attr a, double s);
  friend Attr operator/(double s, Attr a);

 private:
  Attr wrap(NodeId id) const { return Attr(scene_, id); }
  Scene* scene_ = nullptr;
  NodeId node_ = kInvalidNode;
};

Attr scalar(Scene& scene, double v);
Attr constant_matrix(Scene& scene, const MatrixXd& m);
Attr stack(Scene& scene, int rows, int cols, std::span<const Attr> entries);
Attr select(Attr lhs, CmpKind cmp, Attr rhs, Attr then_branch, Attr else_branch);

// Stacked per-instance evaluation result: instance i occupies the row-major
// slice [i*rc, (i+1)*rc).
struct InstanceTensor {
  const Host* domain = nullptr;
  Shape shape;
  std::vector<double> data;

  Index count() const { return shape.size() == 0 ? 0 : Index(data.size()) / shape.size(); }
  MatrixXd instance(Index i) const;
};

}  // namespace relsim
