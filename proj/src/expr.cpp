#include "relsim/expr.hpp"

#include "relsim/scene.hpp"

#include <functional>
#include <sstream>

namespace relsim {

const char* op_name(Op op) {
  switch (op) {
    case Op::ScalarConst: return "const";
    case Op::ConstMatrix: return "cmat";
    case Op::DataRef: return "data";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::MatMul: return "matmul";
    case Op::Dot: return "dot";
    case Op::Cross: return "cross";
    case Op::Norm: return "norm";
    case Op::Det: return "det";
    case Op::Inverse: return "inv";
    case Op::Transpose: return "transpose";
    case Op::Trace: return "trace";
    case Op::Reshape: return "reshape";
    case Op::Row: return "row";
    case Op::Col: return "col";
    case Op::IndexRow: return "index";
    case Op::Stack: return "stack";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Select: return "select";
    case Op::Join: return "join";
    case Op::Union: return "union";
    case Op::Project: return "project";
    case Op::ConcatCols: return "concat_cols";
    case Op::StackRows: return "stack_rows";
    case Op::PadCols: return "pad_cols";
    case Op::EmbedBlock: return "embed";
    case Op::BlockDiagExpand: return "block_diag";
    case Op::JoinHessExpand: return "join_hess";
  }
  return "?";
}

namespace {

void hash_mix(std::uint64_t& h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
}

std::uint64_t node_hash(const Node& n) {
  std::uint64_t h = std::uint64_t(n.op) * 1099511628211ull;
  hash_mix(h, std::uint64_t(n.shape.rows) << 32 | std::uint32_t(n.shape.cols));
  for (NodeId c : n.children) hash_mix(h, std::uint64_t(c));
  hash_mix(h, std::hash<double>{}(n.scalar));
  hash_mix(h, std::uint64_t(reinterpret_cast<std::uintptr_t>(n.attr)));
  hash_mix(h, std::uint64_t(reinterpret_cast<std::uintptr_t>(n.conn)));
  hash_mix(h, std::uint64_t(reinterpret_cast<std::uintptr_t>(n.udomain)));
  hash_mix(h, std::uint64_t(n.i0) << 40 ^ std::uint64_t(n.i1) << 20 ^ std::uint64_t(n.i2) << 8 ^
                  std::uint64_t(n.i3));
  hash_mix(h, std::uint64_t(n.cmp));
  for (Index i = 0; i < n.cmat.size(); ++i) hash_mix(h, std::hash<double>{}(n.cmat.data()[i]));
  return h;
}

bool node_equal(const Node& a, const Node& b) {
  if (a.op != b.op || !(a.shape == b.shape) || a.children != b.children) return false;
  if (a.scalar != b.scalar || a.attr != b.attr || a.conn != b.conn || a.udomain != b.udomain) return false;
  if (a.i0 != b.i0 || a.i1 != b.i1 || a.i2 != b.i2 || a.i3 != b.i3 || a.cmp != b.cmp) return false;
  if (a.cmat.rows() != b.cmat.rows() || a.cmat.cols() != b.cmat.cols()) return false;
  if (a.cmat.size() && a.cmat != b.cmat) return false;
  return true;
}

}  // namespace

NodeId ExprGraph::intern(Node n) {
  std::uint64_t h = node_hash(n);
  auto& bucket = dedup_[h];
  for (NodeId id : bucket) {
    if (node_equal(nodes_[id], n)) return id;
  }
  NodeId id = NodeId(nodes_.size());
  nodes_.push_back(std::move(n));
  bucket.push_back(id);
  return id;
}

NodeId ExprGraph::scalar_const(double v) {
  Node n;
  n.op = Op::ScalarConst;
  n.shape = Shape(1, 1);
  n.host = &scene_;
  n.scalar = v;
  n.cmat = MatrixXd::Constant(1, 1, v);  // materialized once; evaluation reads it in place
  n.zero = v == 0.0;
  return intern(std::move(n));
}

NodeId ExprGraph::const_matrix(const MatrixXd& m) {
  Node n;
  n.op = Op::ConstMatrix;
  n.shape = Shape(int(m.rows()), int(m.cols()));
  n.host = &scene_;
  n.cmat = m;
  n.zero = m.isZero(0.0);
  return intern(std::move(n));
}

NodeId ExprGraph::zero_matrix(int rows, int cols) { return const_matrix(MatrixXd::Zero(rows, cols)); }

NodeId ExprGraph::identity_matrix(int n) { return const_matrix(MatrixXd::Identity(n, n)); }

NodeId ExprGraph::data_ref(const Attribute& attr) {
  Node n;
  n.op = Op::DataRef;
  n.shape = attr.shape;
  n.host = attr.host;
  n.attr = &attr;
  return intern(std::move(n));
}

Host* ExprGraph::infer_host(Op op, std::span<const NodeId> children) const {
  (void)op;
  std::vector<Host*> hosts;
  hosts.reserve(children.size());
  for (NodeId c : children) hosts.push_back(nodes_[c].host);
  return deepest_common_host(hosts);
}

Shape ExprGraph::infer_shape(Op op, std::span<const NodeId> ch, int i0, int i1, int i2) const {
  auto sh = [&](size_t k) { return nodes_[ch[k]].shape; };
  auto fail = [&](const std::string& msg) -> Shape {
    std::string shapes;
    for (size_t k = 0; k < ch.size(); ++k) shapes += (k ? ", " : "") + sh(k).str();
    throw ShapeError(std::string(op_name(op)) + ": " + msg + " (operands " + shapes + ")");
  };
  switch (op) {
    case Op::Add:
    case Op::Sub:
      if (!(sh(0) == sh(1))) return fail("shape mismatch");
      return sh(0);
    case Op::Mul:
      if (sh(0).is_scalar()) return sh(1);
      if (sh(1).is_scalar()) return sh(0);
      if (!(sh(0) == sh(1))) return fail("elementwise product needs equal shapes or a scalar");
      return sh(0);
    case Op::Div:
      if (sh(1).is_scalar()) return sh(0);
      if (!(sh(0) == sh(1))) return fail("division needs a scalar or equal-shape divisor");
      return sh(0);
    case Op::MatMul:
      if (sh(0).cols != sh(1).rows) return fail("inner dimensions differ");
      return Shape(sh(0).rows, sh(1).cols);
    case Op::Dot:
      if (!(sh(0) == sh(1)) || !(sh(0).cols == 1 || sh(0).rows == 1)) return fail("needs equal vectors");
      return Shape(1, 1);
    case Op::Cross:
      if (!(sh(0) == Shape(3, 1)) || !(sh(1) == Shape(3, 1))) return fail("needs 3x1 vectors");
      return Shape(3, 1);
    case Op::Norm:
      return Shape(1, 1);
    case Op::Det:
    case Op::Trace:
      if (sh(0).rows != sh(0).cols) return fail("needs a square matrix");
      return Shape(1, 1);
    case Op::Inverse:
      if (sh(0).rows != sh(0).cols) return fail("needs a square matrix");
      return sh(0);
    case Op::Project:
      if (sh(0).rows != sh(0).cols) return fail("needs a square matrix");
      return sh(0);
    case Op::Transpose:
      return Shape(sh(0).cols, sh(0).rows);
    case Op::Reshape:
      if (sh(0).size() != i0 * i1) return fail("flattened size differs from " + Shape(i0, i1).str());
      return Shape(i0, i1);
    case Op::Row:
      if (i0 < 0 || i0 >= sh(0).rows) return fail("row index out of range");
      return Shape(1, sh(0).cols);
    case Op::Col:
      if (i0 < 0 || i0 >= sh(0).cols) return fail("column index out of range");
      return Shape(sh(0).rows, 1);
    case Op::IndexRow:
      if (i0 < 0 || i0 >= sh(0).rows) return fail("row index out of range");
      if (i1 * i2 != sh(0).cols) return fail("index target shape " + Shape(i1, i2).str() + " mismatch");
      return Shape(i1, i2);
    case Op::Stack:
      if (Index(ch.size()) != Index(i0) * i1) return fail("entry count mismatch");
      for (size_t k = 0; k < ch.size(); ++k)
        if (!sh(k).is_scalar()) return fail("stack entries must be scalars");
      return Shape(i0, i1);
    case Op::Log:
    case Op::Exp:
    case Op::Sin:
    case Op::Cos:
      if (!sh(0).is_scalar()) return fail("needs a scalar");
      return Shape(1, 1);
    case Op::Select:
      if (!sh(0).is_scalar() || !sh(1).is_scalar()) return fail("condition operands must be scalars");
      if (!(sh(2) == sh(3))) return fail("branch shapes differ");
      return sh(2);
    case Op::ConcatCols: {
      int r = sh(0).rows;
      for (size_t k = 0; k < ch.size(); ++k)
        if (sh(k).cols != 1 || sh(k).rows != r) return fail("needs equal-height column vectors");
      return Shape(r, int(ch.size()));
    }
    case Op::StackRows: {
      int c = sh(0).cols;
      for (size_t k = 0; k < ch.size(); ++k)
        if (sh(k).rows != 1 || sh(k).cols != c) return fail("needs equal-width row vectors");
      return Shape(int(ch.size()), c);
    }
    case Op::PadCols:
      if (i0 < sh(0).cols) return fail("pad target narrower than input");
      return Shape(sh(0).rows, i0);
    case Op::BlockDiagExpand: {
      int k = sh(0).rows;
      if (sh(0).cols != i0 * i1) return fail("block size mismatch");
      return Shape(k * i0, k * i1);
    }
    case Op::JoinHessExpand: {
      int k = sh(0).rows;
      if (sh(0).cols != i0 * i1 * i1) return fail("hessian block size mismatch");
      return Shape(k * i0, (k * i1) * (k * i1));
    }
    default:
      throw InternalError(std::string("infer_shape: unhandled op ") + op_name(op));
  }
}

NodeId ExprGraph::apply(Op op, std::span<const NodeId> children, int i0, int i1, int i2, CmpKind cmp) {
  Node n;
  n.op = op;
  n.children.assign(children.begin(), children.end());
  n.i0 = i0;
  n.i1 = i1;
  n.i2 = i2;
  n.cmp = cmp;
  if (op == Op::EmbedBlock) throw InternalError("EmbedBlock must be built via embed_block()");
  n.shape = infer_shape(op, children, i0, i1, i2);
  n.host = infer_host(op, children);
  return intern(std::move(n));
}

NodeId ExprGraph::embed_block(NodeId block, int row0, int col0, int rows, int cols) {
  const Node& b = nodes_[block];
  if (row0 < 0 || col0 < 0 || row0 + b.shape.rows > rows || col0 + b.shape.cols > cols)
    throw ShapeError("embed_block: placement out of range");
  Node n;
  n.op = Op::EmbedBlock;
  n.children = {block};
  n.i0 = row0;
  n.i1 = col0;
  n.i2 = rows;
  n.i3 = cols;
  n.shape = Shape(rows, cols);
  n.host = b.host;
  return intern(std::move(n));
}

NodeId ExprGraph::join(const Connectivity& conn, NodeId source) {
  const Node& src = nodes_[source];
  if (!(src.host == conn.to || src.host->is_ancestor_of(conn.to)))
    throw LineageError("JOIN through '" + conn.name + "': source lives on " + src.host->path() +
                       ", expected " + conn.to->path() + " or an ancestor");
  Node n;
  n.op = Op::Join;
  n.children = {source};
  n.conn = &conn;
  n.shape = Shape(conn.arity, src.shape.size());
  n.host = conn.from;
  return intern(std::move(n));
}

NodeId ExprGraph::make_union(const PrimitiveUnion& domain, std::span<const NodeId> children) {
  if (children.size() != domain.children().size())
    throw DeclError("UNION on " + domain.path() + ": expected one attribute per child domain");
  Shape s = nodes_[children[0]].shape;
  for (size_t j = 0; j < children.size(); ++j) {
    const Node& c = nodes_[children[j]];
    if (!(c.shape == s))
      throw ShapeError("UNION on " + domain.path() + ": child shapes differ (" + s.str() + " vs " +
                       c.shape.str() + ")");
    Host* expected = domain.children()[j];
    if (!(c.host == expected || c.host->is_ancestor_of(expected)))
      throw LineageError("UNION on " + domain.path() + ": child " + std::to_string(j) + " lives on " +
                         c.host->path() + ", expected " + expected->path());
  }
  Node n;
  n.op = Op::Union;
  n.children.assign(children.begin(), children.end());
  n.udomain = &domain;
  n.shape = s;
  n.host = const_cast<PrimitiveUnion*>(&domain);
  return intern(std::move(n));
}

bool ExprGraph::is_zero(NodeId id) const {
  const Node& n = nodes_[id];
  return (n.op == Op::ScalarConst || n.op == Op::ConstMatrix) && n.zero;
}

bool ExprGraph::is_const_scalar(NodeId id) const { return nodes_[id].op == Op::ScalarConst; }

std::string ExprGraph::to_dot(NodeId root) const {
  std::ostringstream os;
  os << "digraph expr {\n  node [shape=box];\n";
  std::vector<bool> seen(nodes_.size(), false);
  std::function<void(NodeId)> walk = [&](NodeId id) {
    if (seen[id]) return;
    seen[id] = true;
    const Node& n = nodes_[id];
    os << "  n" << id << " [label=\"" << op_name(n.op);
    if (!n.name.empty()) os << " '" << n.name << "'";
    if (n.op == Op::DataRef) os << " '" << n.attr->name << "'";
    if (n.op == Op::ScalarConst) os << " " << n.scalar;
    os << "\\n" << n.shape.str() << " @ " << (n.host ? n.host->path() : "?") << "\"];\n";
    for (NodeId c : n.children) {
      walk(c);
      os << "  n" << id << " -> n" << c << ";\n";
    }
  };
  walk(root);
  os << "}\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Attr

Shape Attr::shape() const { return scene_->graph().node(node_).shape; }

Host* Attr::host() const { return scene_->graph().node(node_).host; }

void Attr::update_value(std::span<const double> values) const {
  const Node& n = scene_->graph().node(node_);
  if (n.op != Op::DataRef) throw DeclError("update_value on a computed expression");
  const_cast<Attribute*>(n.attr)->update_value(values);
}

void Attr::update_value(const MatrixXd& m) const {
  VectorXd v = vec_rm(m);
  update_value(std::span<const double>(v.data(), size_t(v.size())));
}

namespace {
NodeId apply1(Scene* s, Op op, NodeId a, int i0 = 0, int i1 = 0, int i2 = 0) {
  NodeId ch[1] = {a};
  return s->graph().apply(op, ch, i0, i1, i2);
}
NodeId apply2(Scene* s, Op op, NodeId a, NodeId b) {
  NodeId ch[2] = {a, b};
  return s->graph().apply(op, ch);
}
}  // namespace

Attr Attr::dot(Attr rhs) const { return wrap(apply2(scene_, Op::Dot, node_, rhs.node_)); }
Attr Attr::cross(Attr rhs) const { return wrap(apply2(scene_, Op::Cross, node_, rhs.node_)); }
Attr Attr::norm() const { return wrap(apply1(scene_, Op::Norm, node_)); }
Attr Attr::det() const { return wrap(apply1(scene_, Op::Det, node_)); }
Attr Attr::inverse() const { return wrap(apply1(scene_, Op::Inverse, node_)); }
Attr Attr::transpose() const { return wrap(apply1(scene_, Op::Transpose, node_)); }
Attr Attr::trace() const { return wrap(apply1(scene_, Op::Trace, node_)); }
Attr Attr::reshape(int rows, int cols) const { return wrap(apply1(scene_, Op::Reshape, node_, rows, cols)); }
Attr Attr::row(int i) const { return wrap(apply1(scene_, Op::Row, node_, i)); }
Attr Attr::col(int j) const { return wrap(apply1(scene_, Op::Col, node_, j)); }

Attr Attr::index(int i) const {
  const Node& n = scene_->graph().node(node_);
  int r, c;
  if (n.op == Op::Join) {
    Shape src = scene_->graph().node(n.children[0]).shape;
    r = src.rows;
    c = src.cols;
  } else {
    r = n.shape.cols;
    c = 1;
  }
  return wrap(apply1(scene_, Op::IndexRow, node_, i, r, c));
}

Attr Attr::log() const { return wrap(apply1(scene_, Op::Log, node_)); }
Attr Attr::exp() const { return wrap(apply1(scene_, Op::Exp, node_)); }
Attr Attr::sin() const { return wrap(apply1(scene_, Op::Sin, node_)); }
Attr Attr::cos() const { return wrap(apply1(scene_, Op::Cos, node_)); }
Attr Attr::matmul(Attr rhs) const { return wrap(apply2(scene_, Op::MatMul, node_, rhs.node_)); }

Attr operator+(Attr a, Attr b) { return a.wrap(apply2(a.scene_, Op::Add, a.node_, b.node_)); }
Attr operator-(Attr a, Attr b) { return a.wrap(apply2(a.scene_, Op::Sub, a.node_, b.node_)); }
Attr operator*(Attr a, Attr b) {
  Shape sa = a.shape(), sb = b.shape();
  // Scalar and equal-shape operands multiply elementwise; unequal shapes with
  // matching inner dimensions contract. Equal square shapes stay elementwise,
  // so use matmul() explicitly for square matrix products.
  if (!sa.is_scalar() && !sb.is_scalar() && sa.cols == sb.rows && !(sa == sb))
    return a.wrap(apply2(a.scene_, Op::MatMul, a.node_, b.node_));
  return a.wrap(apply2(a.scene_, Op::Mul, a.node_, b.node_));
}
Attr operator/(Attr a, Attr b) { return a.wrap(apply2(a.scene_, Op::Div, a.node_, b.node_)); }
Attr operator-(Attr a) { return scalar(a.scene(), -1.0) * a; }

Attr operator*(double s, Attr a) { return scalar(a.scene(), s) * a; }
Attr operator*(Attr a, double s) { return scalar(a.scene(), s) * a; }
Attr operator+(Attr a, double s) { return a + scalar(a.scene(), s); }
Attr operator-(Attr a, double s) { return a - scalar(a.scene(), s); }
Attr operator/(Attr a, double s) { return a / scalar(a.scene(), s); }
Attr operator/(double s, Attr a) { return scalar(a.scene(), s) / a; }

Attr scalar(Scene& scene, double v) { return Attr(&scene, scene.graph().scalar_const(v)); }

Attr constant_matrix(Scene& scene, const MatrixXd& m) { return Attr(&scene, scene.graph().const_matrix(m)); }

Attr stack(Scene& scene, int rows, int cols, std::span<const Attr> entries) {
  std::vector<NodeId> ch;
  ch.reserve(entries.size());
  for (const Attr& e : entries) ch.push_back(e.node());
  return Attr(&scene, scene.graph().apply(Op::Stack, ch, rows, cols));
}

Attr select(Attr lhs, CmpKind cmp, Attr rhs, Attr then_branch, Attr else_branch) {
  NodeId ch[4] = {lhs.node(), rhs.node(), then_branch.node(), else_branch.node()};
  return Attr(&lhs.scene(), lhs.scene().graph().apply(Op::Select, ch, 0, 0, 0, cmp));
}

MatrixXd InstanceTensor::instance(Index i) const {
  return unvec_rm(Eigen::Map<const VectorXd>(data.data() + i * shape.size(), shape.size()), shape.rows,
                  shape.cols);
}

}  // namespace relsim
