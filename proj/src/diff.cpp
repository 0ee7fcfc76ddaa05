#include "relsim/diff.hpp"

#include <algorithm>
#include <sstream>

namespace relsim {

namespace {

bool is_data_like(const Node& n) { return n.op == Op::DataRef || n.op == Op::ScalarConst || n.op == Op::ConstMatrix; }

}  // namespace

Differentiator::Differentiator(Scene& scene, std::span<const Attribute* const> targets)
    : scene_(scene), g_(scene.graph()), targets_(targets.begin(), targets.end()) {}

Differentiator::Differentiator(Scene& scene)
    : Differentiator(scene, std::span<const Attribute* const>(scene.minimize_targets())) {}

// ---------------------------------------------------------------------------
// Boundary analysis

bool Differentiator::kept(NodeId id) {
  auto it = kept_.find(id);
  if (it != kept_.end()) return it->second;
  const Node& n = g_.node(id);
  bool k = false;
  if (n.op == Op::DataRef) {
    k = n.attr->differentiable &&
        std::find(targets_.begin(), targets_.end(), n.attr) != targets_.end();
  } else if (n.op == Op::Join || n.op == Op::Union) {
    kept_[id] = false;  // break recursion defensively; overwritten below
    bool any = false;
    for (NodeId c : n.children) {
      if (kept(c) || !expr_succs(c).empty()) any = true;
    }
    k = any;
  }
  kept_[id] = k;
  return k;
}

// Boundary successors of an interior expression: first-encounter order over
// children, recursing past non-boundary nodes, dropping non-target branches.
const std::vector<NodeId>& Differentiator::succs_below(NodeId id) {
  auto it = succs_.find(id);
  if (it != succs_.end()) return it->second;
  std::vector<NodeId> out;
  const Node& n = g_.node(id);
  for (NodeId c : n.children) {
    const Node& cn = g_.node(c);
    std::vector<NodeId> part;
    if (cn.op == Op::Join || cn.op == Op::Union || cn.op == Op::DataRef) {
      if (kept(c)) part = {c};
    } else if (is_data_like(cn)) {
      // constants: dropped
    } else {
      part = succs_below(c);
    }
    for (NodeId b : part)
      if (std::find(out.begin(), out.end(), b) == out.end()) out.push_back(b);
  }
  return succs_.emplace(id, std::move(out)).first->second;
}

std::vector<NodeId> Differentiator::expr_succs(NodeId id) {
  const Node& n = g_.node(id);
  if (n.op == Op::Join || n.op == Op::Union || n.op == Op::DataRef) {
    if (kept(id)) return {id};
    if (n.op == Op::DataRef) return {};
  }
  if (is_data_like(n)) return {};
  return succs_below(id);
}

BoundaryGraph Differentiator::find_boundary_pairs(NodeId energy_root) {
  BoundaryGraph bg;
  bg.root = energy_root;
  std::vector<NodeId> stack;
  auto discover = [&](NodeId b) {
    if (bg.succ.count(b)) return;
    bg.nodes.push_back(b);
    bg.succ[b] = {};
    stack.push_back(b);
  };
  discover(energy_root);
  size_t head = 0;
  while (head < stack.size()) {
    NodeId v = stack[head++];
    const Node& n = g_.node(v);
    std::vector<NodeId> s;
    if (v == energy_root && !(n.op == Op::Join || n.op == Op::Union || n.op == Op::DataRef)) {
      s = succs_below(v);
    } else if (n.op == Op::Join) {
      s = expr_succs(n.children[0]);
    } else if (n.op == Op::Union) {
      for (NodeId c : n.children)
        for (NodeId b : expr_succs(c))
          if (std::find(s.begin(), s.end(), b) == s.end()) s.push_back(b);
    } else if (n.op == Op::DataRef) {
      // leaf
    } else {
      s = succs_below(v);
    }
    for (NodeId b : s) discover(b);
    bg.succ[v] = std::move(s);
  }
  return bg;
}

std::string Differentiator::dump_boundary(const BoundaryGraph& bg) const {
  std::ostringstream os;
  for (NodeId v : bg.nodes) {
    const Node& n = g_.node(v);
    os << "n" << v << " " << op_name(n.op) << " " << n.shape.str();
    if (n.op == Op::DataRef) os << " '" << n.attr->name << "'";
    os << " ->";
    for (NodeId b : bg.succ.at(v)) os << " n" << b;
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Local differentiation (forward mode over the pair subgraph)

namespace {

struct ExprOps {
  ExprGraph& g;

  bool null(NodeId a) const { return a == kInvalidNode || g.is_zero(a); }

  NodeId add(NodeId a, NodeId b) {
    if (null(a)) return null(b) ? kInvalidNode : b;
    if (null(b)) return a;
    NodeId ch[2] = {a, b};
    return g.apply(Op::Add, ch);
  }
  NodeId sub(NodeId a, NodeId b) {
    if (null(b)) return null(a) ? kInvalidNode : a;
    if (null(a)) return neg(b);
    NodeId ch[2] = {a, b};
    return g.apply(Op::Sub, ch);
  }
  NodeId mul(NodeId a, NodeId b) {
    if (null(a) || null(b)) return kInvalidNode;
    NodeId ch[2] = {a, b};
    return g.apply(Op::Mul, ch);
  }
  NodeId div(NodeId a, NodeId b) {
    if (null(a)) return kInvalidNode;
    NodeId ch[2] = {a, b};
    return g.apply(Op::Div, ch);
  }
  NodeId matmul(NodeId a, NodeId b) {
    if (null(a) || null(b)) return kInvalidNode;
    NodeId ch[2] = {a, b};
    return g.apply(Op::MatMul, ch);
  }
  NodeId neg(NodeId a) {
    if (null(a)) return kInvalidNode;
    return mul(g.scalar_const(-1.0), a);
  }
  NodeId unary(Op op, NodeId a, int i0 = 0, int i1 = 0, int i2 = 0) {
    if (a == kInvalidNode) return kInvalidNode;
    NodeId ch[1] = {a};
    return g.apply(op, ch, i0, i1, i2);
  }
  // Frobenius inner product of equal-shaped operands.
  NodeId inner(NodeId a, NodeId b) {
    if (null(a) || null(b)) return kInvalidNode;
    Shape s = g.node(a).shape;
    if (s.cols == 1 || s.rows == 1) {
      NodeId ch[2] = {a, b};
      return g.apply(Op::Dot, ch);
    }
    return unary(Op::Trace, matmul(unary(Op::Transpose, a), b));
  }
  NodeId entry(NodeId m, int r, int c) {
    return unary(Op::Col, unary(Op::Row, m, r), c);
  }
  NodeId vec_row(NodeId m) {  // p x q -> 1 x (p*q), row-major
    Shape s = g.node(m).shape;
    return unary(Op::Reshape, m, 1, s.size());
  }
  NodeId vec_col(NodeId m) {  // p x q -> (p*q) x 1, row-major
    Shape s = g.node(m).shape;
    return unary(Op::Reshape, m, s.size(), 1);
  }
};

}  // namespace

NodeId Differentiator::tangent(NodeId node, std::span<const NodeId> u, const std::vector<int>& offsets,
                               int j, std::map<std::pair<NodeId, int>, NodeId>& memo) {
  auto key = std::make_pair(node, j);
  auto it = memo.find(key);
  if (it != memo.end()) return it->second;

  ExprOps E{g_};
  const Node& n = g_.node(node);
  NodeId out = kInvalidNode;

  // Boundary tuple members are opaque parameters of the local pair.
  for (size_t i = 0; i < u.size(); ++i) {
    if (u[i] == node) {
      int rc = g_.node(u[i]).shape.size();
      if (j >= offsets[i] && j < offsets[i] + rc) {
        MatrixXd e = MatrixXd::Zero(n.shape.rows, n.shape.cols);
        int local = j - offsets[i];
        e(local / n.shape.cols, local % n.shape.cols) = 1.0;
        out = g_.const_matrix(e);
      }
      memo[key] = out;
      return out;
    }
  }

  auto d = [&](size_t k) { return tangent(n.children[k], u, offsets, j, memo); };
  auto c = [&](size_t k) { return n.children[k]; };

  switch (n.op) {
    case Op::ScalarConst:
    case Op::ConstMatrix:
    case Op::DataRef:
    case Op::Join:   // dropped boundary nodes act as constants
    case Op::Union:
      out = kInvalidNode;
      break;
    case Op::Add:
      out = E.add(d(0), d(1));
      break;
    case Op::Sub:
      out = E.sub(d(0), d(1));
      break;
    case Op::Mul:
      out = E.add(E.mul(d(0), c(1)), E.mul(c(0), d(1)));
      break;
    case Op::Div: {
      // d(a/b) = da/b - a*db/b^2 (scalar or elementwise divisor)
      NodeId t1 = E.div(d(0), c(1));
      NodeId t2 = E.div(E.mul(c(0), d(1)), E.mul(c(1), c(1)));
      out = E.sub(t1, t2);
      break;
    }
    case Op::MatMul:
      out = E.add(E.matmul(d(0), c(1)), E.matmul(c(0), d(1)));
      break;
    case Op::Dot:
      out = E.add(E.inner(d(0), c(1)), E.inner(c(0), d(1)));
      break;
    case Op::Cross: {
      NodeId t1 = d(0) == kInvalidNode ? kInvalidNode : g_.apply(Op::Cross, std::array{d(0), c(1)});
      NodeId t2 = d(1) == kInvalidNode ? kInvalidNode : g_.apply(Op::Cross, std::array{c(0), d(1)});
      out = E.add(t1, t2);
      break;
    }
    case Op::Norm:
      // d||a|| = <a, da> / ||a||; undefined at the zero vector (evaluation raises there).
      out = E.div(E.inner(c(0), d(0)), E.unary(Op::Norm, c(0)));
      break;
    case Op::Det:
      // d det(A) = det(A) tr(A^-1 dA)
      out = E.mul(E.unary(Op::Det, c(0)), E.unary(Op::Trace, E.matmul(E.unary(Op::Inverse, c(0)), d(0))));
      break;
    case Op::Inverse: {
      NodeId inv = E.unary(Op::Inverse, c(0));
      out = E.neg(E.matmul(E.matmul(inv, d(0)), inv));
      break;
    }
    case Op::Transpose:
      out = E.unary(Op::Transpose, d(0));
      break;
    case Op::Trace:
      out = E.unary(Op::Trace, d(0));
      break;
    case Op::Reshape:
      out = E.unary(Op::Reshape, d(0), n.shape.rows, n.shape.cols);
      break;
    case Op::Row:
      out = E.unary(Op::Row, d(0), n.i0);
      break;
    case Op::Col:
      out = E.unary(Op::Col, d(0), n.i0);
      break;
    case Op::IndexRow:
      out = E.unary(Op::IndexRow, d(0), n.i0, n.i1, n.i2);
      break;
    case Op::Stack: {
      std::vector<NodeId> parts(n.children.size());
      bool any = false;
      for (size_t k = 0; k < n.children.size(); ++k) {
        parts[k] = d(k);
        if (parts[k] != kInvalidNode) any = true;
      }
      if (!any) {
        out = kInvalidNode;
        break;
      }
      for (NodeId& p : parts)
        if (p == kInvalidNode) p = g_.scalar_const(0.0);
      out = g_.apply(Op::Stack, parts, n.shape.rows, n.shape.cols);
      break;
    }
    case Op::ConcatCols:
    case Op::StackRows: {
      std::vector<NodeId> parts(n.children.size());
      bool any = false;
      for (size_t k = 0; k < n.children.size(); ++k) {
        parts[k] = d(k);
        if (parts[k] != kInvalidNode) any = true;
      }
      if (!any) {
        out = kInvalidNode;
        break;
      }
      for (size_t k = 0; k < parts.size(); ++k) {
        if (parts[k] == kInvalidNode) {
          Shape cs = g_.node(n.children[k]).shape;
          parts[k] = g_.zero_matrix(cs.rows, cs.cols);
        }
      }
      out = g_.apply(n.op, parts);
      break;
    }
    case Op::PadCols:
      out = E.unary(Op::PadCols, d(0), n.i0);
      break;
    case Op::EmbedBlock:
      out = d(0) == kInvalidNode ? kInvalidNode : g_.embed_block(d(0), n.i0, n.i1, n.i2, n.i3);
      break;
    case Op::BlockDiagExpand:
      out = E.unary(Op::BlockDiagExpand, d(0), n.i0, n.i1);
      break;
    case Op::JoinHessExpand:
      out = E.unary(Op::JoinHessExpand, d(0), n.i0, n.i1);
      break;
    case Op::Log:
      out = E.div(d(0), c(0));
      break;
    case Op::Exp:
      out = E.mul(E.unary(Op::Exp, c(0)), d(0));
      break;
    case Op::Sin:
      out = E.mul(E.unary(Op::Cos, c(0)), d(0));
      break;
    case Op::Cos:
      out = E.neg(E.mul(E.unary(Op::Sin, c(0)), d(0)));
      break;
    case Op::Select: {
      // Differentiates the selected branch only (subgradient at the switch).
      NodeId dt = d(2), de = d(3);
      if (dt == kInvalidNode && de == kInvalidNode) {
        out = kInvalidNode;
        break;
      }
      Shape bs = g_.node(n.children[2]).shape;
      if (dt == kInvalidNode) dt = g_.zero_matrix(bs.rows, bs.cols);
      if (de == kInvalidNode) de = g_.zero_matrix(bs.rows, bs.cols);
      NodeId ch[4] = {n.children[0], n.children[1], dt, de};
      out = g_.apply(Op::Select, ch, 0, 0, 0, n.cmp);
      break;
    }
    default:
      throw NumericalError(std::string("differentiation of operator '") + op_name(n.op) +
                           "' is not supported (node n" + std::to_string(node) + ")");
  }

  memo[key] = out;
  return out;
}

const LocalDerivative& Differentiator::differentiate_pair(NodeId v, std::span<const NodeId> u) {
  std::vector<NodeId> key_u(u.begin(), u.end());
  auto key = std::make_pair(v, key_u);
  auto hit = pair_cache_.find(key);
  if (hit != pair_cache_.end()) return hit->second;

  ExprOps E{g_};
  LocalDerivative ld;
  ld.wrt = key_u;
  ld.p = g_.node(v).shape.size();
  std::vector<int> offsets;
  int q = 0;
  for (NodeId b : u) {
    offsets.push_back(q);
    q += g_.node(b).shape.size();
  }
  ld.q = q;

  std::map<std::pair<NodeId, int>, NodeId> memo;
  std::vector<NodeId> cols(q, kInvalidNode);  // d v / d u_j, shaped like v
  bool any = false;
  for (int j = 0; j < q; ++j) {
    cols[j] = tangent(v, u, offsets, j, memo);
    if (cols[j] != kInvalidNode) any = true;
  }

  if (!any) {
    ld.jacobian = g_.zero_matrix(ld.p, std::max(q, 1));
    ld.hessian = kInvalidNode;
    return pair_cache_.emplace(std::move(key), std::move(ld)).first->second;
  }

  std::vector<NodeId> jcols(q);
  for (int j = 0; j < q; ++j)
    jcols[j] = cols[j] == kInvalidNode ? g_.zero_matrix(ld.p, 1) : E.vec_col(cols[j]);
  ld.jacobian = g_.apply(Op::ConcatCols, jcols);

  // Second pass: mixed partials d^2 v / d u_j d u_l, shared across (j,l)/(l,j).
  std::vector<std::vector<NodeId>> second(q, std::vector<NodeId>(q, kInvalidNode));
  bool any2 = false;
  for (int j = 0; j < q; ++j) {
    if (cols[j] == kInvalidNode) continue;
    for (int l = j; l < q; ++l) {
      NodeId m = tangent(cols[j], u, offsets, l, memo);
      second[j][l] = second[l][j] = m;
      if (m != kInvalidNode) any2 = true;
    }
  }

  if (any2) {
    std::vector<NodeId> rows(ld.p);
    for (int comp = 0; comp < ld.p; ++comp) {
      int cr = comp / g_.node(v).shape.cols;
      int cc = comp % g_.node(v).shape.cols;
      std::vector<NodeId> entries(size_t(q) * q);
      for (int j = 0; j < q; ++j) {
        for (int l = 0; l < q; ++l) {
          NodeId m = second[j][l];
          entries[size_t(j) * q + l] = m == kInvalidNode ? g_.scalar_const(0.0) : E.entry(m, cr, cc);
        }
      }
      NodeId hc = g_.apply(Op::Stack, entries, q, q);
      rows[comp] = E.vec_row(hc);
    }
    ld.hessian = ld.p == 1 ? rows[0] : g_.apply(Op::StackRows, rows);
  }

  return pair_cache_.emplace(std::move(key), std::move(ld)).first->second;
}

// ---------------------------------------------------------------------------
// Linearity detection

bool Differentiator::detect_linearity(NodeId expr) {
  std::function<int(NodeId)> cls = [&](NodeId id) -> int {
    auto it = linearity_.find(id);
    if (it != linearity_.end()) return it->second;
    const Node& n = g_.node(id);
    int out = 0;
    switch (n.op) {
      case Op::DataRef:
        out = (n.attr->differentiable &&
               std::find(targets_.begin(), targets_.end(), n.attr) != targets_.end())
                  ? 1
                  : 0;
        break;
      case Op::ScalarConst:
      case Op::ConstMatrix:
        out = 0;
        break;
      case Op::Add:
      case Op::Sub:
      case Op::Reshape:
      case Op::Row:
      case Op::Col:
      case Op::IndexRow:
      case Op::Stack:
      case Op::Join:
      case Op::Union:
      case Op::ConcatCols:
      case Op::StackRows:
      case Op::PadCols:
      case Op::EmbedBlock:
      case Op::BlockDiagExpand:
      case Op::JoinHessExpand: {
        for (NodeId c : n.children) out = std::max(out, cls(c));
        break;
      }
      case Op::Mul:
      case Op::MatMul: {
        int a = cls(n.children[0]), b = cls(n.children[1]);
        if (a == 0 && b == 0)
          out = 0;
        else if ((a == 0 && b == 1) || (a == 1 && b == 0))
          out = 1;
        else
          out = 2;
        break;
      }
      default: {
        out = 0;
        for (NodeId c : n.children) out = std::max(out, cls(c));
        if (out > 0) out = 2;  // conservative: any other operator breaks linearity
        break;
      }
    }
    linearity_[id] = out;
    return out;
  };
  return cls(expr) <= 1;
}

// ---------------------------------------------------------------------------
// Composition (chain rule over the boundary graph)

LayoutPtr Differentiator::layout_of_expr(NodeId id) {
  const Node& n = g_.node(id);
  if ((n.op == Op::Join || n.op == Op::Union || n.op == Op::DataRef) && kept(id))
    return compute_derivative(id).layout;
  auto seq = std::make_shared<LayoutNode>();
  seq->kind = LayoutNode::Kind::Seq;
  seq->host = n.host;
  int slots = 0, width = 0;
  for (NodeId b : expr_succs(id)) {
    LayoutPtr part = compute_derivative(b).layout;
    slots += part->slots;
    width += part->width;
    seq->parts.push_back(std::move(part));
  }
  seq->slots = slots;
  seq->width = width;
  return seq;
}

const ComposedDerivative& Differentiator::compute_derivative(NodeId id) {
  auto hit = composed_.find(id);
  if (hit != composed_.end()) return hit->second;

  ExprOps E{g_};
  const Node& n = g_.node(id);
  ComposedDerivative out;
  out.p = n.shape.size();

  if (n.op == Op::DataRef && kept(id)) {
    int rc = n.shape.size();
    auto slot = std::make_shared<LayoutNode>();
    slot->kind = LayoutNode::Kind::DataSlot;
    slot->host = n.attr->host;
    slot->target = n.attr;
    slot->slots = 1;
    slot->width = rc;
    out.layout = std::move(slot);
    out.width = rc;
    out.jacobian = g_.identity_matrix(rc);
    out.hessian = kInvalidNode;
  } else if (n.op == Op::Join && kept(id)) {
    const ComposedDerivative& cd = compute_derivative(n.children[0]);
    int k = n.conn->arity;
    auto lay = std::make_shared<LayoutNode>();
    lay->kind = LayoutNode::Kind::JoinRep;
    lay->host = n.conn->from;
    lay->conn = n.conn;
    lay->child = cd.layout;
    lay->slots = k * cd.layout->slots;
    lay->width = k * cd.layout->width;
    out.layout = std::move(lay);
    out.width = k * cd.width;
    // The derivative of a JOIN is the JOIN of the derivatives, reordered into
    // a block-diagonal layout over the gathered instances.
    NodeId jf = g_.join(*n.conn, cd.jacobian);
    out.jacobian = g_.apply(Op::BlockDiagExpand, std::array{jf}, cd.p, cd.width);
    if (cd.hessian != kInvalidNode) {
      NodeId hf = g_.join(*n.conn, cd.hessian);
      out.hessian = g_.apply(Op::JoinHessExpand, std::array{hf}, cd.p, cd.width);
    }
  } else if (n.op == Op::Union && kept(id)) {
    auto lay = std::make_shared<LayoutNode>();
    lay->kind = LayoutNode::Kind::UnionSel;
    lay->host = n.udomain;
    std::vector<const ComposedDerivative*> branches;
    std::vector<bool> active;
    int slots = 0, width = 0;
    for (NodeId c : n.children) {
      bool has = !expr_succs(c).empty() || kept(c);
      active.push_back(has);
      if (has) {
        const ComposedDerivative& cd = compute_derivative(c);
        branches.push_back(&cd);
        lay->parts.push_back(cd.layout);
        slots = std::max(slots, cd.layout->slots);
        width = std::max(width, cd.layout->width);
      } else {
        branches.push_back(nullptr);
        auto empty = std::make_shared<LayoutNode>();
        empty->kind = LayoutNode::Kind::Seq;
        empty->host = n.udomain->children()[lay->parts.size()];
        lay->parts.push_back(std::move(empty));
      }
    }
    lay->slots = slots;
    lay->width = width;
    out.layout = lay;
    out.width = width;

    // Branch derivatives are padded to the widest parameter set and unioned.
    std::vector<NodeId> jparts, hparts;
    bool any_h = false;
    for (const ComposedDerivative* cd : branches)
      if (cd && cd->hessian != kInvalidNode) any_h = true;
    for (size_t bi = 0; bi < branches.size(); ++bi) {
      const ComposedDerivative* cd = branches[bi];
      if (!cd) {
        jparts.push_back(g_.zero_matrix(out.p, width));
        if (any_h) hparts.push_back(g_.zero_matrix(out.p, width * width));
        continue;
      }
      NodeId jp = cd->width == width ? cd->jacobian
                                     : g_.apply(Op::PadCols, std::array{cd->jacobian}, width);
      jparts.push_back(jp);
      if (any_h) {
        if (cd->hessian == kInvalidNode) {
          hparts.push_back(g_.zero_matrix(out.p, width * width));
        } else if (cd->width == width) {
          hparts.push_back(cd->hessian);
        } else {
          std::vector<NodeId> rows(out.p);
          for (int comp = 0; comp < out.p; ++comp) {
            NodeId hc = E.unary(Op::Reshape, E.unary(Op::Row, cd->hessian, comp), cd->width, cd->width);
            NodeId big = g_.embed_block(hc, 0, 0, width, width);
            rows[comp] = E.vec_row(big);
          }
          hparts.push_back(out.p == 1 ? rows[0] : g_.apply(Op::StackRows, rows));
        }
      }
    }
    out.jacobian = g_.make_union(*n.udomain, jparts);
    if (any_h) out.hessian = g_.make_union(*n.udomain, hparts);
  } else {
    // Generic node: compose the local pair with its successors' derivatives.
    std::vector<NodeId> succs = expr_succs(id);
    if (succs.empty()) throw InternalError("compute_derivative on a constant expression");
    const LocalDerivative& local = differentiate_pair(id, succs);

    std::vector<const ComposedDerivative*> parts;
    parts.reserve(succs.size());
    auto lay = std::make_shared<LayoutNode>();
    lay->kind = LayoutNode::Kind::Seq;
    lay->host = n.host;
    int width = 0, slots = 0;
    std::vector<int> col0(succs.size()), row0(succs.size());
    int qrows = 0;
    for (size_t i = 0; i < succs.size(); ++i) {
      const ComposedDerivative& cd = compute_derivative(succs[i]);
      parts.push_back(&cd);
      lay->parts.push_back(cd.layout);
      col0[i] = width;
      row0[i] = qrows;
      width += cd.width;
      slots += cd.layout->slots;
      qrows += g_.node(succs[i]).shape.size();
    }
    lay->slots = slots;
    lay->width = width;
    out.layout = lay;
    out.width = width;

    // J_g: block-diagonal stack of successor Jacobians (q_local x width).
    NodeId jg = kInvalidNode;
    if (succs.size() == 1) {
      jg = parts[0]->jacobian;
    } else {
      for (size_t i = 0; i < succs.size(); ++i) {
        NodeId e = g_.embed_block(parts[i]->jacobian, row0[i], col0[i], local.q, width);
        jg = E.add(jg, e);
      }
    }
    out.jacobian = E.matmul(local.jacobian, jg);
    if (out.jacobian == kInvalidNode) out.jacobian = g_.zero_matrix(out.p, width);

    // H_v[c] = J_g^T H_f[c] J_g + sum_m (J_f)[c,m] * H_g[m]
    bool any_h = local.hessian != kInvalidNode;
    for (const ComposedDerivative* cd : parts)
      if (cd->hessian != kInvalidNode) any_h = true;
    if (any_h) {
      NodeId jgT = E.unary(Op::Transpose, jg);
      std::vector<NodeId> rows(out.p, kInvalidNode);
      for (int comp = 0; comp < out.p; ++comp) {
        NodeId hc = kInvalidNode;
        if (local.hessian != kInvalidNode) {
          NodeId hf = E.unary(Op::Reshape, E.unary(Op::Row, local.hessian, comp), local.q, local.q);
          hc = E.matmul(E.matmul(jgT, hf), jg);
        }
        for (size_t i = 0; i < succs.size(); ++i) {
          if (parts[i]->hessian == kInvalidNode) continue;
          int pi = g_.node(succs[i]).shape.size();
          for (int m = 0; m < pi; ++m) {
            NodeId w = E.entry(local.jacobian, comp, row0[i] + m);
            NodeId hg = E.unary(Op::Reshape, E.unary(Op::Row, parts[i]->hessian, m), parts[i]->width,
                                parts[i]->width);
            NodeId term = E.mul(w, hg);
            if (parts[i]->width != width) term = g_.embed_block(term, col0[i], col0[i], width, width);
            hc = E.add(hc, term);
          }
        }
        rows[comp] = hc == kInvalidNode ? g_.zero_matrix(1, width * width) : E.vec_row(hc);
      }
      bool all_zero = true;
      for (NodeId r : rows)
        if (!g_.is_zero(r)) all_zero = false;
      if (!all_zero) out.hessian = out.p == 1 ? rows[0] : g_.apply(Op::StackRows, rows);
    }
  }

  return composed_.emplace(id, std::move(out)).first->second;
}

// ---------------------------------------------------------------------------
// Bundles

DerivativeBundle Differentiator::compose_hessian(NodeId energy_root) {
  DerivativeBundle bundle;
  bundle.energy_root = energy_root;
  if (!(g_.node(energy_root).shape == Shape(1, 1)))
    throw DeclError("energy root must have shape 1x1");

  Op rop = g_.node(energy_root).op;
  bool has_targets = (rop == Op::DataRef || rop == Op::Join || rop == Op::Union)
                         ? kept(energy_root)
                         : !expr_succs(energy_root).empty();
  if (!has_targets) {
    // Constant energy: zero bundle.
    auto lay = std::make_shared<LayoutNode>();
    lay->kind = LayoutNode::Kind::Seq;
    lay->host = g_.node(energy_root).host;
    bundle.layout = std::move(lay);
    return bundle;
  }

  const ComposedDerivative& cd = compute_derivative(energy_root);
  bundle.layout = cd.layout;
  bundle.width = cd.width;
  bundle.gradient = cd.jacobian;
  ExprOps E{g_};
  bundle.hessian = cd.hessian == kInvalidNode
                       ? g_.zero_matrix(cd.width, cd.width)
                       : E.unary(Op::Reshape, cd.hessian, cd.width, cd.width);
  return bundle;
}

void Differentiator::apply_projection_rewrite(DerivativeBundle& bundle, ProjectionMode mode) {
  bundle.mode = mode;
  if (mode == ProjectionMode::FullProject || bundle.zero()) return;

  NodeId root = bundle.energy_root;
  std::vector<NodeId> succs = expr_succs(root);
  const Node& rn = g_.node(root);
  if (rn.op == Op::Join || rn.op == Op::Union || rn.op == Op::DataRef)
    throw DeclError("reduced projection requires a generic energy root");
  for (NodeId b : succs) {
    if (!detect_linearity(b))
      throw DeclError("reduced projection rejected: inner map through node n" + std::to_string(b) +
                      " (" + std::string(op_name(g_.node(b).op)) + ") is not linear in the targets");
  }

  ExprOps E{g_};
  const LocalDerivative& local = differentiate_pair(root, succs);
  int width = bundle.width;
  NodeId jg = kInvalidNode;
  int r0 = 0, c0 = 0;
  if (succs.size() == 1) {
    jg = compute_derivative(succs[0]).jacobian;
  } else {
    for (NodeId b : succs) {
      const ComposedDerivative& cd = compute_derivative(b);
      NodeId e = g_.embed_block(cd.jacobian, r0, c0, local.q, width);
      jg = E.add(jg, e);
      r0 += g_.node(b).shape.size();
      c0 += cd.width;
    }
  }
  bundle.inner_jacobian = jg;
  bundle.inner_hessian = local.hessian == kInvalidNode
                             ? g_.zero_matrix(local.q, local.q)
                             : E.unary(Op::Reshape, local.hessian, local.q, local.q);
  bundle.q_inner = local.q;
}

DerivativeBundle Differentiator::compile_energy(const EnergyDecl& decl) {
  DerivativeBundle bundle = compose_hessian(decl.root);
  apply_projection_rewrite(bundle, decl.mode);
  return bundle;
}

}  // namespace relsim
