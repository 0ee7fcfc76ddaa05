#include "relsim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace relsim {

namespace {

// Instance index mapping along a lineage chain: ancestors are single-instance
// hosts, so anything above the current domain evaluates at instance 0.
Index map_instance(const Host* domain, Index i, const Host* target) {
  if (target == domain) return i;
  if (target->is_ancestor_of(domain)) return 0;
  throw InternalError("instance mapping from " + domain->path() + " to unrelated host " + target->path());
}

bool is_const(Op op) { return op == Op::ScalarConst || op == Op::ConstMatrix; }

}  // namespace

int Evaluator::ensure_module(NodeId node) {
  auto it = module_of_.find(node);
  if (it != module_of_.end()) return it->second;
  if (std::find(building_.begin(), building_.end(), node) != building_.end())
    throw InternalError("cycle detected in expression graph during plan build");
  building_.push_back(node);
  EvalPlan plan = compile(node);
  building_.pop_back();
  int id = int(modules_.size());
  modules_.push_back(std::move(plan));
  module_of_[node] = id;
  return id;
}

EvalPlan Evaluator::compile(NodeId root) {
  const ExprGraph& g = scene_.graph();
  EvalPlan plan;
  plan.root = root;
  plan.domain = g.node(root).host;
  plan.out_shape = g.node(root).shape;

  std::unordered_map<NodeId, int> reg_of;

  // Post-order emission; repeated subexpressions resolve to the same register.
  std::function<Operand(NodeId)> emit = [&](NodeId id) -> Operand {
    const Node& n = g.node(id);
    if (is_const(n.op)) return Operand{-1, id};
    auto hit = reg_of.find(id);
    if (hit != reg_of.end()) return Operand{hit->second, kInvalidNode};

    Instr ins;
    ins.node = id;

    // Semantically important nodes compile as separate cached modules; the
    // current plan links them with a call instead of traversing descendants.
    bool important = id != root && (n.op == Op::Join || n.op == Op::Union || !n.name.empty());
    if (important) {
      ins.is_call = true;
      ins.module = ensure_module(id);
      ins.out_reg = plan.num_regs++;
      reg_of[id] = ins.out_reg;
      plan.modules.push_back(ins.module);
      plan.instrs.push_back(std::move(ins));
      return Operand{reg_of[id], kInvalidNode};
    }

    switch (n.op) {
      case Op::DataRef:
        break;  // no inputs
      case Op::Join: {
        ins.module = ensure_module(n.children[0]);
        plan.modules.push_back(ins.module);
        break;
      }
      case Op::Union: {
        for (NodeId c : n.children) {
          int m = ensure_module(c);
          ins.branch_modules.push_back(m);
          plan.modules.push_back(m);
        }
        break;
      }
      default:
        for (NodeId c : n.children) ins.ins.push_back(emit(c));
        break;
    }
    ins.out_reg = plan.num_regs++;
    reg_of[id] = ins.out_reg;
    plan.instrs.push_back(std::move(ins));
    return Operand{reg_of[id], kInvalidNode};
  };

  Operand out = emit(root);
  plan.out_reg = out.reg;
  return plan;
}

EvalPlan Evaluator::build_plan(NodeId root) {
  EvalPlan p = compile(root);
  link_and_finalize(p);
  return p;
}

const EvalPlan& Evaluator::plan_for(NodeId root) {
  auto it = plan_cache_.find(root);
  if (it != plan_cache_.end()) return it->second;
  EvalPlan p = build_plan(root);
  return plan_cache_.emplace(root, std::move(p)).first->second;
}

void Evaluator::link_and_finalize(EvalPlan& plan) const {
  const ExprGraph& g = scene_.graph();
  for (const Instr& ins : plan.instrs) {
    if (ins.module >= 0 && ins.module >= int(modules_.size()))
      throw InternalError("unresolved module reference in plan");
    for (int m : ins.branch_modules)
      if (m < 0 || m >= int(modules_.size())) throw InternalError("unresolved union branch module");
    const Node& n = g.node(ins.node);
    if (n.op == Op::DataRef && n.attr->values.empty() && n.attr->expected_len() > 0)
      throw InternalError("unbound data attribute '" + n.attr->name + "'");
  }
  plan.linked = true;
}

namespace {

MatrixXd project_psd_dense(const MatrixXd& m) {
  MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed in Project");
  VectorXd ev = es.eigenvalues();
  for (Index i = 0; i < ev.size(); ++i)
    if (ev[i] < 0.0) ev[i] = 0.0;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

MatrixXd Evaluator::eval_on(const EvalPlan& plan, const Host* domain, Index instance) const {
  return eval_instance(plan, map_instance(domain, instance, plan.domain));
}

MatrixXd Evaluator::eval_instance(const EvalPlan& plan, Index instance) const {
  const ExprGraph& g = scene_.graph();
  std::vector<MatrixXd> regs(plan.num_regs);

  auto in = [&](const Instr& ins, size_t k) -> const MatrixXd& {
    const Operand& o = ins.ins[k];
    if (o.reg >= 0) return regs[o.reg];
    return g.node(o.cnode).cmat;
  };
  auto scalar_in = [&](const Instr& ins, size_t k) -> double {
    const Operand& o = ins.ins[k];
    if (o.reg >= 0) return regs[o.reg](0, 0);
    const Node& c = g.node(o.cnode);
    return c.op == Op::ScalarConst ? c.scalar : c.cmat(0, 0);
  };

  for (const Instr& ins : plan.instrs) {
    const Node& n = g.node(ins.node);
    MatrixXd& out = regs[ins.out_reg];

    if (ins.is_call) {
      const EvalPlan& m = modules_[ins.module];
      out = eval_instance(m, map_instance(plan.domain, instance, m.domain));
      continue;
    }

    switch (n.op) {
      case Op::DataRef: {
        Index i = map_instance(plan.domain, instance, n.attr->host);
        int rc = n.shape.size();
        out = unvec_rm(Eigen::Map<const VectorXd>(n.attr->values.data() + i * rc, rc), n.shape.rows,
                       n.shape.cols);
        break;
      }
      case Op::Join: {
        const Connectivity& c = *n.conn;
        Index count = c.from->instance_count();
        if (Index(c.indices.size()) != count * c.arity)
          throw ValidationError("connectivity '" + c.name + "' has no table for " + std::to_string(count) +
                                " instances");
        const EvalPlan& src = modules_[ins.module];
        out.resize(c.arity, n.shape.cols);
        for (int l = 0; l < c.arity; ++l) {
          Index j = c.at(instance, l);
          MatrixXd v = eval_instance(src, map_instance(c.to, j, src.domain));
          out.row(l) = vec_rm(v).transpose();
        }
        break;
      }
      case Op::Union: {
        auto [branch, local] = n.udomain->decode(instance);
        const EvalPlan& b = modules_[ins.branch_modules[branch]];
        out = eval_instance(b, map_instance(n.udomain->children()[branch], local, b.domain));
        break;
      }
      case Op::Add:
        out = in(ins, 0) + in(ins, 1);
        break;
      case Op::Sub:
        out = in(ins, 0) - in(ins, 1);
        break;
      case Op::Mul: {
        const MatrixXd& a = in(ins, 0);
        const MatrixXd& b = in(ins, 1);
        if (a.size() == 1)
          out = a(0, 0) * b;
        else if (b.size() == 1)
          out = b(0, 0) * a;
        else
          out = a.cwiseProduct(b);
        break;
      }
      case Op::Div: {
        const MatrixXd& a = in(ins, 0);
        const MatrixXd& b = in(ins, 1);
        if (b.size() == 1) {
          if (b(0, 0) == 0.0) throw NumericalError("division by zero");
          out = a / b(0, 0);
        } else {
          if ((b.array() == 0.0).any()) throw NumericalError("division by zero");
          out = a.cwiseQuotient(b);
        }
        break;
      }
      case Op::MatMul:
        out = in(ins, 0) * in(ins, 1);
        break;
      case Op::Dot: {
        out.resize(1, 1);
        out(0, 0) = vec_rm(in(ins, 0)).dot(vec_rm(in(ins, 1)));
        break;
      }
      case Op::Cross: {
        Eigen::Vector3d a = in(ins, 0).col(0), b = in(ins, 1).col(0);
        out = a.cross(b);
        break;
      }
      case Op::Norm:
        out.resize(1, 1);
        out(0, 0) = in(ins, 0).norm();
        break;
      case Op::Det:
        out.resize(1, 1);
        out(0, 0) = in(ins, 0).determinant();
        break;
      case Op::Inverse:
        out = in(ins, 0).inverse();
        break;
      case Op::Transpose:
        out = in(ins, 0).transpose();
        break;
      case Op::Trace:
        out.resize(1, 1);
        out(0, 0) = in(ins, 0).trace();
        break;
      case Op::Reshape:
        out = unvec_rm(vec_rm(in(ins, 0)), n.shape.rows, n.shape.cols);
        break;
      case Op::Row:
        out = in(ins, 0).row(n.i0);
        break;
      case Op::Col:
        out = in(ins, 0).col(n.i0);
        break;
      case Op::IndexRow:
        out = unvec_rm(in(ins, 0).row(n.i0).transpose(), n.shape.rows, n.shape.cols);
        break;
      case Op::Stack: {
        out.resize(n.shape.rows, n.shape.cols);
        for (int r = 0, k = 0; r < n.shape.rows; ++r)
          for (int c = 0; c < n.shape.cols; ++c, ++k) out(r, c) = scalar_in(ins, k);
        break;
      }
      case Op::Log: {
        double v = scalar_in(ins, 0);
        if (v <= 0.0) throw NumericalError("log of non-positive value");
        out.resize(1, 1);
        out(0, 0) = std::log(v);
        break;
      }
      case Op::Exp:
        out.resize(1, 1);
        out(0, 0) = std::exp(scalar_in(ins, 0));
        break;
      case Op::Sin:
        out.resize(1, 1);
        out(0, 0) = std::sin(scalar_in(ins, 0));
        break;
      case Op::Cos:
        out.resize(1, 1);
        out(0, 0) = std::cos(scalar_in(ins, 0));
        break;
      case Op::Select: {
        double a = scalar_in(ins, 0), b = scalar_in(ins, 1);
        bool cond = false;
        switch (n.cmp) {
          case CmpKind::GE: cond = a >= b; break;
          case CmpKind::LE: cond = a <= b; break;
          case CmpKind::GT: cond = a > b; break;
          case CmpKind::LT: cond = a < b; break;
          case CmpKind::EQ: cond = a == b; break;
        }
        out = cond ? in(ins, 2) : in(ins, 3);
        break;
      }
      case Op::Project:
        out = project_psd_dense(in(ins, 0));
        break;
      case Op::ConcatCols: {
        out.resize(n.shape.rows, n.shape.cols);
        for (size_t k = 0; k < ins.ins.size(); ++k) out.col(k) = in(ins, k).col(0);
        break;
      }
      case Op::StackRows: {
        out.resize(n.shape.rows, n.shape.cols);
        for (size_t k = 0; k < ins.ins.size(); ++k) out.row(k) = in(ins, k).row(0);
        break;
      }
      case Op::PadCols: {
        const MatrixXd& a = in(ins, 0);
        out = MatrixXd::Zero(n.shape.rows, n.shape.cols);
        out.leftCols(a.cols()) = a;
        break;
      }
      case Op::EmbedBlock: {
        const MatrixXd& a = in(ins, 0);
        out = MatrixXd::Zero(n.shape.rows, n.shape.cols);
        out.block(n.i0, n.i1, a.rows(), a.cols()) = a;
        break;
      }
      case Op::BlockDiagExpand: {
        const MatrixXd& a = in(ins, 0);  // k x (p*w)
        int k = int(a.rows()), p = n.i0, w = n.i1;
        out = MatrixXd::Zero(Index(k) * p, Index(k) * w);
        for (int l = 0; l < k; ++l)
          out.block(Index(l) * p, Index(l) * w, p, w) = unvec_rm(a.row(l).transpose(), p, w);
        break;
      }
      case Op::JoinHessExpand: {
        // Row l holds p stacked w x w component Hessians of gathered instance l.
        // Component (l, c) of the result embeds block (l, l) in the (k*w)^2 space.
        const MatrixXd& a = in(ins, 0);  // k x (p*w*w)
        int k = int(a.rows()), p = n.i0, w = n.i1;
        int wq = k * w;
        out = MatrixXd::Zero(Index(k) * p, Index(wq) * wq);
        for (int l = 0; l < k; ++l) {
          for (int c = 0; c < p; ++c) {
            MatrixXd hc = unvec_rm(a.row(l).segment(Index(c) * w * w, Index(w) * w).transpose(), w, w);
            MatrixXd big = MatrixXd::Zero(wq, wq);
            big.block(Index(l) * w, Index(l) * w, w, w) = hc;
            out.row(Index(l) * p + c) = vec_rm(big).transpose();
          }
        }
        break;
      }
      default:
        throw InternalError(std::string("eval: unhandled op ") + op_name(n.op));
    }
  }

  if (plan.out_reg >= 0) return regs[plan.out_reg];
  const Node& r = g.node(plan.root);
  if (r.op == Op::ScalarConst) {
    MatrixXd m(1, 1);
    m(0, 0) = r.scalar;
    return m;
  }
  return r.cmat;
}

InstanceTensor Evaluator::evaluate(NodeId root) {
  const EvalPlan& plan = plan_for(root);
  InstanceTensor t;
  t.domain = plan.domain;
  t.shape = plan.out_shape;
  Index count = plan.domain->instance_count();
  int rc = plan.out_shape.size();
  t.data.assign(count * rc, 0.0);
  parallel_for(count, [&](Index b, Index e) {
    for (Index i = b; i < e; ++i) {
      VectorXd v = vec_rm(eval_instance(plan, i));
      std::copy(v.data(), v.data() + rc, t.data.begin() + i * rc);
    }
  });
  return t;
}

InstanceTensor Evaluator::evaluate(const Attr& attr) { return evaluate(attr.node()); }

double Evaluator::total(NodeId root) {
  const EvalPlan& plan = plan_for(root);
  if (!(plan.out_shape == Shape(1, 1))) throw ShapeError("total() needs a per-instance scalar");
  Index count = plan.domain->instance_count();
  double sum = 0.0;
  for (Index i = 0; i < count; ++i) sum += eval_instance(plan, i)(0, 0);
  return sum;
}

std::string Evaluator::dump(const EvalPlan& plan) const {
  const ExprGraph& g = scene_.graph();
  std::ostringstream os;
  os << "plan n" << plan.root << " @" << plan.domain->path() << " out=" << plan.out_shape.str()
     << " regs=" << plan.num_regs << "\n";
  auto operand = [&](const Operand& o) {
    if (o.reg >= 0) return "r" + std::to_string(o.reg);
    const Node& c = g.node(o.cnode);
    if (c.op == Op::ScalarConst) return std::to_string(c.scalar);
    return "cmat" + c.shape.str();
  };
  for (const Instr& ins : plan.instrs) {
    const Node& n = g.node(ins.node);
    os << "  r" << ins.out_reg << " = ";
    if (ins.is_call) {
      os << "call m" << ins.module << " (" << op_name(n.op);
      if (!n.name.empty()) os << " '" << n.name << "'";
      os << ")";
    } else if (n.op == Op::Join) {
      os << "join '" << n.conn->name << "' m" << ins.module;
    } else if (n.op == Op::Union) {
      os << "union @" << n.udomain->path() << " [";
      for (size_t k = 0; k < ins.branch_modules.size(); ++k)
        os << (k ? " " : "") << "m" << ins.branch_modules[k];
      os << "]";
    } else if (n.op == Op::DataRef) {
      os << "data '" << n.attr->name << "' @" << n.attr->host->path();
    } else {
      os << op_name(n.op);
      if (n.op == Op::Row || n.op == Op::Col || n.op == Op::IndexRow) os << "[" << n.i0 << "]";
      for (size_t k = 0; k < ins.ins.size(); ++k) os << (k ? ", " : " ") << operand(ins.ins[k]);
    }
    os << "  ; " << n.shape.str() << "\n";
  }
  return os.str();
}

std::string Evaluator::dump_with_modules(const EvalPlan& plan) const {
  std::string s = dump(plan);
  for (size_t i = 0; i < modules_.size(); ++i) {
    s += "module m" + std::to_string(i) + ": ";
    s += dump(modules_[i]);
  }
  return s;
}

}  // namespace relsim
