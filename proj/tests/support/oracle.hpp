#pragma once

// Test-only oracles, deliberately independent of the engine's evaluation and
// assembly paths: a naive recursive tree-walk evaluator, a dense scatter
// assembler, and central finite differences.

#include "relsim/engine.hpp"
#include "relsim/expr.hpp"
#include "relsim/scene.hpp"

#include <cmath>
#include <random>

namespace relsim::test {

inline Index oracle_map_instance(const Host* domain, Index i, const Host* target) {
  if (target == domain) return i;
  return 0;  // ancestors are single-instance
}

// Naive recursive evaluation of one instance, straight off the node tree.
inline MatrixXd oracle_eval(const ExprGraph& g, NodeId id, Index instance) {
  const Node& n = g.node(id);
  auto child = [&](size_t k, Index inst) { return oracle_eval(g, n.children[k], inst); };
  auto self = [&](size_t k) {
    const Node& c = g.node(n.children[k]);
    return child(k, oracle_map_instance(n.host, instance, c.host));
  };
  switch (n.op) {
    case Op::ScalarConst: return MatrixXd::Constant(1, 1, n.scalar);
    case Op::ConstMatrix: return n.cmat;
    case Op::DataRef: {
      Index i = oracle_map_instance(n.host, instance, n.attr->host);
      int rc = n.shape.size();
      return unvec_rm(Eigen::Map<const VectorXd>(n.attr->values.data() + i * rc, rc), n.shape.rows,
                      n.shape.cols);
    }
    case Op::Join: {
      const Connectivity& c = *n.conn;
      const Node& src = g.node(n.children[0]);
      MatrixXd out(c.arity, n.shape.cols);
      for (int l = 0; l < c.arity; ++l) {
        Index j = c.at(instance, l);
        MatrixXd v = oracle_eval(g, n.children[0], oracle_map_instance(c.to, j, src.host));
        out.row(l) = vec_rm(v).transpose();
      }
      return out;
    }
    case Op::Union: {
      auto [b, local] = n.udomain->decode(instance);
      const Node& c = g.node(n.children[b]);
      return oracle_eval(g, n.children[b],
                         oracle_map_instance(n.udomain->children()[b], local, c.host));
    }
    case Op::Add: return self(0) + self(1);
    case Op::Sub: return self(0) - self(1);
    case Op::Mul: {
      MatrixXd a = self(0), b = self(1);
      if (a.size() == 1) return a(0, 0) * b;
      if (b.size() == 1) return b(0, 0) * a;
      return a.cwiseProduct(b);
    }
    case Op::Div: {
      MatrixXd a = self(0), b = self(1);
      if (b.size() == 1) return a / b(0, 0);
      return a.cwiseQuotient(b);
    }
    case Op::MatMul: return self(0) * self(1);
    case Op::Dot: return MatrixXd::Constant(1, 1, vec_rm(self(0)).dot(vec_rm(self(1))));
    case Op::Cross: {
      Eigen::Vector3d a = self(0).col(0), b = self(1).col(0);
      return MatrixXd(a.cross(b));
    }
    case Op::Norm: return MatrixXd::Constant(1, 1, self(0).norm());
    case Op::Det: return MatrixXd::Constant(1, 1, self(0).determinant());
    case Op::Inverse: return self(0).inverse();
    case Op::Transpose: return self(0).transpose();
    case Op::Trace: return MatrixXd::Constant(1, 1, self(0).trace());
    case Op::Reshape: return unvec_rm(vec_rm(self(0)), n.shape.rows, n.shape.cols);
    case Op::Row: return self(0).row(n.i0);
    case Op::Col: return self(0).col(n.i0);
    case Op::IndexRow: return unvec_rm(self(0).row(n.i0).transpose(), n.shape.rows, n.shape.cols);
    case Op::Stack: {
      MatrixXd out(n.shape.rows, n.shape.cols);
      for (int r = 0, k = 0; r < n.shape.rows; ++r)
        for (int c = 0; c < n.shape.cols; ++c, ++k) out(r, c) = self(k)(0, 0);
      return out;
    }
    case Op::Log: return MatrixXd::Constant(1, 1, std::log(self(0)(0, 0)));
    case Op::Exp: return MatrixXd::Constant(1, 1, std::exp(self(0)(0, 0)));
    case Op::Sin: return MatrixXd::Constant(1, 1, std::sin(self(0)(0, 0)));
    case Op::Cos: return MatrixXd::Constant(1, 1, std::cos(self(0)(0, 0)));
    case Op::Select: {
      double a = self(0)(0, 0), b = self(1)(0, 0);
      bool cond = false;
      switch (n.cmp) {
        case CmpKind::GE: cond = a >= b; break;
        case CmpKind::LE: cond = a <= b; break;
        case CmpKind::GT: cond = a > b; break;
        case CmpKind::LT: cond = a < b; break;
        case CmpKind::EQ: cond = a == b; break;
      }
      return cond ? self(2) : self(3);
    }
    case Op::Project: {
      MatrixXd m = self(0);
      MatrixXd sym = 0.5 * (m + m.transpose());
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
      VectorXd ev = es.eigenvalues().cwiseMax(0.0);
      return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    }
    case Op::ConcatCols: {
      MatrixXd out(n.shape.rows, n.shape.cols);
      for (size_t k = 0; k < n.children.size(); ++k) out.col(k) = self(k).col(0);
      return out;
    }
    case Op::StackRows: {
      MatrixXd out(n.shape.rows, n.shape.cols);
      for (size_t k = 0; k < n.children.size(); ++k) out.row(k) = self(k).row(0);
      return out;
    }
    case Op::PadCols: {
      MatrixXd a = self(0);
      MatrixXd out = MatrixXd::Zero(n.shape.rows, n.shape.cols);
      out.leftCols(a.cols()) = a;
      return out;
    }
    case Op::EmbedBlock: {
      MatrixXd a = self(0);
      MatrixXd out = MatrixXd::Zero(n.shape.rows, n.shape.cols);
      out.block(n.i0, n.i1, a.rows(), a.cols()) = a;
      return out;
    }
    case Op::BlockDiagExpand: {
      MatrixXd a = self(0);
      int k = int(a.rows()), p = n.i0, w = n.i1;
      MatrixXd out = MatrixXd::Zero(Index(k) * p, Index(k) * w);
      for (int l = 0; l < k; ++l)
        out.block(Index(l) * p, Index(l) * w, p, w) = unvec_rm(a.row(l).transpose(), p, w);
      return out;
    }
    case Op::JoinHessExpand: {
      MatrixXd a = self(0);
      int k = int(a.rows()), p = n.i0, w = n.i1;
      int wq = k * w;
      MatrixXd out = MatrixXd::Zero(Index(k) * p, Index(wq) * wq);
      for (int l = 0; l < k; ++l) {
        for (int c = 0; c < p; ++c) {
          MatrixXd hc = unvec_rm(a.row(l).segment(Index(c) * w * w, Index(w) * w).transpose(), w, w);
          MatrixXd big = MatrixXd::Zero(wq, wq);
          big.block(Index(l) * w, Index(l) * w, w, w) = hc;
          out.row(Index(l) * p + c) = vec_rm(big).transpose();
        }
      }
      return out;
    }
  }
  throw InternalError("oracle_eval: unhandled op");
}

// Dense brute-force scatter of the already-compressed local contributions:
// an independent placement path against the block-sparse store. Mirrors the
// static + dynamic split and applies the same per-instance adds in the same
// order, so deterministic mode is bitwise.
inline MatrixXd dense_scatter(Engine& eng, bool project) {
  const GradientLayout& layout = eng.layout();
  MatrixXd dense_static = MatrixXd::Zero(layout.total_dofs, layout.total_dofs);
  MatrixXd* dense_ptr = &dense_static;
  auto run = [&](std::span<CompiledEnergy> group) {
    MatrixXd& dense = *dense_ptr;
    for (CompiledEnergy& e : group) {
      if (e.bundle.zero()) continue;
      for (Index i = 0; i < e.instances; ++i) {
        LocalResult lr = assemble_local(eng.evaluator(), e, i, project);
        const auto& plan = e.plans[i];
        auto block = [&](int a, int b) -> MatrixXd {
          const auto& ua = plan.ublocks[a];
          const auto& ub = plan.ublocks[b];
          if (!lr.separated) return lr.h_comp.block(ua.comp_col, ub.comp_col, ua.len, ub.len);
          return lr.jc.middleCols(ua.comp_col, ua.len).transpose() * lr.hin *
                 lr.jc.middleCols(ub.comp_col, ub.len);
        };
        for (size_t a = 0; a < plan.ublocks.size(); ++a) {
          for (size_t b = a; b < plan.ublocks.size(); ++b) {
            int lo = plan.ublocks[a].gstart <= plan.ublocks[b].gstart ? int(a) : int(b);
            int hi = lo == int(a) ? int(b) : int(a);
            const auto& ul = plan.ublocks[lo];
            const auto& uh = plan.ublocks[hi];
            MatrixXd v = block(lo, hi);
            dense.block(ul.gstart, uh.gstart, ul.len, uh.len) += v;
            if (lo != hi && ul.gstart != uh.gstart)
              dense.block(uh.gstart, ul.gstart, uh.len, ul.len) += v.transpose();
          }
        }
      }
    }
  };
  run(eng.static_group());
  MatrixXd dense_dynamic = MatrixXd::Zero(layout.total_dofs, layout.total_dofs);
  dense_ptr = &dense_dynamic;
  run(eng.dynamic_group());
  return dense_static + dense_dynamic;
}

// Central finite differences of the total energy and of the assembled
// gradient, over the target DoF vector.
inline VectorXd fd_gradient(Engine& eng, double h) {
  VectorXd x0 = eng.gather_targets();
  VectorXd g(x0.size());
  for (Index j = 0; j < x0.size(); ++j) {
    VectorXd xp = x0, xm = x0;
    xp[j] += h;
    xm[j] -= h;
    eng.scatter_targets(xp);
    double ep = eng.total_energy();
    eng.scatter_targets(xm);
    double em = eng.total_energy();
    g[j] = (ep - em) / (2 * h);
  }
  eng.scatter_targets(x0);
  return g;
}

inline MatrixXd fd_hessian(Engine& eng, double h) {
  VectorXd x0 = eng.gather_targets();
  MatrixXd H(x0.size(), x0.size());
  for (Index j = 0; j < x0.size(); ++j) {
    VectorXd xp = x0, xm = x0;
    xp[j] += h;
    xm[j] -= h;
    eng.scatter_targets(xp);
    eng.assemble(/*project=*/false);
    VectorXd gp = eng.gradient();
    eng.scatter_targets(xm);
    eng.assemble(/*project=*/false);
    VectorXd gm = eng.gradient();
    H.col(j) = (gp - gm) / (2 * h);
  }
  eng.scatter_targets(x0);
  eng.assemble(/*project=*/false);
  return H;
}

inline double rel_err(const MatrixXd& a, const MatrixXd& b) {
  double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-8);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline double urand(std::mt19937_64& r, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(r);
}

}  // namespace relsim::test
