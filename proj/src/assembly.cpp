#include "relsim/assembly.hpp"

#include <algorithm>
#include <sstream>

namespace relsim {

MatrixXd psd_project(const MatrixXd& m) {
  if (m.rows() != m.cols()) throw ShapeError("psd_project needs a square matrix");
  MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition did not converge");
  VectorXd ev = es.eigenvalues();
  for (Index i = 0; i < ev.size(); ++i)
    if (ev[i] < 0.0) ev[i] = 0.0;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// ---------------------------------------------------------------------------
// BlockSparseHessian

BlockSparseHessian BlockSparseHessian::build(std::vector<BlockCoord> coords, Index total_dofs) {
  for (const BlockCoord& c : coords) {
    if (c.row < 0 || c.col < 0 || c.row + c.rows > total_dofs || c.col + c.cols > total_dofs)
      throw ValidationError("block coordinate outside the global system");
    if (c.row > c.col) throw InternalError("block coordinate not upper-triangular");
  }
  // Group by shape (small to large), then sort lexicographically and dedup.
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());

  BlockSparseHessian h;
  h.total_dofs_ = total_dofs;
  Index value_acc = 0;
  for (size_t i = 0; i < coords.size();) {
    size_t j = i;
    ShapeGroup grp;
    grp.rows = coords[i].rows;
    grp.cols = coords[i].cols;
    grp.coord_start = Index(i);
    grp.value_start = value_acc;
    while (j < coords.size() && coords[j].rows == grp.rows && coords[j].cols == grp.cols) ++j;
    grp.count = Index(j - i);
    value_acc += grp.count * grp.rows * grp.cols;
    h.groups_.push_back(grp);
    i = j;
  }
  h.row_coordinate_.reserve(coords.size());
  h.col_coordinate_.reserve(coords.size());
  h.value_offset_.reserve(coords.size());
  for (const ShapeGroup& grp : h.groups_) {
    for (Index k = 0; k < grp.count; ++k) {
      const BlockCoord& c = coords[grp.coord_start + k];
      h.row_coordinate_.push_back(c.row);
      h.col_coordinate_.push_back(c.col);
      h.value_offset_.push_back(grp.value_start + k * grp.rows * grp.cols);
    }
  }
  h.values_.assign(value_acc, 0.0);
  return h;
}

Index BlockSparseHessian::value_offset(int rows, int cols, Index row, Index col) const {
  for (const ShapeGroup& grp : groups_) {
    if (grp.rows != rows || grp.cols != cols) continue;
    // Blocks are sorted by (row, col) within the group.
    Index lo = grp.coord_start, hi = grp.coord_start + grp.count;
    while (lo < hi) {
      Index mid = (lo + hi) / 2;
      if (row_coordinate_[mid] < row || (row_coordinate_[mid] == row && col_coordinate_[mid] < col))
        lo = mid + 1;
      else
        hi = mid;
    }
    if (lo < grp.coord_start + grp.count && row_coordinate_[lo] == row && col_coordinate_[lo] == col)
      return value_offset_[lo];
    break;
  }
  throw InternalError("block (" + std::to_string(row) + "," + std::to_string(col) + ") of shape " +
                      Shape(rows, cols).str() + " not present in the global structure");
}

void BlockSparseHessian::zero_values() { std::fill(values_.begin(), values_.end(), 0.0); }

void BlockSparseHessian::add_block(Index off, const Eigen::Ref<const MatrixXd>& b) {
  double* p = values_.data() + off;
  for (Index r = 0; r < b.rows(); ++r)
    for (Index c = 0; c < b.cols(); ++c) p[r * b.cols() + c] += b(r, c);
}

MatrixXd BlockSparseHessian::to_dense() const {
  MatrixXd d = MatrixXd::Zero(total_dofs_, total_dofs_);
  Index bi = 0;
  for (const ShapeGroup& grp : groups_) {
    for (Index k = 0; k < grp.count; ++k, ++bi) {
      Index r = row_coordinate_[bi], c = col_coordinate_[bi];
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> b(
          values_.data() + value_offset_[bi], grp.rows, grp.cols);
      d.block(r, c, grp.rows, grp.cols) += b;
      if (r != c) d.block(c, r, grp.cols, grp.rows) += b.transpose();
    }
  }
  return d;
}

std::string BlockSparseHessian::to_coordinate_text() const {
  std::ostringstream os;
  os.precision(17);
  Index nnz = 0;
  for (const ShapeGroup& grp : groups_) {
    for (Index k = 0; k < grp.count; ++k) {
      Index bi = grp.coord_start + k;
      nnz += (row_coordinate_[bi] == col_coordinate_[bi]) ? grp.rows * (grp.rows + 1) / 2
                                                          : Index(grp.rows) * grp.cols;
    }
  }
  os << "%%MatrixMarket matrix coordinate real general\n";
  os << "% upper triangle of a symmetric matrix\n";
  os << total_dofs_ << " " << total_dofs_ << " " << nnz << "\n";
  Index bi = 0;
  for (const ShapeGroup& grp : groups_) {
    for (Index k = 0; k < grp.count; ++k, ++bi) {
      Index r0 = row_coordinate_[bi], c0 = col_coordinate_[bi];
      const double* p = values_.data() + value_offset_[bi];
      for (int a = 0; a < grp.rows; ++a) {
        for (int b = 0; b < grp.cols; ++b) {
          if (r0 == c0 && a > b) continue;
          os << (r0 + a + 1) << " " << (c0 + b + 1) << " " << p[a * grp.cols + b] << "\n";
        }
      }
    }
  }
  return os.str();
}

std::uint64_t BlockSparseHessian::structure_checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  mix(std::uint64_t(total_dofs_));
  for (const ShapeGroup& g : groups_) {
    mix(g.rows);
    mix(g.cols);
    mix(std::uint64_t(g.count));
  }
  for (size_t i = 0; i < row_coordinate_.size(); ++i) {
    mix(std::uint64_t(row_coordinate_[i]));
    mix(std::uint64_t(col_coordinate_[i]));
  }
  return h;
}

// ---------------------------------------------------------------------------
// DiagAccumulator

void DiagAccumulator::init(const GradientLayout& l) {
  layout = &l;
  starts.clear();
  blocks.clear();
  for (size_t t = 0; t < l.targets.size(); ++t) {
    int rc = l.targets[t]->shape.size();
    Index n = l.targets[t]->host->instance_count();
    for (Index i = 0; i < n; ++i) {
      starts.push_back(l.boundaries[t] + i * rc);
      blocks.push_back(MatrixXd::Zero(rc, rc));
    }
  }
}

void DiagAccumulator::reset() {
  for (MatrixXd& b : blocks) b.setZero();
}

void DiagAccumulator::add(Index gstart, const Eigen::Ref<const MatrixXd>& b) {
  auto it = std::lower_bound(starts.begin(), starts.end(), gstart);
  if (it == starts.end() || *it != gstart) throw InternalError("diagonal block start not aligned");
  blocks[it - starts.begin()] += b;
}

// ---------------------------------------------------------------------------
// Tables and plans

void compute_energy_tables(CompiledEnergy& e, const GradientLayout& grad) {
  e.kappa = e.bundle.zero() ? 0 : e.bundle.layout->slots;
  e.instances = e.decl->host->instance_count();
  e.slots = e.kappa == 0 ? std::vector<SlotEntry>{}
                         : compute_index_table(*e.bundle.layout, grad, e.instances);
  if (e.separated()) {
    Index q = e.bundle.q_inner;
    e.hessian_entries_per_instance = q * q + q * Index(e.bundle.width);
  } else {
    e.hessian_entries_per_instance = Index(e.bundle.width) * e.bundle.width;
  }
}

namespace {

// Merges duplicate placement targets of one instance into ublocks.
CompiledEnergy::InstancePlan make_pattern(const CompiledEnergy& e, Index instance) {
  CompiledEnergy::InstancePlan plan;
  plan.slot2ub.assign(e.kappa, -1);
  for (int s = 0; s < e.kappa; ++s) {
    const SlotEntry& se = e.slots[instance * e.kappa + s];
    if (se.index == 0) continue;
    Index gstart = se.index - 1;
    int found = -1;
    for (size_t u = 0; u < plan.ublocks.size(); ++u)
      if (plan.ublocks[u].gstart == gstart) found = int(u);
    if (found < 0) {
      found = int(plan.ublocks.size());
      plan.ublocks.push_back({gstart, se.len, plan.m});
      plan.m += se.len;
    }
    plan.slot2ub[s] = found;
  }
  return plan;
}

}  // namespace

BlockSparseHessian build_global_structure(std::span<CompiledEnergy> group, const GradientLayout& grad) {
  std::vector<BlockSparseHessian::BlockCoord> coords;
  for (CompiledEnergy& e : group) {
    e.plans.clear();
    e.compressed_sizes.clear();
    if (e.bundle.zero()) continue;
    e.plans.reserve(e.instances);
    for (Index i = 0; i < e.instances; ++i) {
      CompiledEnergy::InstancePlan plan = make_pattern(e, i);
      if (plan.m > 0) e.compressed_sizes.insert(plan.m);
      for (size_t a = 0; a < plan.ublocks.size(); ++a) {
        for (size_t b = a; b < plan.ublocks.size(); ++b) {
          const auto& ua = plan.ublocks[a];
          const auto& ub = plan.ublocks[b];
          const auto& lo = ua.gstart <= ub.gstart ? ua : ub;
          const auto& hi = ua.gstart <= ub.gstart ? ub : ua;
          coords.push_back({lo.len, hi.len, lo.gstart, hi.gstart});
        }
      }
      e.plans.push_back(std::move(plan));
    }
  }
  return BlockSparseHessian::build(std::move(coords), grad.total_dofs);
}

void build_instance_plans(CompiledEnergy& e, const BlockSparseHessian& h) {
  for (CompiledEnergy::InstancePlan& plan : e.plans) {
    plan.dests.clear();
    for (size_t a = 0; a < plan.ublocks.size(); ++a) {
      for (size_t b = a; b < plan.ublocks.size(); ++b) {
        CompiledEnergy::Dest d;
        bool swap = plan.ublocks[a].gstart > plan.ublocks[b].gstart;
        d.ua = swap ? int(b) : int(a);
        d.ub = swap ? int(a) : int(b);
        const auto& lo = plan.ublocks[d.ua];
        const auto& hi = plan.ublocks[d.ub];
        d.value_offset = h.value_offset(lo.len, hi.len, lo.gstart, hi.gstart);
        plan.dests.push_back(d);
      }
    }
  }
}

MatrixXd local_compress(const MatrixXd& h_local, const CompiledEnergy& e, Index instance) {
  const CompiledEnergy::InstancePlan& plan = e.plans[instance];
  MatrixXd out = MatrixXd::Zero(plan.m, plan.m);
  for (int s = 0; s < e.kappa; ++s) {
    int us = plan.slot2ub[s];
    if (us < 0) continue;
    const SlotEntry& ses = e.slots[instance * e.kappa + s];
    for (int t = 0; t < e.kappa; ++t) {
      int ut = plan.slot2ub[t];
      if (ut < 0) continue;
      const SlotEntry& set = e.slots[instance * e.kappa + t];
      out.block(plan.ublocks[us].comp_col, plan.ublocks[ut].comp_col, ses.len, set.len) +=
          h_local.block(ses.col, set.col, ses.len, set.len);
    }
  }
  return out;
}

LocalResult assemble_local(Evaluator& ev, const CompiledEnergy& e, Index instance, bool project) {
  const CompiledEnergy::InstancePlan& plan = e.plans[instance];
  const Host* host = e.decl->host;
  LocalResult r;
  const EvalPlan& gplan = ev.plan_for(e.bundle.gradient);
  r.gradient = ev.eval_on(gplan, host, instance).row(0);

  if (e.bundle.mode == ProjectionMode::FullProject) {
    MatrixXd h = ev.eval_on(ev.plan_for(e.bundle.hessian), host, instance);
    r.h_comp = local_compress(h, e, instance);
    r.h_comp = 0.5 * (r.h_comp + r.h_comp.transpose().eval());
    if (project && r.h_comp.size() > 0) r.h_comp = psd_project(r.h_comp);
    return r;
  }

  // Reduced / separated route: H = J^T Project(H_inner) J with J compressed
  // columnwise; the full width x width product is never materialized.
  MatrixXd j = ev.eval_on(ev.plan_for(e.bundle.inner_jacobian), host, instance);
  MatrixXd hin = ev.eval_on(ev.plan_for(e.bundle.inner_hessian), host, instance);
  hin = 0.5 * (hin + hin.transpose().eval());
  if (project && hin.size() > 0) hin = psd_project(hin);

  MatrixXd jc = MatrixXd::Zero(j.rows(), plan.m);
  for (int s = 0; s < e.kappa; ++s) {
    int us = plan.slot2ub[s];
    if (us < 0) continue;
    const SlotEntry& se = e.slots[instance * e.kappa + s];
    jc.middleCols(plan.ublocks[us].comp_col, se.len) += j.middleCols(se.col, se.len);
  }
  if (e.separated()) {
    r.separated = true;
    r.jc = std::move(jc);
    r.hin = std::move(hin);
  } else {
    r.h_comp = jc.transpose() * hin * jc;
  }
  return r;
}

void assemble_group(Evaluator& ev, std::span<CompiledEnergy> group, const AssembleOutput& out,
                    bool project) {
  for (CompiledEnergy& e : group) {
    if (e.bundle.zero() || e.instances == 0) continue;
    if (e.plans.size() != size_t(e.instances))
      throw ValidationError("energy '" + e.decl->name +
                            "': instance plans are stale; rebuild the dynamic structures");

    std::vector<LocalResult> locals(e.instances);
    bool need_h = out.hessian != nullptr || out.diag != nullptr;
    if (need_h) {
      parallel_for(e.instances, [&](Index b, Index en) {
        for (Index i = b; i < en; ++i) locals[i] = assemble_local(ev, e, i, project);
      });
    } else {
      const EvalPlan& gplan = ev.plan_for(e.bundle.gradient);
      parallel_for(e.instances, [&](Index b, Index en) {
        for (Index i = b; i < en; ++i)
          locals[i].gradient = ev.eval_on(gplan, e.decl->host, i).row(0);
      });
    }

    // Scatter in instance order: deterministic for any worker count.
    for (Index i = 0; i < e.instances; ++i) {
      const CompiledEnergy::InstancePlan& plan = e.plans[i];
      const LocalResult& lr = locals[i];
      if (out.gradient) {
        for (int s = 0; s < e.kappa; ++s) {
          const SlotEntry& se = e.slots[i * e.kappa + s];
          if (se.index == 0) continue;
          out.gradient->segment(se.index - 1, se.len) +=
              lr.gradient.segment(se.col, se.len).transpose();
        }
      }
      auto comp_block = [&](int a, int b) -> MatrixXd {
        const auto& ua = plan.ublocks[a];
        const auto& ub = plan.ublocks[b];
        if (!lr.separated) return lr.h_comp.block(ua.comp_col, ub.comp_col, ua.len, ub.len);
        return lr.jc.middleCols(ua.comp_col, ua.len).transpose() * lr.hin *
               lr.jc.middleCols(ub.comp_col, ub.len);
      };
      if (out.hessian) {
        for (const CompiledEnergy::Dest& d : plan.dests)
          out.hessian->add_block(d.value_offset, comp_block(d.ua, d.ub));
      }
      if (out.diag) {
        for (size_t u = 0; u < plan.ublocks.size(); ++u)
          out.diag->add(plan.ublocks[u].gstart, comp_block(int(u), int(u)));
      }
    }
  }
}

}  // namespace relsim
