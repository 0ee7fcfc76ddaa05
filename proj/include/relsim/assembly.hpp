#pragma once

#include "relsim/diff.hpp"
#include "relsim/eval.hpp"
#include "relsim/index_gen.hpp"

#include <set>
#include <string>
#include <vector>

namespace relsim {

// Eigenvalue clamp onto the PSD cone. Symmetrizes first; eigenvalues below
// zero are set to exactly zero.
MatrixXd psd_project(const MatrixXd& m);

// Shape-grouped, lexicographically sorted, duplicate-free upper-triangular
// block storage for the global Hessian. Block values are row-major.
class BlockSparseHessian {
 public:
  struct BlockCoord {
    int rows = 0, cols = 0;
    Index row = 0, col = 0;  // global scalar coordinates, row <= col blockwise
    auto operator<=>(const BlockCoord&) const = default;
  };

  struct ShapeGroup {
    int rows = 0, cols = 0;
    Index coord_start = 0;  // into row_coordinate/col_coordinate
    Index count = 0;
    Index value_start = 0;  // into hessian_blocks
  };

  static BlockSparseHessian build(std::vector<BlockCoord> coords, Index total_dofs);

  Index total_dofs() const { return total_dofs_; }
  Index block_count() const { return Index(row_coordinate_.size()); }
  const std::vector<ShapeGroup>& groups() const { return groups_; }
  const std::vector<Index>& row_coordinate() const { return row_coordinate_; }
  const std::vector<Index>& col_coordinate() const { return col_coordinate_; }
  const std::vector<double>& values() const { return values_; }

  // Offset into the value array for a unique block; throws if absent.
  Index value_offset(int rows, int cols, Index row, Index col) const;

  void zero_values();
  double* block_at(Index value_offset) { return values_.data() + value_offset; }
  void add_block(Index value_offset, const Eigen::Ref<const MatrixXd>& b);

  MatrixXd to_dense() const;          // symmetric expansion
  std::string to_coordinate_text() const;  // scalar triplets, upper triangle
  std::uint64_t structure_checksum() const;

 private:
  Index total_dofs_ = 0;
  std::vector<ShapeGroup> groups_;
  std::vector<Index> row_coordinate_, col_coordinate_;
  std::vector<Index> value_offset_;  // per unique block
  std::vector<double> values_;
};

// Per-DoF-block diagonal accumulator feeding the block-Jacobi preconditioner.
struct DiagAccumulator {
  const GradientLayout* layout = nullptr;
  std::vector<Index> starts;       // global start per target-attribute instance
  std::vector<MatrixXd> blocks;    // rc x rc each

  void init(const GradientLayout& layout);
  void reset();
  void add(Index gstart, const Eigen::Ref<const MatrixXd>& b);
};

// A compiled energy: derivative bundle, placement tables and per-instance
// compression/scatter plans against a built global structure.
struct CompiledEnergy {
  const EnergyDecl* decl = nullptr;
  DerivativeBundle bundle;
  int kappa = 0;
  Index instances = 0;
  std::vector<SlotEntry> slots;  // instances x kappa

  // Duplicate global blocks merged, zero (padded) slots dropped.
  struct UBlock {
    Index gstart = 0;
    int len = 0;
    int comp_col = 0;
  };
  struct Dest {
    int ua = 0, ub = 0;        // ublock pair, ordered so gstart(ua) <= gstart(ub)
    Index value_offset = 0;
  };
  struct InstancePlan {
    std::vector<UBlock> ublocks;
    std::vector<int> slot2ub;  // -1 for padded slots
    int m = 0;                 // compressed dimension
    std::vector<Dest> dests;
  };
  std::vector<InstancePlan> plans;
  std::set<int> compressed_sizes;      // distinct m values seen at structure build
  Index hessian_entries_per_instance = 0;  // materialized local storage (diagnostics)

  bool separated() const { return bundle.mode == ProjectionMode::SeparatedJacobian; }
};

// Computes placement tables for one energy (per-instance kappa slots).
void compute_energy_tables(CompiledEnergy& e, const GradientLayout& grad);

// Appendix-style structure build: gathers block coordinates from every
// instance table, sorts lexicographically per shape, removes duplicates.
BlockSparseHessian build_global_structure(std::span<CompiledEnergy> group, const GradientLayout& grad);

// Resolves per-instance scatter plans (compression pattern + value offsets).
void build_instance_plans(CompiledEnergy& e, const BlockSparseHessian& h);

// Merges duplicate rows/columns of an uncompressed local matrix according to
// the instance plan; padded slots vanish. Exact for quadratic forms.
MatrixXd local_compress(const MatrixXd& h_local, const CompiledEnergy& e, Index instance);

// One instance's compressed contribution, ready to scatter. In separated mode
// the m x m product is never formed: only the compressed Jacobian and the
// projected inner Hessian are materialized, and block products are computed
// during the scatter itself.
struct LocalResult {
  Eigen::RowVectorXd gradient;  // 1 x width (uncompressed; slots address it by column)
  MatrixXd h_comp;              // m x m, symmetrized, projected per mode (fused/reduced)
  bool separated = false;
  MatrixXd jc;   // q_inner x m (separated mode)
  MatrixXd hin;  // q_inner x q_inner, projected (separated mode)
};

LocalResult assemble_local(Evaluator& ev, const CompiledEnergy& e, Index instance, bool project);

struct AssembleOutput {
  BlockSparseHessian* hessian = nullptr;  // may be null (gradient-only pass)
  VectorXd* gradient = nullptr;
  DiagAccumulator* diag = nullptr;
};

// Evaluates, compresses, projects and scatter-adds every instance of the
// group. Local evaluation runs instance-parallel; the scatter is applied in
// instance order, so results are deterministic for any thread count.
void assemble_group(Evaluator& ev, std::span<CompiledEnergy> group, const AssembleOutput& out,
                    bool project);

}  // namespace relsim
