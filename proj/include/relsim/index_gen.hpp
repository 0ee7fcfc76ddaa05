#pragma once

#include "relsim/expr.hpp"
#include "relsim/scene.hpp"

#include <memory>
#include <string>
#include <vector>

namespace relsim {

// Global DoF layout: each minimize target owns a contiguous block, assigned in
// registration order; boundaries holds the prefix-sum offsets plus terminal.
struct GradientLayout {
  std::vector<const Attribute*> targets;
  std::vector<Index> boundaries;  // targets.size() + 1 entries
  Index total_dofs = 0;

  Index start(int target_index) const { return boundaries[target_index]; }

  struct Located {
    int target = -1;
    Index block_start = 0;  // start of the owning instance block
    int rc = 0;
  };
  // Maps a global scalar coordinate to its owning instance block.
  Located locate(Index scalar_coord) const;
  // Block length addressed by a 1-based placement index.
  int block_len(Index placement_index) const { return locate(placement_index - 1).rc; }
};

GradientLayout build_gradient_layout(std::span<const Attribute* const> targets);

// Structural description of one energy's parameter columns. A leaf is one
// contiguous block of a target attribute; JOIN replicates its child per
// gathered instance; UNION reserves worst-case capacity and zero-pads the
// inactive slots. Slot order is the expression's child order, left to right.
struct LayoutNode {
  enum class Kind { DataSlot, Seq, JoinRep, UnionSel };
  Kind kind = Kind::Seq;
  const Host* host = nullptr;  // evaluation domain of this subtree

  const Attribute* target = nullptr;  // DataSlot

  std::vector<std::shared_ptr<const LayoutNode>> parts;  // Seq / UnionSel branches

  const Connectivity* conn = nullptr;           // JoinRep
  std::shared_ptr<const LayoutNode> child;      // JoinRep

  int slots = 0;  // |kappa| capacity
  int width = 0;  // structural column width

  std::string describe(int indent = 0) const;
};

using LayoutPtr = std::shared_ptr<const LayoutNode>;

// One placement slot computed for a concrete instance. `index` is 1-based
// (0 = no contribution); `len` is the block length and `col` the column offset
// of the block inside the uncompressed local gradient/Hessian.
struct SlotEntry {
  Index index = 0;
  int len = 0;
  int col = 0;
};

int index_capacity(const LayoutNode& layout);

// Fills exactly layout.slots entries for one instance of the layout's domain.
void compute_indices(const LayoutNode& layout, const GradientLayout& grad, Index instance,
                     std::span<SlotEntry> out);

// All instances, flattened (instance-major). Parallel over instances.
std::vector<SlotEntry> compute_index_table(const LayoutNode& layout, const GradientLayout& grad,
                                           Index instance_count);

std::string index_table_csv(const std::vector<SlotEntry>& table, int slots);

// Splits scene energies by their dynamic_instances flag; static structures are
// built once, dynamic ones are rebuilt after every resize_dynamic.
std::pair<std::vector<const EnergyDecl*>, std::vector<const EnergyDecl*>> partition_static_dynamic(
    const Scene& scene);

}  // namespace relsim
