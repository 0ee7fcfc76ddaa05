#include "relsim/index_gen.hpp"

#include <algorithm>
#include <sstream>

namespace relsim {

GradientLayout::Located GradientLayout::locate(Index scalar_coord) const {
  if (scalar_coord < 0 || scalar_coord >= total_dofs)
    throw ValidationError("coordinate " + std::to_string(scalar_coord) + " outside gradient of length " +
                          std::to_string(total_dofs));
  auto it = std::upper_bound(boundaries.begin(), boundaries.end(), scalar_coord);
  int t = int(it - boundaries.begin()) - 1;
  Located loc;
  loc.target = t;
  loc.rc = targets[t]->shape.size();
  Index off = scalar_coord - boundaries[t];
  loc.block_start = boundaries[t] + (off / loc.rc) * loc.rc;
  return loc;
}

GradientLayout build_gradient_layout(std::span<const Attribute* const> targets) {
  if (targets.empty()) throw DeclError("no minimize targets registered");
  GradientLayout layout;
  Index acc = 0;
  for (const Attribute* t : targets) {
    if (!t->is_data || !t->differentiable)
      throw DeclError("minimize target '" + t->name + "' is not a differentiable data attribute");
    for (const Attribute* seen : layout.targets)
      if (seen == t) throw DeclError("duplicate minimize target '" + t->name + "'");
    layout.targets.push_back(t);
    layout.boundaries.push_back(acc);
    acc += t->host->instance_count() * t->shape.size();
  }
  layout.boundaries.push_back(acc);
  layout.total_dofs = acc;
  return layout;
}

std::string LayoutNode::describe(int indent) const {
  std::ostringstream os;
  std::string pad(indent * 2, ' ');
  switch (kind) {
    case Kind::DataSlot:
      os << pad << "slot '" << target->name << "' rc=" << target->shape.size() << "\n";
      break;
    case Kind::Seq:
      os << pad << "seq slots=" << slots << " width=" << width << "\n";
      for (auto& p : parts) os << p->describe(indent + 1);
      break;
    case Kind::JoinRep:
      os << pad << "join '" << conn->name << "' k=" << conn->arity << " slots=" << slots
         << " width=" << width << "\n"
         << child->describe(indent + 1);
      break;
    case Kind::UnionSel:
      os << pad << "union slots=" << slots << " width=" << width << "\n";
      for (auto& p : parts) os << p->describe(indent + 1);
      break;
  }
  return os.str();
}

int index_capacity(const LayoutNode& layout) { return layout.slots; }

namespace {

Index map_up(const Host* domain, Index i, const Host* target) {
  if (target == domain) return i;
  if (target->is_ancestor_of(domain)) return 0;
  throw InternalError("index traversal: host " + target->path() + " unreachable from " + domain->path());
}

// Deterministic traversal mirroring the differentiator's column layout:
// data emits start + rc*i + 1, JOIN concatenates per gathered instance with a
// fixed per-block column stride, UNION emits the active branch then zero-pads.
void walk(const LayoutNode& node, const GradientLayout& grad, const Host* domain, Index instance,
          int col_base, std::span<SlotEntry>& out, int& cursor) {
  switch (node.kind) {
    case LayoutNode::Kind::DataSlot: {
      Index i = map_up(domain, instance, node.target->host);
      int rc = node.target->shape.size();
      Index start = grad.start(node.target->target_index) + Index(rc) * i;
      out[cursor++] = SlotEntry{start + 1, rc, col_base};
      break;
    }
    case LayoutNode::Kind::Seq: {
      int col = col_base;
      for (auto& p : node.parts) {
        Index i = map_up(domain, instance, p->host);
        walk(*p, grad, p->host, i, col, out, cursor);
        col += p->width;
      }
      break;
    }
    case LayoutNode::Kind::JoinRep: {
      const Connectivity& c = *node.conn;
      Index i = map_up(domain, instance, c.from);
      if (Index(c.indices.size()) != c.from->instance_count() * c.arity)
        throw ValidationError("connectivity '" + c.name + "': table not populated");
      for (int l = 0; l < c.arity; ++l) {
        Index j = c.at(i, l);
        if (j < 0 || j >= c.to_count())
          throw ValidationError("connectivity '" + c.name + "': index out of range");
        Index jj = map_up(c.to, j, node.child->host);
        walk(*node.child, grad, node.child->host, jj, col_base + l * node.child->width, out, cursor);
      }
      break;
    }
    case LayoutNode::Kind::UnionSel: {
      const auto* u = static_cast<const PrimitiveUnion*>(node.host);
      Index i = map_up(domain, instance, u);
      auto [branch, local] = u->decode(i);
      const LayoutNode& b = *node.parts[branch];
      Index li = map_up(u->children()[branch], local, b.host);
      int before = cursor;
      walk(b, grad, b.host, li, col_base, out, cursor);
      for (int s = cursor - before; s < node.slots; ++s) out[cursor++] = SlotEntry{0, 0, 0};
      break;
    }
  }
}

}  // namespace

void compute_indices(const LayoutNode& layout, const GradientLayout& grad, Index instance,
                     std::span<SlotEntry> out) {
  if (int(out.size()) != layout.slots) throw InternalError("compute_indices: wrong slot buffer size");
  int cursor = 0;
  walk(layout, grad, layout.host, instance, 0, out, cursor);
  if (cursor != layout.slots) throw InternalError("compute_indices: slot count mismatch");
  for (const SlotEntry& s : out) {
    if (s.index < 0 || s.index > grad.total_dofs || (s.index > 0 && s.index + s.len - 1 > grad.total_dofs))
      throw InternalError("compute_indices: placement outside gradient");
  }
}

std::vector<SlotEntry> compute_index_table(const LayoutNode& layout, const GradientLayout& grad,
                                           Index instance_count) {
  std::vector<SlotEntry> table(size_t(instance_count) * layout.slots);
  parallel_for(instance_count, [&](Index b, Index e) {
    for (Index i = b; i < e; ++i) {
      std::span<SlotEntry> row(table.data() + i * layout.slots, layout.slots);
      compute_indices(layout, grad, i, row);
    }
  });
  return table;
}

std::string index_table_csv(const std::vector<SlotEntry>& table, int slots) {
  std::ostringstream os;
  os << "instance";
  for (int s = 0; s < slots; ++s) os << ",idx" << s << ",len" << s << ",col" << s;
  os << "\n";
  Index rows = slots == 0 ? 0 : Index(table.size()) / slots;
  for (Index i = 0; i < rows; ++i) {
    os << i;
    for (int s = 0; s < slots; ++s) {
      const SlotEntry& e = table[i * slots + s];
      os << "," << e.index << "," << e.len << "," << e.col;
    }
    os << "\n";
  }
  return os.str();
}

std::pair<std::vector<const EnergyDecl*>, std::vector<const EnergyDecl*>> partition_static_dynamic(
    const Scene& scene) {
  std::vector<const EnergyDecl*> stat, dyn;
  for (const EnergyDecl& e : scene.energies()) (e.dynamic_instances ? dyn : stat).push_back(&e);
  return {stat, dyn};
}

}  // namespace relsim
