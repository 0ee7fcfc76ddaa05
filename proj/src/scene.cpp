#include "relsim/scene.hpp"

#include <algorithm>

namespace relsim {

// ---------------------------------------------------------------------------
// Host

Scene& Host::scene() {
  Host* h = this;
  while (h->parent_) h = h->parent_;
  return static_cast<Scene&>(*h);
}

const Scene& Host::scene() const { return const_cast<Host*>(this)->scene(); }

std::string Host::path() const {
  if (!parent_) return name_;
  return parent_->path() + "." + name_;
}

bool Host::is_ancestor_of(const Host* other) const {
  for (const Host* h = other; h; h = h->parent()) {
    if (h == this) return true;
  }
  return false;
}

Attribute* Host::find_attribute(const std::string& name) {
  for (auto& a : attrs_) {
    if (a->name == name) return a.get();
  }
  return nullptr;
}

const Attribute* Host::find_attribute(const std::string& name) const {
  return const_cast<Host*>(this)->find_attribute(name);
}

Attribute& Host::attribute(const std::string& name) {
  if (Attribute* a = find_attribute(name)) return *a;
  throw DeclError("no attribute '" + name + "' on " + path());
}

Attribute& Host::register_data(const std::string& name, Shape shape, bool differentiable) {
  if (find_attribute(name)) throw DeclError("duplicate attribute '" + name + "' on " + path());
  if (shape.rows < 1 || shape.cols < 1) throw ShapeError("attribute shape must be positive: " + shape.str());
  auto a = std::make_unique<Attribute>();
  a->name = name;
  a->host = this;
  a->shape = shape;
  a->is_data = true;
  a->differentiable = differentiable;
  a->values.assign(instance_count() * shape.size(), 0.0);
  attrs_.push_back(std::move(a));
  Attribute& ref = *attrs_.back();
  ref.node = scene().graph().data_ref(ref);
  return ref;
}

Attr Host::add_attribute(const std::string& name, int rows, int cols) {
  Attribute& a = register_data(name, Shape(rows, cols), true);
  return Attr(&scene(), a.node);
}

Attr Host::add_constant(const std::string& name, int rows, int cols) {
  Attribute& a = register_data(name, Shape(rows, cols), false);
  return Attr(&scene(), a.node);
}

Attr Host::add_attribute(const std::string& name, Attr computed) {
  if (find_attribute(name)) throw DeclError("duplicate attribute '" + name + "' on " + path());
  if (!computed.valid()) throw DeclError("empty expression for attribute '" + name + "'");
  ExprGraph& g = scene().graph();
  const Node& n = g.node(computed.node());
  if (n.host != this && !(n.host && n.host->is_ancestor_of(this)))
    throw LineageError("expression for '" + name + "' lives on " + (n.host ? n.host->path() : "?") +
                       ", cannot attach to " + path());
  // Computed attributes are immutable once registered; rebinding is forbidden.
  Node& mut = g.node_mut(computed.node());
  if (mut.name.empty()) mut.name = name;
  auto a = std::make_unique<Attribute>();
  a->name = name;
  a->host = this;
  a->shape = n.shape;
  a->is_data = false;
  a->node = computed.node();
  attrs_.push_back(std::move(a));
  return computed;
}

Attr Host::add_attribute(const std::string& name, Connectivity& through, Attr source) {
  ExprGraph& g = scene().graph();
  NodeId j = g.join(through, source.node());
  if (through.from != this)
    throw DeclError("JOIN attribute '" + name + "' must be added to the connectivity's from-domain " +
                    through.from->path());
  return add_attribute(name, Attr(&scene(), j));
}

Attr Host::attr(const std::string& name) {
  Attribute& a = attribute(name);
  return Attr(&scene(), a.node);
}

// ---------------------------------------------------------------------------
// Attribute

void Attribute::update_value(std::span<const double> v) {
  if (!is_data) throw DeclError("update_value on computed attribute '" + name + "'");
  if (Index(v.size()) != expected_len())
    throw ValidationError("update_value on '" + name + "': got " + std::to_string(v.size()) +
                          " values, expected " + std::to_string(expected_len()));
  std::copy(v.begin(), v.end(), values.begin());
}

void Attribute::resize_storage() {
  if (is_data) values.resize(expected_len(), 0.0);
}

// ---------------------------------------------------------------------------
// Connectivity

Index Connectivity::to_count() const { return to->instance_count(); }

void Connectivity::validate(Index from_count) const {
  if (Index(indices.size()) != from_count * arity)
    throw ValidationError("connectivity '" + name + "': table length " + std::to_string(indices.size()) +
                          " != " + std::to_string(from_count) + " instances * arity " + std::to_string(arity));
  Index n_b = to_count();
  for (size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= n_b)
      throw ValidationError("connectivity '" + name + "': index " + std::to_string(indices[k]) +
                            " at position " + std::to_string(k) + " out of range [0, " + std::to_string(n_b) + ")");
  }
}

// ---------------------------------------------------------------------------
// Domain

Connectivity& Domain::add_connectivity(const std::string& name, Host& to, std::vector<Index> indices, int arity) {
  if (find_connectivity(name)) throw DeclError("duplicate connectivity '" + name + "' on " + path());
  if (arity < 1) throw ValidationError("connectivity arity must be >= 1");
  auto c = std::make_unique<Connectivity>();
  c->name = name;
  c->from = this;
  c->to = &to;
  c->arity = arity;
  c->indices = std::move(indices);
  c->validate(instance_count());
  conns_.push_back(std::move(c));
  return *conns_.back();
}

Connectivity* Domain::find_connectivity(const std::string& name) {
  for (auto& c : conns_) {
    if (c->name == name) return c.get();
  }
  return nullptr;
}

Connectivity& Domain::connectivity(const std::string& name) {
  if (Connectivity* c = find_connectivity(name)) return *c;
  throw DeclError("no connectivity '" + name + "' on " + path());
}

// ---------------------------------------------------------------------------
// PrimitiveType

void PrimitiveType::resize_dynamic(Index new_count, const std::map<std::string, std::vector<Index>>& tables) {
  if (!dynamic_) throw ValidationError("resize_dynamic on static primitive " + path());
  if (new_count < 0) throw ValidationError("negative instance count");

  // Validate everything before mutating so the update is atomic.
  for (auto& c : conns_) {
    auto it = tables.find(c->name);
    if (it == tables.end() && new_count * c->arity != 0)
      throw ValidationError("resize_dynamic: missing table for connectivity '" + c->name + "'");
    Connectivity probe = *c;
    probe.indices = it == tables.end() ? std::vector<Index>{} : it->second;
    probe.validate(new_count);
  }
  for (auto& [name, tab] : tables) {
    (void)tab;
    bool known = false;
    for (auto& c : conns_)
      if (c->name == name) known = true;
    if (!known) throw ValidationError("resize_dynamic: unknown connectivity '" + name + "'");
  }

  count_ = new_count;
  for (auto& c : conns_) {
    auto it = tables.find(c->name);
    c->indices = it == tables.end() ? std::vector<Index>{} : it->second;
  }
  for (auto& a : attrs_) a->resize_storage();
  scene().bump_dynamic_epoch();
}

// ---------------------------------------------------------------------------
// PrimitiveUnion

Index PrimitiveUnion::instance_count() const {
  Index total = 0;
  for (const Domain* d : children_) total += d->instance_count();
  return total;
}

std::vector<Index> PrimitiveUnion::offsets() const {
  std::vector<Index> off(children_.size());
  Index acc = 0;
  for (size_t j = 0; j < children_.size(); ++j) {
    off[j] = acc;
    acc += children_[j]->instance_count();
  }
  return off;
}

Index PrimitiveUnion::encode(int branch, Index local) const {
  if (branch < 0 || branch >= int(children_.size())) throw ValidationError("union encode: bad branch");
  if (local < 0 || local >= children_[branch]->instance_count())
    throw ValidationError("union encode: local index out of range");
  return offsets()[branch] + local;
}

std::pair<int, Index> PrimitiveUnion::decode(Index global) const {
  if (global < 0 || global >= instance_count())
    throw ValidationError("union decode: index " + std::to_string(global) + " out of range [0, " +
                          std::to_string(instance_count()) + ")");
  auto off = offsets();
  auto it = std::upper_bound(off.begin(), off.end(), global);
  int branch = int(it - off.begin()) - 1;
  // Skip over empty children sharing the same offset.
  while (children_[branch]->instance_count() == 0) ++branch;
  return {branch, global - off[branch]};
}

Attr PrimitiveUnion::add_attribute(const std::string& name) {
  ExprGraph& g = scene().graph();
  std::vector<NodeId> parts;
  parts.reserve(children_.size());
  for (Domain* d : children_) {
    const Attribute* a = d->find_attribute(name);
    if (!a) throw DeclError("union attribute '" + name + "': child " + d->path() + " lacks it");
    parts.push_back(a->node);
  }
  NodeId u = g.make_union(*this, parts);
  return Host::add_attribute(name, Attr(&scene(), u));
}

// ---------------------------------------------------------------------------
// Mesh

PrimitiveType& Mesh::add_primitive(const std::string& name, Index num_instances, bool is_dynamic) {
  if (find_domain(name)) throw DeclError("duplicate primitive '" + name + "' on mesh " + path());
  if (num_instances < 0) throw DeclError("negative instance count for primitive '" + name + "'");
  domains_.push_back(std::make_unique<PrimitiveType>(name, this, num_instances, is_dynamic));
  return static_cast<PrimitiveType&>(*domains_.back());
}

PrimitiveUnion& Mesh::add_primitive_union(const std::string& name, std::vector<Domain*> children) {
  if (find_domain(name)) throw DeclError("duplicate primitive union '" + name + "' on mesh " + path());
  if (children.empty()) throw DeclError("primitive union '" + name + "' needs at least one child");
  Scene* s = &scene();
  for (Domain* d : children) {
    if (&d->scene() != s) throw DeclError("primitive union '" + name + "': child from another scene");
  }
  domains_.push_back(std::make_unique<PrimitiveUnion>(name, this, std::move(children)));
  return static_cast<PrimitiveUnion&>(*domains_.back());
}

Domain* Mesh::find_domain(const std::string& name) {
  for (auto& d : domains_) {
    if (d->name() == name) return d.get();
  }
  return nullptr;
}

Domain& Mesh::domain(const std::string& name) {
  if (Domain* d = find_domain(name)) return *d;
  throw DeclError("no primitive '" + name + "' on mesh " + path());
}

// ---------------------------------------------------------------------------
// Scene

Scene::Scene(std::string name) : Host(std::move(name), HostKind::Scene, nullptr) {
  graph_ = std::make_unique<ExprGraph>(*this);
}

Scene::~Scene() = default;

Mesh& Scene::add_mesh(const std::string& name) {
  if (find_mesh(name)) throw DeclError("duplicate mesh '" + name + "' in scene " + name_);
  meshes_.push_back(std::make_unique<Mesh>(name, this));
  return *meshes_.back();
}

Mesh* Scene::find_mesh(const std::string& name) {
  for (auto& m : meshes_) {
    if (m->name() == name) return m.get();
  }
  return nullptr;
}

Mesh& Scene::mesh(const std::string& name) {
  if (Mesh* m = find_mesh(name)) return *m;
  throw DeclError("no mesh '" + name + "' in scene " + name_);
}

EnergyDecl& Scene::add_energy(Attr energy, bool dynamic_instances, ProjectionMode mode) {
  const Node& n = graph().node(energy.node());
  if (!(n.shape == Shape(1, 1)))
    throw DeclError("energy must have per-instance shape 1x1, got " + n.shape.str());
  EnergyDecl decl;
  decl.name = n.name.empty() ? ("energy_" + std::to_string(energies_.size())) : n.name;
  decl.root = energy.node();
  decl.host = n.host;
  decl.dynamic_instances = dynamic_instances;
  decl.mode = mode;
  energies_.push_back(decl);
  return energies_.back();
}

void Scene::add_minimize_target(Attr a) {
  const Node& n = graph().node(a.node());
  if (n.op != Op::DataRef || !n.attr->differentiable)
    throw DeclError("minimize target must be a differentiable data attribute");
  Attribute* attr = const_cast<Attribute*>(n.attr);
  if (attr->target_index >= 0) throw DeclError("duplicate minimize target '" + attr->name + "'");
  attr->target_index = int(targets_.size());
  targets_.push_back(attr);
}

// ---------------------------------------------------------------------------

Host* deepest_common_host(std::span<Host* const> hosts) {
  if (hosts.empty()) throw LineageError("deepest_common_host on empty set");
  Host* deepest = hosts[0];
  for (Host* h : hosts.subspan(1)) {
    if (h->is_ancestor_of(deepest)) continue;
    if (deepest->is_ancestor_of(h)) {
      deepest = h;
      continue;
    }
    throw LineageError("attributes on " + deepest->path() + " and " + h->path() +
                       " share no lineage; only JOIN/UNION may cross primitive types");
  }
  return deepest;
}

}  // namespace relsim
