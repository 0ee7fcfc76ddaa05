#pragma once

#include "relsim/core.hpp"
#include "relsim/expr.hpp"

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace relsim {

class Scene;
class Mesh;
class Domain;
class PrimitiveType;
class PrimitiveUnion;

enum class HostKind { Scene, Mesh, Primitive, Union };

// A host is anything an attribute can live on. Scene and mesh hosts act as
// single-instance domains so that broadcasting over lineage is uniform.
class Host {
 public:
  Host(std::string name, HostKind kind, Host* parent) : name_(std::move(name)), kind_(kind), parent_(parent) {}
  virtual ~Host() = default;

  const std::string& name() const { return name_; }
  HostKind kind() const { return kind_; }
  Host* parent() const { return parent_; }
  virtual Index instance_count() const { return 1; }

  Scene& scene();
  const Scene& scene() const;
  std::string path() const;
  bool is_ancestor_of(const Host* other) const;  // strict or equal

  // Named attributes hosted here, in declaration order.
  Attribute* find_attribute(const std::string& name);
  const Attribute* find_attribute(const std::string& name) const;
  Attribute& attribute(const std::string& name);
  const std::vector<std::unique_ptr<Attribute>>& attributes() const { return attrs_; }

  Attr add_attribute(const std::string& name, int rows, int cols);   // differentiable data
  Attr add_constant(const std::string& name, int rows, int cols);    // non-differentiable data
  Attr add_attribute(const std::string& name, Attr computed);        // named computed attribute
  Attr add_attribute(const std::string& name, Connectivity& through, Attr source);  // JOIN
  Attr attr(const std::string& name);                                // handle by name

 protected:
  Attribute& register_data(const std::string& name, Shape shape, bool differentiable);

  std::string name_;
  HostKind kind_;
  Host* parent_;
  std::vector<std::unique_ptr<Attribute>> attrs_;
};

struct Attribute {
  std::string name;
  Host* host = nullptr;
  Shape shape;
  bool is_data = false;         // data or constant (owns values)
  bool differentiable = false;  // only data attributes participate in differentiation
  std::vector<double> values;   // length = host instances * rows * cols
  NodeId node = kInvalidNode;   // DataRef for data/constant, expression root for computed
  int target_index = -1;        // position in the minimize-target list, -1 if not a target

  Index expected_len() const { return host->instance_count() * shape.size(); }
  void update_value(std::span<const double> v);
  void resize_storage();  // after a dynamic resize; zero-fills new instances
};

// Arity-k index map C: I_A -> I_B^k stored flat, row-major per instance.
struct Connectivity {
  std::string name;
  Domain* from = nullptr;
  Host* to = nullptr;  // primitive type or primitive union
  int arity = 1;
  std::vector<Index> indices;

  Index to_count() const;
  void validate(Index from_count) const;
  Index at(Index instance, int slot) const { return indices[instance * arity + slot]; }
};

// A primitive domain: a primitive type or a primitive union.
class Domain : public Host {
 public:
  using Host::Host;

  Connectivity& add_connectivity(const std::string& name, Host& to, std::vector<Index> indices, int arity);
  Connectivity* find_connectivity(const std::string& name);
  Connectivity& connectivity(const std::string& name);
  const std::vector<std::unique_ptr<Connectivity>>& connectivities() const { return conns_; }

 protected:
  std::vector<std::unique_ptr<Connectivity>> conns_;
};

class PrimitiveType : public Domain {
 public:
  PrimitiveType(std::string name, Host* parent, Index num_instances, bool is_dynamic)
      : Domain(std::move(name), HostKind::Primitive, parent), count_(num_instances), dynamic_(is_dynamic) {}

  Index instance_count() const override { return count_; }
  bool is_dynamic() const { return dynamic_; }

  // Replaces the instance count and all outgoing connectivity tables atomically.
  // Data attributes hosted here are resized (zero-filled growth).
  void resize_dynamic(Index new_count, const std::map<std::string, std::vector<Index>>& tables);

 private:
  Index count_ = 0;
  bool dynamic_ = false;
};

// A disjoint union of primitive domains; global indices are (branch, local)
// pairs compressed via prefix-sum offsets in declared child order.
class PrimitiveUnion : public Domain {
 public:
  PrimitiveUnion(std::string name, Host* parent, std::vector<Domain*> children)
      : Domain(std::move(name), HostKind::Union, parent), children_(std::move(children)) {}

  Index instance_count() const override;
  const std::vector<Domain*>& children() const { return children_; }
  std::vector<Index> offsets() const;  // recomputed; children may be dynamic

  Index encode(int branch, Index local) const;
  std::pair<int, Index> decode(Index global) const;

  // UNION of a same-named, same-shaped attribute from every child.
  Attr add_attribute(const std::string& name);
  using Domain::add_attribute;

 private:
  std::vector<Domain*> children_;
};

class Mesh : public Host {
 public:
  Mesh(std::string name, Host* parent) : Host(std::move(name), HostKind::Mesh, parent) {}

  PrimitiveType& add_primitive(const std::string& name, Index num_instances, bool is_dynamic = false);
  PrimitiveUnion& add_primitive_union(const std::string& name, std::vector<Domain*> children);
  Domain* find_domain(const std::string& name);
  Domain& domain(const std::string& name);
  const std::vector<std::unique_ptr<Domain>>& domains() const { return domains_; }

 private:
  std::vector<std::unique_ptr<Domain>> domains_;
};

enum class ProjectionMode { FullProject, ReducedProject, SeparatedJacobian };

struct EnergyDecl {
  std::string name;
  NodeId root = kInvalidNode;  // per-instance scalar
  Host* host = nullptr;
  bool dynamic_instances = false;
  ProjectionMode mode = ProjectionMode::FullProject;
};

class Scene : public Host {
 public:
  explicit Scene(std::string name);
  ~Scene();

  Scene(const Scene&) = delete;
  Scene& operator=(const Scene&) = delete;

  Mesh& add_mesh(const std::string& name);
  Mesh* find_mesh(const std::string& name);
  Mesh& mesh(const std::string& name);
  const std::vector<std::unique_ptr<Mesh>>& meshes() const { return meshes_; }

  EnergyDecl& add_energy(Attr energy, bool dynamic_instances = false,
                         ProjectionMode mode = ProjectionMode::FullProject);
  const std::vector<EnergyDecl>& energies() const { return energies_; }

  void add_minimize_target(Attr a);
  const std::vector<Attribute*>& minimize_targets() const { return targets_; }

  ExprGraph& graph() { return *graph_; }
  const ExprGraph& graph() const { return *graph_; }

  // Bumped by every resize_dynamic; dynamic index structures compare epochs.
  std::uint64_t dynamic_epoch() const { return dynamic_epoch_; }
  void bump_dynamic_epoch() { ++dynamic_epoch_; }

 private:
  std::unique_ptr<ExprGraph> graph_;
  std::vector<std::unique_ptr<Mesh>> meshes_;
  std::vector<EnergyDecl> energies_;
  std::vector<Attribute*> targets_;
  std::uint64_t dynamic_epoch_ = 0;
};

// Deepest host H such that every input host is H or an ancestor of H.
// Hosts on unrelated lineage chains raise LineageError.
Host* deepest_common_host(std::span<Host* const> hosts);

}  // namespace relsim
