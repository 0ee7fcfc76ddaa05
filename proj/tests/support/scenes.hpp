#pragma once

// Shared test scenes built through the public frontend API.

#include "relsim/scene.hpp"

#include <random>
#include <vector>

namespace relsim::test {

// Free vertices and affine-body vertices unified by a UNION, with a dynamic
// point-point pair primitive joining unioned positions: the mixed-material
// contact configuration. The pair energy is repulsive 1/||p0 - p1||.
struct ContactScene {
  Scene s{"contact"};
  PrimitiveType* free_verts = nullptr;
  PrimitiveType* bodies = nullptr;
  PrimitiveType* abd_verts = nullptr;
  PrimitiveUnion* verts = nullptr;
  PrimitiveType* pp = nullptr;
  Attr free_pos, amat, trans, upos, pair_pos, energy;

  ContactScene(Index n_free, Index n_bodies, Index n_abd, std::uint64_t seed = 42) {
    std::mt19937_64 rng(seed);
    auto u01 = [&] { return std::uniform_real_distribution<double>(-1.0, 1.0)(rng); };

    Mesh& soft = s.add_mesh("soft");
    free_verts = &soft.add_primitive("vertices", n_free);
    free_pos = free_verts->add_attribute("position", 3, 1);
    std::vector<double> fp(n_free * 3);
    for (auto& v : fp) v = u01();
    free_pos.update_value(fp);

    Mesh& rigid = s.add_mesh("rigid");
    bodies = &rigid.add_primitive("affine_body", n_bodies);
    abd_verts = &rigid.add_primitive("vertices", n_abd);
    amat = bodies->add_attribute("affine_matrix", 3, 3);
    trans = bodies->add_attribute("translation", 3, 1);
    std::vector<double> av(n_bodies * 9, 0.0), tv(n_bodies * 3);
    for (Index b = 0; b < n_bodies; ++b) {
      av[b * 9 + 0] = av[b * 9 + 4] = av[b * 9 + 8] = 1.0;
      for (int d = 0; d < 3; ++d) {
        av[b * 9 + d * 3 + (d + 1) % 3] = 0.2 * u01();
        tv[b * 3 + d] = u01();
      }
    }
    amat.update_value(av);
    trans.update_value(tv);

    Attr rest = abd_verts->add_constant("rest_position", 3, 1);
    std::vector<double> rv(n_abd * 3);
    for (auto& v : rv) v = u01();
    rest.update_value(rv);

    std::vector<Index> v2b(n_abd);
    for (Index i = 0; i < n_abd; ++i) v2b[i] = (i * n_bodies) / n_abd;
    Connectivity& cb = abd_verts->add_connectivity("v2b", *bodies, v2b, 1);
    Attr bva = abd_verts->add_attribute("affine", cb, amat).reshape(3, 3);
    Attr bvt = abd_verts->add_attribute("trans", cb, trans).reshape(3, 1);
    abd_verts->add_attribute("position", bva.matmul(rest) + bvt);

    Mesh& contact = s.add_mesh("contact");
    verts = &contact.add_primitive_union("vertices", {free_verts, abd_verts});
    upos = verts->add_attribute("position");

    pp = &contact.add_primitive("pp", 0, true);
    Connectivity& c = pp->add_connectivity("pp2v", *verts, {}, 2);
    pair_pos = pp->add_attribute("positions", c, upos);
    energy = pp->add_attribute("repulsive", 1.0 / (pair_pos.index(0) - pair_pos.index(1)).norm());
  }

  void register_energy(ProjectionMode mode = ProjectionMode::FullProject) {
    s.add_energy(energy, /*dynamic_instances=*/true, mode);
  }

  void register_targets() {
    s.add_minimize_target(free_pos);
    s.add_minimize_target(amat);
    s.add_minimize_target(trans);
  }

  // Pair entries are global union indices.
  void set_pairs(const std::vector<std::pair<Index, Index>>& pairs) {
    std::vector<Index> idx;
    for (auto [a, b] : pairs) {
      idx.push_back(a);
      idx.push_back(b);
    }
    pp->resize_dynamic(Index(pairs.size()), {{"pp2v", idx}});
  }

  Index free_index(Index i) const { return verts->encode(0, i); }
  Index abd_index(Index i) const { return verts->encode(1, i); }
};

// Per-vertex quadratic pull toward a constant anchor: 0.5 |x - a|^2.
struct QuadraticScene {
  Scene s{"quad"};
  PrimitiveType* verts = nullptr;
  Attr pos, anchor, energy;

  explicit QuadraticScene(Index n, std::uint64_t seed = 3) {
    std::mt19937_64 rng(seed);
    auto u01 = [&] { return std::uniform_real_distribution<double>(-1.0, 1.0)(rng); };
    Mesh& m = s.add_mesh("m");
    verts = &m.add_primitive("vertices", n);
    pos = verts->add_attribute("position", 3, 1);
    anchor = verts->add_constant("anchor", 3, 1);
    std::vector<double> pv(n * 3), av(n * 3);
    for (auto& v : pv) v = u01();
    for (auto& v : av) v = u01();
    pos.update_value(pv);
    anchor.update_value(av);
    Attr d = pos - anchor;
    energy = verts->add_attribute("pull", 0.5 * d.dot(d));
    s.add_energy(energy);
    s.add_minimize_target(pos);
  }
};

}  // namespace relsim::test
