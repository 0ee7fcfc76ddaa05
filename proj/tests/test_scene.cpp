#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "relsim/scene.hpp"

#include <random>

using namespace relsim;

TEST_CASE("primitive declaration") {
  Scene s("scene0");
  Mesh& m = s.add_mesh("affine_body");
  PrimitiveType& p = m.add_primitive("bunny_affine", 1, false);
  CHECK(p.instance_count() == 1);
  CHECK(!p.is_dynamic());

  Mesh& pp_mesh = s.add_mesh("pp");
  PrimitiveType& pp = pp_mesh.add_primitive("bunnies", 0, true);
  CHECK(pp.instance_count() == 0);
  CHECK(pp.is_dynamic());

  m.add_primitive("vertices", 10);
  CHECK_THROWS_AS(m.add_primitive("vertices", 5), DeclError);
}

TEST_CASE("primitive union offsets and totals") {
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& a = m.add_primitive("a", 5);
  PrimitiveType& b = m.add_primitive("b", 3);
  PrimitiveUnion& u = m.add_primitive_union("u", {&a, &b});
  CHECK(u.instance_count() == 8);
  CHECK(u.offsets() == std::vector<Index>{0, 5});

  PrimitiveType& av = m.add_primitive("affine_verts", 4);
  PrimitiveType& sv = m.add_primitive("soft_verts", 6);
  PrimitiveUnion& u2 = m.add_primitive_union("verts", {&av, &sv});
  CHECK(u2.instance_count() == 10);

  CHECK_THROWS_AS(m.add_primitive_union("empty", {}), DeclError);
}

TEST_CASE("connectivity storage and validation") {
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& tets = m.add_primitive("tets", 1);
  PrimitiveType& verts = m.add_primitive("vertices", 4);

  Connectivity& c = tets.add_connectivity("tet2v", verts, {0, 1, 2, 3}, 4);
  CHECK(c.at(0, 0) == 0);
  CHECK(c.at(0, 3) == 3);

  // one affine body referenced by every vertex
  PrimitiveType& body = m.add_primitive("affine_body", 1);
  Connectivity& bv = verts.add_connectivity("v2abd", body, std::vector<Index>(4, 0), 1);
  for (Index i = 0; i < 4; ++i) CHECK(bv.at(i, 0) == 0);

  // dynamic empty connectivity
  PrimitiveType& pp = m.add_primitive("pp", 0, true);
  Connectivity& ppc = pp.add_connectivity("pp2v", verts, {}, 2);
  CHECK(ppc.indices.empty());

  CHECK_THROWS_AS(tets.add_connectivity("bad", verts, {0, 1, 2, 9}, 4), ValidationError);
  CHECK_THROWS_AS(tets.add_connectivity("short", verts, {0, 1}, 4), ValidationError);
}

TEST_CASE("connectivity index range fuzz") {
  std::mt19937_64 rng(7);
  for (int round = 0; round < 50; ++round) {
    Scene s("s");
    Mesh& m = s.add_mesh("m");
    Index na = 1 + Index(rng() % 20), nb = 1 + Index(rng() % 30);
    int k = 1 + int(rng() % 4);
    PrimitiveType& a = m.add_primitive("a", na);
    PrimitiveType& b = m.add_primitive("b", nb);
    std::vector<Index> idx(na * k);
    bool bad = round % 2 == 0;
    for (auto& v : idx) v = Index(rng() % nb);
    if (bad) idx[rng() % idx.size()] = nb + Index(rng() % 5);
    if (bad) {
      CHECK_THROWS_AS(a.add_connectivity("c", b, idx, k), ValidationError);
    } else {
      Connectivity& c = a.add_connectivity("c", b, idx, k);
      for (Index i = 0; i < na; ++i)
        for (int l = 0; l < k; ++l) {
          CHECK(c.at(i, l) >= 0);
          CHECK(c.at(i, l) < nb);
        }
    }
  }
}

TEST_CASE("attributes and value updates") {
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& body = m.add_primitive("affine_body", 1);
  Attr am = body.add_attribute("affine_matrix", 3, 3);
  am.update_value(MatrixXd::Identity(3, 3));
  const Attribute& attr = body.attribute("affine_matrix");
  CHECK(attr.values.size() == 9);
  CHECK(attr.values[0] == 1.0);
  CHECK(attr.values[1] == 0.0);
  CHECK(attr.values[4] == 1.0);

  std::vector<double> wrong(5, 0.0);
  CHECK_THROWS_AS(body.attribute("affine_matrix").update_value(wrong), ValidationError);
}

TEST_CASE("union attribute shape agreement") {
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& a = m.add_primitive("a", 2);
  PrimitiveType& b = m.add_primitive("b", 3);
  a.add_attribute("position", 3, 1);
  b.add_attribute("position", 3, 1);
  a.add_attribute("tensor", 3, 1);
  b.add_attribute("tensor", 3, 3);

  PrimitiveUnion& u = m.add_primitive_union("u", {&a, &b});
  Attr pos = u.add_attribute("position");
  CHECK(pos.shape() == Shape(3, 1));
  CHECK_THROWS_AS(u.add_attribute("tensor"), ShapeError);
  CHECK_THROWS_AS(u.add_attribute("missing"), DeclError);
}

TEST_CASE("union encode decode round trip and bijection") {
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& a = m.add_primitive("a", 5);
  PrimitiveType& b = m.add_primitive("b", 3);
  PrimitiveUnion& u = m.add_primitive_union("u", {&a, &b});

  CHECK(u.encode(1, 2) == 7);
  CHECK(u.decode(7) == std::pair<int, Index>{1, 2});
  CHECK(u.encode(0, 0) == 0);
  CHECK_THROWS_AS(u.decode(8), ValidationError);

  std::vector<bool> seen(8, false);
  for (int j = 0; j < 2; ++j) {
    Index n = u.children()[j]->instance_count();
    for (Index i = 0; i < n; ++i) {
      Index e = u.encode(j, i);
      CHECK(!seen[e]);
      seen[e] = true;
      CHECK(u.decode(e) == std::pair<int, Index>{j, i});
    }
  }
  for (bool v : seen) CHECK(v);
}

TEST_CASE("union decode with empty dynamic child") {
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& a = m.add_primitive("a", 0, true);
  PrimitiveType& b = m.add_primitive("b", 2);
  PrimitiveUnion& u = m.add_primitive_union("u", {&a, &b});
  CHECK(u.instance_count() == 2);
  CHECK(u.decode(0) == std::pair<int, Index>{1, 0});
  CHECK(u.decode(1) == std::pair<int, Index>{1, 1});
}

TEST_CASE("deepest common host") {
  Scene s("s");
  Attr ts = s.add_attribute("timestep", 1, 1);
  Mesh& ma = s.add_mesh("ma");
  PrimitiveType& verts = ma.add_primitive("vertices", 4);
  PrimitiveType& tets = ma.add_primitive("tets", 1);
  Attr pos = verts.add_attribute("position", 3, 1);
  Attr rest = verts.add_constant("rest_position", 3, 1);
  Attr ym = tets.add_attribute("youngs_modulus", 1, 1);

  {
    std::vector<Host*> hs{&s, &verts};
    CHECK(deepest_common_host(hs) == &verts);
  }
  {
    std::vector<Host*> hs{&verts, &verts};
    CHECK(deepest_common_host(hs) == &verts);
  }
  {
    std::vector<Host*> hs{&tets, &verts};
    CHECK_THROWS_AS(deepest_common_host(hs), LineageError);
  }

  // order independence
  Mesh& mb = s.add_mesh("mb");
  std::vector<Host*> h1{&s, &ma, &verts};
  std::vector<Host*> h2{&verts, &s, &ma};
  CHECK(deepest_common_host(h1) == deepest_common_host(h2));
  std::vector<Host*> bad{&ma, &mb};
  CHECK_THROWS_AS(deepest_common_host(bad), LineageError);

  // expression-level: scene attr * vertex attr lands on vertices
  Attr scaled = ts * pos;
  CHECK(scaled.host() == &verts);
  CHECK((pos - rest).host() == &verts);
  CHECK_THROWS_AS(ym * pos, LineageError);
}

TEST_CASE("resize_dynamic replaces tables atomically") {
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& verts = m.add_primitive("vertices", 6);
  PrimitiveType& pp = m.add_primitive("pp", 0, true);
  pp.add_connectivity("pp2v", verts, {}, 2);

  auto epoch0 = s.dynamic_epoch();
  pp.resize_dynamic(3, {{"pp2v", {0, 1, 2, 3, 4, 5}}});
  CHECK(pp.instance_count() == 3);
  CHECK(pp.connectivity("pp2v").indices.size() == 6);
  CHECK(s.dynamic_epoch() == epoch0 + 1);

  // invalid index leaves everything unchanged
  CHECK_THROWS_AS(pp.resize_dynamic(2, {{"pp2v", {0, 1, 2, 6}}}), ValidationError);
  CHECK(pp.instance_count() == 3);
  CHECK(pp.connectivity("pp2v").indices.size() == 6);

  pp.resize_dynamic(0, {{"pp2v", {}}});
  CHECK(pp.instance_count() == 0);

  CHECK_THROWS_AS(verts.resize_dynamic(7, {}), ValidationError);
}

TEST_CASE("energy and minimize target registration") {
  Scene s("s");
  Mesh& m = s.add_mesh("m");
  PrimitiveType& verts = m.add_primitive("vertices", 3);
  Attr pos = verts.add_attribute("position", 3, 1);
  Attr rest = verts.add_constant("rest", 3, 1);

  Attr e = (pos - rest).dot(pos - rest);
  EnergyDecl& decl = s.add_energy(e);
  CHECK(decl.host == &verts);
  CHECK(!decl.dynamic_instances);

  s.add_minimize_target(pos);
  CHECK(s.minimize_targets().size() == 1);
  CHECK_THROWS_AS(s.add_minimize_target(pos), DeclError);
  CHECK_THROWS_AS(s.add_minimize_target(rest), DeclError);
  CHECK_THROWS_AS(s.add_energy(pos), DeclError);  // not 1x1
}
