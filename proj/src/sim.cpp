#include "relsim/sim.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace relsim {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

SimConfig SimConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config parse error in '" + path + "': " + e.what());
  }
  SimConfig c;
  c.config_path = path;
  c.name = j.value("name", c.name);
  c.dt = j.value("dt", c.dt);
  c.frames = j.value("frames", c.frames);
  c.newton_tol = j.value("newton_tol", c.newton_tol);
  c.pcg_tol = j.value("pcg_tol", c.pcg_tol);
  c.max_newton = j.value("max_newton", c.max_newton);
  c.max_line_search = j.value("max_line_search", c.max_line_search);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  if (j.contains("gravity")) {
    auto g = j["gravity"];
    for (int d = 0; d < 3 && d < int(g.size()); ++d) c.gravity[d] = g[d];
  }
  if (c.dt <= 0) throw ValidationError("dt must be positive");
  if (c.newton_tol <= 0 || c.pcg_tol <= 0) throw ValidationError("tolerances must be positive");
  if (j.contains("contact")) {
    auto& ct = j["contact"];
    c.contact_enabled = ct.value("enabled", true);
    c.contact_dhat = ct.value("dhat", c.contact_dhat);
    c.contact_kappa = ct.value("kappa", c.contact_kappa);
    for (auto& b : ct.value("bodies", json::array())) c.contact_bodies.push_back(b);
  }
  if (!j.contains("bodies") || !j["bodies"].is_array() || j["bodies"].empty())
    throw ValidationError("config needs a non-empty 'bodies' array");
  c.raw_bodies = j["bodies"].dump();
  return c;
}

// ---------------------------------------------------------------------------
// Meshes

TriMesh make_grid_cloth(Index nx, Index ny, double spacing, const std::array<double, 3>& origin) {
  if (nx < 2 || ny < 2) throw ValidationError("cloth grid needs at least 2x2 vertices");
  TriMesh m;
  m.vertices.reserve(nx * ny * 3);
  for (Index y = 0; y < ny; ++y) {
    for (Index x = 0; x < nx; ++x) {
      m.vertices.push_back(origin[0] + x * spacing);
      m.vertices.push_back(origin[1]);
      m.vertices.push_back(origin[2] + y * spacing);
    }
  }
  auto vid = [&](Index x, Index y) { return y * nx + x; };
  for (Index y = 0; y + 1 < ny; ++y) {
    for (Index x = 0; x + 1 < nx; ++x) {
      m.triangles.insert(m.triangles.end(), {vid(x, y), vid(x + 1, y), vid(x, y + 1)});
      m.triangles.insert(m.triangles.end(), {vid(x + 1, y), vid(x + 1, y + 1), vid(x, y + 1)});
    }
  }
  return m;
}

std::vector<std::array<Index, 4>> TriMesh::hinges() const {
  std::map<std::pair<Index, Index>, std::vector<std::pair<Index, Index>>> edge_faces;
  Index nf = Index(triangles.size()) / 3;
  for (Index f = 0; f < nf; ++f) {
    for (int e = 0; e < 3; ++e) {
      Index a = triangles[f * 3 + e], b = triangles[f * 3 + (e + 1) % 3];
      Index c = triangles[f * 3 + (e + 2) % 3];
      edge_faces[{std::min(a, b), std::max(a, b)}].push_back({f, c});
    }
  }
  std::vector<std::array<Index, 4>> out;
  for (auto& [edge, faces] : edge_faces) {
    if (faces.size() != 2) continue;
    out.push_back({edge.first, edge.second, faces[0].second, faces[1].second});
  }
  return out;
}

TetMesh make_tet_block(Index nx, Index ny, Index nz, double spacing,
                       const std::array<double, 3>& origin) {
  if (nx < 1 || ny < 1 || nz < 1) throw ValidationError("tet block needs at least one cell");
  TetMesh m;
  Index vx = nx + 1, vy = ny + 1, vz = nz + 1;
  for (Index z = 0; z < vz; ++z)
    for (Index y = 0; y < vy; ++y)
      for (Index x = 0; x < vx; ++x) {
        m.vertices.push_back(origin[0] + x * spacing);
        m.vertices.push_back(origin[1] + y * spacing);
        m.vertices.push_back(origin[2] + z * spacing);
      }
  auto vid = [&](Index x, Index y, Index z) { return (z * vy + y) * vx + x; };
  // six tets per cube (Kuhn decomposition along the main diagonal)
  const int perm[6][3][3] = {{{1, 0, 0}, {1, 1, 0}, {1, 1, 1}}, {{1, 0, 0}, {1, 0, 1}, {1, 1, 1}},
                             {{0, 1, 0}, {1, 1, 0}, {1, 1, 1}}, {{0, 1, 0}, {0, 1, 1}, {1, 1, 1}},
                             {{0, 0, 1}, {1, 0, 1}, {1, 1, 1}}, {{0, 0, 1}, {0, 1, 1}, {1, 1, 1}}};
  for (Index z = 0; z < nz; ++z)
    for (Index y = 0; y < ny; ++y)
      for (Index x = 0; x < nx; ++x)
        for (auto& t : perm) {
          m.tets.push_back(vid(x, y, z));
          for (auto& o : t) m.tets.push_back(vid(x + o[0], y + o[1], z + o[2]));
        }
  return m;
}

TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open OBJ file '" + path + "'");
  TriMesh m;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      double x, y, z;
      ls >> x >> y >> z;
      m.vertices.insert(m.vertices.end(), {x, y, z});
    } else if (tag == "f") {
      std::vector<Index> face;
      std::string tok;
      while (ls >> tok) face.push_back(std::stoll(tok.substr(0, tok.find('/'))) - 1);
      if (face.size() != 3) throw ValidationError("OBJ loader accepts triangles only");
      m.triangles.insert(m.triangles.end(), face.begin(), face.end());
    }
  }
  return m;
}

std::vector<double> load_vertex_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open vertex file '" + path + "'");
  std::vector<double> out;
  double v;
  while (in >> v) out.push_back(v);
  if (out.size() % 3 != 0) throw ValidationError("vertex file length is not a multiple of 3");
  return out;
}

std::vector<std::vector<Index>> load_element_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open element file '" + path + "'");
  std::vector<std::vector<Index>> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<Index> el;
    Index v;
    while (ls >> v) el.push_back(v);
    if (!el.empty()) out.push_back(el);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene construction

namespace {

std::array<double, 3> vec3(const json& j, const std::array<double, 3>& fallback) {
  std::array<double, 3> out = fallback;
  for (int d = 0; d < 3 && d < int(j.size()); ++d) out[d] = j[d];
  return out;
}

}  // namespace

Simulation::Simulation(const SimConfig& config) : config_(config) {
  set_thread_count(config_.threads);
  scene_ = std::make_unique<Scene>(config_.name);
  dt2_ = scene_->add_constant("dt2", 1, 1);
  dt2_.update_value(MatrixXd::Constant(1, 1, config_.dt * config_.dt));
  build_from_config();
  engine_ = std::make_unique<Engine>(*scene_);
  for (Body& b : bodies_) {
    if (!b.fixed) b.prev_positions = vec_rm(body_positions(b));
  }
  if (contact_union_) refresh_dynamic_pairs();
}

MatrixXd Simulation::body_positions(const Body& b) {
  InstanceTensor t = engine_ ? engine_->evaluator().evaluate(b.position)
                             : Evaluator(*scene_).evaluate(b.position);
  Index n = t.count();
  MatrixXd out(n, b.dim);
  for (Index i = 0; i < n; ++i) out.row(i) = vec_rm(t.instance(i)).transpose();
  return out;
}

void Simulation::build_from_config() {
  json bodies_json = json::parse(config_.raw_bodies);
  Scene& s = *scene_;

  for (auto& bj : bodies_json) {
    Body body;
    body.name = bj.value("name", "body" + std::to_string(bodies_.size()));
    body.kind = bj.value("kind", "");
    body.fixed = bj.value("fixed", false);
    Mesh& mesh = s.add_mesh(body.name);

    if (body.kind == "free_points" || body.kind == "affine_points") {
      std::vector<double> pts;
      for (auto& p : bj.at("points"))
        for (int d = 0; d < 3; ++d) pts.push_back(p[d]);
      Index n = Index(pts.size()) / 3;
      PrimitiveType& verts = mesh.add_primitive("vertices", n);
      body.verts = &verts;

      if (body.kind == "free_points") {
        body.position = body.fixed ? verts.add_constant("position", 3, 1)
                                   : verts.add_attribute("position", 3, 1);
        body.position.update_value(pts);
        if (!body.fixed) s.add_minimize_target(body.position);
      } else {
        PrimitiveType& ab = mesh.add_primitive("affine_body", 1);
        Attr amat = ab.add_attribute("affine_matrix", 3, 3);
        Attr trans = ab.add_attribute("translation", 3, 1);
        amat.update_value(MatrixXd::Identity(3, 3));
        trans.update_value(MatrixXd::Zero(3, 1));
        Attr rest = verts.add_constant("rest_position", 3, 1);
        rest.update_value(pts);
        Connectivity& v2b = verts.add_connectivity("v2b", ab, std::vector<Index>(n, 0), 1);
        Attr bva = verts.add_attribute("affine", v2b, amat).reshape(3, 3);
        Attr bvt = verts.add_attribute("trans", v2b, trans).reshape(3, 1);
        body.position = verts.add_attribute("position", bva.matmul(rest) + bvt);
        s.add_minimize_target(amat);
        s.add_minimize_target(trans);
        double orth = bj.value("orthogonality_stiffness", 1e4);
        add_affine_orthogonality(s, amat, orth, dt2_);
      }

      if (!body.fixed) {
        body.inertial = true;
        Attr mass = verts.add_constant("mass", 1, 1);
        mass.update_value(std::vector<double>(n, bj.value("mass", 1.0)));
        body.x_tilde = verts.add_constant("x_tilde", 3, 1);
        body.x_tilde.update_value(pts);
        add_inertia(s, body.position, mass, body.x_tilde);
        body.velocity = VectorXd::Zero(n * 3);
        if (bj.contains("velocity")) {
          auto v0 = vec3(bj["velocity"], {0, 0, 0});
          for (Index i = 0; i < n; ++i)
            for (int d = 0; d < 3; ++d) body.velocity[i * 3 + d] = v0[d];
        }
      }
      body.outputs.push_back({"position", body.position});
    } else if (body.kind == "tet_block" || body.kind == "tet_mesh") {
      TetMesh tm;
      if (body.kind == "tet_block") {
        tm = make_tet_block(bj.value("nx", Index(2)), bj.value("ny", Index(2)),
                            bj.value("nz", Index(2)), bj.value("spacing", 0.1),
                            vec3(bj.value("origin", json::array()), {0, 0, 0}));
      } else {
        tm.vertices = load_vertex_file(bj.at("vertices_file"));
        for (auto& el : load_element_file(bj.at("elements_file"))) {
          if (el.size() != 4) throw ValidationError("tet_mesh elements must have 4 indices");
          tm.tets.insert(tm.tets.end(), el.begin(), el.end());
        }
      }
      Index n = Index(tm.vertices.size()) / 3;
      Index nt = Index(tm.tets.size()) / 4;
      PrimitiveType& verts = mesh.add_primitive("vertices", n);
      PrimitiveType& tets = mesh.add_primitive("tets", nt);
      Connectivity& t2v = tets.add_connectivity("tet2v", verts, tm.tets, 4);
      body.verts = &verts;
      body.position = body.fixed ? verts.add_constant("position", 3, 1)
                                 : verts.add_attribute("position", 3, 1);
      body.position.update_value(tm.vertices);
      body.outputs.push_back({"position", body.position});
      if (body.fixed) {
        bodies_.push_back(std::move(body));
        continue;
      }
      s.add_minimize_target(body.position);

      ElasticMaterial mat;
      if (bj.contains("material")) {
        mat.youngs_modulus = bj["material"].value("youngs_modulus", mat.youngs_modulus);
        mat.poisson_ratio = bj["material"].value("poisson_ratio", mat.poisson_ratio);
      }
      add_stable_neo_hookean(s, tets, t2v, body.position, tm.vertices, mat, dt2_,
                             bj.value("nh_via_deformation_gradient", false));

      double density = bj.value("density", 1000.0);
      std::vector<double> lumped(n, 0.0);
      for (Index t = 0; t < nt; ++t) {
        Eigen::Matrix3d d;
        for (int c = 0; c < 3; ++c)
          for (int r = 0; r < 3; ++r)
            d(r, c) = tm.vertices[tm.tets[t * 4 + c + 1] * 3 + r] -
                      tm.vertices[tm.tets[t * 4] * 3 + r];
        double share = density * std::abs(d.determinant()) / 6.0 / 4.0;
        for (int k = 0; k < 4; ++k) lumped[tm.tets[t * 4 + k]] += share;
      }
      body.inertial = true;
      Attr mass = verts.add_constant("mass", 1, 1);
      mass.update_value(lumped);
      body.x_tilde = verts.add_constant("x_tilde", 3, 1);
      body.x_tilde.update_value(tm.vertices);
      add_inertia(s, body.position, mass, body.x_tilde);
      body.velocity = VectorXd::Zero(n * 3);
    } else if (body.kind == "cloth_grid" || body.kind == "obj_cloth") {
      TriMesh cm = body.kind == "cloth_grid"
                       ? make_grid_cloth(bj.value("nx", Index(4)), bj.value("ny", Index(4)),
                                         bj.value("spacing", 0.1),
                                         vec3(bj.value("origin", json::array()), {0, 0, 0}))
                       : load_obj(bj.at("obj_file"));
      Index n = Index(cm.vertices.size()) / 3;
      PrimitiveType& verts = mesh.add_primitive("vertices", n);
      body.verts = &verts;
      body.position = body.fixed ? verts.add_constant("position", 3, 1)
                                 : verts.add_attribute("position", 3, 1);
      body.position.update_value(cm.vertices);
      body.outputs.push_back({"position", body.position});
      if (body.fixed) {
        bodies_.push_back(std::move(body));
        continue;
      }
      s.add_minimize_target(body.position);

      auto hinges = cm.hinges();
      if (!hinges.empty()) {
        PrimitiveType& hp = mesh.add_primitive("hinges", Index(hinges.size()));
        std::vector<Index> hidx;
        for (auto& h : hinges) hidx.insert(hidx.end(), h.begin(), h.end());
        Connectivity& h2v = hp.add_connectivity("hinge2v", verts, hidx, 4);
        add_bending(s, hp, h2v, body.position, cm.vertices, bj.value("bending_stiffness", 0.055),
                    dt2_);
      }
      double density = bj.value("density", 0.3);  // area density
      std::vector<double> lumped(n, 0.0);
      for (size_t f = 0; f * 3 < cm.triangles.size(); ++f) {
        Eigen::Vector3d a, b, c;
        for (int d = 0; d < 3; ++d) {
          a[d] = cm.vertices[cm.triangles[f * 3] * 3 + d];
          b[d] = cm.vertices[cm.triangles[f * 3 + 1] * 3 + d];
          c[d] = cm.vertices[cm.triangles[f * 3 + 2] * 3 + d];
        }
        double share = density * 0.5 * ((b - a).cross(c - a)).norm() / 3.0;
        for (int k = 0; k < 3; ++k) lumped[cm.triangles[f * 3 + k]] += share;
      }
      body.inertial = true;
      Attr mass = verts.add_constant("mass", 1, 1);
      mass.update_value(lumped);
      body.x_tilde = verts.add_constant("x_tilde", 3, 1);
      body.x_tilde.update_value(cm.vertices);
      add_inertia(s, body.position, mass, body.x_tilde);
      body.velocity = VectorXd::Zero(n * 3);
    } else if (body.kind == "mass_spring") {
      Index m = bj.value("segments", Index(4));
      double seg_len = bj.value("segment_length", 0.1);
      auto anchor = vec3(bj.value("anchor", json::array()), {0, 0, 0});
      body.dim = 2;

      PrimitiveType& joints = mesh.add_primitive("joints", m);
      PrimitiveType& endpoint = mesh.add_primitive("endpoint", 1);
      Attr theta = joints.add_attribute("angle", 1, 1);
      std::vector<double> rest(m);
      if (bj.contains("rest_angles")) {
        for (Index i = 0; i < m; ++i) rest[i] = bj["rest_angles"][i];
      } else {
        double base = bj.value("rest_angle", -1.3);
        for (Index i = 0; i < m; ++i) rest[i] = i == 0 ? base : (i % 2 ? 2.2 : -2.2);
      }
      std::vector<double> init = rest;
      if (bj.contains("initial_angles"))
        for (Index i = 0; i < m; ++i) init[i] = bj["initial_angles"][i];
      theta.update_value(init);
      s.add_minimize_target(theta);
      add_angular_spring(s, theta, rest, bj.value("angular_stiffness", 20.0), dt2_);

      std::vector<Index> e2j(m);
      for (Index i = 0; i < m; ++i) e2j[i] = i;
      Connectivity& c = endpoint.add_connectivity("e2j", joints, e2j, m);
      Attr joined = Attr(&s, s.graph().join(c, theta.node()));  // m x 1
      Attr anchor_attr = constant_matrix(s, (MatrixXd(2, 1) << anchor[0], anchor[1]).finished());
      Attr pos = anchor_attr;
      Attr phi;
      for (Index i = 0; i < m; ++i) {
        Attr ti = joined.row(int(i));
        phi = i == 0 ? ti : phi + ti;  // accumulated absolute angle
        std::array<Attr, 2> comps{phi.cos(), phi.sin()};
        pos = pos + seg_len * stack(s, 2, 1, comps);
      }
      body.position = endpoint.add_attribute("position", pos);
      body.verts = &endpoint;
      body.inertial = true;
      Attr mass = endpoint.add_constant("mass", 1, 1);
      mass.update_value(std::vector<double>{bj.value("mass", 1.0)});
      body.x_tilde = endpoint.add_constant("x_tilde", 2, 1);
      Evaluator ev0(s);
      InstanceTensor p0 = ev0.evaluate(body.position);
      body.x_tilde.update_value(p0.data);
      add_inertia(s, body.position, mass, body.x_tilde);
      body.velocity = VectorXd::Zero(2);
      body.outputs.push_back({"position", body.position});
      body.outputs.push_back({"angle", theta});
    } else {
      throw ValidationError("unknown body kind '" + body.kind + "'");
    }
    bodies_.push_back(std::move(body));
  }

  if (config_.contact_enabled) {
    std::vector<Domain*> children;
    union_body_of_.clear();
    for (const std::string& name : config_.contact_bodies) {
      bool found = false;
      for (size_t bi = 0; bi < bodies_.size(); ++bi) {
        if (bodies_[bi].name != name) continue;
        if (bodies_[bi].dim != 3)
          throw ValidationError("contact body '" + name + "' must have 3D positions");
        children.push_back(bodies_[bi].verts);
        union_body_of_.push_back(int(bi));
        found = true;
      }
      if (!found) throw ValidationError("contact body '" + name + "' is not declared");
    }
    if (children.size() < 2) throw ValidationError("contact needs at least two bodies");
    Mesh& cm = s.add_mesh("contact");
    contact_union_ = &cm.add_primitive_union("vertices", std::move(children));
    Attr upos = contact_union_->add_attribute("position");
    pp_ = &cm.add_primitive("pp", 0, true);
    Connectivity& pp2v = pp_->add_connectivity("pp2v", *contact_union_, {}, 2);
    Attr pair_pos = pp_->add_attribute("positions", pp2v, upos);
    add_point_point_barrier(s, pair_pos, config_.contact_dhat, config_.contact_kappa, dt2_,
                            /*dynamic=*/true);
  }
}

// ---------------------------------------------------------------------------
// Driver

Index Simulation::refresh_dynamic_pairs() {
  if (!contact_union_) return 0;
  // gather current positions over the union children (in union order)
  std::vector<MatrixXd> pts;
  union_child_offset_.assign(1, 0);
  for (int bi : union_body_of_) {
    pts.push_back(body_positions(bodies_[bi]));
    union_child_offset_.push_back(union_child_offset_.back() + pts.back().rows());
  }
  std::vector<Index> idx;
  Index count = 0;
  for (size_t ca = 0; ca < pts.size(); ++ca) {
    for (size_t cb = ca + 1; cb < pts.size(); ++cb) {
      if (bodies_[union_body_of_[ca]].fixed && bodies_[union_body_of_[cb]].fixed) continue;
      for (Index i = 0; i < pts[ca].rows(); ++i) {
        for (Index j = 0; j < pts[cb].rows(); ++j) {
          double d2 = (pts[ca].row(i) - pts[cb].row(j)).squaredNorm();
          if (d2 < config_.contact_dhat) {
            idx.push_back(union_child_offset_[ca] + i);
            idx.push_back(union_child_offset_[cb] + j);
            ++count;
          }
        }
      }
    }
  }
  pp_->resize_dynamic(count, {{"pp2v", idx}});
  return count;
}

Index Simulation::pair_count() const { return pp_ ? pp_->instance_count() : 0; }

void Simulation::begin_frame() {
  for (Body& b : bodies_) {
    if (!b.inertial) continue;
    VectorXd p = vec_rm(body_positions(b));
    VectorXd xt = p + config_.dt * b.velocity;
    for (Index i = 0; i * b.dim < xt.size(); ++i)
      for (int d = 0; d < b.dim; ++d)
        xt[i * b.dim + d] += config_.dt * config_.dt * config_.gravity[d];
    std::vector<double> vals(xt.data(), xt.data() + xt.size());
    b.x_tilde.update_value(vals);
    b.prev_positions = p;
  }
}

void Simulation::end_frame() {
  for (Body& b : bodies_) {
    if (!b.inertial) continue;
    VectorXd p = vec_rm(body_positions(b));
    b.velocity = (p - b.prev_positions) / config_.dt;
    b.prev_positions = p;
  }
}

NewtonReport Simulation::newton_solve() {
  NewtonReport rep;
  Engine& eng = *engine_;
  auto ip_energy = [&]() -> double {
    try {
      return eng.total_energy();
    } catch (const NumericalError&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  for (int it = 0; it < config_.max_newton; ++it) {
    StepStats stats;
    auto t0 = std::chrono::steady_clock::now();
    std::vector<VectorXd> dx = eng.minimize_step(config_.pcg_tol, -1, &stats);
    auto t1 = std::chrono::steady_clock::now();
    rep.diff_seconds += stats.assemble_seconds;
    rep.pcg_seconds += std::chrono::duration<double>(t1 - t0).count() - stats.assemble_seconds;
    rep.pcg_iterations += stats.pcg_iterations;
    ++rep.iterations;

    VectorXd d(eng.layout().total_dofs);
    Index off = 0;
    for (const VectorXd& part : dx) {
      d.segment(off, part.size()) = part;
      off += part.size();
    }
    VectorXd x0 = eng.gather_targets();
    double e0 = ip_energy();

    // backtracking line search along -dx with plain sufficient decrease
    double alpha = 1.0;
    bool accepted = false;
    double e_new = e0;
    for (int ls = 0; ls < config_.max_line_search; ++ls) {
      eng.scatter_targets(x0 - alpha * d);
      e_new = ip_energy();
      if (e_new <= e0) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      eng.scatter_targets(x0);
      throw NumericalError("line search failed after " + std::to_string(config_.max_line_search) +
                           " halvings (newton iteration " + std::to_string(it) + ", energy " +
                           std::to_string(e0) + ")");
    }
    rep.energy = e_new;
    rep.energy_nonincreasing = rep.energy_nonincreasing && e_new <= e0;
    rep.last_step_norm = alpha * d.cwiseAbs().maxCoeff();

    // the active pair set tracks the accepted state
    if (contact_union_) refresh_dynamic_pairs();

    if (rep.last_step_norm / config_.dt < config_.newton_tol) {
      rep.converged = true;
      break;
    }
  }
  return rep;
}

NewtonReport Simulation::step() {
  begin_frame();
  if (contact_union_) refresh_dynamic_pairs();
  NewtonReport rep = newton_solve();
  end_frame();
  return rep;
}

void Simulation::write_frame(std::ostream& os, Index frame) {
  os << "frame " << frame << "\n";
  os << std::setprecision(17);
  for (Body& b : bodies_) {
    for (auto& [label, attr] : b.outputs) {
      InstanceTensor t = engine_->evaluator().evaluate(attr);
      int rc = t.shape.size();
      os << "body " << b.name << " " << label << " " << t.count() << " " << rc << "\n";
      for (Index i = 0; i < t.count(); ++i) {
        for (int d = 0; d < rc; ++d) os << (d ? " " : "") << t.data[i * rc + d];
        os << "\n";
      }
    }
  }
}

void Simulation::run(std::ostream& log) {
  namespace fs = std::filesystem;
  fs::create_directories(config_.output_dir);
  std::ofstream traj(fs::path(config_.output_dir) / "trajectory.txt");
  std::ofstream stats(fs::path(config_.output_dir) / "stats.csv");
  if (!traj || !stats) throw ValidationError("cannot write to output directory " + config_.output_dir);
  stats << "frame,newton,pcg,energy,max_step,pairs,nonincreasing\n";
  stats << std::setprecision(17);

  double diff_total = 0.0, pcg_total = 0.0;
  Index newton_total = 0, pcg_iters_total = 0;
  for (Index f = 1; f <= config_.frames; ++f) {
    NewtonReport rep = step();
    write_frame(traj, f);
    stats << f << "," << rep.iterations << "," << rep.pcg_iterations << "," << rep.energy << ","
          << rep.last_step_norm << "," << pair_count() << "," << (rep.energy_nonincreasing ? 1 : 0)
          << "\n";
    diff_total += rep.diff_seconds;
    pcg_total += rep.pcg_seconds;
    newton_total += rep.iterations;
    pcg_iters_total += rep.pcg_iterations;
  }
  log << "frames " << config_.frames << "\n"
      << "diff total (s) " << diff_total << "\n"
      << "diff average (ms) " << (newton_total ? 1e3 * diff_total / double(newton_total) : 0.0) << "\n"
      << "cg total (s) " << pcg_total << "\n"
      << "cg average (ms) " << (pcg_iters_total ? 1e3 * pcg_total / double(pcg_iters_total) : 0.0)
      << "\n"
      << "newton iterations " << newton_total << "\n"
      << "cg iterations " << pcg_iters_total << "\n";
}

// ---------------------------------------------------------------------------
// Finite-difference verification harness

FdReport fd_check(Engine& engine, double step) {
  FdReport rep;
  engine.refresh_dynamic();
  engine.assemble(/*project=*/false);
  VectorXd g = engine.gradient();
  MatrixXd h = engine.dense_hessian();
  const GradientLayout& layout = engine.layout();

  VectorXd x0 = engine.gather_targets();
  VectorXd g_fd(x0.size());
  MatrixXd h_fd(x0.size(), x0.size());
  for (Index j = 0; j < x0.size(); ++j) {
    VectorXd xp = x0, xm = x0;
    xp[j] += step;
    xm[j] -= step;
    engine.scatter_targets(xp);
    double ep = engine.total_energy();
    engine.assemble(false, true);
    VectorXd gp = engine.gradient();
    engine.scatter_targets(xm);
    double em = engine.total_energy();
    engine.assemble(false, true);
    VectorXd gm = engine.gradient();
    g_fd[j] = (ep - em) / (2 * step);
    h_fd.col(j) = (gp - gm) / (2 * step);
  }
  engine.scatter_targets(x0);
  engine.assemble(false);

  // Relative where the reference has scale, absolute near zero: differences
  // below the finite-difference noise floor never dominate a vanishing slice.
  auto rel = [](const MatrixXd& a, const MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff() / (1.0 + b.cwiseAbs().maxCoeff());
  };
  rep.grad_rel = rel(g, g_fd);
  rep.hess_rel = rel(h, h_fd);
  for (size_t t = 0; t < layout.targets.size(); ++t) {
    Index b = layout.boundaries[t], e = layout.boundaries[t + 1];
    FdReport::Entry entry;
    entry.name = layout.targets[t]->host->path() + "." + layout.targets[t]->name;
    entry.grad_rel = rel(g.segment(b, e - b), g_fd.segment(b, e - b));
    entry.hess_rel = rel(h.middleRows(b, e - b), h_fd.middleRows(b, e - b));
    rep.per_target.push_back(entry);
  }

  // per-energy breakdown: each energy's own gradient against fd of its total
  auto per_energy = [&](std::span<CompiledEnergy> group) {
    for (CompiledEnergy& e : group) {
      FdReport::Entry entry;
      entry.name = e.decl->name;
      if (e.bundle.zero() || e.instances == 0) {
        rep.per_energy.push_back(entry);
        continue;
      }
      VectorXd ge = VectorXd::Zero(layout.total_dofs);
      Evaluator& ev = engine.evaluator();
      for (Index i = 0; i < e.instances; ++i) {
        Eigen::RowVectorXd row = ev.eval_on(ev.plan_for(e.bundle.gradient), e.decl->host, i).row(0);
        for (int sl = 0; sl < e.kappa; ++sl) {
          const SlotEntry& se = e.slots[i * e.kappa + sl];
          if (se.index == 0) continue;
          ge.segment(se.index - 1, se.len) += row.segment(se.col, se.len).transpose();
        }
      }
      VectorXd ge_fd(x0.size());
      for (Index j = 0; j < x0.size(); ++j) {
        VectorXd xp = x0, xm = x0;
        xp[j] += step;
        xm[j] -= step;
        engine.scatter_targets(xp);
        double ep = ev.total(e.decl->root);
        engine.scatter_targets(xm);
        double em = ev.total(e.decl->root);
        ge_fd[j] = (ep - em) / (2 * step);
      }
      engine.scatter_targets(x0);
      entry.grad_rel = rel(ge, ge_fd);
      rep.per_energy.push_back(entry);
    }
  };
  per_energy(engine.static_group());
  per_energy(engine.dynamic_group());
  return rep;
}

std::string FdReport::text() const {
  std::ostringstream os;
  os << "gradient max relative error: " << grad_rel << "\n";
  os << "hessian  max relative error: " << hess_rel << "\n";
  os << "per target:\n";
  for (const Entry& e : per_target)
    os << "  " << e.name << "  grad " << e.grad_rel << "  hess " << e.hess_rel << "\n";
  os << "per energy:\n";
  for (const Entry& e : per_energy) os << "  " << e.name << "  grad " << e.grad_rel << "\n";
  return os.str();
}

}  // namespace relsim

// ---------------------------------------------------------------------------
// Command line

#include <CLI11.hpp>

#include <iostream>

namespace relsim {

namespace {

// Merged coordinate export of the static and dynamic matrices.
std::string merged_coordinate_text(Engine& eng) {
  std::map<std::pair<Index, Index>, double> entries;
  auto collect = [&](const BlockSparseHessian& h) {
    Index bi = 0;
    for (const auto& grp : h.groups()) {
      for (Index k = 0; k < grp.count; ++k, ++bi) {
        Index r0 = h.row_coordinate()[bi], c0 = h.col_coordinate()[bi];
        for (int a = 0; a < grp.rows; ++a) {
          for (int b = 0; b < grp.cols; ++b) {
            if (r0 == c0 && a > b) continue;
            double v = h.values()[grp.value_start + k * grp.rows * grp.cols + a * grp.cols + b];
            entries[{r0 + a, c0 + b}] += v;
          }
        }
      }
    }
  };
  collect(eng.static_hessian());
  collect(eng.dynamic_hessian());
  std::ostringstream os;
  os << std::setprecision(17);
  os << "%%MatrixMarket matrix coordinate real general\n";
  os << "% upper triangle of a symmetric matrix\n";
  os << eng.layout().total_dofs << " " << eng.layout().total_dofs << " " << entries.size() << "\n";
  for (auto& [rc, v] : entries) os << rc.first + 1 << " " << rc.second + 1 << " " << v << "\n";
  return os.str();
}

const Attribute* find_named_attribute(Scene& s, const std::string& name) {
  std::function<const Attribute*(Host&)> search = [&](Host& h) -> const Attribute* {
    if (const Attribute* a = h.find_attribute(name)) return a;
    return nullptr;
  };
  if (const Attribute* a = search(s)) return a;
  for (auto& mesh : s.meshes()) {
    if (const Attribute* a = search(*mesh)) return a;
    for (auto& d : mesh->domains())
      if (const Attribute* a = search(*d)) return a;
  }
  return nullptr;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"relational symbolic simulation engine"};
  app.require_subcommand(1);

  std::string config_path, attr_name, output_path;
  double fd_step = 1e-5;
  Index frames_override = -1, export_frame = 0;
  std::string outdir_override;
  int threads_override = 0;

  CLI::App* cmd_run = app.add_subcommand("run", "run a simulation from a scene config");
  cmd_run->add_option("config", config_path, "scene config file")->required();
  cmd_run->add_option("--frames", frames_override, "override the frame count");
  cmd_run->add_option("--output-dir", outdir_override, "override the output directory");
  cmd_run->add_option("--threads", threads_override, "worker thread count");

  CLI::App* cmd_fd = app.add_subcommand("fd-check", "finite-difference derivative verification");
  cmd_fd->add_option("config", config_path, "scene config file")->required();
  cmd_fd->add_option("--step", fd_step, "central difference step");

  CLI::App* cmd_dump = app.add_subcommand("dump-plan", "print the evaluation plan of an attribute");
  cmd_dump->add_option("config", config_path, "scene config file")->required();
  cmd_dump->add_option("--attr", attr_name, "named attribute to compile")->required();

  CLI::App* cmd_export = app.add_subcommand("export-matrix", "export the assembled global Hessian");
  cmd_export->add_option("config", config_path, "scene config file")->required();
  cmd_export->add_option("--frame", export_frame, "simulate this many frames first");
  cmd_export->add_option("--output", output_path, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    SimConfig config = SimConfig::load(config_path);
    if (frames_override >= 0) config.frames = frames_override;
    if (!outdir_override.empty()) config.output_dir = outdir_override;
    if (threads_override > 0) config.threads = threads_override;

    if (app.got_subcommand(cmd_run)) {
      Simulation sim(config);
      sim.run(std::cout);
    } else if (app.got_subcommand(cmd_fd)) {
      Simulation sim(config);
      FdReport rep = fd_check(sim.engine(), fd_step);
      std::cout << rep.text();
      if (rep.grad_rel > 1e-5 || rep.hess_rel > 1e-4) {
        std::cerr << "fd-check failed tolerance\n";
        return 3;
      }
    } else if (app.got_subcommand(cmd_dump)) {
      Simulation sim(config);
      const Attribute* a = find_named_attribute(sim.scene(), attr_name);
      if (!a) throw ValidationError("no attribute named '" + attr_name + "'");
      Evaluator& ev = sim.engine().evaluator();
      std::cout << ev.dump_with_modules(ev.plan_for(a->node));
    } else if (app.got_subcommand(cmd_export)) {
      Simulation sim(config);
      for (Index f = 0; f < export_frame; ++f) sim.step();
      sim.engine().refresh_dynamic();
      sim.engine().assemble(true);
      std::string text = merged_coordinate_text(sim.engine());
      if (output_path.empty()) {
        std::cout << text;
      } else {
        std::ofstream out(output_path);
        if (!out) throw ValidationError("cannot write '" + output_path + "'");
        out << text;
      }
    }
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace relsim
