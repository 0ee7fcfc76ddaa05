#pragma once

#include "relsim/energies.hpp"
#include "relsim/engine.hpp"

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace relsim {

struct SimConfig {
  std::string name = "scene";
  double dt = 1e-2;
  Index frames = 10;
  double newton_tol = 1e-2;  // max DoF update per step, normalized by dt
  double pcg_tol = 1e-4;
  int max_newton = 64;
  int max_line_search = 32;
  std::array<double, 3> gravity{0.0, -9.8, 0.0};
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  int threads = 1;

  bool contact_enabled = false;
  double contact_dhat = 1e-2;  // activation threshold on the squared distance
  double contact_kappa = 1e3;
  std::vector<std::string> contact_bodies;

  std::string config_path;
  std::string raw_bodies;  // JSON array of body declarations

  static SimConfig load(const std::string& path);
};

// Simple mesh containers for loaders and generators.
struct TriMesh {
  std::vector<double> vertices;  // x y z per vertex
  std::vector<Index> triangles;  // 3 per face
  std::vector<std::array<Index, 4>> hinges() const;  // interior edges: x0 x1 edge, x2 x3 wings
};

struct TetMesh {
  std::vector<double> vertices;
  std::vector<Index> tets;  // 4 per element
};

TriMesh make_grid_cloth(Index nx, Index ny, double spacing, const std::array<double, 3>& origin);
TetMesh make_tet_block(Index nx, Index ny, Index nz, double spacing,
                       const std::array<double, 3>& origin);
TriMesh load_obj(const std::string& path);
// Plain text: vertex file has "x y z" lines; element file one simplex per line.
std::vector<double> load_vertex_file(const std::string& path);
std::vector<std::vector<Index>> load_element_file(const std::string& path);

struct NewtonReport {
  int iterations = 0;
  Index pcg_iterations = 0;
  bool converged = false;
  double last_step_norm = 0.0;
  double energy = 0.0;
  bool energy_nonincreasing = true;
  double diff_seconds = 0.0;
  double pcg_seconds = 0.0;
};

// One rigid/soft/fixed participant built from the config.
struct Body {
  std::string name;
  std::string kind;
  Domain* verts = nullptr;  // contact and output vertices
  Attr position;            // per-vertex position attribute (data/computed/constant)
  bool fixed = false;
  bool inertial = false;
  int dim = 3;
  Attr x_tilde;       // inertia anchor, driver-updated
  VectorXd velocity;  // position-space
  VectorXd prev_positions;
  std::vector<std::pair<std::string, Attr>> outputs;  // label -> attribute to dump
};

// Owns the scene built from a config plus the per-frame driver state.
class Simulation {
 public:
  explicit Simulation(const SimConfig& config);

  Scene& scene() { return *scene_; }
  Engine& engine() { return *engine_; }
  const SimConfig& config() const { return config_; }
  const std::vector<Body>& bodies() const { return bodies_; }

  // All-pairs proximity filter over the contact union; activates pairs from
  // distinct bodies with squared distance below dhat.
  Index refresh_dynamic_pairs();
  Index pair_count() const;

  NewtonReport newton_solve();
  NewtonReport step();  // x_tilde update, pair refresh, newton, velocity update

  double total_energy() { return engine_->total_energy(); }

  void write_frame(std::ostream& os, Index frame);
  void run(std::ostream& log);  // writes trajectory.txt and stats.csv into output_dir

 private:
  void build_from_config();
  void begin_frame();
  void end_frame();
  MatrixXd body_positions(const Body& b);

  SimConfig config_;
  std::unique_ptr<Scene> scene_;
  std::unique_ptr<Engine> engine_;
  std::vector<Body> bodies_;
  Attr dt2_;
  PrimitiveUnion* contact_union_ = nullptr;
  PrimitiveType* pp_ = nullptr;
  std::vector<int> union_body_of_;     // contact-union child -> body index
  std::vector<Index> union_child_offset_;
};

struct FdReport {
  struct Entry {
    std::string name;
    double grad_rel = 0.0;
    double hess_rel = 0.0;
  };
  std::vector<Entry> per_target;
  std::vector<Entry> per_energy;  // gradient only
  double grad_rel = 0.0;
  double hess_rel = 0.0;
  std::string text() const;
};

// Central differences of the total energy against the assembled gradient and
// of the gradient against the unprojected Hessian.
FdReport fd_check(Engine& engine, double step);

int run_cli(int argc, char** argv);

}  // namespace relsim
