#pragma once

#include "relsim/scene.hpp"

#include <span>

namespace relsim {

struct ElasticMaterial {
  double youngs_modulus = 1e4;
  double poisson_ratio = 0.3;

  double mu() const { return youngs_modulus / (2.0 * (1.0 + poisson_ratio)); }
  double lambda() const {
    return youngs_modulus * poisson_ratio /
           ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio));
  }
};

// Bundled energies, all expressed through the public frontend operations.
// `weight` multiplies every instance (typically the timestep-squared scale of
// the incremental potential); pass scalar(scene, 1.0) for none.

// 1 / ||p0 - p1|| over a pair primitive with joined positions (2 x 3).
EnergyDecl& add_repulsive_energy(Scene& s, Attr pair_positions, Attr weight, bool dynamic,
                                 ProjectionMode mode = ProjectionMode::FullProject);

// kappa (d - dhat)^2 log(d/dhat)^2 with d the squared distance.
EnergyDecl& add_point_point_barrier(Scene& s, Attr pair_positions, double dhat, double kappa,
                                    Attr weight, bool dynamic,
                                    ProjectionMode mode = ProjectionMode::FullProject);
Attr point_point_barrier_expr(Attr pair_positions, Attr dhat, Attr kappa);

// Stable Neo-Hookean over tetrahedra: F = [x1-x0, x2-x0, x3-x0], F_I = F^T B^-1
// with B fixed by the rest pose, psi per the log-regularized formulation.
// With via_deformation_gradient the energy is re-hosted on a proxy primitive
// joined 1:1 to the tets so the projected matrix shrinks from 12x12 to 9x9.
EnergyDecl& add_stable_neo_hookean(Scene& s, PrimitiveType& tets, Connectivity& t2v, Attr positions,
                                   std::span<const double> rest_positions, const ElasticMaterial& mat,
                                   Attr weight, bool via_deformation_gradient = false);

// 0.5 * stiffness * ||A^T A - I||_F^2 per affine body.
EnergyDecl& add_affine_orthogonality(Scene& s, Attr affine_matrix, double stiffness, Attr weight);

// stiffness * l_init * ||N1 - N2|| over hinge stencils (x0, x1 edge; x2, x3 wings).
EnergyDecl& add_bending(Scene& s, PrimitiveType& hinges, Connectivity& h2v, Attr positions,
                        std::span<const double> rest_positions, double stiffness, Attr weight);

// 0.5 * stiffness * (theta - rest)^2 per joint.
EnergyDecl& add_angular_spring(Scene& s, Attr theta, std::span<const double> rest_theta,
                               double stiffness, Attr weight);

// 0.5 * mass * ||x - x_tilde||^2; x_tilde is driver-updated each frame.
EnergyDecl& add_inertia(Scene& s, Attr position, Attr mass, Attr x_tilde);

}  // namespace relsim
