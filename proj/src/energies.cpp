#include "relsim/energies.hpp"

#include <cmath>

namespace relsim {

namespace {

Attr point_of(Attr pair_positions, int which) { return pair_positions.index(which); }

std::string fresh_name(Host& h, const std::string& base) {
  if (!h.find_attribute(base)) return base;
  int k = 1;
  while (h.find_attribute(base + "_" + std::to_string(k))) ++k;
  return base + "_" + std::to_string(k);
}

}  // namespace

EnergyDecl& add_repulsive_energy(Scene& s, Attr pair_positions, Attr weight, bool dynamic,
                                 ProjectionMode mode) {
  Attr p0 = point_of(pair_positions, 0);
  Attr p1 = point_of(pair_positions, 1);
  Attr e = weight / (p0 - p1).norm();
  Host* host = e.host();
  Attr named = host->add_attribute(fresh_name(*host, "repulsive"), e);
  return s.add_energy(named, dynamic, mode);
}

Attr point_point_barrier_expr(Attr pair_positions, Attr dhat, Attr kappa) {
  Attr p0 = point_of(pair_positions, 0);
  Attr p1 = point_of(pair_positions, 1);
  Attr dvec = p1 - p0;
  Attr d = dvec.dot(dvec);  // squared distance
  Attr i5 = d / dhat;
  Attr len = d - dhat;
  Attr lg = i5.log();
  return kappa * len * len * lg * lg;
}

EnergyDecl& add_point_point_barrier(Scene& s, Attr pair_positions, double dhat, double kappa,
                                    Attr weight, bool dynamic, ProjectionMode mode) {
  Attr e = weight * point_point_barrier_expr(pair_positions, scalar(s, dhat), scalar(s, kappa));
  Host* host = e.host();
  Attr named = host->add_attribute(fresh_name(*host, "point_point"), e);
  return s.add_energy(named, dynamic, mode);
}

EnergyDecl& add_stable_neo_hookean(Scene& s, PrimitiveType& tets, Connectivity& t2v, Attr positions,
                                   std::span<const double> rest_positions, const ElasticMaterial& mat,
                                   Attr weight, bool via_deformation_gradient) {
  Index nt = tets.instance_count();
  if (t2v.arity != 4) throw DeclError("stable Neo-Hookean needs an arity-4 tet connectivity");

  // Per-tet rest constants: B^-1 with B = F_rest^T, and the signed volume.
  Attr binv = tets.add_constant(fresh_name(tets, "rest_shape_inv"), 3, 3);
  Attr vol = tets.add_constant(fresh_name(tets, "rest_volume"), 1, 1);
  std::vector<double> binv_vals(nt * 9), vol_vals(nt);
  for (Index t = 0; t < nt; ++t) {
    Eigen::Matrix3d fr;
    Index i0 = t2v.at(t, 0);
    for (int c = 0; c < 3; ++c) {
      Index ic = t2v.at(t, c + 1);
      for (int r = 0; r < 3; ++r)
        fr(r, c) = rest_positions[ic * 3 + r] - rest_positions[i0 * 3 + r];
    }
    double det = fr.determinant();
    if (std::abs(det) < 1e-14) throw ValidationError("degenerate rest tetrahedron " + std::to_string(t));
    Eigen::Matrix3d b = fr.transpose();
    Eigen::Matrix3d bi = b.inverse();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) binv_vals[t * 9 + r * 3 + c] = bi(r, c);
    vol_vals[t] = std::abs(det) / 6.0;
  }
  binv.update_value(binv_vals);
  vol.update_value(vol_vals);

  Attr joined = Attr(&s, s.graph().join(t2v, positions.node()));
  Attr x0 = joined.index(0);
  std::vector<Attr> entries;
  entries.reserve(9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) entries.push_back((joined.index(c + 1) - x0).row(r));
  Attr f = stack(s, 3, 3, entries);

  double mu = mat.mu(), lambda = mat.lambda();
  double alpha = 1.0 + 3.0 * mu / (4.0 * lambda);
  Attr fi_src = f;
  Host* host = &tets;
  Connectivity* f2t = nullptr;
  if (via_deformation_gradient) {
    // Concretize psi(F(x)) on a proxy primitive with a 1:1 relationship to the
    // tets; projection then operates on the 9x9 inner Hessian.
    Attr named_f = tets.add_attribute(fresh_name(tets, "deformation_gradient"), f);
    Mesh& mesh = static_cast<Mesh&>(*tets.parent());
    PrimitiveType& ftets = mesh.add_primitive(fresh_name(tets, "nh_elements"), nt, tets.is_dynamic());
    std::vector<Index> ident(nt);
    for (Index t = 0; t < nt; ++t) ident[t] = t;
    f2t = &ftets.add_connectivity("element2tet", tets, ident, 1);
    fi_src = ftets.add_attribute("deformation_gradient", *f2t, named_f).reshape(3, 3);
    host = &ftets;
  }

  Attr fi = fi_src.transpose().matmul(via_deformation_gradient
                                          ? Attr(&s, s.graph().join(*f2t, binv.node())).reshape(3, 3)
                                          : binv);
  Attr jdet = fi.det();
  Attr ic = fi.transpose().matmul(fi).trace();
  Attr vw = via_deformation_gradient ? Attr(&s, s.graph().join(*f2t, vol.node())).reshape(1, 1) : vol;
  Attr jshift = jdet - scalar(s, alpha);
  Attr psi = vw * weight *
             ((mu / 2.0) * (ic - 3.0) - (mu / 2.0) * (ic + 1.0).log() +
              (lambda / 2.0) * jshift * jshift);
  Attr named = host->add_attribute(fresh_name(*host, "stable_neo_hookean"), psi);
  return s.add_energy(named, tets.is_dynamic(),
                      via_deformation_gradient ? ProjectionMode::ReducedProject
                                               : ProjectionMode::FullProject);
}

EnergyDecl& add_affine_orthogonality(Scene& s, Attr affine_matrix, double stiffness, Attr weight) {
  Attr eye = constant_matrix(s, MatrixXd::Identity(3, 3));
  Attr m = affine_matrix.transpose().matmul(affine_matrix) - eye;
  Attr e = (0.5 * stiffness) * weight * m.transpose().matmul(m).trace();
  Host* host = e.host();
  Attr named = host->add_attribute(fresh_name(*host, "affine_orthogonality"), e);
  return s.add_energy(named, false);
}

EnergyDecl& add_bending(Scene& s, PrimitiveType& hinges, Connectivity& h2v, Attr positions,
                        std::span<const double> rest_positions, double stiffness, Attr weight) {
  if (h2v.arity != 4) throw DeclError("bending needs an arity-4 hinge connectivity");
  Index nh = hinges.instance_count();
  Attr linit = hinges.add_constant(fresh_name(hinges, "rest_edge_length"), 1, 1);
  std::vector<double> lv(nh);
  for (Index h = 0; h < nh; ++h) {
    Index a = h2v.at(h, 0), b = h2v.at(h, 1);
    double acc = 0;
    for (int d = 0; d < 3; ++d) {
      double diff = rest_positions[a * 3 + d] - rest_positions[b * 3 + d];
      acc += diff * diff;
    }
    lv[h] = std::sqrt(acc);
  }
  linit.update_value(lv);

  Attr joined = Attr(&s, s.graph().join(h2v, positions.node()));
  Attr x0 = joined.index(0), x1 = joined.index(1), x2 = joined.index(2), x3 = joined.index(3);
  Attr n1 = (x1 - x0).cross(x2 - x0);
  Attr n2 = (x3 - x0).cross(x1 - x0);
  Attr n1h = n1 / n1.norm();
  Attr n2h = n2 / n2.norm();
  Attr e = stiffness * weight * linit * (n1h - n2h).norm();
  Attr named = hinges.add_attribute(fresh_name(hinges, "bending"), e);
  return s.add_energy(named, false);
}

EnergyDecl& add_angular_spring(Scene& s, Attr theta, std::span<const double> rest_theta,
                               double stiffness, Attr weight) {
  Host* host = theta.host();
  Attr rest = host->add_constant(fresh_name(*host, "rest_angle"), 1, 1);
  rest.update_value(std::vector<double>(rest_theta.begin(), rest_theta.end()));
  Attr dev = theta - rest;
  Attr e = (0.5 * stiffness) * weight * dev * dev;
  Attr named = host->add_attribute(fresh_name(*host, "angular_spring"), e);
  return s.add_energy(named, false);
}

EnergyDecl& add_inertia(Scene& s, Attr position, Attr mass, Attr x_tilde) {
  Attr d = position - x_tilde;
  Attr e = 0.5 * mass * d.dot(d);
  Host* host = e.host();
  Attr named = host->add_attribute(fresh_name(*host, "inertia"), e);
  return s.add_energy(named, false);
}

}  // namespace relsim
