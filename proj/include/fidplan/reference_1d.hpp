#pragma once

// The one-dimensional two-beacon example: noise grows as r^2, certainty is
// 1 - sigma, and a task needs certainty 0.95.

#include <cmath>
#include <vector>

#include "fidplan/noise_model.hpp"
#include "fidplan/planner.hpp"

namespace fidplan {

struct World1D {
  double b1 = -0.1;
  double b2 = 0.1;
  double task = 0.7;
  double c_min = 0.95;

  static double noise(double r) { return r * r; }
  static double certainty(double sigma) { return 1.0 - sigma; }
};

/// Scalar fusion through the same recursive update used for covariances.
inline double fuse_scalar(const std::vector<double>& sigmas) {
  std::vector<SymMat3> covs;
  for (double s : sigmas) covs.push_back(SymMat3::diagonal(s, s, s));
  return fuse_covariances(covs).matrix()(0, 0);
}

/// Fused noise at x from beacons at the given positions.
inline double fused_sigma_at(double x, const std::vector<double>& beacons) {
  std::vector<double> s;
  for (double b : beacons) s.push_back(World1D::noise(std::abs(x - b)));
  return fuse_scalar(s);
}

struct Result1D {
  /// Exact coverage radius, sqrt(0.05).
  double r_cov_exact = 0.0;
  /// The radius the walk uses, rounded to three decimals as reported.
  double r_cov = 0.0;
  std::vector<MoveMarker> moves;
  std::vector<double> final_beacons;
  double fused_sigma = 0.0;
  double certainty = 0.0;
};

inline Result1D solve_1d_example(const World1D& w = {}) {
  Result1D out;
  out.r_cov_exact = coverage_radius_1d(World1D::noise, w.c_min, World1D::certainty, 1.0);
  out.r_cov = std::round(out.r_cov_exact * 1000.0) / 1000.0;

  std::vector<MarkerState> beacons{{1, Vec3(w.b1, 0, 0)}, {2, Vec3(w.b2, 0, 0)}};
  const std::vector<Vec3> targets{Vec3(w.task, 0, 0), Vec3(w.task, 0, 0)};
  auto covered = [&](const std::vector<MarkerState>& ms) {
    std::vector<double> xs;
    for (const auto& m : ms) xs.push_back(m.position.x());
    return World1D::certainty(fused_sigma_at(w.task, xs)) >= w.c_min;
  };
  for (const Action& a : walk_to_coverage(beacons, targets, out.r_cov, nullptr, covered))
    out.moves.push_back(std::get<MoveMarker>(a));

  for (const auto& m : beacons) out.final_beacons.push_back(m.position.x());
  out.fused_sigma = fused_sigma_at(w.task, out.final_beacons);
  out.certainty = World1D::certainty(out.fused_sigma);
  return out;
}

}  // namespace fidplan
