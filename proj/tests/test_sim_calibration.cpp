#include <gtest/gtest.h>

#include <cmath>

#include "fidplan/calibration.hpp"
#include "fidplan/fiducial_sim.hpp"

using namespace fidplan;

namespace {

Vec3 spherical(double rho, double theta, double phi) {
  return {rho * std::sin(theta) * std::cos(phi), rho * std::sin(theta) * std::sin(phi), rho * std::cos(theta)};
}

DatasetRecord synthetic(double rho, double theta, double lambda_star, double minor) {
  DatasetRecord r;
  r.p = spherical(rho, theta, 0.3);
  r.n_trials = 100;
  r.cov = SymMat3::diagonal(lambda_star, minor, minor * 0.5);
  r.lambda_star = lambda_star;
  return r;
}

}  // namespace

TEST(Camera, ProjectUnprojectRoundTrip) {
  const CameraModel cam;
  Rng rng(3);
  for (int t = 0; t < 2000; ++t) {
    const double theta = rng.uniform(0.0, 85.0) * M_PI / 180.0;
    const Vec3 dir = spherical(1.0, theta, rng.uniform(0, 2 * M_PI));
    const Vec2 px = project_point(cam, dir * rng.uniform(0.2, 3.0));
    if (px.x() < 0 || px.x() > cam.width || px.y() < 0 || px.y() > cam.height) continue;
    EXPECT_LT((unproject_point(cam, px) - dir).norm(), 1e-10);
  }
  EXPECT_EQ(project_point(cam, Vec3(0, 0, 1)), Vec2(cam.cx, cam.cy));
  EXPECT_THROW(project_point(cam, Vec3(0, 0, -1)), Error);
  EXPECT_THROW(unproject_point(cam, Vec2(-5, 0)), Error);
}

TEST(Camera, RejectsNonMonotoneDistortion) {
  CameraModel cam;
  cam.k = {-0.5, 0, 0, 0};
  EXPECT_THROW(cam.validate(), Error);
  const CameraModel back = CameraModel::from_json(CameraModel().to_json());
  EXPECT_DOUBLE_EQ(back.theta_max, CameraModel().theta_max);
}

TEST(Pnp, ExactWithoutNoise) {
  const CameraModel cam;
  const MarkerGeometry marker;
  Pose truth;
  truth.rotation = detail::exp_so3(Vec3(0.2, -0.1, 0.3));
  truth.translation = Vec3(0.3, -0.2, 1.1);
  std::vector<Vec2> px;
  for (const Vec3& c : marker.corners()) px.push_back(project_point(cam, truth.apply(c)));
  Pose init;
  init.translation = Vec3(0.25, -0.15, 1.0);
  const PnpResult r = solve_pnp(px, marker, cam, init);
  EXPECT_LT((r.pose.translation - truth.translation).norm(), 1e-9);
  EXPECT_LT((r.pose.rotation - truth.rotation).norm(), 1e-8);
  EXPECT_LT(r.rms, 1e-10);
}

TEST(Simulation, NoiseShrinksWithPixelNoise) {
  SimulationConfig cfg;
  cfg.trials = 300;
  const Vec3 p = spherical(1.0, 0.5, 1.0);
  cfg.sigma_px = 0.5;
  const double a = simulate_position(cfg, p, 1).lambda_star;
  cfg.sigma_px = 0.25;
  const double b = simulate_position(cfg, p, 1).lambda_star;
  // Small-noise regime: covariance scales with sigma^2.
  EXPECT_NEAR(a / b, 4.0, 0.4);
}

TEST(Simulation, DominantAxisFollowsLineOfSight) {
  SimulationConfig cfg;
  cfg.trials = 2000;
  for (double theta : {0.0, 0.4, 0.8}) {
    const DatasetRecord r = simulate_position(cfg, spherical(1.2, theta, 2.0), 17);
    ASSERT_FALSE(r.skipped) << r.reason;
    EXPECT_LT(r.align_deg, 5.0) << "theta " << theta;
  }
}

TEST(Simulation, DatasetIndependentOfThreadCount) {
  SimulationConfig cfg;
  cfg.trials = 60;
  cfg.seed = 5;
  PositionGrid g;
  g.n_rho = 3;
  g.n_theta = 3;
  g.n_phi = 2;
  const auto pos = g.positions();
  cfg.threads = 1;
  const auto a = generate_dataset(cfg, pos);
  cfg.threads = 3;
  const auto b = generate_dataset(cfg, pos);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].to_json().dump(), b[i].to_json().dump());
}

TEST(Simulation, UnseenMarkerIsSkipped) {
  SimulationConfig cfg;
  cfg.trials = 40;
  const DatasetRecord r = simulate_position(cfg, Vec3(0, 0, -1), 1);
  EXPECT_TRUE(r.skipped);
  EXPECT_FALSE(r.reason.empty());
  EXPECT_THROW(empirical_covariance(std::vector<Vec3>(5, Vec3::Zero())), Error);
}

TEST(PositionGrid, HalfOffsetIsDisjointFromNodes) {
  PositionGrid nodes;
  nodes.n_rho = 5;
  nodes.n_theta = 5;
  nodes.n_phi = 4;
  PositionGrid mids = nodes;
  mids.n_rho = 4;
  mids.n_theta = 4;
  mids.half_offset = true;
  const auto a = nodes.positions();
  const auto b = mids.positions();
  EXPECT_EQ(a.size(), 100u);
  EXPECT_EQ(b.size(), 64u);
  for (const auto& x : a)
    for (const auto& y : b) EXPECT_GT((x - y).norm(), 1e-6);
}

TEST(Fit, CellValueIsSafetyTimesMax) {
  FitConfig cfg;
  cfg.rho_min = 0.5;
  cfg.rho_max = 1.5;
  cfg.theta_max = 1.0;
  cfg.rho_cells = 2;
  cfg.theta_cells = 2;
  std::vector<DatasetRecord> data;
  const double rhos[] = {0.75, 1.25}, thetas[] = {0.25, 0.75};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double base = 1e-6 * (1 + i + 2 * j);
      data.push_back(synthetic(rhos[i], thetas[j], base, 1e-8));
      data.push_back(synthetic(rhos[i] + 0.1, thetas[j] + 0.1, 3 * base, 2e-8));
    }
  const FitResult r = fit_predictor(data, cfg);
  EXPECT_TRUE(r.warnings.empty());
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(r.predictor.grid()[i][j], 1.1 * 3e-6 * (1 + i + 2 * j), 1e-18);
  EXPECT_NEAR(r.predictor.lambda_i(), 1.1 * 2e-8, 1e-20);
}

TEST(Fit, EmptyBoundaryCellIsCoverageError) {
  FitConfig cfg;
  cfg.rho_min = 0.5;
  cfg.rho_max = 1.5;
  cfg.theta_max = 1.0;
  cfg.rho_cells = 2;
  cfg.theta_cells = 2;
  const std::vector<DatasetRecord> data{synthetic(0.7, 0.2, 1e-6, 1e-8)};
  try {
    fit_predictor(data, cfg);
    FAIL() << "expected a coverage error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Coverage);
  }
}

TEST(Fit, EmptyInteriorCellIsFilledWithWarning) {
  FitConfig cfg;
  cfg.rho_min = 0.5;
  cfg.rho_max = 2.0;
  cfg.theta_max = 1.2;
  cfg.rho_cells = 3;
  cfg.theta_cells = 3;
  std::vector<DatasetRecord> data;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (!(i == 1 && j == 1)) data.push_back(synthetic(0.75 + 0.5 * i, 0.2 + 0.4 * j, 1e-6 * (1 + i), 1e-8));
  const FitResult r = fit_predictor(data, cfg);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_GT(r.predictor.grid()[1][1], 0.0);
}

TEST(Conservativeness, ScaledPredictorIsConservative) {
  SimulationConfig sim;
  sim.trials = 200;
  sim.seed = 9;
  PositionGrid train;
  train.rho_min = 0.3;
  train.rho_max = 1.5;
  train.theta_max = 60.0 * M_PI / 180.0;
  train.n_rho = 5;
  train.n_theta = 5;
  train.n_phi = 3;
  PositionGrid test = train;
  test.n_rho = 4;
  test.n_theta = 4;
  test.half_offset = true;
  const auto d_train = generate_dataset(sim, train.positions());
  sim.seed = 10;
  const auto d_test = generate_dataset(sim, test.positions());
  FitConfig fc;
  fc.rho_min = train.rho_min;
  fc.rho_max = train.rho_max;
  fc.theta_max = train.theta_max;
  fc.rho_cells = 5;
  fc.theta_cells = 5;
  const FitResult fit = fit_predictor(d_train, fc);
  const CertaintyParams params{0.02, 0.9};
  const auto base = evaluate_conservativeness(fit.predictor, d_test, params);
  const auto inflated = evaluate_conservativeness(fit.predictor.scaled(3.0), d_test, params);
  EXPECT_EQ(base.n, d_test.size());
  EXPECT_GE(inflated.frac_conservative, base.frac_conservative);
  EXPECT_DOUBLE_EQ(inflated.frac_conservative, 1.0);
  EXPECT_DOUBLE_EQ(inflated.worst_gap, 0.0);
  EXPECT_GE(inflated.fused_c_predicted, 0.0);
}
