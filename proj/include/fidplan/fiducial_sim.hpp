#pragma once

// Detection simulator: square marker corners are projected through the
// fisheye model, perturbed with Gaussian pixel noise, undistorted back to
// rays and fed to a Perspective-n-Point solve. Repeating this yields the
// empirical position-noise covariance at a given relative position.

#include <Eigen/Cholesky>
#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fidplan/camera.hpp"
#include "fidplan/error.hpp"
#include "fidplan/numeric.hpp"

namespace fidplan {

struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
};

struct MarkerGeometry {
  /// Side length, meters.
  double side = 0.15;

  /// Corners in the marker frame, counter-clockwise, z = 0.
  std::array<Vec3, 4> corners() const {
    const double h = 0.5 * side;
    return {Vec3(-h, -h, 0), Vec3(h, -h, 0), Vec3(h, h, 0), Vec3(-h, h, 0)};
  }

  void validate() const {
    if (!(side > 0.0)) throw Error(ErrorKind::InvalidInput, "marker side must be positive");
  }
};

struct PnpResult {
  Pose pose;
  /// RMS of the angular ray residuals, radians.
  double rms = 0.0;
  int iterations = 0;
};

struct DetectionSample {
  Pose truth;
  Vec3 estimated_position = Vec3::Zero();
  Mat3 estimated_rotation = Mat3::Identity();
  /// Observed minus reprojected corner pixels.
  std::array<Vec2, 4> residuals{};
};

namespace detail {

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Mat3 exp_so3(const Vec3& w) {
  const double angle = w.norm();
  if (angle < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

/// Orthonormal pair spanning the plane orthogonal to unit vector `b`.
inline std::pair<Vec3, Vec3> tangent_basis(const Vec3& b) {
  const Vec3 helper = std::abs(b.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 e1 = b.cross(helper).normalized();
  return {e1, b.cross(e1)};
}

}  // namespace detail

/// Pose minimizing the squared angular residual between the undistorted
/// corner rays and the rays to the transformed marker corners. Damped
/// Gauss-Newton (Levenberg-Marquardt) on SO(3) x R^3 from `init`.
inline PnpResult solve_pnp(const std::vector<Vec2>& corners_px, const MarkerGeometry& marker, const CameraModel& cam,
                           const Pose& init) {
  if (corners_px.size() < 4) throw Error(ErrorKind::InvalidInput, "solve_pnp: need at least four correspondences");
  const auto model = marker.corners();
  const std::size_t n = std::min<std::size_t>(corners_px.size(), model.size());

  struct Obs {
    Vec3 e1, e2, c;
  };
  std::vector<Obs> obs;
  obs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 b = unproject_point(cam, corners_px[i]);
    const auto [e1, e2] = detail::tangent_basis(b);
    obs.push_back({e1, e2, model[i]});
  }

  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Vec6 = Eigen::Matrix<double, 6, 1>;

  auto cost_of = [&](const Pose& p) {
    double c = 0.0;
    for (const Obs& o : obs) {
      const Vec3 d = p.apply(o.c).normalized();
      const double r1 = o.e1.dot(d), r2 = o.e2.dot(d);
      c += r1 * r1 + r2 * r2;
    }
    return c;
  };

  auto normal_equations = [&](const Pose& p, Mat6& h, Vec6& g) {
    h.setZero();
    g.setZero();
    for (const Obs& o : obs) {
      const Vec3 rc = p.rotation * o.c;
      const Vec3 x = rc + p.translation;
      const double len = x.norm();
      const Vec3 d = x / len;
      const Mat3 dn = (Mat3::Identity() - d * d.transpose()) / len;
      Eigen::Matrix<double, 3, 6> dx;
      dx.leftCols<3>() = -detail::skew(rc);
      dx.rightCols<3>() = Mat3::Identity();
      Eigen::Matrix<double, 2, 6> j;
      j.row(0) = o.e1.transpose() * dn * dx;
      j.row(1) = o.e2.transpose() * dn * dx;
      const Eigen::Vector2d r(o.e1.dot(d), o.e2.dot(d));
      h.noalias() += j.transpose() * j;
      g.noalias() += j.transpose() * r;
    }
  };

  auto retract = [](const Pose& p, const Vec6& step) {
    Pose q;
    q.rotation = detail::exp_so3(step.head<3>()) * p.rotation;
    q.translation = p.translation + step.tail<3>();
    return q;
  };

  // Full Hessian by central differences of the analytic gradient. Needed in
  // the flat valley of the planar-target ambiguity, where the Gauss-Newton
  // approximation drops the residual curvature and converges only linearly.
  auto full_hessian = [&](const Pose& p, Mat6& h) {
    Mat6 unused;
    Vec6 gp, gm;
    for (int k = 0; k < 6; ++k) {
      const double eps = k < 3 ? 1e-6 : 1e-6 * (1.0 + p.translation.norm());
      Vec6 e = Vec6::Zero();
      e[k] = eps;
      normal_equations(retract(p, e), unused, gp);
      normal_equations(retract(p, -e), unused, gm);
      h.col(k) = (gp - gm) / (2.0 * eps);
    }
    h = 0.5 * (h + h.transpose()).eval();
  };

  Pose pose = init;
  double cost = cost_of(pose);
  double mu = -1.0;
  Mat6 h;
  Vec6 g;
  int it = 0;
  bool converged = false;
  constexpr int kGaussNewtonIterations = 8;
  for (; it < 100 && !converged; ++it) {
    normal_equations(pose, h, g);
    if (g.lpNorm<Eigen::Infinity>() < 1e-15) {
      converged = true;
      break;
    }
    if (it >= kGaussNewtonIterations) full_hessian(pose, h);
    if (mu < 0) mu = 1e-6 * h.diagonal().cwiseAbs().maxCoeff();
    bool accepted = false;
    while (!accepted) {
      Mat6 damped = h;
      damped.diagonal() += mu * h.diagonal().cwiseAbs().cwiseMax(1e-12);
      const Vec6 step = damped.ldlt().solve(-g);
      const Pose cand = retract(pose, step);
      const double cand_cost = step.allFinite() ? cost_of(cand) : std::numeric_limits<double>::infinity();
      if (cand_cost <= cost) {
        const double rel_drop = cost > 0 ? (cost - cand_cost) / cost : 0.0;
        pose = cand;
        cost = cand_cost;
        mu = std::max(mu * 0.1, 1e-12);
        accepted = true;
        const double scale = 1.0 + pose.translation.norm();
        if (step.norm() < 1e-10 * scale || rel_drop < 1e-15) converged = true;
      } else {
        mu *= 10.0;
        if (mu > 1e12) {
          // No descent direction left: already at a local minimum to machine precision.
          converged = true;
          break;
        }
      }
    }
  }
  if (!converged) throw Error(ErrorKind::Estimation, "solve_pnp: no convergence after 100 iterations");

  PnpResult out;
  out.pose = pose;
  out.rms = std::sqrt(cost / (2.0 * static_cast<double>(obs.size())));
  out.iterations = it;
  return out;
}

/// One noisy detection drawing pixel noise from `rng`.
inline DetectionSample simulate_detection(const CameraModel& cam, const MarkerGeometry& marker, const Pose& pose,
                                          double sigma_px, Rng& rng) {
  const auto model = marker.corners();
  std::vector<Vec2> px(4);
  for (int i = 0; i < 4; ++i) {
    try {
      px[i] = project_point(cam, pose.apply(model[i]));
    } catch (const Error& e) {
      throw Error(ErrorKind::Visibility, std::string("corner ") + std::to_string(i) + " not visible: " + e.what());
    }
    px[i] += Vec2(sigma_px * rng.normal(), sigma_px * rng.normal());
  }
  PnpResult est;
  try {
    est = solve_pnp(px, marker, cam, pose);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Undistortion) throw Error(ErrorKind::Visibility, e.what());
    throw;
  }
  DetectionSample s;
  s.truth = pose;
  s.estimated_position = est.pose.translation;
  s.estimated_rotation = est.pose.rotation;
  for (int i = 0; i < 4; ++i) s.residuals[i] = px[i] - project_point(cam, est.pose.apply(model[i]));
  return s;
}

inline DetectionSample simulate_detection(const CameraModel& cam, const MarkerGeometry& marker, const Pose& pose,
                                          double sigma_px, std::uint64_t seed) {
  Rng rng(seed);
  return simulate_detection(cam, marker, pose, sigma_px, rng);
}

struct EmpiricalCovariance {
  SymMat3 cov;
  Vec3 mean = Vec3::Zero();
};

inline constexpr std::size_t kMinCovarianceSamples = 30;

/// Unbiased sample covariance and mean of a set of positions.
inline EmpiricalCovariance empirical_covariance(const std::vector<Vec3>& xs) {
  if (xs.size() < kMinCovarianceSamples)
    throw Error(ErrorKind::SampleSize, "empirical_covariance: need at least " + std::to_string(kMinCovarianceSamples) +
                                           " samples, got " + std::to_string(xs.size()));
  Vec3 mean = Vec3::Zero();
  for (const Vec3& x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  Mat3 acc = Mat3::Zero();
  for (const Vec3& x : xs) {
    const Vec3 d = x - mean;
    acc.noalias() += d * d.transpose();
  }
  acc /= static_cast<double>(xs.size() - 1);
  return {SymMat3::from_matrix(acc), mean};
}

inline EmpiricalCovariance empirical_covariance(const std::vector<DetectionSample>& samples) {
  std::vector<Vec3> xs;
  xs.reserve(samples.size());
  for (const auto& s : samples) xs.push_back(s.estimated_position);
  return empirical_covariance(xs);
}

/// Angle in degrees between the dominant eigenvector of `cov` and `p`
/// (sign of the eigenvector ignored).
inline double alignment_deg(const SymMat3& cov, const Vec3& p) {
  const Vec3 v1 = eig_sym3(cov).vector(0);
  const double c = std::min(1.0, std::abs(v1.dot(p.normalized())));
  return std::acos(c) * 180.0 / M_PI;
}

/// Relative positions on a (range, incidence angle, azimuth) lattice.
///
/// With `half_offset` each axis samples the midpoints of n equal cells
/// instead of n evenly spaced nodes that include both bounds, which gives a
/// grid disjoint from the node lattice.
struct PositionGrid {
  double rho_min = 0.15;
  double rho_max = 2.0;
  int n_rho = 25;
  /// Incidence angle range, radians.
  double theta_max = 70.0 * M_PI / 180.0;
  int n_theta = 25;
  int n_phi = 10;
  bool half_offset = false;

  std::size_t size() const {
    return static_cast<std::size_t>(n_rho) * static_cast<std::size_t>(n_theta) * static_cast<std::size_t>(n_phi);
  }

  static double axis(double lo, double hi, int n, int i, bool half) {
    if (half) return lo + (hi - lo) * (i + 0.5) / n;
    if (n == 1) return 0.5 * (lo + hi);
    return lo + (hi - lo) * i / (n - 1);
  }

  std::vector<Vec3> positions() const {
    if (n_rho < 1 || n_theta < 1 || n_phi < 1) throw Error(ErrorKind::InvalidInput, "position grid counts must be >= 1");
    std::vector<Vec3> out;
    out.reserve(size());
    for (int i = 0; i < n_rho; ++i) {
      const double rho = axis(rho_min, rho_max, n_rho, i, half_offset);
      for (int j = 0; j < n_theta; ++j) {
        const double theta = half_offset ? axis(0.0, theta_max, n_theta, j, true)
                                         : (n_theta == 1 ? 0.0 : theta_max * j / (n_theta - 1));
        for (int k = 0; k < n_phi; ++k) {
          const double phi = 2.0 * M_PI * (k + (half_offset ? 0.5 : 0.0)) / n_phi;
          out.emplace_back(rho * std::sin(theta) * std::cos(phi), rho * std::sin(theta) * std::sin(phi),
                           rho * std::cos(theta));
        }
      }
    }
    return out;
  }
};

struct DatasetRecord {
  Vec3 p = Vec3::Zero();
  int n_trials = 0;
  SymMat3 cov;
  double lambda_star = 0.0;
  double align_deg = 0.0;
  bool skipped = false;
  std::string reason;

  nlohmann::json to_json() const {
    if (skipped) return {{"p", {p.x(), p.y(), p.z()}}, {"skipped", true}, {"reason", reason}};
    return {{"p", {p.x(), p.y(), p.z()}}, {"n_trials", n_trials}, {"cov", cov.upper()},
            {"lambda_star", lambda_star}, {"align_deg", align_deg}};
  }

  static DatasetRecord from_json(const nlohmann::json& j) {
    DatasetRecord r;
    try {
      const auto p = j.at("p").get<std::array<double, 3>>();
      r.p = Vec3(p[0], p[1], p[2]);
      if (j.value("skipped", false)) {
        r.skipped = true;
        r.reason = j.value("reason", "");
        return r;
      }
      r.n_trials = j.at("n_trials").get<int>();
      const auto c = j.at("cov").get<std::array<double, 6>>();
      r.cov = SymMat3(c[0], c[1], c[2], c[3], c[4], c[5]);
      r.lambda_star = j.at("lambda_star").get<double>();
      r.align_deg = j.at("align_deg").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Parse, std::string("dataset record: ") + e.what());
    }
    return r;
  }
};

struct SimulationConfig {
  CameraModel camera;
  MarkerGeometry marker;
  double sigma_px = 0.5;
  int trials = 1000;
  std::uint64_t seed = 1;
  /// Worker threads; 0 picks the hardware concurrency.
  unsigned threads = 0;
};

/// Empirical noise statistics at one camera-frame marker position. The
/// marker faces the camera (identity relative rotation).
inline DatasetRecord simulate_position(const SimulationConfig& cfg, const Vec3& p, std::uint64_t seed) {
  DatasetRecord rec;
  rec.p = p;
  Pose pose;
  pose.translation = p;
  Rng rng(seed);
  std::vector<Vec3> xs;
  xs.reserve(static_cast<std::size_t>(cfg.trials));
  try {
    for (int t = 0; t < cfg.trials; ++t)
      xs.push_back(simulate_detection(cfg.camera, cfg.marker, pose, cfg.sigma_px, rng).estimated_position);
    const EmpiricalCovariance ec = empirical_covariance(xs);
    rec.n_trials = cfg.trials;
    rec.cov = ec.cov;
    rec.lambda_star = lambda_max(ec.cov);
    rec.align_deg = alignment_deg(ec.cov, p);
  } catch (const Error& e) {
    rec.skipped = true;
    rec.reason = e.what();
  }
  return rec;
}

/// Runs `simulate_position` over every position. Each position draws from
/// its own stream derived from (seed, index), so results do not depend on
/// thread count or scheduling.
inline std::vector<DatasetRecord> generate_dataset(const SimulationConfig& cfg, const std::vector<Vec3>& positions) {
  cfg.camera.validate();
  cfg.marker.validate();
  if (cfg.trials < 1) throw Error(ErrorKind::InvalidInput, "generate_dataset: trials must be >= 1");
  std::vector<DatasetRecord> out(positions.size());
  unsigned threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, positions.size())));
  auto work = [&](unsigned worker) {
    for (std::size_t i = worker; i < positions.size(); i += threads)
      out[i] = simulate_position(cfg, positions[i], Rng::derive(cfg.seed, i));
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
  }
  return out;
}

}  // namespace fidplan
