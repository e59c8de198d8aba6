#pragma once

// Positional noise of a fiducial marker as a function of where it sits
// relative to the camera, fusion of several such estimates, and the
// closed-form lower bound on placement success.

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fidplan/error.hpp"
#include "fidplan/numeric.hpp"

namespace fidplan {

inline constexpr int kPredictorFormatVersion = 1;

/// Range in meters and incidence angle (radians from the optical axis) of a
/// camera-frame position. The optical axis is +z.
struct RangeAngle {
  double rho = 0.0;
  double theta = 0.0;
};

inline RangeAngle range_angle(const Vec3& p) {
  const double rho = p.norm();
  if (!(rho > 0.0) || !std::isfinite(rho)) throw Error(ErrorKind::Domain, "relative position must be finite and nonzero");
  return {rho, std::acos(std::clamp(p.z() / rho, -1.0, 1.0))};
}

/// Calibrated map (range, incidence angle) -> largest noise eigenvalue (m^2)
/// plus a fixed bound on the two minor eigenvalues.
///
/// The domain [rho_min, rho_max] x [theta_min, theta_max] is split into a
/// uniform grid of cells; grid[i][j] is the value at the center of cell
/// (i, j). Queries interpolate bilinearly between centers and hold the edge
/// value between the outermost centers and the domain bound. Queries outside
/// the domain are errors.
class EigenvaluePredictor {
 public:
  EigenvaluePredictor() = default;
  EigenvaluePredictor(double rho_min, double rho_max, double theta_min, double theta_max,
                      std::vector<std::vector<double>> grid, double lambda_i)
      : rho_min_(rho_min), rho_max_(rho_max), theta_min_(theta_min), theta_max_(theta_max),
        grid_(std::move(grid)), lambda_i_(lambda_i) {
    validate();
  }

  /// Single-cell predictor returning `lambda_star` everywhere in the domain.
  static EigenvaluePredictor constant(double lambda_star, double lambda_i, double rho_min, double rho_max,
                                      double theta_max) {
    return {rho_min, rho_max, 0.0, theta_max, {{lambda_star}}, lambda_i};
  }

  double rho_min() const { return rho_min_; }
  double rho_max() const { return rho_max_; }
  double theta_min() const { return theta_min_; }
  double theta_max() const { return theta_max_; }
  double lambda_i() const { return lambda_i_; }
  const std::vector<std::vector<double>>& grid() const { return grid_; }
  std::size_t rho_cells() const { return grid_.size(); }
  std::size_t theta_cells() const { return grid_.empty() ? 0 : grid_.front().size(); }

  bool contains(double rho, double theta) const {
    return rho >= rho_min_ && rho <= rho_max_ && theta >= theta_min_ && theta <= theta_max_;
  }
  bool contains(const Vec3& p) const {
    const double rho = p.norm();
    if (!(rho > 0.0)) return false;
    const RangeAngle ra = range_angle(p);
    return contains(ra.rho, ra.theta);
  }

  /// Predicted largest eigenvalue at (rho, theta).
  double operator()(double rho, double theta) const {
    if (!(rho >= rho_min_)) throw domain_error("rho", rho, "below rho_min", rho_min_);
    if (!(rho <= rho_max_)) throw domain_error("rho", rho, "above rho_max", rho_max_);
    if (!(theta >= theta_min_)) throw domain_error("theta", theta, "below theta_min", theta_min_);
    if (!(theta <= theta_max_)) throw domain_error("theta", theta, "above theta_max", theta_max_);
    const auto [i0, i1, fi] = locate(rho, rho_min_, rho_max_, rho_cells());
    const auto [j0, j1, fj] = locate(theta, theta_min_, theta_max_, theta_cells());
    const double a = grid_[i0][j0] * (1 - fj) + grid_[i0][j1] * fj;
    const double b = grid_[i1][j0] * (1 - fj) + grid_[i1][j1] * fj;
    return a * (1 - fi) + b * fi;
  }

  double operator()(const Vec3& p) const {
    const RangeAngle ra = range_angle(p);
    return (*this)(ra.rho, ra.theta);
  }

  /// Copy with every grid value multiplied by `factor`.
  EigenvaluePredictor scaled(double factor) const {
    auto g = grid_;
    for (auto& row : g)
      for (auto& v : row) v *= factor;
    return {rho_min_, rho_max_, theta_min_, theta_max_, std::move(g), lambda_i_};
  }

  nlohmann::json to_json() const {
    return {{"version", kPredictorFormatVersion},
            {"rho_bounds", {rho_min_, rho_max_}},
            {"theta_bounds", {theta_min_, theta_max_}},
            {"grid", grid_},
            {"lambda_i", lambda_i_}};
  }

  static EigenvaluePredictor from_json(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != kPredictorFormatVersion)
        throw Error(ErrorKind::Parse, "unsupported predictor version " + j.at("version").dump());
      const auto rb = j.at("rho_bounds").get<std::vector<double>>();
      const auto tb = j.at("theta_bounds").get<std::vector<double>>();
      if (rb.size() != 2 || tb.size() != 2) throw Error(ErrorKind::Parse, "predictor bounds must have two entries");
      return {rb[0], rb[1], tb[0], tb[1], j.at("grid").get<std::vector<std::vector<double>>>(),
              j.at("lambda_i").get<double>()};
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Parse, std::string("predictor: ") + e.what());
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Parse) throw;
      throw Error(ErrorKind::Parse, std::string("predictor: ") + e.what());
    }
  }

 private:
  struct Cell {
    std::size_t lo, hi;
    double frac;
  };

  static Cell locate(double x, double lo, double hi, std::size_t n) {
    if (n == 1 || hi <= lo) return {0, 0, 0.0};
    const double pos = (x - lo) / (hi - lo) * static_cast<double>(n) - 0.5;
    if (pos <= 0.0) return {0, 0, 0.0};
    if (pos >= static_cast<double>(n - 1)) return {n - 1, n - 1, 0.0};
    const auto i = static_cast<std::size_t>(pos);
    return {i, i + 1, pos - static_cast<double>(i)};
  }

  static Error domain_error(const char* what, double value, const char* rel, double bound) {
    std::ostringstream os;
    os << what << " = " << value << " is " << rel << " (" << bound << ")";
    return Error(ErrorKind::Domain, os.str());
  }

  void validate() const {
    if (!(rho_min_ > 0.0 && rho_max_ >= rho_min_))
      throw Error(ErrorKind::InvalidInput, "predictor rho bounds must satisfy 0 < rho_min <= rho_max");
    if (!(theta_min_ >= 0.0 && theta_max_ >= theta_min_ && theta_max_ <= M_PI))
      throw Error(ErrorKind::InvalidInput, "predictor theta bounds must satisfy 0 <= theta_min <= theta_max <= pi");
    if (!(lambda_i_ > 0.0 && std::isfinite(lambda_i_)))
      throw Error(ErrorKind::InvalidInput, "predictor lambda_i must be positive");
    if (grid_.empty() || grid_.front().empty()) throw Error(ErrorKind::InvalidInput, "predictor grid is empty");
    for (const auto& row : grid_) {
      if (row.size() != grid_.front().size()) throw Error(ErrorKind::InvalidInput, "predictor grid is ragged");
      for (double v : row)
        if (!(v >= 0.0 && std::isfinite(v))) throw Error(ErrorKind::InvalidInput, "predictor values must be finite and >= 0");
    }
  }

  double rho_min_ = 0.0, rho_max_ = 0.0, theta_min_ = 0.0, theta_max_ = 0.0;
  std::vector<std::vector<double>> grid_;
  double lambda_i_ = 0.0;
};

struct CertaintyParams {
  /// Acceptance radius of a slot, meters.
  double alpha = 0.02;
  /// Required per-step success probability.
  double c_min = 0.95;

  void validate() const {
    if (!(alpha > 0.0)) throw Error(ErrorKind::InvalidInput, "alpha must be positive");
    if (!(c_min > 0.0 && c_min < 1.0)) throw Error(ErrorKind::InvalidInput, "c_min must lie in (0, 1)");
  }
};

/// Unit vector orthogonal to v1, built from the coordinate axis least
/// parallel to it (ties go to the lower axis).
inline Vec3 orthogonal_to(const Vec3& v1) {
  int axis = 0;
  for (int i = 1; i < 3; ++i)
    if (std::abs(v1[i]) < std::abs(v1[axis])) axis = i;
  return v1.cross(Vec3::Unit(axis)).normalized();
}

/// Covariance with eigenvalues {lambda_star, lambda_i, lambda_i} whose
/// dominant axis points along `p`.
inline SymMat3 covariance_along(const Vec3& p, double lambda_star, double lambda_i) {
  const Vec3 v1 = p.normalized();
  const Vec3 v2 = orthogonal_to(v1);
  const Vec3 v3 = v1.cross(v2);
  Mat3 basis;
  basis << v1, v2, v3;
  const Mat3 s = Eigen::Vector3d(lambda_star, lambda_i, lambda_i).asDiagonal();
  return SymMat3::from_matrix(basis * s * basis.transpose());
}

/// Predicted noise covariance of a marker at camera-frame position `p`.
inline SymMat3 predict_covariance(const Vec3& p, const EigenvaluePredictor& pred) {
  if (!p.allFinite()) throw Error(ErrorKind::Domain, "relative position is not finite");
  return covariance_along(p, pred(p), pred.lambda_i());
}

/// Reciprocal 1-norm condition number of a 3x3 matrix (0 when singular).
inline double rcond1(const Mat3& a) {
  const double det = a.determinant();
  if (det == 0.0 || !std::isfinite(det)) return 0.0;
  const Mat3 inv = a.inverse();
  auto norm1 = [](const Mat3& m) { return m.cwiseAbs().colwise().sum().maxCoeff(); };
  const double k = norm1(a) * norm1(inv);
  return std::isfinite(k) && k > 0 ? 1.0 / k : 0.0;
}

inline constexpr double kNearSingularRcond = 1e-12;

/// Sequential covariance fusion: S <- S1, then for each further Si,
/// K = S (S + Si)^-1 and S <- S - K S.
inline SymMat3 fuse_covariances(const std::vector<SymMat3>& sigmas) {
  if (sigmas.empty()) throw Error(ErrorKind::InvalidInput, "fuse_covariances: empty list");
  for (std::size_t i = 0; i < sigmas.size(); ++i)
    if (!sigmas[i].is_psd())
      throw Error(ErrorKind::InvalidInput, "fuse_covariances: element " + std::to_string(i) + " is not PSD");

  Mat3 s = sigmas.front().matrix();
  for (std::size_t i = 1; i < sigmas.size(); ++i) {
    const Mat3 sum = s + sigmas[i].matrix();
    if (rcond1(sum) < kNearSingularRcond)
      throw Error(ErrorKind::NearSingular, "fuse_covariances: (S + S_i) is near-singular at index " + std::to_string(i));
    // K S = S (S + S_i)^-1 S, solved rather than inverted.
    s = s - s * sum.ldlt().solve(s);
    s = 0.5 * (s + s.transpose());
  }
  return SymMat3::from_matrix(s);
}

/// erf(alpha / (sqrt(lambda) sqrt(2)))^3 for the largest eigenvalue lambda.
inline double certainty_from_lambda(double lambda_star, double alpha) {
  if (!(lambda_star > 0.0)) return 1.0;
  const double e = fidplan::erf(alpha / (std::sqrt(lambda_star) * std::sqrt(2.0)));
  return e * e * e;
}

/// erf(alpha / sqrt(2 lambda*))^3 for x ~ N(0, sigma). This is the chance of
/// landing in the cube [-alpha, alpha]^3 under isotropic lambda* noise, so it
/// bounds the cube probability from below; it can exceed P(||x|| <= alpha)
/// when the noise is close to isotropic.
inline double certainty_lower_bound(const SymMat3& sigma, const CertaintyParams& params) {
  if (!sigma.is_psd()) throw Error(ErrorKind::InvalidInput, "certainty_lower_bound: covariance is not PSD");
  return certainty_from_lambda(lambda_max(sigma), params.alpha);
}

/// Largest r in [0, search_max] with cert_fn(noise_fn(r)) >= c_min, found by
/// bisection to 1e-9. Assumes the composition is nonincreasing in r.
inline double coverage_radius_1d(const std::function<double(double)>& noise_fn, double c_min,
                                 const std::function<double(double)>& cert_fn, double search_max = 10.0) {
  auto ok = [&](double r) { return cert_fn(noise_fn(r)) >= c_min; };
  if (!ok(0.0)) throw Error(ErrorKind::Infeasible, "coverage_radius_1d: requirement unreachable even at r = 0");
  if (ok(search_max)) return search_max;
  double lo = 0.0, hi = search_max;
  while (hi - lo > 1e-9) {
    const double mid = 0.5 * (lo + hi);
    (ok(mid) ? lo : hi) = mid;
  }
  return lo;
}

/// Probe layout used to measure a marker array's coverage radius.
struct CoverageProbeConfig {
  /// Camera heights above the marker plane, meters.
  std::vector<double> hover_heights{0.3};
  /// Markers sit evenly on a circle of this radius (meters) about the origin;
  /// a single marker sits at the origin.
  double array_radius = 0.1;
  /// Probe rings between the center and the radius under test.
  int rings = 8;
  /// Probe angles per ring.
  int angles = 24;
  /// Upper end of the bisection, meters.
  double search_max = 5.0;
  /// Bisection stops once the bracket is narrower than this, meters.
  double tolerance = 1e-4;
  /// Probes horizontally closer than this to any marker are skipped, meters.
  /// A robot never hovers over the column a marker stands on.
  double min_standoff = 0.0;
};

namespace detail {

inline std::vector<Vec3> marker_array(int n, double radius) {
  std::vector<Vec3> out;
  if (n == 1) return {Vec3::Zero()};
  for (int i = 0; i < n; ++i) {
    const double a = 2.0 * M_PI * i / n;
    out.emplace_back(radius * std::cos(a), radius * std::sin(a), 0.0);
  }
  return out;
}

/// Fused certainty for a downward-looking camera at `camera` (world frame,
/// z up) viewing markers lying in the z = 0 plane. Returns -1 when a marker
/// falls outside the predictor domain.
inline double array_certainty(const Vec3& camera, const std::vector<Vec3>& markers,
                              const EigenvaluePredictor& pred, const CertaintyParams& params) {
  std::vector<SymMat3> covs;
  covs.reserve(markers.size());
  for (const Vec3& m : markers) {
    const Vec3 w = m - camera;
    const Vec3 p(w.x(), -w.y(), -w.z());
    if (!pred.contains(p)) return -1.0;
    covs.push_back(predict_covariance(p, pred));
  }
  return certainty_lower_bound(fuse_covariances(covs), params);
}

inline bool array_covers(double r, const std::vector<Vec3>& markers, const EigenvaluePredictor& pred,
                         const CertaintyParams& params, const CoverageProbeConfig& cfg, int refine) {
  const int rings = cfg.rings * refine;
  const int angles = cfg.angles * refine;
  auto probe = [&](const Vec3& cam) {
    for (const Vec3& m : markers)
      if (std::hypot(cam.x() - m.x(), cam.y() - m.y()) < cfg.min_standoff) return true;
    return array_certainty(cam, markers, pred, params) >= params.c_min;
  };
  for (double h : cfg.hover_heights) {
    if (!probe(Vec3(0, 0, h))) return false;
    for (int ring = 1; ring <= rings; ++ring) {
      const double rr = r * ring / rings;
      for (int a = 0; a < angles; ++a) {
        const double ang = 2.0 * M_PI * a / angles;
        if (!probe(Vec3(rr * std::cos(ang), rr * std::sin(ang), h))) return false;
      }
    }
  }
  return true;
}

}  // namespace detail

/// Whether every probe within horizontal radius r of the array center meets c_min.
inline bool coverage_holds(double r, const EigenvaluePredictor& pred, const CertaintyParams& params, int n_markers,
                           const CoverageProbeConfig& cfg = {}, int refine = 1) {
  return detail::array_covers(r, detail::marker_array(n_markers, cfg.array_radius), pred, params, cfg, refine);
}

/// Largest horizontal radius (meters) around an array of `n_markers` markers
/// inside which the fused certainty bound meets c_min at every probe.
///
/// Bisection runs on the configured probe grid; the result is then shrunk
/// until a 4x denser grid also passes, so any coarser re-check holds too.
inline double coverage_radius_3d(const EigenvaluePredictor& pred, const CertaintyParams& params, int n_markers,
                                 const CoverageProbeConfig& cfg = {}) {
  params.validate();
  if (n_markers < 1) throw Error(ErrorKind::InvalidInput, "coverage_radius_3d: need at least one marker");
  if (cfg.hover_heights.empty()) throw Error(ErrorKind::InvalidInput, "coverage_radius_3d: no hover heights");
  const auto markers = detail::marker_array(n_markers, cfg.array_radius);
  auto ok = [&](double r, int refine) { return detail::array_covers(r, markers, pred, params, cfg, refine); };

  if (!ok(0.0, 1)) throw Error(ErrorKind::Infeasible, "coverage_radius_3d: c_min not met even directly above the array");
  double lo = 0.0, hi = cfg.search_max;
  if (ok(hi, 1)) {
    lo = hi;
  } else {
    while (hi - lo > cfg.tolerance) {
      const double mid = 0.5 * (lo + hi);
      (ok(mid, 1) ? lo : hi) = mid;
    }
  }
  while (lo > 0.0 && !ok(lo, 4)) lo = std::max(0.0, lo - std::max(cfg.tolerance, 0.01 * lo));
  return lo;
}

}  // namespace fidplan
