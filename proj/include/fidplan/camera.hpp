#pragma once

// Kannala-Brandt (equidistant polynomial) fisheye camera.

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <string>

#include "fidplan/error.hpp"
#include "fidplan/numeric.hpp"

namespace fidplan {

struct CameraModel {
  double fx = 285.0;
  double fy = 285.0;
  double cx = 640.0;
  double cy = 480.0;
  std::array<double, 4> k{-0.02, 0.002, 0.0, 0.0};
  int width = 1280;
  int height = 960;
  /// Largest incidence angle the lens accepts, radians.
  double theta_max = 95.0 * M_PI / 180.0;

  /// r(theta) = theta + k1 theta^3 + k2 theta^5 + k3 theta^7 + k4 theta^9
  double distort(double theta) const {
    const double t2 = theta * theta;
    return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))));
  }

  double distort_derivative(double theta) const {
    const double t2 = theta * theta;
    return 1.0 + t2 * (3 * k[0] + t2 * (5 * k[1] + t2 * (7 * k[2] + t2 * 9 * k[3])));
  }

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw Error(ErrorKind::InvalidInput, "camera focal lengths must be positive");
    if (!(width > 0 && height > 0)) throw Error(ErrorKind::InvalidInput, "camera image size must be positive");
    if (!(theta_max > 0 && theta_max < M_PI)) throw Error(ErrorKind::InvalidInput, "camera theta_max must lie in (0, pi)");
    // r(theta) must be strictly increasing on [0, theta_max].
    constexpr int kSteps = 2000;
    for (int i = 0; i <= kSteps; ++i)
      if (!(distort_derivative(theta_max * i / kSteps) > 0.0))
        throw Error(ErrorKind::InvalidInput, "camera distortion polynomial is not monotone on [0, theta_max]");
  }

  nlohmann::json to_json() const {
    return {{"fx", fx}, {"fy", fy}, {"cx", cx}, {"cy", cy}, {"k", k},
            {"width", width}, {"height", height}, {"theta_max_deg", theta_max * 180.0 / M_PI}};
  }

  static CameraModel from_json(const nlohmann::json& j) {
    CameraModel c;
    try {
      c.fx = j.at("fx").get<double>();
      c.fy = j.at("fy").get<double>();
      c.cx = j.at("cx").get<double>();
      c.cy = j.at("cy").get<double>();
      c.k = j.at("k").get<std::array<double, 4>>();
      c.width = j.at("width").get<int>();
      c.height = j.at("height").get<int>();
      c.theta_max = j.at("theta_max_deg").get<double>() * M_PI / 180.0;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Parse, std::string("camera: ") + e.what());
    }
    c.validate();
    return c;
  }
};

/// Pixel coordinates of camera-frame point `x`.
inline Vec2 project_point(const CameraModel& cam, const Vec3& x) {
  const double rxy = std::hypot(x.x(), x.y());
  if (!(rxy > 0.0 || x.z() > 0.0)) throw Error(ErrorKind::Projection, "point is at or behind the camera center");
  const double theta = std::atan2(rxy, x.z());
  if (theta > cam.theta_max) throw Error(ErrorKind::Projection, "point lies beyond the lens field of view");
  const double r = cam.distort(theta);
  if (rxy == 0.0) return {cam.cx, cam.cy};
  return {cam.cx + cam.fx * r * x.x() / rxy, cam.cy + cam.fy * r * x.y() / rxy};
}

/// Unit ray through pixel `px`; the incidence angle is recovered by Newton
/// iteration on r(theta).
inline Vec3 unproject_point(const CameraModel& cam, const Vec2& px) {
  if (!(px.x() >= 0.0 && px.x() <= cam.width && px.y() >= 0.0 && px.y() <= cam.height))
    throw Error(ErrorKind::Undistortion, "pixel lies outside the image");
  const double mx = (px.x() - cam.cx) / cam.fx;
  const double my = (px.y() - cam.cy) / cam.fy;
  const double rd = std::hypot(mx, my);
  if (rd == 0.0) return Vec3::UnitZ();

  double theta = rd;
  bool converged = false;
  for (int it = 0; it < 50; ++it) {
    const double f = cam.distort(theta) - rd;
    const double step = f / cam.distort_derivative(theta);
    theta -= step;
    if (!std::isfinite(theta)) break;
    if (std::abs(step) < 1e-14 * std::max(1.0, theta)) {
      converged = true;
      break;
    }
  }
  if (!converged || theta < 0.0 || theta > cam.theta_max)
    throw Error(ErrorKind::Undistortion, "Newton inversion of the distortion polynomial diverged");
  const double s = std::sin(theta);
  return {s * mx / rd, s * my / rd, std::cos(theta)};
}

}  // namespace fidplan
