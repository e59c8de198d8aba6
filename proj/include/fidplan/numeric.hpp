#pragma once

// Small fixed-size numeric kernel shared by every other module.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "fidplan/error.hpp"

namespace fidplan {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Absolute tolerance on negative eigenvalues for a matrix to count as PSD.
inline constexpr double kPsdEpsilon = 1e-10;

/// Symmetric 3x3 matrix holding only its upper triangle.
class SymMat3 {
 public:
  SymMat3() = default;
  SymMat3(double xx, double xy, double xz, double yy, double yz, double zz)
      : e_{xx, xy, xz, yy, yz, zz} {}

  /// Symmetrizes (A + A^T) / 2.
  static SymMat3 from_matrix(const Mat3& a) {
    return {a(0, 0), 0.5 * (a(0, 1) + a(1, 0)), 0.5 * (a(0, 2) + a(2, 0)),
            a(1, 1), 0.5 * (a(1, 2) + a(2, 1)), a(2, 2)};
  }
  static SymMat3 diagonal(double a, double b, double c) { return {a, 0, 0, b, 0, c}; }
  static SymMat3 identity() { return diagonal(1, 1, 1); }
  static SymMat3 zero() { return {}; }

  double operator()(int r, int c) const { return e_[index(r, c)]; }

  Mat3 matrix() const {
    Mat3 m;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) = (*this)(r, c);
    return m;
  }

  /// Row-major upper triangle: xx, xy, xz, yy, yz, zz.
  const std::array<double, 6>& upper() const { return e_; }

  double trace() const { return e_[0] + e_[3] + e_[5]; }

  double frobenius_norm() const {
    const auto& e = e_;
    return std::sqrt(e[0] * e[0] + e[3] * e[3] + e[5] * e[5] +
                     2.0 * (e[1] * e[1] + e[2] * e[2] + e[4] * e[4]));
  }

  bool all_finite() const {
    return std::all_of(e_.begin(), e_.end(), [](double v) { return std::isfinite(v); });
  }

  /// True when every eigenvalue is >= -eps.
  bool is_psd(double eps = kPsdEpsilon) const;

  friend SymMat3 operator+(const SymMat3& a, const SymMat3& b) {
    SymMat3 r;
    for (int i = 0; i < 6; ++i) r.e_[i] = a.e_[i] + b.e_[i];
    return r;
  }
  friend SymMat3 operator-(const SymMat3& a, const SymMat3& b) {
    SymMat3 r;
    for (int i = 0; i < 6; ++i) r.e_[i] = a.e_[i] - b.e_[i];
    return r;
  }
  friend SymMat3 operator*(double s, const SymMat3& a) {
    SymMat3 r;
    for (int i = 0; i < 6; ++i) r.e_[i] = s * a.e_[i];
    return r;
  }
  friend bool operator==(const SymMat3&, const SymMat3&) = default;

 private:
  static int index(int r, int c) {
    if (r > c) std::swap(r, c);
    static constexpr int kIdx[3][3] = {{0, 1, 2}, {1, 3, 4}, {2, 4, 5}};
    return kIdx[r][c];
  }

  std::array<double, 6> e_{};
};

struct EigenDecomp3 {
  /// Descending: values[0] >= values[1] >= values[2].
  std::array<double, 3> values{};
  /// Column i is the unit eigenvector of values[i].
  Mat3 vectors = Mat3::Identity();

  Vec3 vector(int i) const { return vectors.col(i); }
  double largest() const { return values[0]; }
};

/// Cyclic Jacobi eigendecomposition of a symmetric 3x3 matrix.
///
/// Sweeps until the off-diagonal Frobenius norm drops below 1e-14 ||A||_F
/// or 50 sweeps have run. Eigenvalues come back in descending order with a
/// right-handed orthonormal basis.
inline EigenDecomp3 eig_sym3(const SymMat3& a) {
  if (!a.all_finite()) throw Error(ErrorKind::InvalidInput, "eig_sym3: non-finite matrix entry");

  Mat3 m = a.matrix();
  Mat3 v = Mat3::Identity();
  const double scale = a.frobenius_norm();
  const double tol = 1e-14 * scale;

  auto off_norm = [&m] {
    return std::sqrt(2.0 * (m(0, 1) * m(0, 1) + m(0, 2) * m(0, 2) + m(1, 2) * m(1, 2)));
  };

  for (int sweep = 0; sweep < 50 && scale > 0.0 && off_norm() > tol; ++sweep) {
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double apq = m(p, q);
        if (apq == 0.0) continue;
        // Rotation angle that annihilates m(p, q); numerically stable form.
        const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < 3; ++k) {
          const double mkp = m(k, p), mkq = m(k, q);
          m(k, p) = c * mkp - s * mkq;
          m(k, q) = s * mkp + c * mkq;
        }
        for (int k = 0; k < 3; ++k) {
          const double mpk = m(p, k), mqk = m(q, k);
          m(p, k) = c * mpk - s * mqk;
          m(q, k) = s * mpk + c * mqk;
        }
        m(p, q) = m(q, p) = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&m](int i, int j) { return m(i, i) > m(j, j); });

  EigenDecomp3 out;
  for (int i = 0; i < 3; ++i) {
    out.values[i] = m(order[i], order[i]);
    out.vectors.col(i) = v.col(order[i]);
  }
  if (out.vectors.determinant() < 0) out.vectors.col(2) = -out.vectors.col(2);
  return out;
}

inline bool SymMat3::is_psd(double eps) const {
  if (!all_finite()) return false;
  return eig_sym3(*this).values[2] >= -eps;
}

/// Largest eigenvalue.
inline double lambda_max(const SymMat3& a) { return eig_sym3(a).values[0]; }

/// Error function. Backed by the C library erf, which is accurate to a few ulp.
inline double erf(double x) { return std::erf(x); }

/// xoshiro256** seeded through splitmix64. Deterministic across platforms,
/// unlike the std:: distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Mixes a master seed with a stream index into an independent child seed.
  static std::uint64_t derive(std::uint64_t master, std::uint64_t index) {
    std::uint64_t x = master ^ (index * 0xd1b54a32d192ed03ULL);
    splitmix64(x);
    return splitmix64(x);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  /// Standard normal via Box-Muller, caching the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * M_PI * u2;
    spare_ = rad * std::sin(ang);
    has_spare_ = true;
    return rad * std::cos(ang);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> s_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Square-root factor L with L L^T = cov, built from the eigendecomposition
/// so that singular PSD matrices are accepted.
inline Mat3 psd_factor(const SymMat3& cov) {
  if (!cov.all_finite()) throw Error(ErrorKind::InvalidInput, "covariance has non-finite entries");
  const EigenDecomp3 ed = eig_sym3(cov);
  if (ed.values[2] < -kPsdEpsilon) throw Error(ErrorKind::InvalidInput, "covariance is not positive semidefinite");
  Mat3 l = ed.vectors;
  for (int i = 0; i < 3; ++i) l.col(i) *= std::sqrt(std::max(ed.values[i], 0.0));
  return l;
}

inline std::vector<Vec3> sample_gaussian(const Vec3& mean, const SymMat3& cov, std::size_t n, std::uint64_t seed) {
  const Mat3 l = psd_factor(cov);
  Rng rng(seed);
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 z(rng.normal(), rng.normal(), rng.normal());
    out.push_back(mean + l * z);
  }
  return out;
}

/// Does the segment origin + t * dir, t in (0, 1], touch the closed box?
inline bool ray_aabb_intersect(const Vec3& origin, const Vec3& dir, const Vec3& box_min, const Vec3& box_max) {
  if (dir.squaredNorm() == 0.0) throw Error(ErrorKind::InvalidInput, "ray_aabb_intersect: zero direction");
  double t_enter = -std::numeric_limits<double>::infinity();
  double t_exit = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    if (dir[i] == 0.0) {
      if (origin[i] < box_min[i] || origin[i] > box_max[i]) return false;
      continue;
    }
    double t0 = (box_min[i] - origin[i]) / dir[i];
    double t1 = (box_max[i] - origin[i]) / dir[i];
    if (t0 > t1) std::swap(t0, t1);
    t_enter = std::max(t_enter, t0);
    t_exit = std::min(t_exit, t1);
    if (t_enter > t_exit) return false;
  }
  return t_exit > 0.0 && t_enter <= 1.0;
}

}  // namespace fidplan
