#pragma once

// Brute-force reference answers for small planner instances.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "fidplan/numeric.hpp"
#include "fidplan/planner.hpp"

namespace oracle {

using fidplan::Vec3;

/// Largest distance from a member to the member mean.
inline double spread(const std::vector<Vec3>& pts, const std::vector<int>& idx) {
  Vec3 c = Vec3::Zero();
  for (int i : idx) c += pts[i];
  c /= static_cast<double>(idx.size());
  double w = 0.0;
  for (int i : idx) w = std::max(w, (pts[i] - c).norm());
  return w;
}

/// Fewest blocks over all set partitions where each block has >= m points
/// and spread <= r; 0 when no partition qualifies.
inline int min_partition_k(const std::vector<Vec3>& pts, double r, std::size_t m, double slack = 1e-9) {
  const int n = static_cast<int>(pts.size());
  std::vector<int> label(n, 0);
  int best = 0;
  std::function<void(int, int)> rec = [&](int i, int used) {
    if (best && used >= best) return;
    if (i == n) {
      std::vector<std::vector<int>> blocks(used);
      for (int p = 0; p < n; ++p) blocks[label[p]].push_back(p);
      for (const auto& b : blocks)
        if (b.size() < m || spread(pts, b) > r + slack) return;
      best = used;
      return;
    }
    for (int b = 0; b <= used; ++b) {
      label[i] = b;
      rec(i + 1, std::max(used, b + 1));
    }
  };
  rec(0, 0);
  return best;
}

inline double path_length(const std::vector<Vec3>& centers, const Vec3& start, const std::vector<std::size_t>& order) {
  double len = 0.0;
  Vec3 prev = start;
  for (auto i : order) {
    len += (centers[i] - prev).norm();
    prev = centers[i];
  }
  return len;
}

/// Shortest open path from `start` through every center.
inline double best_path(const std::vector<Vec3>& centers, const Vec3& start) {
  std::vector<std::size_t> order(centers.size());
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do best = std::min(best, path_length(centers, start, order));
  while (std::next_permutation(order.begin(), order.end()));
  return best;
}

/// Largest achievable minimum pairwise distance over all triples.
inline double best_triple_spacing(const std::vector<Vec3>& pts) {
  double best = 0.0;
  for (std::size_t a = 0; a < pts.size(); ++a)
    for (std::size_t b = a + 1; b < pts.size(); ++b)
      for (std::size_t c = b + 1; c < pts.size(); ++c)
        best = std::max(best, std::min({(pts[a] - pts[b]).norm(), (pts[a] - pts[c]).norm(), (pts[b] - pts[c]).norm()}));
  return best;
}

struct SmallLayer {
  fidplan::Layer layer;
  double r = 1.0;
  std::size_t m = 1;
};

/// Up to 10 distinct slots of a 6x6 grid with a random radius and marker count.
inline SmallLayer random_layer(fidplan::Rng& rng) {
  SmallLayer out;
  out.m = 1 + rng.next() % 3;
  const std::size_t n = out.m + rng.next() % (11 - out.m);
  const double radii[] = {0.5, 1.0, 1.5, 2.0, 2.5};
  out.r = radii[rng.next() % 5];
  std::vector<fidplan::Slot> all;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) all.push_back({i, j, 0});
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t pick = t + rng.next() % (all.size() - t);
    std::swap(all[t], all[pick]);
    out.layer.push_back(all[t]);
  }
  std::sort(out.layer.begin(), out.layer.end());
  return out;
}

}  // namespace oracle
