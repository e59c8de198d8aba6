#pragma once

// Layer-by-layer assembly planning with movable markers.
//
// All planner geometry is in structure units: slot (i, j, k) sits at
// (i, j, k) and a block occupies [i-1/2, i+1/2] x [j-1/2, j+1/2] x [k, k+1].
// A marker's position is the point it rests on, so a marker standing in an
// empty slot has the slot's position and one standing on a placed block at
// (i, j, k) sits at (i, j, k + 1). Coverage distances between markers are
// horizontal.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fidplan/error.hpp"
#include "fidplan/numeric.hpp"

namespace fidplan {

inline constexpr int kPlanFormatVersion = 1;

struct Slot {
  int i = 0, j = 0, k = 0;

  Vec3 position() const { return {double(i), double(j), double(k)}; }
  /// World position in meters.
  Vec3 world(double unit_m) const { return unit_m * position(); }

  friend auto operator<=>(const Slot&, const Slot&) = default;
};

inline std::string to_string(const Slot& s) {
  return "(" + std::to_string(s.i) + "," + std::to_string(s.j) + "," + std::to_string(s.k) + ")";
}

struct Structure {
  double unit_m = 0.15;
  std::vector<Slot> slots;

  void validate() const {
    if (!(unit_m > 0.0) || !std::isfinite(unit_m)) throw Error(ErrorKind::InvalidInput, "structure unit_m must be positive");
    std::set<Slot> seen;
    for (const Slot& s : slots)
      if (!seen.insert(s).second) throw Error(ErrorKind::InvalidInput, "structure has duplicate slot " + to_string(s));
  }

  nlohmann::json to_json() const {
    nlohmann::json sl = nlohmann::json::array();
    for (const Slot& s : slots) sl.push_back({s.i, s.j, s.k});
    return {{"unit_m", unit_m}, {"slots", sl}};
  }

  static Structure from_json(const nlohmann::json& j) {
    Structure s;
    try {
      s.unit_m = j.at("unit_m").get<double>();
      for (const auto& e : j.at("slots")) {
        const auto v = e.get<std::array<int, 3>>();
        s.slots.push_back({v[0], v[1], v[2]});
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Parse, std::string("structure: ") + e.what());
    }
    s.validate();
    return s;
  }

  /// Solid axis-aligned box with `levels` layers of nx x ny slots.
  static Structure box(int nx, int ny, int levels, double unit_m = 0.15) {
    Structure s;
    s.unit_m = unit_m;
    for (int k = 0; k < levels; ++k)
      for (int i = 0; i < nx; ++i)
        for (int j = 0; j < ny; ++j) s.slots.push_back({i, j, k});
    return s;
  }

  /// Stepped square pyramid: level k is a (base - 2k) x (base - 2k) square.
  static Structure pyramid(int base, double unit_m = 0.15) {
    Structure s;
    s.unit_m = unit_m;
    for (int k = 0; base - 2 * k > 0; ++k)
      for (int i = k; i < base - k; ++i)
        for (int j = k; j < base - k; ++j) s.slots.push_back({i, j, k});
    return s;
  }
};

struct MarkerState {
  int id = 0;
  Vec3 position = Vec3::Zero();
  /// Resting on the foundation rather than on a placed block.
  bool on_foundation() const { return position.z() <= 0.0; }
};

struct MoveMarker {
  int id = 0;
  Vec3 from = Vec3::Zero();
  Vec3 to = Vec3::Zero();
};

struct PlaceBlock {
  Slot slot;
};

using Action = std::variant<MoveMarker, PlaceBlock>;

inline nlohmann::json action_to_json(const Action& a) {
  if (const auto* mm = std::get_if<MoveMarker>(&a))
    return {{"op", "move_marker"},
            {"id", mm->id},
            {"from", {mm->from.x(), mm->from.y(), mm->from.z()}},
            {"to", {mm->to.x(), mm->to.y(), mm->to.z()}}};
  const auto& pb = std::get<PlaceBlock>(a);
  return {{"op", "place_block"}, {"slot", {pb.slot.i, pb.slot.j, pb.slot.k}}};
}

inline Action action_from_json(const nlohmann::json& j) {
  try {
    const auto op = j.at("op").get<std::string>();
    if (op == "move_marker") {
      const auto f = j.at("from").get<std::array<double, 3>>();
      const auto t = j.at("to").get<std::array<double, 3>>();
      return MoveMarker{j.at("id").get<int>(), Vec3(f[0], f[1], f[2]), Vec3(t[0], t[1], t[2])};
    }
    if (op == "place_block") {
      const auto s = j.at("slot").get<std::array<int, 3>>();
      return PlaceBlock{{s[0], s[1], s[2]}};
    }
    throw Error(ErrorKind::Parse, "unknown action op '" + op + "'");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("action: ") + e.what());
  }
}

inline nlohmann::json markers_to_json(const std::vector<MarkerState>& ms) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& m : ms) out.push_back({{"id", m.id}, {"pos", {m.position.x(), m.position.y(), m.position.z()}}});
  return out;
}

inline std::vector<MarkerState> markers_from_json(const nlohmann::json& j) {
  std::vector<MarkerState> out;
  try {
    for (const auto& e : j) {
      const auto p = e.at("pos").get<std::array<double, 3>>();
      out.push_back({e.at("id").get<int>(), Vec3(p[0], p[1], p[2])});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("markers: ") + e.what());
  }
  return out;
}

struct Plan {
  std::vector<Action> actions;
  double r = 0.0;
  double hop_radius = 0.0;
  std::uint64_t seed = 0;
  std::vector<MarkerState> initial_markers;
  std::vector<MarkerState> final_markers;
  std::vector<int> clusters_per_layer;

  std::size_t place_count() const {
    return static_cast<std::size_t>(
        std::count_if(actions.begin(), actions.end(), [](const Action& a) { return std::holds_alternative<PlaceBlock>(a); }));
  }

  /// JSON-lines: a header object followed by one action per line.
  void write_jsonl(std::ostream& os, const std::string& invocation = "") const {
    nlohmann::json header = {{"kind", "plan"},
                             {"version", kPlanFormatVersion},
                             {"invocation", invocation},
                             {"r", r},
                             {"hop_radius", hop_radius},
                             {"seed", seed},
                             {"steps", actions.size()},
                             {"clusters_per_layer", clusters_per_layer},
                             {"markers", markers_to_json(initial_markers)},
                             {"final_markers", markers_to_json(final_markers)}};
    os << header.dump() << '\n';
    for (const Action& a : actions) os << action_to_json(a).dump() << '\n';
  }

  static Plan read_jsonl(std::istream& is) {
    Plan p;
    std::string line;
    bool have_header = false;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, "plan line " + std::to_string(lineno) + ": " + e.what());
      }
      if (!have_header) {
        try {
          if (j.at("kind").get<std::string>() != "plan") throw Error(ErrorKind::Parse, "plan: header kind is not 'plan'");
          if (j.at("version").get<int>() != kPlanFormatVersion) throw Error(ErrorKind::Parse, "plan: unsupported version");
          p.r = j.at("r").get<double>();
          p.hop_radius = j.at("hop_radius").get<double>();
          p.seed = j.at("seed").get<std::uint64_t>();
          p.clusters_per_layer = j.at("clusters_per_layer").get<std::vector<int>>();
        } catch (const nlohmann::json::exception& e) {
          throw Error(ErrorKind::Parse, std::string("plan header: ") + e.what());
        }
        p.initial_markers = markers_from_json(j.at("markers"));
        p.final_markers = markers_from_json(j.at("final_markers"));
        have_header = true;
        continue;
      }
      p.actions.push_back(action_from_json(j));
    }
    if (!have_header) throw Error(ErrorKind::Parse, "plan: missing header line");
    return p;
  }
};

using Layer = std::vector<Slot>;

/// Layers by ascending k; slots inside a layer in lexicographic order.
inline std::vector<Layer> divide_layers(const Structure& s) {
  std::map<int, Layer> by_k;
  for (const Slot& slot : s.slots) by_k[slot.k].push_back(slot);
  std::vector<Layer> out;
  for (auto& [k, layer] : by_k) {
    std::sort(layer.begin(), layer.end());
    out.push_back(std::move(layer));
  }
  return out;
}

inline double horizontal_distance(const Vec3& a, const Vec3& b) { return std::hypot(a.x() - b.x(), a.y() - b.y()); }

/// Lexicographic order on (x, y, z).
inline bool lex_less(const Vec3& a, const Vec3& b) {
  if (a.x() != b.x()) return a.x() < b.x();
  if (a.y() != b.y()) return a.y() < b.y();
  return a.z() < b.z();
}

inline Vec3 centroid(const std::vector<Vec3>& pts) {
  Vec3 c = Vec3::Zero();
  for (const Vec3& p : pts) c += p;
  return pts.empty() ? c : Vec3(c / static_cast<double>(pts.size()));
}

/// Cluster width: largest distance from a member to the cluster centroid.
inline double cluster_width(const std::vector<Vec3>& pts) {
  const Vec3 c = centroid(pts);
  double w = 0.0;
  for (const Vec3& p : pts) w = std::max(w, (p - c).norm());
  return w;
}

struct Cluster {
  std::vector<Slot> slots;
  Vec3 center = Vec3::Zero();
  double width = 0.0;
};

struct ClusterSet {
  std::vector<Cluster> clusters;
  std::size_t k() const { return clusters.size(); }
};

struct KMeansConfig {
  int restarts = 10;
  int max_iterations = 100;
  /// Perturb-and-repair rounds on the best labelling once every restart has failed.
  int kicks = 10;
};

/// Slack on width comparisons so exact grid distances are not rejected by rounding.
inline constexpr double kWidthSlack = 1e-9;

namespace detail {

struct Labelling {
  std::vector<int> label;
  int k = 0;
};

inline std::vector<std::vector<std::size_t>> members(const Labelling& l) {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(l.k));
  for (std::size_t i = 0; i < l.label.size(); ++i) out[static_cast<std::size_t>(l.label[i])].push_back(i);
  return out;
}

inline double width_of(const std::vector<Vec3>& pts, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  Vec3 c = Vec3::Zero();
  for (auto i : idx) c += pts[i];
  c /= static_cast<double>(idx.size());
  double w = 0.0;
  for (auto i : idx) w = std::max(w, (pts[i] - c).norm());
  return w;
}

/// Constraint violation of a single cluster: width excess plus size deficit.
inline double cluster_violation(const std::vector<Vec3>& pts, const std::vector<std::size_t>& idx, double r,
                                std::size_t m) {
  const double excess = std::max(0.0, width_of(pts, idx) - r - kWidthSlack);
  const double deficit = idx.size() < m ? static_cast<double>(m - idx.size()) : 0.0;
  return excess + deficit;
}

inline double violation(const std::vector<Vec3>& pts, const Labelling& l, double r, std::size_t m) {
  double v = 0.0;
  for (const auto& idx : members(l)) v += cluster_violation(pts, idx, r, m);
  return v;
}

/// Lloyd iterations from k-means++ seeding.
inline Labelling kmeans(const std::vector<Vec3>& pts, int k, Rng& rng, int max_iterations) {
  const std::size_t n = pts.size();
  std::vector<Vec3> centers;
  centers.push_back(pts[rng.index(n)]);
  std::vector<double> d2(n);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& c : centers) best = std::min(best, (pts[i] - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u < 0.0 && d2[pick] > 0.0) break;
      }
      while (d2[pick] == 0.0 && pick > 0) --pick;
    } else {
      pick = rng.index(n);
    }
    centers.push_back(pts[pick]);
  }

  Labelling l{std::vector<int>(n, -1), k};
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (pts[i] - centers[static_cast<std::size_t>(c)]).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (l.label[i] != best) {
        l.label[i] = best;
        changed = true;
      }
    }
    // Recenter; an emptied cluster takes the point farthest from its own center.
    auto mem = members(l);
    for (int c = 0; c < k; ++c) {
      auto& idx = mem[static_cast<std::size_t>(c)];
      if (idx.empty()) {
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = (pts[i] - centers[static_cast<std::size_t>(l.label[i])]).squaredNorm();
          if (d > fd && mem[static_cast<std::size_t>(l.label[i])].size() > 1) {
            fd = d;
            far = i;
          }
        }
        auto& old = mem[static_cast<std::size_t>(l.label[far])];
        old.erase(std::find(old.begin(), old.end(), far));
        l.label[far] = c;
        idx.push_back(far);
        changed = true;
      }
      Vec3 s = Vec3::Zero();
      for (auto i : idx) s += pts[i];
      centers[static_cast<std::size_t>(c)] = s / static_cast<double>(idx.size());
    }
    if (!changed) break;
  }
  return l;
}

/// Local search that moves single points, then swaps pairs, between
/// clusters while the total constraint violation strictly drops.
inline void repair(const std::vector<Vec3>& pts, Labelling& l, double r, std::size_t m) {
  auto mem = members(l);
  std::vector<double> viol(mem.size());
  for (std::size_t c = 0; c < mem.size(); ++c) viol[c] = cluster_violation(pts, mem[c], r, m);
  auto total = [&] { return std::accumulate(viol.begin(), viol.end(), 0.0); };

  auto without = [](std::vector<std::size_t> v, std::size_t x) {
    v.erase(std::find(v.begin(), v.end(), x));
    return v;
  };
  auto with = [](std::vector<std::size_t> v, std::size_t x) {
    v.insert(std::upper_bound(v.begin(), v.end(), x), x);
    return v;
  };

  for (int pass = 0; pass < 100 && total() > 0.0; ++pass) {
    bool improved = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto a = static_cast<std::size_t>(l.label[i]);
      if (mem[a].size() <= 1) continue;
      const auto a_new = without(mem[a], i);
      const double va = cluster_violation(pts, a_new, r, m);
      for (std::size_t b = 0; b < mem.size(); ++b) {
        if (b == a) continue;
        const auto b_new = with(mem[b], i);
        const double vb = cluster_violation(pts, b_new, r, m);
        if (va + vb < viol[a] + viol[b] - 1e-12) {
          mem[a] = a_new;
          mem[b] = b_new;
          viol[a] = va;
          viol[b] = vb;
          l.label[i] = static_cast<int>(b);
          improved = true;
          break;
        }
      }
    }
    if (improved) continue;
    for (std::size_t i = 0; i < pts.size() && !improved; ++i) {
      for (std::size_t j = i + 1; j < pts.size() && !improved; ++j) {
        const auto a = static_cast<std::size_t>(l.label[i]);
        const auto b = static_cast<std::size_t>(l.label[j]);
        if (a == b || viol[a] + viol[b] == 0.0) continue;
        const auto a_new = with(without(mem[a], i), j);
        const auto b_new = with(without(mem[b], j), i);
        const double va = cluster_violation(pts, a_new, r, m);
        const double vb = cluster_violation(pts, b_new, r, m);
        if (va + vb < viol[a] + viol[b] - 1e-12) {
          mem[a] = a_new;
          mem[b] = b_new;
          viol[a] = va;
          viol[b] = vb;
          l.label[i] = static_cast<int>(b);
          l.label[j] = static_cast<int>(a);
          improved = true;
        }
      }
    }
    if (!improved) break;
  }
}

/// Best labelling found for a given k; feasible when its violation is zero.
inline std::optional<Labelling> try_k(const std::vector<Vec3>& pts, int k, double r, std::size_t m, std::uint64_t seed,
                                      const KMeansConfig& cfg) {
  std::optional<Labelling> best;
  double best_v = std::numeric_limits<double>::infinity();
  for (int rs = 0; rs < cfg.restarts; ++rs) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(k) * 1000003ULL + static_cast<std::uint64_t>(rs)));
    Labelling l = kmeans(pts, k, rng, cfg.max_iterations);
    if (violation(pts, l, r, m) == 0.0) return l;
    repair(pts, l, r, m);
    const double v = violation(pts, l, r, m);
    if (v == 0.0) return l;
    if (v < best_v) {
      best_v = v;
      best = std::move(l);
    }
  }
  if (!best || k < 2) return std::nullopt;
  // Kick two points of the best labelling into random clusters and repair.
  Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(k) * 1000003ULL + 999983ULL));
  for (int kick = 0; kick < cfg.kicks; ++kick) {
    Labelling t = *best;
    for (int moved = 0; moved < 2; ++moved)
      t.label[rng.index(pts.size())] = static_cast<int>(rng.index(static_cast<std::size_t>(k)));
    const auto mem = members(t);
    if (std::any_of(mem.begin(), mem.end(), [](const auto& v) { return v.empty(); })) continue;
    repair(pts, t, r, m);
    const double v = violation(pts, t, r, m);
    if (v == 0.0) return t;
    if (v < best_v) {
      best_v = v;
      best = std::move(t);
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// k-means with the smallest k, found by binary search, such that every
/// cluster has width <= r and at least m slots.
inline ClusterSet cluster_until_radius(const Layer& layer, double r, std::size_t m, std::uint64_t seed,
                                       const KMeansConfig& cfg = {}) {
  if (!(r > 0.0)) throw Error(ErrorKind::InvalidInput, "cluster_until_radius: r must be positive");
  if (m < 1) throw Error(ErrorKind::InvalidInput, "cluster_until_radius: m must be >= 1");
  if (layer.size() < m)
    throw Error(ErrorKind::InvalidInput, "cluster_until_radius: layer has " + std::to_string(layer.size()) +
                                             " slots, fewer than m = " + std::to_string(m));
  const std::string where = layer.empty() ? "" : " (layer k=" + std::to_string(layer.front().k) + ")";
  std::vector<Vec3> pts;
  for (const Slot& s : layer) pts.push_back(s.position());

  const int kmax = static_cast<int>(layer.size() / m);
  std::map<int, std::optional<detail::Labelling>> memo;
  auto feasible = [&](int k) -> const std::optional<detail::Labelling>& {
    auto it = memo.find(k);
    if (it == memo.end()) it = memo.emplace(k, detail::try_k(pts, k, r, m, seed, cfg)).first;
    return it->second;
  };

  int best = -1;
  int lo = 1, hi = kmax;
  while (lo <= hi) {
    const int mid = lo + (hi - lo) / 2;
    if (feasible(mid)) {
      best = mid;
      hi = mid - 1;
    } else {
      lo = mid + 1;
    }
  }
  if (best < 0) {
    // The feasible set was not an upper interval; fall back to a scan.
    for (int k = 1; k <= kmax && best < 0; ++k)
      if (feasible(k)) best = k;
  }
  if (best < 0)
    throw Error(ErrorKind::Infeasible, "cluster_until_radius: no k gives clusters of width <= " + std::to_string(r) +
                                           " with >= " + std::to_string(m) + " slots" + where);

  const auto& lab = *feasible(best);
  ClusterSet out;
  for (const auto& idx : detail::members(lab)) {
    Cluster c;
    std::vector<Vec3> cp;
    for (auto i : idx) {
      c.slots.push_back(layer[i]);
      cp.push_back(pts[i]);
    }
    std::sort(c.slots.begin(), c.slots.end());
    c.center = centroid(cp);
    c.width = cluster_width(cp);
    out.clusters.push_back(std::move(c));
  }
  std::sort(out.clusters.begin(), out.clusters.end(),
            [](const Cluster& a, const Cluster& b) { return a.slots.front() < b.slots.front(); });
  return out;
}

/// Greedy farthest-point choice of m marker destinations.
inline std::vector<Vec3> select_marker_destinations(const std::vector<Slot>& cluster, std::size_t m) {
  if (cluster.size() < m)
    throw Error(ErrorKind::InvalidInput, "select_marker_destinations: cluster has " + std::to_string(cluster.size()) +
                                             " slots, fewer than m = " + std::to_string(m));
  std::vector<Vec3> pts;
  for (const Slot& s : cluster) pts.push_back(s.position());
  std::sort(pts.begin(), pts.end(), lex_less);
  std::vector<Vec3> chosen;
  if (m == 0) return chosen;

  const Vec3 c = centroid(pts);
  std::vector<bool> used(pts.size(), false);
  auto pick = [&](auto score) {
    std::size_t best = pts.size();
    double bs = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (used[i]) continue;
      const double s = score(pts[i]);
      if (s > bs + 1e-12) {
        bs = s;
        best = i;
      }
    }
    used[best] = true;
    chosen.push_back(pts[best]);
  };
  pick([&](const Vec3& p) { return (p - c).norm(); });
  while (chosen.size() < m) {
    pick([&](const Vec3& p) {
      double d = std::numeric_limits<double>::infinity();
      for (const Vec3& q : chosen) d = std::min(d, (p - q).norm());
      return d;
    });
  }
  return chosen;
}

/// Length of the open path start -> centers[order[0]] -> centers[order[1]] -> ...
inline double tour_length(const std::vector<Vec3>& centers, const Vec3& start, const std::vector<std::size_t>& order) {
  double len = 0.0;
  Vec3 prev = start;
  for (auto i : order) {
    len += (centers[i] - prev).norm();
    prev = centers[i];
  }
  return len;
}

/// Visiting order of cluster centers: nearest neighbour from `start`, then
/// 2-opt segment reversals until no reversal shortens the path.
inline std::vector<std::size_t> find_tour(const std::vector<Vec3>& centers, const Vec3& start) {
  const std::size_t n = centers.size();
  std::vector<std::size_t> order;
  std::vector<bool> used(n, false);
  Vec3 cur = start;
  for (std::size_t step = 0; step < n; ++step) {
    std::size_t best = n;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      const double d = (centers[i] - cur).norm();
      if (d < bd - 1e-12) {
        bd = d;
        best = i;
      }
    }
    used[best] = true;
    order.push_back(best);
    cur = centers[best];
  }

  auto pos = [&](std::size_t idx) -> const Vec3& { return idx == 0 ? start : centers[order[idx - 1]]; };
  // Path nodes are start, order[0], ..., order[n-1]; reversing order[i..j]
  // replaces edges (i, i+1) and (j+1, j+2) in node numbering.
  bool improved = true;
  while (improved) {
    improved = false;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const Vec3& a = pos(i);
        const Vec3& b = pos(i + 1);
        const Vec3& c = pos(j + 1);
        double before = (b - a).norm();
        double after = (c - a).norm();
        if (j + 1 < n) {
          const Vec3& d = pos(j + 2);
          before += (d - c).norm();
          after += (d - b).norm();
        }
        if (after < before - 1e-12) {
          std::reverse(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(j) + 1);
          improved = true;
        }
      }
    }
  }
  return order;
}

/// Stops a walk early once it returns true.
using WalkStop = std::function<bool(const std::vector<MarkerState>&)>;

namespace detail {

inline std::optional<Vec3> continuous_landing(const Vec3& from, const Vec3& target, const std::vector<Vec3>& anchors,
                                              double reach) {
  // Largest s in (0, 1] with from + s (target - from) within `reach`
  // (horizontally) of some anchor.
  const Vec3 d = target - from;
  const double a = d.x() * d.x() + d.y() * d.y();
  double best = 0.0;
  for (const Vec3& b : anchors) {
    const double ox = from.x() - b.x(), oy = from.y() - b.y();
    const double c = ox * ox + oy * oy - reach * reach;
    if (a == 0.0) {
      if (c <= 0.0) best = 1.0;
      continue;
    }
    const double hb = d.x() * ox + d.y() * oy;
    const double disc = hb * hb - a * c;
    if (disc < 0.0) continue;
    const double s_lo = (-hb - std::sqrt(disc)) / a;
    const double s_hi = (-hb + std::sqrt(disc)) / a;
    if (s_hi <= 0.0 || s_lo > 1.0) continue;
    best = std::max(best, std::min(1.0, s_hi));
  }
  if (best <= 1e-12) return std::nullopt;
  return best >= 1.0 ? target : Vec3(from + best * d);
}

inline std::optional<Vec3> grid_landing(const Vec3& from, const Vec3& target, const std::vector<Vec3>& anchors,
                                        const std::vector<Vec3>& occupied, double reach,
                                        const std::vector<Vec3>& candidates, std::size_t need = 1) {
  const double now = (target - from).norm();
  std::optional<Vec3> best;
  double bd = std::numeric_limits<double>::infinity();
  for (const Vec3& c : candidates) {
    const double d = (target - c).norm();
    if (!(d < now - 1e-9)) continue;
    if (std::any_of(occupied.begin(), occupied.end(), [&](const Vec3& o) { return (o - c).norm() < 1e-9; })) continue;
    const auto seen = std::count_if(anchors.begin(), anchors.end(),
                                    [&](const Vec3& b) { return horizontal_distance(b, c) <= reach + 1e-9; });
    if (static_cast<std::size_t>(seen) < need) continue;
    if (d < bd - 1e-12 || (std::abs(d - bd) <= 1e-12 && lex_less(c, *best))) {
      bd = d;
      best = c;
    }
  }
  return best;
}

}  // namespace detail

/// Greedy nearest matching: the closest (marker, target) pair is fixed
/// first. Returns the target index for each marker.
inline std::vector<std::size_t> match_targets(const std::vector<MarkerState>& markers, const std::vector<Vec3>& targets) {
  const std::size_t n = markers.size();
  std::vector<std::size_t> assign(n, targets.size());
  std::vector<bool> taken(targets.size(), false);
  for (std::size_t round = 0; round < n; ++round) {
    std::size_t bm = n, bt = targets.size();
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (taken[t]) continue;
      for (std::size_t m = 0; m < n; ++m) {
        if (assign[m] != targets.size()) continue;
        const double d = (markers[m].position - targets[t]).norm();
        const bool tie = std::abs(d - bd) <= 1e-12;
        if (d < bd - 1e-12 || (tie && (lex_less(targets[t], targets[bt]) ||
                                       (targets[t] == targets[bt] && markers[m].id < markers[bm].id)))) {
          bd = d;
          bm = m;
          bt = t;
        }
      }
    }
    assign[bm] = bt;
    taken[bt] = true;
  }
  return assign;
}

/// Hopping gait. Each hop moves the marker with the largest remaining
/// distance (that can progress) as far toward its target as staying within
/// `reach` of a stationary marker allows. With `candidates` set, landings are
/// restricted to those points, taking the one closest to the target, and a
/// landing must be within reach of `anchors` stationary markers.
/// Updates `markers` in place.
inline std::vector<Action> walk_to_coverage(std::vector<MarkerState>& markers, const std::vector<Vec3>& targets,
                                            double reach, const std::vector<Vec3>* candidates = nullptr,
                                            const WalkStop& stop = {}, std::size_t anchors = 1) {
  if (markers.size() < 2) throw Error(ErrorKind::InvalidInput, "walk_to_coverage: need at least two markers");
  if (targets.size() != markers.size())
    throw Error(ErrorKind::InvalidInput, "walk_to_coverage: need exactly one target per marker");
  if (!(reach > 0.0)) throw Error(ErrorKind::InvalidInput, "walk_to_coverage: reach must be positive");

  auto assign = match_targets(markers, targets);
  std::vector<Action> out;
  const std::size_t cap = 100000;
  for (std::size_t iter = 0; iter < cap; ++iter) {
    if (stop && stop(markers)) return out;
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < markers.size(); ++i)
      if ((markers[i].position - targets[assign[i]]).norm() > 1e-9) order.push_back(i);
    if (order.empty()) return out;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double da = (markers[a].position - targets[assign[a]]).norm();
      const double db = (markers[b].position - targets[assign[b]]).norm();
      if (std::abs(da - db) > 1e-12) return da > db;
      return markers[a].id < markers[b].id;
    });

    bool moved = false;
    // Markers can block each other under a multi-anchor rule; one
    // single-anchor hop breaks the tie.
    for (std::size_t need = anchors; need >= 1 && !moved; --need) {
      for (std::size_t i : order) {
        std::vector<Vec3> others;
        for (std::size_t o = 0; o < markers.size(); ++o)
          if (o != i) others.push_back(markers[o].position);
        const Vec3& from = markers[i].position;
        const Vec3& target = targets[assign[i]];
        const auto land = candidates ? detail::grid_landing(from, target, others, others, reach, *candidates, need)
                                     : detail::continuous_landing(from, target, others, reach);
        if (!land) continue;
        out.push_back(MoveMarker{markers[i].id, from, *land});
        markers[i].position = *land;
        moved = true;
        break;
      }
      if (need == 1) break;
    }
    if (!moved) {
      // Markers can end up on each other's targets; rematch before giving up.
      auto again = match_targets(markers, targets);
      if (again == assign) {
        std::ostringstream msg;
        const std::size_t i = order.front();
        const Vec3& at = markers[i].position;
        const Vec3& to = targets[assign[i]];
        msg << "walk_to_coverage: marker " << markers[i].id << " is stranded at (" << at.x() << "," << at.y() << ","
            << at.z() << ") short of (" << to.x() << "," << to.y() << "," << to.z() << ")";
        throw Error(ErrorKind::Infeasible, msg.str());
      }
      assign = std::move(again);
    }
  }
  throw Error(ErrorKind::Infeasible, "walk_to_coverage: hop limit exceeded");
}

struct PlannerConfig {
  /// Largest horizontal hop distance to a stationary marker, structure
  /// units; zero means the cluster diameter 2r, the largest spacing of
  /// destinations inside one cluster.
  double hop_radius = 0.0;
  std::uint64_t seed = 1;
  /// Stationary markers every landing must stay within hop reach of,
  /// capped at m - 1.
  std::size_t anchors = 2;
  KMeansConfig kmeans;
};

/// The m slots of the bottom layer closest to its lexicographically first slot.
inline std::vector<MarkerState> default_markers(const Structure& s, std::size_t m) {
  const auto layers = divide_layers(s);
  if (layers.empty() || layers.front().size() < m)
    throw Error(ErrorKind::InvalidInput, "default_markers: bottom layer has fewer than m slots");
  Layer l = layers.front();
  const Vec3 o = l.front().position();
  std::stable_sort(l.begin(), l.end(), [&](const Slot& a, const Slot& b) {
    const double da = (a.position() - o).norm(), db = (b.position() - o).norm();
    if (std::abs(da - db) > 1e-12) return da < db;
    return a < b;
  });
  std::vector<MarkerState> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back({static_cast<int>(i), l[i].position()});
  return out;
}

namespace detail {

struct ColumnKey {
  int i, j;
  friend auto operator<=>(const ColumnKey&, const ColumnKey&) = default;
};

inline ColumnKey column_of(const Vec3& p) {
  return {static_cast<int>(std::lround(p.x())), static_cast<int>(std::lround(p.y()))};
}

/// Builder state shared by the per-layer steps of plan_assembly.
class Assembly {
 public:
  Assembly(std::vector<MarkerState> markers, double reach, std::size_t need)
      : markers_(std::move(markers)), reach_(reach), need_(need) {}

  const std::vector<MarkerState>& markers() const { return markers_; }
  std::vector<Action>& actions() { return actions_; }

  int height(ColumnKey c) const {
    auto it = height_.find(c);
    return it == height_.end() ? 0 : it->second;
  }
  bool placed(const Slot& s) const { return placed_.count(s) > 0; }

  void place(const Slot& s) {
    placed_.insert(s);
    height_[{s.i, s.j}] = std::max(height({s.i, s.j}), s.k + 1);
    actions_.push_back(PlaceBlock{s});
  }

  void walk(const std::vector<Vec3>& targets, const std::vector<ColumnKey>& columns) {
    std::vector<Vec3> cands;
    for (const auto& c : columns) cands.emplace_back(c.i, c.j, height(c));
    auto acts = walk_to_coverage(markers_, targets, reach_, &cands, {}, need_);
    actions_.insert(actions_.end(), acts.begin(), acts.end());
  }

  bool marker_at(const Vec3& p, std::size_t except = SIZE_MAX) const {
    for (std::size_t i = 0; i < markers_.size(); ++i)
      if (i != except && (markers_[i].position - p).norm() < 1e-9) return true;
    return false;
  }

  /// Moves the marker standing in `slot` onto the nearest placed block of
  /// `pool` whose top is free and within reach of enough stationary markers,
  /// preferring tops close to one of them.
  bool relocate(std::size_t mi, const std::vector<Slot>& pool) {
    const Vec3 from = markers_[mi].position;
    std::optional<Vec3> best;
    double bd = std::numeric_limits<double>::infinity();
    double bn = std::numeric_limits<double>::infinity();
    for (const Slot& s : pool) {
      if (!placed(s)) continue;
      const Vec3 top(s.i, s.j, height({s.i, s.j}));
      if (marker_at(top, mi)) continue;
      if (!covered(top, mi)) continue;
      double near = std::numeric_limits<double>::infinity();
      for (std::size_t o = 0; o < markers_.size(); ++o)
        if (o != mi) near = std::min(near, horizontal_distance(markers_[o].position, top));
      const double d = (top - from).norm();
      if (near < bn - 1e-12 || (std::abs(near - bn) <= 1e-12 && (d < bd - 1e-12 || (std::abs(d - bd) <= 1e-12 && lex_less(top, *best))))) {
        bn = near;
        bd = d;
        best = top;
      }
    }
    if (!best) return false;
    actions_.push_back(MoveMarker{markers_[mi].id, from, *best});
    markers_[mi].position = *best;
    return true;
  }

  /// Fallback when no placed block is available: step onto the nearest free
  /// walkable column outside `cluster` that the stationary markers cover.
  bool park(std::size_t mi, const std::vector<ColumnKey>& walkable, const std::vector<Slot>& cluster) {
    const Vec3 from = markers_[mi].position;
    std::optional<Vec3> best;
    double bd = std::numeric_limits<double>::infinity();
    for (const ColumnKey& c : walkable) {
      if (std::any_of(cluster.begin(), cluster.end(), [&](const Slot& s) { return s.i == c.i && s.j == c.j; })) continue;
      const Vec3 spot(c.i, c.j, height(c));
      if (marker_at(spot)) continue;
      if (!covered(spot, mi)) continue;
      const double d = (spot - from).norm();
      if (d < bd - 1e-12 || (std::abs(d - bd) <= 1e-12 && lex_less(spot, *best))) {
        bd = d;
        best = spot;
      }
    }
    if (!best) return false;
    actions_.push_back(MoveMarker{markers_[mi].id, from, *best});
    markers_[mi].position = *best;
    return true;
  }

 private:
  bool covered(const Vec3& p, std::size_t mover) const {
    std::size_t n = 0;
    for (std::size_t o = 0; o < markers_.size(); ++o)
      if (o != mover && horizontal_distance(markers_[o].position, p) <= reach_ + 1e-9) ++n;
    return n >= need_;
  }

  std::vector<MarkerState> markers_;
  double reach_;
  std::size_t need_;
  std::vector<Action> actions_;
  std::set<Slot> placed_;
  std::map<ColumnKey, int> height_;
};

inline std::vector<ColumnKey> columns_of(const std::vector<Slot>& slots) {
  std::set<ColumnKey> cs;
  for (const Slot& s : slots) cs.insert({s.i, s.j});
  return {cs.begin(), cs.end()};
}

/// Blocks far from every marker go first so that the slots next to the
/// markers are filled last.
inline std::vector<Slot> placement_order(std::vector<Slot> slots, const std::vector<MarkerState>& markers) {
  auto key = [&](const Slot& s) {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& m : markers) d = std::min(d, (m.position - s.position()).norm());
    return d;
  };
  std::stable_sort(slots.begin(), slots.end(), [&](const Slot& a, const Slot& b) {
    const double da = key(a), db = key(b);
    if (std::abs(da - db) > 1e-12) return da > db;
    return a < b;
  });
  return slots;
}

}  // namespace detail

/// Layer-by-layer traversal: cluster each layer, visit the clusters along a
/// short tour, walk the markers to each cluster's farthest-point
/// destinations, place the free slots, then lift each marker onto a nearby
/// placed block and fill the slot it vacated.
inline Plan plan_assembly(const Structure& s, const std::vector<MarkerState>& markers, double r,
                          const PlannerConfig& cfg = {}) {
  s.validate();
  if (!(r > 0.0)) throw Error(ErrorKind::InvalidInput, "plan_assembly: r must be positive");
  const std::size_t m = markers.size();
  if (m < 2) throw Error(ErrorKind::InvalidInput, "plan_assembly: need at least two markers");
  const double reach = cfg.hop_radius > 0.0 ? cfg.hop_radius : 2.0 * r;
  for (std::size_t a = 0; a < m; ++a) {
    bool near = false;
    for (std::size_t b = 0; b < m; ++b) {
      if (a == b) continue;
      if (markers[a].id == markers[b].id) throw Error(ErrorKind::InvalidInput, "plan_assembly: duplicate marker id");
      if ((markers[a].position - markers[b].position).norm() < 1e-9)
        throw Error(ErrorKind::InvalidInput, "plan_assembly: two markers share a position");
      near = near || horizontal_distance(markers[a].position, markers[b].position) <= reach + 1e-9;
    }
    if (!near)
      throw Error(ErrorKind::InvalidInput,
                  "plan_assembly: marker " + std::to_string(markers[a].id) + " is not within reach of another marker");
  }

  Plan plan;
  plan.r = r;
  plan.hop_radius = reach;
  plan.seed = cfg.seed;
  plan.initial_markers = markers;
  detail::Assembly as(markers, reach, std::clamp<std::size_t>(cfg.anchors, 1, m - 1));
  const auto layers = divide_layers(s);

  for (std::size_t li = 0; li < layers.size(); ++li) {
    const Layer& layer = layers[li];
    const int k = layer.front().k;
    const std::string where = "layer " + std::to_string(li) + " (k=" + std::to_string(k) + ")";
    auto columns = detail::columns_of(layer);
    std::vector<detail::ColumnKey> below;
    if (li > 0) below = detail::columns_of(layers[li - 1]);
    std::vector<detail::ColumnKey> walkable = columns;
    walkable.insert(walkable.end(), below.begin(), below.end());
    std::sort(walkable.begin(), walkable.end());
    walkable.erase(std::unique(walkable.begin(), walkable.end()), walkable.end());

    if (layer.size() < m) {
      // Too few slots to hold the markers: stage them around the layer on the
      // surface beneath it.
      std::vector<detail::ColumnKey> staging;
      if (li > 0) {
        for (const auto& c : below)
          if (!std::binary_search(columns.begin(), columns.end(), c)) staging.push_back(c);
      } else {
        std::set<detail::ColumnKey> ring;
        for (const auto& c : columns)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj)
              if (!std::binary_search(columns.begin(), columns.end(), detail::ColumnKey{c.i + di, c.j + dj}))
                ring.insert({c.i + di, c.j + dj});
        staging.assign(ring.begin(), ring.end());
        walkable.insert(walkable.end(), staging.begin(), staging.end());
      }
      if (staging.size() < m) throw Error(ErrorKind::Infeasible, "plan_assembly: no room to stage markers for " + where);
      std::vector<Vec3> pts;
      for (const Slot& sl : layer) pts.push_back(sl.position());
      const Vec3 c = centroid(pts);
      std::vector<Vec3> spots;
      for (const auto& col : staging) spots.emplace_back(col.i, col.j, as.height(col));
      std::stable_sort(spots.begin(), spots.end(), [&](const Vec3& a, const Vec3& b) {
        const double da = horizontal_distance(a, c), db = horizontal_distance(b, c);
        if (std::abs(da - db) > 1e-12) return da < db;
        return lex_less(a, b);
      });
      spots.resize(m);
      try {
        as.walk(spots, walkable);
      } catch (const Error& e) {
        throw e.with_context("while staging for " + where);
      }
      for (const Slot& sl : detail::placement_order(layer, as.markers())) as.place(sl);
      plan.clusters_per_layer.push_back(1);
      continue;
    }

    // Clustering errors already name the layer.
    const ClusterSet cs = cluster_until_radius(layer, r, m, Rng::derive(cfg.seed, li), cfg.kmeans);
    plan.clusters_per_layer.push_back(static_cast<int>(cs.k()));
    std::vector<Vec3> centers;
    for (const auto& c : cs.clusters) centers.push_back(c.center);
    std::vector<Vec3> mpos;
    for (const auto& mk : as.markers()) mpos.push_back(mk.position);
    const Vec3 start = centroid(mpos);
    const auto order = find_tour(centers, Vec3(start.x(), start.y(), k));

    for (std::size_t ci = 0; ci < order.size(); ++ci) {
      const Cluster& cl = cs.clusters[order[ci]];
      const std::string cwhere = where + " cluster " + std::to_string(ci);
      try {
        as.walk(select_marker_destinations(cl.slots, m), walkable);
      } catch (const Error& e) {
        throw e.with_context("in " + cwhere);
      }
      std::vector<Slot> free;
      std::vector<std::pair<std::size_t, Slot>> occupied;
      for (const Slot& sl : cl.slots) {
        bool held = false;
        for (std::size_t mi = 0; mi < m; ++mi)
          if ((as.markers()[mi].position - sl.position()).norm() < 1e-9) {
            occupied.emplace_back(mi, sl);
            held = true;
          }
        if (!held) free.push_back(sl);
      }
      for (const Slot& sl : detail::placement_order(free, as.markers())) as.place(sl);
      // Innermost marker first, so the ones still standing flank the mover
      // instead of lining up behind it.
      std::vector<Vec3> held_at;
      for (const auto& o : occupied) held_at.push_back(o.second.position());
      const Vec3 mid = held_at.empty() ? Vec3::Zero() : centroid(held_at);
      std::sort(occupied.begin(), occupied.end(), [&](const auto& a, const auto& b) {
        const double da = horizontal_distance(a.second.position(), mid);
        const double db = horizontal_distance(b.second.position(), mid);
        if (std::abs(da - db) > 1e-9) return da < db;
        return as.markers()[a.first].id < as.markers()[b.first].id;
      });
      for (const auto& [mi, sl] : occupied) {
        if (!as.relocate(mi, cl.slots) && !as.relocate(mi, layer) && !as.park(mi, walkable, cl.slots))
          throw Error(ErrorKind::Infeasible, "plan_assembly: marker " + std::to_string(as.markers()[mi].id) +
                                                 " has no covered spot to move to in " + cwhere);
        as.place(sl);
      }
    }
  }
  plan.actions = std::move(as.actions());
  plan.final_markers = as.markers();
  return plan;
}

}  // namespace fidplan
