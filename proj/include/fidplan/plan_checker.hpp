#pragma once

// Replays a plan against the growing structure: which markers the camera
// can see at every step, the fused certainty they give, and the product of
// per-step certainties.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fidplan/error.hpp"
#include "fidplan/noise_model.hpp"
#include "fidplan/numeric.hpp"
#include "fidplan/planner.hpp"

namespace fidplan {

inline constexpr int kReportFormatVersion = 1;

struct CheckConfig {
  /// Camera height above the action target (the slot being filled or the
  /// spot a marker is set down on), structure units.
  double hover = 3.0;
  /// Height of a marker's fiducial above the surface the marker rests on,
  /// structure units. Markers are block-sized carriers with the fiducial on top.
  double marker_height = 1.02;
  std::size_t min_visible = 2;

  void validate() const {
    if (!(hover > 0.0)) throw Error(ErrorKind::InvalidInput, "check: hover must be positive");
    if (!(marker_height >= 0.0)) throw Error(ErrorKind::InvalidInput, "check: marker_height must be >= 0");
  }
};

struct WorldState {
  double unit_m = 0.15;
  std::set<Slot> placed;
  std::vector<MarkerState> markers;
};

/// Relative position of `x` in the frame of a camera at `camera` looking
/// straight down (optical axis -z), scaled to meters.
inline Vec3 downward_camera_frame(const Vec3& camera, const Vec3& x, double unit_m) {
  const Vec3 w = (x - camera) * unit_m;
  return {w.x(), -w.y(), -w.z()};
}

inline Vec3 fiducial_position(const MarkerState& m, const CheckConfig& cfg) {
  return m.position + Vec3(0, 0, cfg.marker_height);
}

/// Is the segment camera -> point free of placed blocks?
inline bool line_of_sight(const std::set<Slot>& placed, const Vec3& camera, const Vec3& point) {
  const Vec3 dir = point - camera;
  const double zlow = std::min(camera.z(), point.z());
  for (const Slot& s : placed) {
    if (s.k + 1 < zlow) continue;  // entirely below the segment
    const Vec3 lo(s.i - 0.5, s.j - 0.5, s.k);
    const Vec3 hi(s.i + 0.5, s.j + 0.5, s.k + 1.0);
    if (ray_aabb_intersect(camera, dir, lo, hi)) return false;
  }
  return true;
}

/// Ids of markers the camera at `camera` (structure units) can use: inside
/// the predictor's range and angle domain and not hidden by a placed block.
inline std::vector<int> visible_markers(const WorldState& state, const Vec3& camera, const EigenvaluePredictor& pred,
                                        const CheckConfig& cfg = {}, std::optional<int> exclude = std::nullopt) {
  std::vector<int> out;
  for (const MarkerState& m : state.markers) {
    if (exclude && m.id == *exclude) continue;
    const Vec3 f = fiducial_position(m, cfg);
    if ((f - camera).norm() == 0.0) continue;
    if (!pred.contains(downward_camera_frame(camera, f, state.unit_m))) continue;
    if (!line_of_sight(state.placed, camera, f)) continue;
    out.push_back(m.id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct StepRecord {
  std::size_t idx = 0;
  std::string op;
  std::vector<int> visible;
  std::optional<double> lambda_star;
  double c_star = 0.0;
  bool ok = false;
};

struct CheckReport {
  std::vector<StepRecord> steps;
  double p_success = 1.0;
  std::size_t min_visible = 0;

  std::size_t failed() const {
    return static_cast<std::size_t>(std::count_if(steps.begin(), steps.end(), [](const auto& s) { return !s.ok; }));
  }
  bool all_ok() const { return failed() == 0; }

  nlohmann::json to_json(const std::string& invocation = "") const {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : steps)
      st.push_back({{"idx", s.idx},
                    {"op", s.op},
                    {"visible", s.visible},
                    {"lambda_star", s.lambda_star ? nlohmann::json(*s.lambda_star) : nlohmann::json(nullptr)},
                    {"c_star", s.c_star},
                    {"ok", s.ok}});
    return {{"kind", "check_report"},
            {"version", kReportFormatVersion},
            {"invocation", invocation},
            {"p_success", p_success},
            {"min_visible", min_visible},
            {"n_steps", steps.size()},
            {"n_failed", failed()},
            {"steps", st}};
  }

  static CheckReport from_json(const nlohmann::json& j) {
    CheckReport r;
    try {
      r.p_success = j.at("p_success").get<double>();
      r.min_visible = j.at("min_visible").get<std::size_t>();
      for (const auto& s : j.at("steps")) {
        StepRecord rec;
        rec.idx = s.at("idx").get<std::size_t>();
        rec.op = s.at("op").get<std::string>();
        rec.visible = s.at("visible").get<std::vector<int>>();
        if (!s.at("lambda_star").is_null()) rec.lambda_star = s.at("lambda_star").get<double>();
        rec.c_star = s.at("c_star").get<double>();
        rec.ok = s.at("ok").get<bool>();
        r.steps.push_back(std::move(rec));
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Parse, std::string("check report: ") + e.what());
    }
    return r;
  }
};

/// Fused certainty from the visible markers, or zero certainty with no
/// lambda when none are visible.
inline std::pair<std::optional<double>, double> fused_certainty(const WorldState& state, const Vec3& camera,
                                                                const std::vector<int>& ids,
                                                                const EigenvaluePredictor& pred,
                                                                const CertaintyParams& params, const CheckConfig& cfg) {
  if (ids.empty()) return {std::nullopt, 0.0};
  std::vector<SymMat3> covs;
  for (int id : ids) {
    const auto it = std::find_if(state.markers.begin(), state.markers.end(), [&](const auto& m) { return m.id == id; });
    covs.push_back(predict_covariance(downward_camera_frame(camera, fiducial_position(*it, cfg), state.unit_m), pred));
  }
  const SymMat3 fused = fuse_covariances(covs);
  return {lambda_max(fused), certainty_lower_bound(fused, params)};
}

/// Replays `plan` step by step. The camera hovers `cfg.hover` units above
/// the slot being filled or the spot a marker is being set down on. A
/// step passes when at least `cfg.min_visible` markers are visible and the
/// fused certainty meets c_min; P(success) is the product of per-step C*.
inline CheckReport check_plan(const Structure& s, const Plan& plan, const EigenvaluePredictor& pred,
                              const CertaintyParams& params, const CheckConfig& cfg = {}) {
  params.validate();
  cfg.validate();
  const std::set<Slot> slots(s.slots.begin(), s.slots.end());
  WorldState state{s.unit_m, {}, plan.initial_markers};
  CheckReport rep;
  rep.min_visible = plan.actions.empty() ? 0 : std::numeric_limits<std::size_t>::max();

  auto bad = [](std::size_t idx, const std::string& why) {
    return Error(ErrorKind::Validation, "action " + std::to_string(idx) + ": " + why);
  };
  auto marker_at = [&](const Vec3& p, std::optional<int> except) {
    return std::any_of(state.markers.begin(), state.markers.end(), [&](const MarkerState& m) {
      return (!except || m.id != *except) && (m.position - p).norm() < 1e-9;
    });
  };

  for (std::size_t idx = 0; idx < plan.actions.size(); ++idx) {
    const Action& a = plan.actions[idx];
    StepRecord rec;
    rec.idx = idx;
    Vec3 camera;
    std::optional<int> carried;
    MarkerState* mover = nullptr;
    if (const auto* pb = std::get_if<PlaceBlock>(&a)) {
      rec.op = "place_block";
      if (!slots.count(pb->slot)) throw bad(idx, "slot " + to_string(pb->slot) + " is not in the structure");
      if (state.placed.count(pb->slot)) throw bad(idx, "slot " + to_string(pb->slot) + " is already filled");
      if (marker_at(pb->slot.position(), std::nullopt))
        throw bad(idx, "slot " + to_string(pb->slot) + " is occupied by a marker");
      camera = pb->slot.position() + Vec3(0, 0, cfg.hover);
    } else {
      const auto& mm = std::get<MoveMarker>(a);
      rec.op = "move_marker";
      auto it = std::find_if(state.markers.begin(), state.markers.end(), [&](const auto& m) { return m.id == mm.id; });
      if (it == state.markers.end()) throw bad(idx, "unknown marker id " + std::to_string(mm.id));
      if ((it->position - mm.from).norm() > 1e-9) throw bad(idx, "marker " + std::to_string(mm.id) + " is not at 'from'");
      if ((mm.to - mm.from).norm() < 1e-12) throw bad(idx, "marker move with from == to");
      if (marker_at(mm.to, mm.id)) throw bad(idx, "destination already holds a marker");
      const Slot cell{static_cast<int>(std::lround(mm.to.x())), static_cast<int>(std::lround(mm.to.y())),
                      static_cast<int>(std::lround(mm.to.z()))};
      if (state.placed.count(cell) && (cell.position() - mm.to).norm() < 1e-9)
        throw bad(idx, "destination lies inside a placed block");
      camera = mm.to + Vec3(0, 0, cfg.hover);
      carried = mm.id;
      mover = &*it;
    }

    rec.visible = visible_markers(state, camera, pred, cfg, carried);
    auto [lam, c] = fused_certainty(state, camera, rec.visible, pred, params, cfg);
    rec.lambda_star = lam;
    rec.c_star = c;
    rec.ok = rec.visible.size() >= cfg.min_visible && c >= params.c_min;
    rep.p_success *= c;
    rep.min_visible = std::min(rep.min_visible, rec.visible.size());
    rep.steps.push_back(std::move(rec));

    if (const auto* pb = std::get_if<PlaceBlock>(&a))
      state.placed.insert(pb->slot);
    else
      mover->position = std::get<MoveMarker>(a).to;
  }

  if (state.placed.size() != slots.size()) {
    for (const Slot& sl : s.slots)
      if (!state.placed.count(sl))
        throw Error(ErrorKind::Validation, "plan never fills slot " + to_string(sl) + " (" +
                                               std::to_string(slots.size() - state.placed.size()) + " slots missing)");
  }
  return rep;
}

/// Coverage probe laid out like the checker's geometry: the camera hovers
/// above a surface between one level below and one level above the markers'
/// own, never over a marker's column, with markers about a block apart.
inline CoverageProbeConfig matched_probe(const CheckConfig& cfg, double unit_m) {
  cfg.validate();
  CoverageProbeConfig pc;
  pc.hover_heights.clear();
  for (double level : {-1.0, 0.0, 1.0}) {
    const double dz = cfg.hover - cfg.marker_height + level;
    if (dz > 0.0) pc.hover_heights.push_back(dz * unit_m);
  }
  if (pc.hover_heights.empty()) throw Error(ErrorKind::InvalidInput, "matched_probe: hover is below the fiducials");
  pc.array_radius = unit_m;
  pc.min_standoff = unit_m * (1.0 - 1e-9);
  pc.search_max = 20.0 * unit_m;
  return pc;
}

/// Largest cluster radius, structure units, whose default hop reach (2r)
/// stays within coverage_radius_3d.
inline double radius_limit(const EigenvaluePredictor& pred, const CertaintyParams& params, std::size_t markers,
                           const CheckConfig& cfg, double unit_m) {
  const double rc = coverage_radius_3d(pred, params, static_cast<int>(markers), matched_probe(cfg, unit_m));
  return rc / (2.0 * unit_m);
}

struct SweepRow {
  double r = 0.0;
  /// Zero when the planner failed or any step failed the check.
  double p_success = 0.0;
  std::size_t steps = 0;
  bool feasible = false;
  std::string note;
};

struct SweepConfig {
  std::size_t markers = 3;
  PlannerConfig planner;
  CheckConfig check;
  /// Worker threads; zero picks the hardware concurrency.
  unsigned threads = 0;
};

inline SweepRow sweep_one(const Structure& s, double r, const EigenvaluePredictor& pred, const CertaintyParams& params,
                          const SweepConfig& cfg) {
  SweepRow row;
  row.r = r;
  Plan plan;
  try {
    plan = plan_assembly(s, default_markers(s, cfg.markers), r, cfg.planner);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Infeasible) throw;
    row.note = e.what();
    return row;
  }
  row.feasible = true;
  row.steps = plan.actions.size();
  const CheckReport rep = check_plan(s, plan, pred, params, cfg.check);
  if (rep.all_ok()) {
    row.p_success = rep.p_success;
  } else {
    const auto& f = *std::find_if(rep.steps.begin(), rep.steps.end(), [](const auto& st) { return !st.ok; });
    row.note = std::to_string(rep.failed()) + " failing steps, first at " + std::to_string(f.idx) + " with " +
               std::to_string(f.visible.size()) + " visible markers";
  }
  return row;
}

/// Plans and checks the structure at each radius. Radii run in parallel;
/// rows come back in input order.
inline std::vector<SweepRow> sweep_radius(const Structure& s, const std::vector<double>& radii,
                                          const EigenvaluePredictor& pred, const CertaintyParams& params,
                                          const SweepConfig& cfg = {}) {
  for (std::size_t i = 0; i < radii.size(); ++i) {
    if (!(radii[i] > 0.0)) throw Error(ErrorKind::InvalidInput, "sweep_radius: radii must be positive");
    if (i > 0 && !(radii[i] > radii[i - 1])) throw Error(ErrorKind::InvalidInput, "sweep_radius: radii must ascend");
  }
  std::vector<SweepRow> rows(radii.size());
  std::vector<std::exception_ptr> errors(radii.size());
  unsigned threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, radii.size())));
  auto work = [&](unsigned w) {
    for (std::size_t i = w; i < radii.size(); i += threads) {
      try {
        rows[i] = sweep_one(s, radii[i], pred, params, cfg);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rows;
}

/// Shortest decimal text that reads back to the same double.
inline std::string exact_number(double x) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows, const std::string& invocation = "") {
  os << "# fidplan sweep v" << kReportFormatVersion << (invocation.empty() ? "" : " : " + invocation) << '\n';
  os << "r,p_success,steps\n";
  for (const auto& r : rows) os << exact_number(r.r) << ',' << exact_number(r.p_success) << ',' << r.steps << '\n';
}

inline std::vector<SweepRow> read_sweep_csv(std::istream& is) {
  std::vector<SweepRow> rows;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "r,p_success,steps") throw Error(ErrorKind::Parse, "sweep csv: unexpected header '" + line + "'");
      header = true;
      continue;
    }
    SweepRow r;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c))
      throw Error(ErrorKind::Parse, "sweep csv: bad row '" + line + "'");
    try {
      r.r = std::stod(a);
      r.p_success = std::stod(b);
      r.steps = std::stoul(c);
    } catch (const std::exception&) {
      throw Error(ErrorKind::Parse, "sweep csv: bad number in '" + line + "'");
    }
    // Infeasible radii are written with zero steps.
    r.feasible = r.steps > 0;
    rows.push_back(r);
  }
  return rows;
}

/// Two stacked line plots: P(success) and step count against r.
inline void write_sweep_svg(std::ostream& os, const std::vector<SweepRow>& rows, const std::string& invocation = "") {
  const double w = 480, h = 200, left = 60, top = 20, gap = 50;
  double rmin = rows.empty() ? 0 : rows.front().r, rmax = rows.empty() ? 1 : rows.back().r;
  if (rmax <= rmin) rmax = rmin + 1;
  std::size_t smax = 1;
  for (const auto& r : rows) smax = std::max(smax, r.steps);
  auto x = [&](double r) { return left + (r - rmin) / (rmax - rmin) * w; };
  auto fmt = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v;
    return s.str();
  };
  auto esc = [](std::string t) {
    std::string o;
    for (char c : t) {
      if (c == '&') o += "&amp;";
      else if (c == '<') o += "&lt;";
      else if (c == '>') o += "&gt;";
      else o += c;
    }
    // "--" is not allowed inside XML comments.
    std::string::size_type p;
    while ((p = o.find("--")) != std::string::npos) o.replace(p, 2, "- -");
    return o;
  };

  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<!-- fidplan sweep v" << kReportFormatVersion << " " << esc(invocation) << " -->\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + w + 30 << "\" height=\""
     << top + 2 * h + gap + 40 << "\">\n";
  auto panel = [&](double y0, const std::string& label, auto yval) {
    os << "  <rect x=\"" << left << "\" y=\"" << y0 << "\" width=\"" << w << "\" height=\"" << h
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    os << "  <text x=\"5\" y=\"" << fmt(y0 + h / 2) << "\" font-size=\"12\">" << label << "</text>\n";
    os << "  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i)
      os << (i ? " " : "") << fmt(x(rows[i].r)) << "," << fmt(y0 + h - yval(rows[i]) * h);
    os << "\"/>\n";
    for (const auto& r : rows)
      os << "  <circle cx=\"" << fmt(x(r.r)) << "\" cy=\"" << fmt(y0 + h - yval(r) * h) << "\" r=\"3\"/>\n";
  };
  panel(top, "P", [](const SweepRow& r) { return r.p_success; });
  panel(top + h + gap, "steps", [&](const SweepRow& r) { return static_cast<double>(r.steps) / smax; });
  for (const auto& r : rows)
    os << "  <text x=\"" << fmt(x(r.r) - 8) << "\" y=\"" << fmt(top + 2 * h + gap + 18) << "\" font-size=\"12\">"
       << exact_number(r.r) << "</text>\n";
  os << "  <text x=\"" << fmt(left + w / 2) << "\" y=\"" << fmt(top + 2 * h + gap + 36)
     << "\" font-size=\"12\">r (structure units)</text>\n";
  os << "</svg>\n";
}

}  // namespace fidplan
