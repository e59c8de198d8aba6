// fidplan: calibrate a noise predictor, plan and check assemblies, sweep radii.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fidplan/calibration.hpp"
#include "fidplan/plan_checker.hpp"
#include "fidplan/reference_1d.hpp"

using namespace fidplan;

namespace {

enum Exit : int { kOk = 0, kParse = 2, kInfeasible = 3, kCheckFailed = 4, kFloor = 5 };

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Infeasible:
    case ErrorKind::Coverage: return kInfeasible;
    default: return kParse;
  }
}

std::string invocation_of(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += ' ';
    out += argv[i];
  }
  return out;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Parse, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, path + ": " + e.what());
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Parse, "cannot write " + path);
  return out;
}

void write_json(const std::string& path, const nlohmann::json& j) { open_out(path) << j.dump(2) << '\n'; }

EigenvaluePredictor load_predictor(const std::string& path) { return EigenvaluePredictor::from_json(read_json(path)); }

Structure load_structure(const std::string& path) { return Structure::from_json(read_json(path)); }

Plan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Parse, "cannot open " + path);
  return Plan::read_jsonl(in);
}

struct GridFlags {
  double rho_min = 0.15, rho_max = 2.0, theta_max_deg = 70.0;
  int n_rho = 25, n_theta = 25, n_phi = 10;
  int test_rho = 0, test_theta = 0, test_phi = 0;
};

}  // namespace

int main(int argc, char** argv) {
  const std::string invocation = invocation_of(argc, argv);
  CLI::App app{"Fiducial-marker noise calibration and assembly planning"};
  app.require_subcommand(1);

  // structure
  auto* st = app.add_subcommand("structure", "Write a box or pyramid structure file");
  std::vector<int> box_dims;
  int pyramid_base = 0;
  double unit = 0.15;
  std::string st_out;
  st->add_option("--box", box_dims, "nx,ny,levels")->delimiter(',')->expected(3);
  st->add_option("--pyramid", pyramid_base, "Base side of a stepped pyramid");
  st->add_option("--unit", unit, "Slot pitch, meters")->capture_default_str();
  st->add_option("--out", st_out, "Structure JSON")->required();

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Simulate detections, fit the predictor and test it on a held-out grid");
  std::string camera_file, cal_out, cal_report, cal_dataset;
  GridFlags grid;
  double sigma_px = 0.5, marker_side = 0.15, safety = 1.1, floor = 0.95, alpha = 0.02, c_min = 0.95;
  int trials = 1000;
  unsigned threads = 0;
  std::uint64_t seed = 0;
  cal->add_option("--camera", camera_file, "Camera JSON; the built-in fisheye when omitted");
  cal->add_option("--rho-min", grid.rho_min)->capture_default_str();
  cal->add_option("--rho-max", grid.rho_max)->capture_default_str();
  cal->add_option("--theta-max-deg", grid.theta_max_deg)->capture_default_str();
  cal->add_option("--n-rho", grid.n_rho)->capture_default_str();
  cal->add_option("--n-theta", grid.n_theta)->capture_default_str();
  cal->add_option("--n-phi", grid.n_phi)->capture_default_str();
  cal->add_option("--test-n-rho", grid.test_rho, "Held-out grid counts; default one less than training");
  cal->add_option("--test-n-theta", grid.test_theta);
  cal->add_option("--test-n-phi", grid.test_phi);
  cal->add_option("--sigma-px", sigma_px)->capture_default_str();
  cal->add_option("--marker-side", marker_side, "meters")->capture_default_str();
  cal->add_option("--trials", trials)->capture_default_str();
  cal->add_option("--safety", safety)->capture_default_str();
  cal->add_option("--floor", floor, "Minimum conservative fraction")->capture_default_str();
  cal->add_option("--alpha", alpha)->capture_default_str();
  cal->add_option("--c-min", c_min)->capture_default_str();
  cal->add_option("--threads", threads);
  cal->add_option("--seed", seed)->required();
  cal->add_option("--out", cal_out, "Predictor JSON")->required();
  cal->add_option("--report", cal_report, "Conservativeness report JSON");
  cal->add_option("--dataset", cal_dataset, "Training dataset JSON lines");

  // plan
  auto* pl = app.add_subcommand("plan", "Plan an assembly");
  std::string pl_structure, pl_predictor, pl_out;
  std::size_t markers = 3;
  double r = 1.5, hover = CheckConfig{}.hover;
  pl->add_option("--structure", pl_structure)->required();
  pl->add_option("--markers", markers)->capture_default_str();
  pl->add_option("--r", r, "Cluster radius, structure units")->required();
  pl->add_option("--predictor", pl_predictor, "Enables the coverage radius warning");
  pl->add_option("--hover", hover)->capture_default_str();
  pl->add_option("--alpha", alpha)->capture_default_str();
  pl->add_option("--c-min", c_min)->capture_default_str();
  pl->add_option("--seed", seed)->required();
  pl->add_option("--out", pl_out, "Plan JSON lines")->required();

  // check
  auto* ck = app.add_subcommand("check", "Replay a plan and score it");
  std::string ck_structure, ck_plan, ck_predictor, ck_out;
  int min_visible = 2;
  ck->add_option("--structure", ck_structure)->required();
  ck->add_option("--plan", ck_plan)->required();
  ck->add_option("--predictor", ck_predictor)->required();
  ck->add_option("--alpha", alpha)->capture_default_str();
  ck->add_option("--c-min", c_min)->capture_default_str();
  ck->add_option("--hover", hover)->capture_default_str();
  ck->add_option("--min-visible", min_visible)->capture_default_str();
  ck->add_option("--out", ck_out, "Report JSON")->required();

  // sweep
  auto* sw = app.add_subcommand("sweep", "Plan and check over several cluster radii");
  std::string sw_structure, sw_predictor, sw_csv, sw_svg;
  std::vector<double> radii;
  sw->add_option("--structure", sw_structure)->required();
  sw->add_option("--radii", radii, "Ascending, comma separated")->delimiter(',')->required();
  sw->add_option("--markers", markers)->capture_default_str();
  sw->add_option("--predictor", sw_predictor)->required();
  sw->add_option("--alpha", alpha)->capture_default_str();
  sw->add_option("--c-min", c_min)->capture_default_str();
  sw->add_option("--hover", hover)->capture_default_str();
  sw->add_option("--threads", threads);
  sw->add_option("--seed", seed)->required();
  sw->add_option("--out", sw_csv, "CSV table")->required();
  sw->add_option("--svg", sw_svg, "Optional SVG plot");

  // demo-1d
  auto* demo = app.add_subcommand("demo-1d", "Run the one-dimensional two-beacon example");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kParse;
  }

  try {
    if (*st) {
      Structure s;
      if (!box_dims.empty() == (pyramid_base > 0))
        throw Error(ErrorKind::InvalidInput, "give exactly one of --box or --pyramid");
      s = box_dims.empty() ? Structure::pyramid(pyramid_base, unit)
                           : Structure::box(box_dims[0], box_dims[1], box_dims[2], unit);
      write_json(st_out, s.to_json());
      std::cout << "slots " << s.slots.size() << '\n';
      return kOk;
    }

    if (*cal) {
      SimulationConfig sc;
      if (!camera_file.empty()) sc.camera = CameraModel::from_json(read_json(camera_file));
      sc.marker.side = marker_side;
      sc.sigma_px = sigma_px;
      sc.trials = trials;
      sc.seed = seed;
      sc.threads = threads;
      PositionGrid train;
      train.rho_min = grid.rho_min;
      train.rho_max = grid.rho_max;
      train.theta_max = grid.theta_max_deg * M_PI / 180.0;
      train.n_rho = grid.n_rho;
      train.n_theta = grid.n_theta;
      train.n_phi = grid.n_phi;
      CalibrationConfig cc = CalibrationConfig::with_grid(train);
      cc.sim = sc;
      cc.safety_factor = safety;
      cc.params = {alpha, c_min};
      if (grid.test_rho > 0) cc.test.n_rho = grid.test_rho;
      if (grid.test_theta > 0) cc.test.n_theta = grid.test_theta;
      if (grid.test_phi > 0) cc.test.n_phi = grid.test_phi;

      const CalibrationResult res = calibrate(cc);
      const auto& train_set = res.train_set;
      const auto& fit = res.fit;
      const auto& rep = res.report;
      if (!cal_dataset.empty()) {
        auto out = open_out(cal_dataset);
        for (const auto& rec : train_set) out << rec.to_json().dump() << '\n';
      }
      for (const auto& w : fit.warnings) std::cerr << "warning: " << w << '\n';

      nlohmann::json pj = fit.predictor.to_json();
      pj["invocation"] = invocation;
      write_json(cal_out, pj);
      if (!cal_report.empty()) {
        nlohmann::json rj = rep.to_json();
        rj["kind"] = "conservativeness_report";
        rj["version"] = kReportFormatVersion;
        rj["invocation"] = invocation;
        write_json(cal_report, rj);
      }
      std::cout << "train " << train_set.size() << " test " << rep.n << " conservative "
                << exact_number(rep.frac_conservative) << " worst_gap " << exact_number(rep.worst_gap)
                << " lambda_i " << exact_number(fit.predictor.lambda_i()) << '\n';
      return rep.frac_conservative < floor ? kFloor : kOk;
    }

    if (*pl) {
      const Structure s = load_structure(pl_structure);
      if (!pl_predictor.empty() && !s.slots.empty()) {
        CheckConfig cc;
        cc.hover = hover;
        const double limit =
            radius_limit(load_predictor(pl_predictor), CertaintyParams{alpha, c_min}, markers, cc, s.unit_m);
        if (r > limit)
          std::cerr << "warning: r = " << r << " exceeds the coverage limit " << exact_number(limit) << '\n';
      }
      Plan plan;
      if (!s.slots.empty()) {
        PlannerConfig pc;
        pc.seed = seed;
        plan = plan_assembly(s, default_markers(s, markers), r, pc);
      } else {
        plan.r = r;
        plan.seed = seed;
      }
      auto out = open_out(pl_out);
      plan.write_jsonl(out, invocation);
      std::cout << "steps " << plan.actions.size() << " places " << plan.place_count() << " clusters_per_layer";
      for (int k : plan.clusters_per_layer) std::cout << ' ' << k;
      std::cout << '\n';
      return kOk;
    }

    if (*ck) {
      const Structure s = load_structure(ck_structure);
      const Plan plan = load_plan(ck_plan);
      CheckConfig cc;
      cc.hover = hover;
      cc.min_visible = min_visible;
      const CheckReport rep = check_plan(s, plan, load_predictor(ck_predictor), CertaintyParams{alpha, c_min}, cc);
      write_json(ck_out, rep.to_json(invocation));
      std::cout << "steps " << rep.steps.size() << " failed " << rep.failed() << " p_success "
                << exact_number(rep.p_success) << '\n';
      return rep.all_ok() ? kOk : kCheckFailed;
    }

    if (*sw) {
      const Structure s = load_structure(sw_structure);
      SweepConfig cfg;
      cfg.markers = markers;
      cfg.planner.seed = seed;
      cfg.check.hover = hover;
      cfg.threads = threads;
      const auto rows = sweep_radius(s, radii, load_predictor(sw_predictor), CertaintyParams{alpha, c_min}, cfg);
      auto csv = open_out(sw_csv);
      write_sweep_csv(csv, rows, invocation);
      if (!sw_svg.empty()) {
        auto out = open_out(sw_svg);
        write_sweep_svg(out, rows, invocation);
      }
      for (const auto& row : rows)
        std::cout << "r " << exact_number(row.r) << " p_success " << exact_number(row.p_success) << " steps "
                  << row.steps << (row.note.empty() ? "" : "  (" + row.note + ")") << '\n';
      return kOk;
    }

    if (*demo) {
      const World1D w;
      const Result1D res = solve_1d_example(w);
      std::cout << std::setprecision(6) << std::fixed;
      std::cout << "coverage radius " << res.r_cov_exact << " (walked with " << std::setprecision(3) << res.r_cov
                << ")\n"
                << std::setprecision(6);
      std::vector<double> xs{w.b1, w.b2};
      for (const auto& mv : res.moves) {
        xs[static_cast<std::size_t>(mv.id - 1)] = mv.to.x();
        const double sig = fused_sigma_at(w.task, xs);
        std::cout << "MoveBeacon(b" << mv.id << ", " << mv.to.x() << ")  fused sigma at task " << sig
                  << "  certainty " << World1D::certainty(sig) << '\n';
      }
      std::cout << "complete(t1)  fused sigma " << res.fused_sigma << "  certainty " << res.certainty << '\n';
      const bool match = res.moves.size() == 2 && std::abs(res.moves[0].to.x() - 0.324) <= 1e-6 &&
                         std::abs(res.moves[1].to.x() - 0.548) <= 1e-6 &&
                         std::abs(res.r_cov_exact - 0.2236) <= 5e-5 && std::abs(res.fused_sigma - 0.019859) <= 5e-7 &&
                         res.fused_sigma <= 0.05;
      std::cout << (match ? "matches the reference plan" : "DOES NOT match the reference plan") << '\n';
      return match ? kOk : kCheckFailed;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kParse;
  }
  return kOk;
}
