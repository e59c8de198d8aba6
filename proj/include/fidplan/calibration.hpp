#pragma once

// Fitting the largest-eigenvalue predictor from simulated noise statistics
// and checking how conservative it is on held-out positions.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fidplan/error.hpp"
#include "fidplan/fiducial_sim.hpp"
#include "fidplan/noise_model.hpp"
#include "fidplan/numeric.hpp"

namespace fidplan {

struct FitConfig {
  double rho_min = 0.15;
  double rho_max = 2.0;
  double theta_max = 70.0 * M_PI / 180.0;
  int rho_cells = 50;
  int theta_cells = 50;
  /// Multiplier applied to the per-cell maximum.
  double safety_factor = 1.1;
  /// Bound on the two minor eigenvalues, m^2. When unset it is taken as
  /// safety_factor times the largest second eigenvalue seen in the data.
  std::optional<double> lambda_i;
};

struct FitResult {
  EigenvaluePredictor predictor;
  std::vector<std::string> warnings;
};

/// Bins records by (range, incidence angle); each cell takes
/// safety_factor * max(lambda_star) of its records. Empty interior cells are
/// filled from the nearest populated cell; an empty boundary cell is an error.
inline FitResult fit_predictor(const std::vector<DatasetRecord>& dataset, const FitConfig& cfg) {
  if (dataset.empty()) throw Error(ErrorKind::InvalidInput, "fit_predictor: empty dataset");
  if (cfg.rho_cells < 1 || cfg.theta_cells < 1) throw Error(ErrorKind::InvalidInput, "fit_predictor: cell counts must be >= 1");
  if (!(cfg.safety_factor > 0.0)) throw Error(ErrorKind::InvalidInput, "fit_predictor: safety factor must be positive");
  if (!(cfg.rho_min > 0.0 && cfg.rho_max > cfg.rho_min && cfg.theta_max > 0.0))
    throw Error(ErrorKind::InvalidInput, "fit_predictor: bad domain bounds");

  const auto nr = static_cast<std::size_t>(cfg.rho_cells);
  const auto nt = static_cast<std::size_t>(cfg.theta_cells);
  constexpr double kEmpty = -1.0;
  std::vector<std::vector<double>> cells(nr, std::vector<double>(nt, kEmpty));
  double minor_max = 0.0;
  std::size_t used = 0;

  auto bin = [](double x, double lo, double hi, std::size_t n) {
    const double f = (x - lo) / (hi - lo) * static_cast<double>(n);
    return std::min(n - 1, static_cast<std::size_t>(std::max(0.0, f)));
  };

  for (const DatasetRecord& rec : dataset) {
    if (rec.skipped) continue;
    const RangeAngle ra = range_angle(rec.p);
    // Tolerate rounding at the bounds.
    if (ra.rho < cfg.rho_min * (1 - 1e-12) || ra.rho > cfg.rho_max * (1 + 1e-12) || ra.theta > cfg.theta_max + 1e-12)
      continue;
    double& c = cells[bin(ra.rho, cfg.rho_min, cfg.rho_max, nr)][bin(ra.theta, 0.0, cfg.theta_max, nt)];
    c = std::max(c, rec.lambda_star);
    minor_max = std::max(minor_max, eig_sym3(rec.cov).values[1]);
    ++used;
  }
  if (used == 0) throw Error(ErrorKind::InvalidInput, "fit_predictor: no usable records inside the domain");

  std::vector<std::string> missing;
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t j = 0; j < nt; ++j)
      if (cells[i][j] == kEmpty && (i == 0 || j == 0 || i + 1 == nr || j + 1 == nt))
        missing.push_back("(" + std::to_string(i) + "," + std::to_string(j) + ")");
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : " ") + m;
    throw Error(ErrorKind::Coverage, "fit_predictor: boundary cells without data: " + list);
  }

  FitResult out;
  auto filled = cells;
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < nt; ++j) {
      if (cells[i][j] != kEmpty) continue;
      double best_d = std::numeric_limits<double>::infinity();
      double value = 0.0;
      for (std::size_t a = 0; a < nr; ++a)
        for (std::size_t b = 0; b < nt; ++b) {
          if (cells[a][b] == kEmpty) continue;
          const double di = static_cast<double>(a) - static_cast<double>(i);
          const double dj = static_cast<double>(b) - static_cast<double>(j);
          const double d = di * di + dj * dj;
          if (d < best_d) {
            best_d = d;
            value = cells[a][b];
          }
        }
      filled[i][j] = value;
      out.warnings.push_back("cell (" + std::to_string(i) + "," + std::to_string(j) +
                             ") had no records; filled from nearest populated cell");
    }
  }
  for (auto& row : filled)
    for (auto& v : row) v *= cfg.safety_factor;

  double lambda_i = cfg.lambda_i.value_or(cfg.safety_factor * minor_max);
  if (!(lambda_i > 0.0)) lambda_i = std::numeric_limits<double>::min();
  out.predictor = EigenvaluePredictor(cfg.rho_min, cfg.rho_max, 0.0, cfg.theta_max, std::move(filled), lambda_i);
  return out;
}

struct ConservativenessRow {
  Vec3 p = Vec3::Zero();
  double lambda_predicted = 0.0;
  double lambda_measured = 0.0;
  double c_predicted = 0.0;
  double c_measured = 0.0;
  bool conservative = true;
};

struct ConservativenessReport {
  std::size_t n = 0;
  double frac_conservative = 1.0;
  /// Largest c_predicted - c_measured over all rows, floored at 0.
  double worst_gap = 0.0;
  std::vector<ConservativenessRow> rows;
  /// The two rows with the largest over-prediction, fused both ways.
  std::size_t pair_a = 0, pair_b = 0;
  double fused_c_predicted = 0.0;
  double fused_c_measured = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows)
      rs.push_back({{"p", {r.p.x(), r.p.y(), r.p.z()}},
                    {"lambda_predicted", r.lambda_predicted},
                    {"lambda_measured", r.lambda_measured},
                    {"c_predicted", r.c_predicted},
                    {"c_measured", r.c_measured},
                    {"conservative", r.conservative}});
    return {{"n", n},
            {"frac_conservative", frac_conservative},
            {"worst_gap", worst_gap},
            {"fused_worst_pair",
             {{"rows", {pair_a, pair_b}}, {"c_predicted", fused_c_predicted}, {"c_measured", fused_c_measured}}},
            {"rows", rs}};
  }
};

/// Compares C* of the predicted covariance against C* of the measured one
/// at every held-out position. A row is conservative when the prediction
/// does not promise more certainty than the measurement supports.
inline ConservativenessReport evaluate_conservativeness(const EigenvaluePredictor& pred,
                                                        const std::vector<DatasetRecord>& held_out,
                                                        const CertaintyParams& params) {
  params.validate();
  ConservativenessReport rep;
  std::vector<SymMat3> predicted_covs, measured_covs;
  std::size_t conservative = 0;
  for (const DatasetRecord& rec : held_out) {
    if (rec.skipped) continue;
    ConservativenessRow row;
    row.p = rec.p;
    const SymMat3 pc = predict_covariance(rec.p, pred);
    row.lambda_predicted = lambda_max(pc);
    row.lambda_measured = lambda_max(rec.cov);
    row.c_predicted = certainty_from_lambda(row.lambda_predicted, params.alpha);
    row.c_measured = certainty_from_lambda(row.lambda_measured, params.alpha);
    row.conservative = row.c_predicted <= row.c_measured;
    conservative += row.conservative ? 1 : 0;
    rep.worst_gap = std::max(rep.worst_gap, row.c_predicted - row.c_measured);
    rep.rows.push_back(row);
    predicted_covs.push_back(pc);
    measured_covs.push_back(rec.cov);
  }
  rep.n = rep.rows.size();
  if (rep.n == 0) return rep;
  rep.frac_conservative = static_cast<double>(conservative) / static_cast<double>(rep.n);

  if (rep.n >= 2) {
    std::vector<std::size_t> order(rep.n);
    for (std::size_t i = 0; i < rep.n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return rep.rows[a].c_predicted - rep.rows[a].c_measured > rep.rows[b].c_predicted - rep.rows[b].c_measured;
    });
    rep.pair_a = order[0];
    rep.pair_b = order[1];
    rep.fused_c_predicted =
        certainty_lower_bound(fuse_covariances({predicted_covs[rep.pair_a], predicted_covs[rep.pair_b]}), params);
    rep.fused_c_measured =
        certainty_lower_bound(fuse_covariances({measured_covs[rep.pair_a], measured_covs[rep.pair_b]}), params);
  }
  return rep;
}

struct CalibrationConfig {
  SimulationConfig sim;
  PositionGrid train;
  /// Held-out grid; its own stream is derived from sim.seed.
  PositionGrid test;
  double safety_factor = 1.1;
  CertaintyParams params;

  /// Training grid over the default domain with a held-out grid one count
  /// smaller per axis at cell midpoints.
  static CalibrationConfig with_grid(const PositionGrid& train) {
    CalibrationConfig c;
    c.train = train;
    c.test = train;
    c.test.half_offset = true;
    c.test.n_rho = std::max(1, train.n_rho - 1);
    c.test.n_theta = std::max(1, train.n_theta - 1);
    c.test.n_phi = std::max(1, train.n_phi - 1);
    return c;
  }
};

struct CalibrationResult {
  std::vector<DatasetRecord> train_set;
  FitResult fit;
  ConservativenessReport report;
};

/// Simulates the training grid, fits one predictor cell per training grid
/// cell, and scores it on the held-out grid.
inline CalibrationResult calibrate(const CalibrationConfig& cfg) {
  CalibrationResult out;
  out.train_set = generate_dataset(cfg.sim, cfg.train.positions());
  FitConfig fc;
  fc.rho_min = cfg.train.rho_min;
  fc.rho_max = cfg.train.rho_max;
  fc.theta_max = cfg.train.theta_max;
  fc.rho_cells = cfg.train.n_rho;
  fc.theta_cells = cfg.train.n_theta;
  fc.safety_factor = cfg.safety_factor;
  out.fit = fit_predictor(out.train_set, fc);
  SimulationConfig held = cfg.sim;
  held.seed = Rng::derive(cfg.sim.seed, 0x7e57);
  out.report = evaluate_conservativeness(out.fit.predictor, generate_dataset(held, cfg.test.positions()), cfg.params);
  return out;
}

}  // namespace fidplan
