// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "wxrisk/common.hpp"
#include "wxrisk/dataset.hpp"

namespace wxrisk {

// Sampling recipe for one synthetic weather parameter. Values are drawn as
// center + spread * u where u has a flat core and thin clamped tails: with
// probability core_mass, u ~ Uniform(-1, 1); otherwise |u| - 1 is exponential
// with mean (truncate - 1) / 5, clamped at truncate - 1. The flat core keeps
// randomly placed bin intervals well populated, while the tails stretch the
// empirical range to +/- truncate*spread so it is stable across seeds.
struct ParamSampling {
  std::string name;
  std::string unit;
  double center = 0.0;
  double spread = 1.0;      // half-width of the flat core
  double truncate = 3.5;    // range cap, in units of spread
  double core_mass = 0.96;  // probability of a core draw
};

// Smooth map from scaled parameter coordinates u = (x - center)/spread
// (|u| <= 1 inside the flat core) to a dropout probability. Families:
//   constant:    c0
//   single:      c0 + c1 * sigmoid(c2 * u0)              (ignores u1, u2, ...)
//   interaction: c0 + c1 * sigmoid(c2*u0 + c3*u1*u2)
//                   + c4 * sigmoid(c5*u1 + c6*u0*u2)
struct GroundTruth {
  std::string family = "constant";
  std::vector<double> coeffs = {0.1};

  double operator()(const Eigen::VectorXd& u) const {
    if (family == "constant") {
      require(coeffs.size() == 1, "ground_truth constant: want 1 coeff, got ",
              coeffs.size());
      return coeffs[0];
    }
    if (family == "single") {
      require(coeffs.size() == 3, "ground_truth single: want 3 coeffs, got ",
              coeffs.size());
      require(u.size() >= 1, "ground_truth single: needs at least 1 parameter");
      return coeffs[0] + coeffs[1] * sigmoid(coeffs[2] * u[0]);
    }
    if (family == "interaction") {
      require(coeffs.size() == 7, "ground_truth interaction: want 7 coeffs, got ",
              coeffs.size());
      require(u.size() >= 3, "ground_truth interaction: needs 3 parameters");
      return coeffs[0] + coeffs[1] * sigmoid(coeffs[2] * u[0] + coeffs[3] * u[1] * u[2]) +
             coeffs[4] * sigmoid(coeffs[5] * u[1] + coeffs[6] * u[0] * u[2]);
    }
    fail("ground_truth: unknown family '", family, "'");
  }
};

inline GroundTruth constant_truth(double level) { return {"constant", {level}}; }

inline GroundTruth single_param_truth() {
  return {"single", {0.05, 0.5, 2.0}};
}

inline GroundTruth interaction_truth() {
  return {"interaction", {0.07, 0.45, 3.0, 4.0, 0.18, 3.4, -2.8}};
}

struct SyntheticConfig {
  std::string state = "ZZ";
  std::vector<ParamSampling> params = {
      {"temperature", "degC", 15.0, 8.0, 3.5, 0.96},
      {"wind_speed", "m/s", 6.0, 3.0, 3.5, 0.96},
      {"precipitation", "mm", 1.5, 1.2, 3.5, 0.96},
  };
  GroundTruth ground_truth = interaction_truth();
  std::size_t n_measurements = 0;
  double noise_scale = 0.0;          // sd of uniform measurement noise on p
  double heavy_tail_fraction = 0.0;  // leading contiguous run of p = 1 rows
  double hours_checked = 256.0;      // power of two: hours/checked reproduces p
  std::uint64_t seed = 0;
};

// Draws measurements whose dropout probability follows cfg.ground_truth on
// the scaled coordinates u_j = (x_j - center_j)/spread_j. The heavy-tail
// rows form one contiguous burst at the head of the dataset; downstream
// robust estimation relies on corruption being bursty rather than scattered.
inline StateDataset generate_synthetic(const SyntheticConfig& cfg) {
  require(cfg.n_measurements > 0, "generate_synthetic: n_measurements is 0");
  require(!cfg.params.empty(), "generate_synthetic: no parameters configured");
  require(cfg.state.size() == 2, "generate_synthetic: state code '", cfg.state,
          "' must be 2 characters");
  require(cfg.noise_scale >= 0.0, "generate_synthetic: negative noise_scale");
  require(cfg.heavy_tail_fraction >= 0.0 && cfg.heavy_tail_fraction < 1.0,
          "generate_synthetic: heavy_tail_fraction must be in [0, 1)");
  require(cfg.hours_checked > 0.0, "generate_synthetic: hours_checked must be > 0");
  for (const auto& p : cfg.params) {
    require(p.spread > 0.0, "generate_synthetic: parameter '", p.name,
            "' has non-positive spread");
    require(p.truncate > 1.0, "generate_synthetic: parameter '", p.name,
            "' needs truncate > 1");
    require(p.core_mass > 0.0 && p.core_mass < 1.0,
            "generate_synthetic: parameter '", p.name,
            "' needs core_mass in (0, 1)");
  }

  StateDataset ds;
  ds.state = cfg.state;
  for (std::size_t j = 0; j < cfg.params.size(); ++j)
    ds.specs.push_back({cfg.params[j].name, cfg.params[j].unit, int(j)});
  validate_schema(ds.specs);

  Rng rng(derive_seed(cfg.seed, cat("synthetic:", cfg.state)));
  const std::size_t d = cfg.params.size();
  const std::size_t n_outlier =
      std::size_t(cfg.heavy_tail_fraction * double(cfg.n_measurements));
  const double noise_half = std::sqrt(3.0) * cfg.noise_scale;

  ds.measurements.reserve(cfg.n_measurements);
  Eigen::VectorXd u(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < cfg.n_measurements; ++i) {
    Measurement m;
    m.state = cfg.state;
    m.params.resize(Eigen::Index(d));
    for (std::size_t j = 0; j < d; ++j) {
      const auto& p = cfg.params[j];
      double uj;
      if (rng.uniform01() < p.core_mass) {
        uj = rng.uniform(-1.0, 1.0);
      } else {
        double scale = (p.truncate - 1.0) / 5.0;
        double excess = -std::log1p(-rng.uniform01()) * scale;
        double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
        uj = sign * std::min(1.0 + excess, p.truncate);
      }
      m.params[Eigen::Index(j)] = p.center + p.spread * uj;
      // u is derived from the stored value, so ground truth is an exact
      // function of the emitted parameters.
      u[Eigen::Index(j)] = (m.params[Eigen::Index(j)] - p.center) / p.spread;
    }
    double p_true = cfg.ground_truth(u);
    require(p_true >= 0.0 && p_true <= 1.0,
            "generate_synthetic: ground_truth produced ", p_true,
            " outside [0, 1]; adjust coefficients");
    double p_obs = p_true;
    if (noise_half > 0.0)
      p_obs = std::clamp(p_obs + rng.uniform(-noise_half, noise_half), 0.0, 1.0);
    if (i < n_outlier) p_obs = 1.0;
    m.hours_checked = cfg.hours_checked;
    m.hours_dropout = cfg.hours_checked * p_obs;
    ds.measurements.push_back(std::move(m));
  }
  recompute_ranges(ds);
  return ds;
}

}  // namespace wxrisk
