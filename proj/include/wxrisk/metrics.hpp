// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "wxrisk/common.hpp"

namespace wxrisk {

// Truth values below this magnitude make a relative error meaningless and
// are reported as a hard error instead of being silently excluded.
inline constexpr double kMapeTruthFloor = 1e-9;

// Mean absolute percentage error, as a fraction (0.1 means 10%).
inline double mape(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth) {
  require(pred.size() == truth.size(), "mape: ", pred.size(),
          " predictions for ", truth.size(), " truth values");
  require(truth.size() >= 1, "mape: empty input");
  std::string offending;
  for (Eigen::Index i = 0; i < truth.size(); ++i)
    if (std::abs(truth[i]) < kMapeTruthFloor) {
      if (!offending.empty()) offending += ", ";
      offending += cat(i);
    }
  require(offending.empty(), "mape: |truth| below ", kMapeTruthFloor,
          " at indices [", offending, "]");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < truth.size(); ++i)
    acc += std::abs(pred[i] - truth[i]) / std::abs(truth[i]);
  return acc / double(truth.size());
}

// Coefficient of determination, 1 - SS_res / SS_tot.
inline double r_squared(const Eigen::VectorXd& pred,
                        const Eigen::VectorXd& truth) {
  require(pred.size() == truth.size(), "r_squared: ", pred.size(),
          " predictions for ", truth.size(), " truth values");
  require(truth.size() >= 2, "r_squared: need at least 2 points, got ",
          truth.size());
  double mean = truth.mean();
  double ss_tot = (truth.array() - mean).square().sum();
  require(ss_tot > 0.0, "r_squared: truth is constant");
  double ss_res = (truth - pred).squaredNorm();
  return 1.0 - ss_res / ss_tot;
}

}  // namespace wxrisk
