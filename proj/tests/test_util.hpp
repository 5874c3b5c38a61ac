// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <catch2/catch_amalgamated.hpp>
#include <functional>
#include <vector>

#include "wxrisk/ad.hpp"
#include "wxrisk/common.hpp"

namespace wxtest {

inline bool same_bits(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.array() == b.array()).all();
}

inline Eigen::MatrixXd randm(wxrisk::Rng& rng, Eigen::Index r, Eigen::Index c,
                             double lo, double hi) {
  return Eigen::MatrixXd::NullaryExpr(
      r, c, [&](Eigen::Index) { return rng.uniform(lo, hi); });
}

// Weighted sum turns any intermediate into a scalar with non-uniform pulls.
inline wxrisk::ad::Var weigh(const wxrisk::ad::Var& v, wxrisk::Rng& rng) {
  Eigen::MatrixXd w = Eigen::MatrixXd::NullaryExpr(
      v->value.rows(), v->value.cols(),
      [&](Eigen::Index) { return rng.uniform(-1.0, 1.0); });
  return wxrisk::ad::sum_all(wxrisk::ad::cwise_mul(v, wxrisk::ad::constant(w)));
}

using Builder = std::function<wxrisk::ad::Var(const std::vector<wxrisk::ad::Var>&)>;

inline double eval_scalar(const Builder& build,
                          const std::vector<Eigen::MatrixXd>& xs) {
  std::vector<wxrisk::ad::Var> leaves;
  leaves.reserve(xs.size());
  for (const auto& m : xs) leaves.push_back(wxrisk::ad::leaf(m));
  return build(leaves)->value(0, 0);
}

// Central finite differences over every entry of every input.
inline void check_gradients(const std::vector<Eigen::MatrixXd>& xs,
                            const Builder& build, double abs_tol = 1e-6,
                            double rel_tol = 1e-5) {
  std::vector<wxrisk::ad::Var> leaves;
  leaves.reserve(xs.size());
  for (const auto& m : xs) leaves.push_back(wxrisk::ad::leaf(m));
  wxrisk::ad::Var root = build(leaves);
  wxrisk::ad::backward(root);

  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (Eigen::Index i = 0; i < xs[k].rows(); ++i) {
      for (Eigen::Index j = 0; j < xs[k].cols(); ++j) {
        double h = 1e-5 * std::max(1.0, std::abs(xs[k](i, j)));
        auto plus = xs;
        auto minus = xs;
        plus[k](i, j) += h;
        minus[k](i, j) -= h;
        double fd =
            (eval_scalar(build, plus) - eval_scalar(build, minus)) / (2.0 * h);
        double an = wxrisk::ad::grad(leaves[k])(i, j);
        INFO("input " << k << " entry (" << i << "," << j << ")");
        REQUIRE_THAT(an, Catch::Matchers::WithinAbs(fd, abs_tol) ||
                             Catch::Matchers::WithinRel(fd, rel_tol));
      }
    }
  }
}

}  // namespace wxtest
