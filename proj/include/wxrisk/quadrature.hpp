// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstddef>

#include "wxrisk/common.hpp"

namespace wxrisk {

// Learnable quadrature over a standard normal: free site locations plus
// weight logits whose softmax gives the mixture weights.
struct QuadratureRule {
  Eigen::MatrixXd sites;          // S x 1
  Eigen::MatrixXd weight_logits;  // 1 x S
};

// Softmax of the logits with the largest entry adjusted so the weights sum
// to 1.0 exactly. The adjustment moves the dominant weight by at most a few
// ulps, so every weight stays strictly positive.
inline Eigen::VectorXd quadrature_weights(const QuadratureRule& q) {
  require(q.weight_logits.rows() == 1 && q.weight_logits.cols() >= 1,
          "quadrature_weights: logits must be 1 x S, got ",
          q.weight_logits.rows(), "x", q.weight_logits.cols());
  double m = q.weight_logits.maxCoeff();
  Eigen::VectorXd w =
      (q.weight_logits.row(0).transpose().array() - m).exp().matrix();
  w /= w.sum();
  // Push the ulp-level normalization residue into one component at a time;
  // a single component can oscillate around 1.0, so fall through the rest.
  Eigen::Index top = 0;
  w.maxCoeff(&top);
  for (Eigen::Index step = 0; step < w.size(); ++step) {
    Eigen::Index idx = (top + step) % w.size();
    for (int pass = 0; pass < 4 && w.sum() != 1.0; ++pass)
      w[idx] -= w.sum() - 1.0;
    if (w.sum() == 1.0) break;
  }
  require(w.sum() == 1.0 && w.minCoeff() > 0.0,
          "quadrature_weights: degenerate weight distribution");
  return w;
}

// Gauss-Hermite rule for the standard normal via the eigendecomposition of
// the Jacobi matrix of the probabilists' Hermite recurrence. Sites are the
// eigenvalues (ascending); the weight for site i is the squared first
// component of its normalized eigenvector.
inline QuadratureRule init_quadrature(std::size_t s_count) {
  require(s_count >= 1, "init_quadrature: need at least one site");
  Eigen::Index s = Eigen::Index(s_count);
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(s);
  Eigen::VectorXd sub(s > 1 ? s - 1 : 0);
  for (Eigen::Index k = 0; k + 1 < s; ++k) sub[k] = std::sqrt(double(k + 1));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  require(es.info() == Eigen::Success,
          "init_quadrature: eigendecomposition failed for S = ", s_count);

  Eigen::VectorXd w(s);
  for (Eigen::Index i = 0; i < s; ++i) {
    double v0 = es.eigenvectors()(0, i);
    w[i] = v0 * v0;
  }
  w /= w.sum();

  QuadratureRule q;
  q.sites = es.eigenvalues();
  q.weight_logits = w.array().log().matrix().transpose();
  return q;
}

}  // namespace wxrisk
