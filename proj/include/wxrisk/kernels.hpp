// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <cmath>

#include "wxrisk/ad.hpp"
#include "wxrisk/common.hpp"

namespace wxrisk {

// Stationary Matern covariance with per-dimension (ARD) lengthscales and a
// scalar outputscale. Both are stored unconstrained; softplus maps them to
// the positive reals, so k(x, x) = outputscale holds for any raw values.
struct MaternKernel {
  int half_order = 5;                // 1, 3 or 5 -> Matern 1/2, 3/2, 5/2
  Eigen::MatrixXd raw_lengthscales;  // 1 x input_dim
  Eigen::MatrixXd raw_outputscale;   // 1 x 1
};

inline MaternKernel make_matern(int input_dim, int half_order = 5) {
  require(input_dim >= 1, "make_matern: input_dim must be >= 1, got ",
          input_dim);
  require(half_order == 1 || half_order == 3 || half_order == 5,
          "make_matern: half_order must be 1, 3 or 5, got ", half_order);
  MaternKernel k;
  k.half_order = half_order;
  k.raw_lengthscales =
      Eigen::MatrixXd::Constant(1, input_dim, softplus_inv(1.0));
  k.raw_outputscale = Eigen::MatrixXd::Constant(1, 1, softplus_inv(1.0));
  return k;
}

inline Eigen::VectorXd lengthscales(const MaternKernel& k) {
  return k.raw_lengthscales.row(0).transpose().unaryExpr(
      [](double v) { return softplus(v); });
}

inline double outputscale(const MaternKernel& k) {
  return softplus(k.raw_outputscale(0, 0));
}

namespace detail {

// Unit-scale Matern value as a function of the squared scaled distance.
inline double matern_unit(double sq, int half_order) {
  double s = sq < 0.0 ? 0.0 : sq;
  double t = std::sqrt(double(half_order) * s);
  double e = std::exp(-t);
  if (half_order == 1) return e;
  if (half_order == 3) return (1.0 + t) * e;
  return (1.0 + t + t * t / 3.0) * e;
}

}  // namespace detail

inline double matern_cov(const MaternKernel& k, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& y) {
  require(x.size() == y.size(), "matern_cov: input sizes differ, ", x.size(),
          " vs ", y.size());
  require(x.size() == k.raw_lengthscales.cols(),
          "matern_cov: input dim ", x.size(), " does not match kernel dim ",
          k.raw_lengthscales.cols());
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double d = (x[i] - y[i]) / softplus(k.raw_lengthscales(0, i));
    s += d * d;
  }
  return outputscale(k) * detail::matern_unit(s, k.half_order);
}

// Graph-side handles to one kernel's raw parameters.
struct KernelVars {
  int half_order = 5;
  ad::Var raw_lengthscales;  // 1 x input_dim
  ad::Var raw_outputscale;   // 1 x 1
};

inline ad::Var kernel_inv_lengthscales(const KernelVars& kv) {
  auto ls = ad::cwise_softplus(kv.raw_lengthscales);
  auto ones = ad::constant(Eigen::MatrixXd::Ones(1, ls->value.cols()));
  return ad::cwise_div(ones, ls);
}

inline ad::Var kernel_outputscale(const KernelVars& kv) {
  return ad::cwise_softplus(kv.raw_outputscale);
}

// Pairwise squared distances between row sets that are already divided by
// the lengthscales: a (n x d), b (m x d) -> n x m.
inline ad::Var scaled_sqdist(const ad::Var& a, const ad::Var& b) {
  require(a->value.cols() == b->value.cols(), "scaled_sqdist: dims ",
          a->value.cols(), " vs ", b->value.cols());
  Eigen::Index n = a->value.rows();
  Eigen::Index m = b->value.rows();
  auto ra = ad::row_sum_sq(a);
  auto rb = ad::row_sum_sq(b);
  auto ones_row = ad::constant(Eigen::MatrixXd::Ones(1, m));
  auto ones_col = ad::constant(Eigen::MatrixXd::Ones(n, 1));
  auto cross = ad::scale(ad::mul(a, ad::transpose(b)), -2.0);
  return ad::add(ad::add(ad::mul(ra, ones_row), cross),
                 ad::mul(ones_col, ad::transpose(rb)));
}

// Covariance matrix between raw input rows: x (n x d), y (m x d) -> n x m.
inline ad::Var gram(const KernelVars& kv, const ad::Var& x, const ad::Var& y) {
  auto inv = kernel_inv_lengthscales(kv);
  auto xs = ad::mul_rowvec(x, inv);
  auto ys = ad::mul_rowvec(y, inv);
  auto unit = ad::matern_unit_sq(scaled_sqdist(xs, ys), kv.half_order);
  return ad::scale_by(unit, kernel_outputscale(kv));
}

}  // namespace wxrisk
