// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <utility>
#include <vector>

#include "wxrisk/ad.hpp"
#include "wxrisk/common.hpp"
#include "wxrisk/kernels.hpp"

namespace wxrisk {

// Lower clamp applied to layer variances; matches the base Cholesky jitter,
// so a collapsed posterior bottoms out at the jitter level instead of going
// negative through rounding.
constexpr double kLayerVarianceFloor = 1e-8;

// Binds parameter storage into graph leaves, one binder per graph build.
// Trainable binds are recorded so the optimizer can pair every gradient
// with its storage slot; the bind order is fixed by the model structure.
struct ParamBinder {
  std::vector<Eigen::MatrixXd*> slots;
  std::vector<ad::Var> leaves;

  ad::Var bind(Eigen::MatrixXd& m) {
    slots.push_back(&m);
    leaves.push_back(ad::leaf(m));
    return leaves.back();
  }
};

// One sparse variational GP layer. Output dimensions are independent GPs
// sharing the inducing inputs and the kernel; variational parameters are
// whitened, so the prior corresponds to mean zero and identity Cholesky.
struct SvgpLayer {
  int input_dim = 0;
  int output_dim = 0;
  MaternKernel kernel;
  Eigen::MatrixXd inducing;          // M x input_dim
  Eigen::MatrixXd variational_mean;  // M x output_dim
  // Per output dimension, M x M raw matrix; strict lower triangle is used
  // as is and the diagonal passes through exp, so zero means identity.
  std::vector<Eigen::MatrixXd> variational_chol_raw;
  bool constant_mean = false;
  Eigen::MatrixXd mean_weight;  // input_dim x output_dim, affine mean only
  Eigen::MatrixXd mean_bias;    // 1 x output_dim, or 1 x 1 when constant
};

inline SvgpLayer make_layer(int input_dim, int output_dim, int m_inducing,
                            bool constant_mean, int half_order = 5) {
  require(input_dim >= 1 && output_dim >= 1,
          "make_layer: dims must be positive, got ", input_dim, "x",
          output_dim);
  require(m_inducing >= 1, "make_layer: need at least one inducing point");
  require(!constant_mean || output_dim == 1,
          "make_layer: constant mean requires a single output dimension");
  SvgpLayer l;
  l.input_dim = input_dim;
  l.output_dim = output_dim;
  l.kernel = make_matern(input_dim, half_order);
  l.inducing = Eigen::MatrixXd::Zero(m_inducing, input_dim);
  l.variational_mean = Eigen::MatrixXd::Zero(m_inducing, output_dim);
  l.variational_chol_raw.assign(
      std::size_t(output_dim), Eigen::MatrixXd::Zero(m_inducing, m_inducing));
  l.constant_mean = constant_mean;
  if (constant_mean) {
    l.mean_bias = Eigen::MatrixXd::Zero(1, 1);
  } else {
    // Identity-padded linear map passes the leading coordinates through.
    l.mean_weight = Eigen::MatrixXd::Zero(input_dim, output_dim);
    for (int i = 0; i < std::min(input_dim, output_dim); ++i)
      l.mean_weight(i, i) = 1.0;
    l.mean_bias = Eigen::MatrixXd::Zero(1, output_dim);
  }
  return l;
}

// Graph-side handles to one layer's parameters.
struct LayerVars {
  KernelVars kernel;
  ad::Var inducing;
  ad::Var variational_mean;
  std::vector<ad::Var> chol_raw;
  ad::Var mean_weight;
  ad::Var mean_bias;
};

inline LayerVars bind_layer(SvgpLayer& l, ParamBinder& pb) {
  LayerVars v;
  v.kernel.half_order = l.kernel.half_order;
  v.kernel.raw_lengthscales = pb.bind(l.kernel.raw_lengthscales);
  v.kernel.raw_outputscale = pb.bind(l.kernel.raw_outputscale);
  v.inducing = pb.bind(l.inducing);
  v.variational_mean = pb.bind(l.variational_mean);
  v.chol_raw.reserve(l.variational_chol_raw.size());
  for (auto& c : l.variational_chol_raw) v.chol_raw.push_back(pb.bind(c));
  if (!l.constant_mean) v.mean_weight = pb.bind(l.mean_weight);
  v.mean_bias = pb.bind(l.mean_bias);
  return v;
}

// Constant (inference-only) view of the same parameters.
inline LayerVars view_layer(const SvgpLayer& l) {
  LayerVars v;
  v.kernel.half_order = l.kernel.half_order;
  v.kernel.raw_lengthscales = ad::constant(l.kernel.raw_lengthscales);
  v.kernel.raw_outputscale = ad::constant(l.kernel.raw_outputscale);
  v.inducing = ad::constant(l.inducing);
  v.variational_mean = ad::constant(l.variational_mean);
  v.chol_raw.reserve(l.variational_chol_raw.size());
  for (const auto& c : l.variational_chol_raw)
    v.chol_raw.push_back(ad::constant(c));
  if (!l.constant_mean) v.mean_weight = ad::constant(l.mean_weight);
  v.mean_bias = ad::constant(l.mean_bias);
  return v;
}

struct LayerOut {
  ad::Var mean;  // n x output_dim
  ad::Var var;   // n x output_dim
};

// Whitened predictive marginals at the rows of x.
//
//   A      = L^え1 K_zx with L = chol(K_zz + jitter I)
//   mean_d = mean_fn_d(x) + A^T mbar_d
//   var_d  = k(x, x) + |C_d^T a_i|^2 - |a_i|^2
//
// The variance is grouped so that at the prior (mbar = 0, C = identity) the
// correction cancels bitwise and var equals the outputscale exactly.
inline LayerOut layer_forward_graph(const SvgpLayer& meta, const LayerVars& lv,
                                    const ad::Var& x) {
  require(x->value.cols() == meta.input_dim, "layer_forward: input has dim ",
          x->value.cols(), ", layer expects ", meta.input_dim);
  Eigen::Index n = x->value.rows();

  auto inv = kernel_inv_lengthscales(lv.kernel);
  auto os = kernel_outputscale(lv.kernel);
  auto zs = ad::mul_rowvec(lv.inducing, inv);
  auto xs = ad::mul_rowvec(x, inv);
  int order = lv.kernel.half_order;
  auto kzz =
      ad::scale_by(ad::matern_unit_sq(scaled_sqdist(zs, zs), order), os);
  auto kzx =
      ad::scale_by(ad::matern_unit_sq(scaled_sqdist(zs, xs), order), os);
  auto chol = ad::cholesky_jitter(kzz);
  auto a = ad::solve_lower(chol, kzx);  // M x n

  ad::Var mf;
  if (meta.constant_mean) {
    mf = ad::scale_by(ad::constant(Eigen::MatrixXd::Ones(n, 1)), lv.mean_bias);
  } else {
    mf = ad::add_rowvec(ad::mul(x, lv.mean_weight), lv.mean_bias);
  }
  auto mean = ad::add(mf, ad::mul(ad::transpose(a), lv.variational_mean));

  auto css_a = ad::col_sum_sq(a);  // 1 x n
  std::vector<ad::Var> var_cols;
  var_cols.reserve(std::size_t(meta.output_dim));
  for (int d = 0; d < meta.output_dim; ++d) {
    auto c = ad::lower_tri_exp_diag(lv.chol_raw[std::size_t(d)]);
    auto b = ad::mul(ad::transpose(c), a);
    var_cols.push_back(ad::transpose(ad::sub(ad::col_sum_sq(b), css_a)));
  }
  auto correction = ad::hcat(var_cols);  // n x output_dim
  auto base = ad::scale_by(
      ad::constant(Eigen::MatrixXd::Ones(n, meta.output_dim)), os);
  auto var = ad::cwise_max_const(ad::add(base, correction), kLayerVarianceFloor);
  return {mean, var};
}

// KL from the whitened variational posterior to the standard normal prior,
// summed over output dimensions:
//
//   KL_d = 0.5 (|mbar_d|^2 + |C_d|_F^2 - M - 2 sum log diag C_d)
//
// Grouped so the prior gives exactly zero.
inline ad::Var layer_kl_graph(const SvgpLayer& meta, const LayerVars& lv) {
  Eigen::Index m = meta.inducing.rows();
  auto t = ad::sum_all(ad::cwise_square(lv.variational_mean));
  ad::Var logdet;
  for (int d = 0; d < meta.output_dim; ++d) {
    auto c = ad::lower_tri_exp_diag(lv.chol_raw[std::size_t(d)]);
    t = ad::add(t, ad::sum_all(ad::cwise_square(c)));
    auto sld = ad::sum_log_diag(c);
    logdet = d == 0 ? sld : ad::add(logdet, sld);
  }
  t = ad::cadd(t, -double(m) * double(meta.output_dim));
  return ad::scale(ad::sub(t, ad::scale(logdet, 2.0)), 0.5);
}

// Plain evaluation for a fixed layer: (mean, var) at the rows of x.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> layer_forward(
    const SvgpLayer& l, const Eigen::MatrixXd& x) {
  LayerOut out = layer_forward_graph(l, view_layer(l), ad::constant(x));
  return {out.mean->value, out.var->value};
}

inline double layer_kl(const SvgpLayer& l) {
  return layer_kl_graph(l, view_layer(l))->value(0, 0);
}

}  // namespace wxrisk
