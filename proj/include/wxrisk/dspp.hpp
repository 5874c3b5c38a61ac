// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "wxrisk/ad.hpp"
#include "wxrisk/common.hpp"
#include "wxrisk/dataset.hpp"
#include "wxrisk/quadrature.hpp"
#include "wxrisk/svgp.hpp"

namespace wxrisk {

// Architecture of the deep sigma point regressor: a stack of sparse
// variational GP layers whose hidden outputs are resampled at fixed sigma
// points, one quadrature site per branch through the whole stack.
struct DsppArch {
  std::vector<int> layer_dims = {5, 3, 3, 1};  // output width per layer
  int inducing = 300;
  int sites = 8;
  int half_order = 5;
};

struct DsppModel {
  std::vector<SvgpLayer> layers;
  QuadratureRule quadrature;
  Eigen::MatrixXd raw_obs_noise;  // 1 x 1, softplus -> observation noise sd
  Standardizer input_scaler;
};

inline double obs_noise(const DsppModel& m) {
  return softplus(m.raw_obs_noise(0, 0));
}

namespace detail {

// Lloyd iterations seeded with distinct random rows; an empty cluster keeps
// its previous center. With n <= k the rows are recycled verbatim.
inline Eigen::MatrixXd kmeans_centers(const Eigen::MatrixXd& x,
                                      Eigen::Index k, Rng& rng,
                                      int iters = 10) {
  Eigen::Index n = x.rows();
  Eigen::MatrixXd centers(k, x.cols());
  if (n <= k) {
    for (Eigen::Index i = 0; i < k; ++i) centers.row(i) = x.row(i % n);
    return centers;
  }
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  for (Eigen::Index i = 0; i < k; ++i)
    centers.row(i) = x.row(idx[std::size_t(i)]);

  std::vector<Eigen::Index> assign(std::size_t(n), 0);
  for (int it = 0; it < iters; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = (x.row(i) - centers.row(0)).squaredNorm();
      Eigen::Index arg = 0;
      for (Eigen::Index c = 1; c < k; ++c) {
        double d = (x.row(i) - centers.row(c)).squaredNorm();
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      assign[std::size_t(i)] = arg;
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[std::size_t(i)]) += x.row(i);
      counts[assign[std::size_t(i)]] += 1.0;
    }
    for (Eigen::Index c = 0; c < k; ++c)
      if (counts[c] > 0.0) centers.row(c) = sums.row(c) / counts[c];
  }
  return centers;
}

}  // namespace detail

// Builds the layer stack on raw inputs: fits the input standardizer, places
// inducing points by k-means in standardized space (deeper layers use the
// image of the data under the initial mean functions), and starts every
// variational distribution at its prior.
inline DsppModel init_dspp(const Eigen::MatrixXd& x_raw, const DsppArch& arch,
                           std::uint64_t seed,
                           std::vector<std::string> input_names = {}) {
  require(!arch.layer_dims.empty(), "init_dspp: no layers");
  require(arch.layer_dims.back() == 1,
          "init_dspp: final layer must have one output, got ",
          arch.layer_dims.back());
  require(x_raw.rows() >= 2, "init_dspp: need at least two rows, got ",
          x_raw.rows());
  require(arch.sites >= 1, "init_dspp: need at least one site");
  if (input_names.empty())
    for (Eigen::Index j = 0; j < x_raw.cols(); ++j)
      input_names.push_back(cat("input_", j + 1));

  DsppModel m;
  m.input_scaler = fit_standardizer(x_raw, input_names);
  Eigen::MatrixXd cur = m.input_scaler.standardize_rows(x_raw);

  int in_dim = int(x_raw.cols());
  for (std::size_t i = 0; i < arch.layer_dims.size(); ++i) {
    bool last = i + 1 == arch.layer_dims.size();
    SvgpLayer l = make_layer(in_dim, arch.layer_dims[i], arch.inducing, last,
                             arch.half_order);
    Rng krng(derive_seed(seed, cat("kmeans:", i)));
    l.inducing = detail::kmeans_centers(cur, arch.inducing, krng);
    m.layers.push_back(std::move(l));
    if (!last) {
      const SvgpLayer& placed = m.layers.back();
      cur = ((cur * placed.mean_weight).rowwise() + placed.mean_bias.row(0))
                .eval();
      in_dim = arch.layer_dims[i];
    }
  }
  m.quadrature = init_quadrature(std::size_t(arch.sites));
  m.raw_obs_noise = Eigen::MatrixXd::Constant(1, 1, softplus_inv(0.01));
  return m;
}

// Graph-side handles to every model parameter.
struct DsppVars {
  std::vector<LayerVars> layers;
  ad::Var sites;          // S x 1
  ad::Var weight_logits;  // 1 x S
  ad::Var raw_obs_noise;  // 1 x 1
};

inline DsppVars bind_dspp(DsppModel& m, ParamBinder& pb) {
  DsppVars v;
  v.layers.reserve(m.layers.size());
  for (auto& l : m.layers) v.layers.push_back(bind_layer(l, pb));
  v.sites = pb.bind(m.quadrature.sites);
  v.weight_logits = pb.bind(m.quadrature.weight_logits);
  v.raw_obs_noise = pb.bind(m.raw_obs_noise);
  return v;
}

inline DsppVars view_dspp(const DsppModel& m) {
  DsppVars v;
  v.layers.reserve(m.layers.size());
  for (const auto& l : m.layers) v.layers.push_back(view_layer(l));
  v.sites = ad::constant(m.quadrature.sites);
  v.weight_logits = ad::constant(m.quadrature.weight_logits);
  v.raw_obs_noise = ad::constant(m.raw_obs_noise);
  return v;
}

struct BranchOut {
  ad::Var mean;  // n x 1
  ad::Var var;   // n x 1
};

// One output-layer marginal per quadrature site. The first layer is shared;
// from there branch s feeds mean + site_s * sqrt(var) of each hidden layer
// into the next, keeping its site through the whole stack.
inline std::vector<BranchOut> dspp_forward_graph(const DsppModel& meta,
                                                 const DsppVars& dv,
                                                 const ad::Var& x_std) {
  std::size_t depth = meta.layers.size();
  Eigen::Index s_count = meta.quadrature.sites.rows();
  LayerOut first = layer_forward_graph(meta.layers[0], dv.layers[0], x_std);

  std::vector<BranchOut> out;
  out.reserve(std::size_t(s_count));
  for (Eigen::Index s = 0; s < s_count; ++s) {
    auto xi = ad::entry(dv.sites, s, 0);
    LayerOut cur = first;
    for (std::size_t ell = 1; ell < depth; ++ell) {
      auto next_in = ad::add_scaled(cur.mean, ad::cwise_sqrt(cur.var), xi);
      cur = layer_forward_graph(meta.layers[ell], dv.layers[ell], next_in);
    }
    out.push_back({cur.mean, cur.var});
  }
  return out;
}

struct DsppObjectiveParts {
  ad::Var loss;
  ad::Var data_term;
  ad::Var kl_term;
};

// Negative regularized MLE objective on a minibatch:
//
//   -(n_total / n) sum_i log sum_s w_s N(y_i | mean_s(x_i), var_s(x_i) +
//   obs_noise^2) + beta * sum_layers KL
//
// evaluated through log-sum-exp over branches for stability.
inline DsppObjectiveParts dspp_objective_graph(const DsppModel& meta,
                                               const DsppVars& dv,
                                               const ad::Var& x_std,
                                               const Eigen::VectorXd& y,
                                               std::size_t n_total,
                                               double beta) {
  Eigen::Index n = x_std->value.rows();
  require(y.size() == n, "dspp_objective: ", y.size(), " targets for ", n,
          " inputs");
  require(n_total >= std::size_t(n), "dspp_objective: n_total ", n_total,
          " below batch size ", n);
  require(beta >= 0.0, "dspp_objective: beta must be nonnegative, got ", beta);

  auto branches = dspp_forward_graph(meta, dv, x_std);
  auto obs_var =
      ad::cwise_square(ad::cwise_softplus(dv.raw_obs_noise));  // 1 x 1
  auto ones_n = ad::constant(Eigen::MatrixXd::Ones(n, 1));
  auto y_const = ad::constant(Eigen::MatrixXd(y));

  std::vector<ad::Var> loglik_cols;
  loglik_cols.reserve(branches.size());
  for (const auto& br : branches) {
    auto tv = ad::add_scaled(br.var, ones_n, obs_var);
    auto q = ad::cwise_div(ad::cwise_square(ad::sub(y_const, br.mean)), tv);
    auto ll = ad::cadd(ad::scale(ad::add(ad::cwise_log(tv), q), -0.5),
                       -0.5 * std::log(2.0 * kPi));
    loglik_cols.push_back(ll);
  }
  auto t = ad::hcat(loglik_cols);  // n x S
  Eigen::Index s_count = t->value.cols();
  auto log_w = ad::sub(
      dv.weight_logits,
      ad::scale_by(ad::constant(Eigen::MatrixXd::Ones(1, s_count)),
                   ad::logsumexp_rows(dv.weight_logits)));
  auto mix = ad::logsumexp_rows(ad::add_rowvec(t, log_w));  // n x 1
  auto data =
      ad::scale(ad::sum_all(mix), -double(n_total) / double(n));

  ad::Var kl;
  for (std::size_t i = 0; i < meta.layers.size(); ++i) {
    auto k = layer_kl_graph(meta.layers[i], dv.layers[i]);
    kl = i == 0 ? k : ad::add(kl, k);
  }
  auto loss = ad::add(data, ad::scale(kl, beta));

  if (!std::isfinite(loss->value(0, 0))) {
    std::string diag = cat("dspp_objective: non-finite loss ",
                           loss->value(0, 0), "; kl = ", kl->value(0, 0),
                           ", obs noise var = ", obs_var->value(0, 0));
    for (std::size_t s = 0; s < loglik_cols.size(); ++s)
      diag += cat("; branch ", s,
                  " loglik in [", loglik_cols[s]->value.minCoeff(), ", ",
                  loglik_cols[s]->value.maxCoeff(), "]");
    fail(diag);
  }
  return {loss, data, kl};
}

struct DsppPrediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;  // includes observation noise, floored at obs_noise^2
};

inline DsppPrediction dspp_predict(const DsppModel& m,
                                   const Eigen::MatrixXd& x_raw) {
  require(!m.layers.empty(), "dspp_predict: empty model");
  Eigen::MatrixXd x_std = m.input_scaler.standardize_rows(x_raw);
  DsppVars dv = view_dspp(m);
  auto branches = dspp_forward_graph(m, dv, ad::constant(x_std));

  Eigen::VectorXd w = quadrature_weights(m.quadrature);
  double noise_var = obs_noise(m) * obs_noise(m);
  Eigen::Index n = x_raw.rows();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd second = Eigen::VectorXd::Zero(n);
  for (std::size_t s = 0; s < branches.size(); ++s) {
    const Eigen::MatrixXd& mu = branches[s].mean->value;
    const Eigen::MatrixXd& v = branches[s].var->value;
    mean += w[Eigen::Index(s)] * mu.col(0);
    second += w[Eigen::Index(s)] *
              (v.col(0).array() + noise_var + mu.col(0).array().square())
                  .matrix();
  }
  Eigen::VectorXd var =
      (second - mean.cwiseProduct(mean)).cwiseMax(noise_var);
  return {mean, var};
}

}  // namespace wxrisk
