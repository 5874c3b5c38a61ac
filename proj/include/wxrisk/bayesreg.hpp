// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "wxrisk/common.hpp"

namespace wxrisk {

// Degree-2 polynomial basis in graded lexicographic order: the constant,
// the linear terms, then x_i * x_j for i <= j.
struct Monomial {
  int i = -1;  // -1 means absent
  int j = -1;
};

inline std::vector<Monomial> poly_terms(int dim) {
  require(dim >= 1, "poly_terms: dim must be >= 1, got ", dim);
  std::vector<Monomial> terms;
  terms.push_back({-1, -1});
  for (int i = 0; i < dim; ++i) terms.push_back({i, -1});
  for (int i = 0; i < dim; ++i)
    for (int j = i; j < dim; ++j) terms.push_back({i, j});
  return terms;
}

inline Eigen::VectorXd design_row(const Eigen::VectorXd& theta) {
  int d = int(theta.size());
  std::vector<Monomial> terms = poly_terms(d);
  Eigen::VectorXd row(Eigen::Index(terms.size()));
  for (std::size_t t = 0; t < terms.size(); ++t) {
    const Monomial& m = terms[t];
    double v = 1.0;
    if (m.i >= 0) v *= theta[m.i];
    if (m.j >= 0) v *= theta[m.j];
    row[Eigen::Index(t)] = v;
  }
  return row;
}

inline Eigen::MatrixXd design_matrix(const Eigen::MatrixXd& theta) {
  require(theta.rows() >= 1 && theta.cols() >= 1,
          "design_matrix: empty input");
  Eigen::Index p = Eigen::Index(poly_terms(int(theta.cols())).size());
  Eigen::MatrixXd x(theta.rows(), p);
  for (Eigen::Index r = 0; r < theta.rows(); ++r)
    x.row(r) = design_row(theta.row(r).transpose()).transpose();
  return x;
}

struct BayesRegConfig {
  std::size_t chains = 6;
  std::size_t draws = 10000;  // kept per chain
  std::size_t warmup = 5000;  // discarded
  double tau = 10.0;          // normal prior sd on weights
  double sigma0 = 1.0;        // half-normal scale on the noise sd
  double fixed_sigma = 0.0;   // > 0 pins sigma (conjugate checks)
  std::uint64_t seed = 0;
};

// Log posterior density up to an additive constant; -inf for sigma <= 0.
inline double bayes_log_posterior(const Eigen::MatrixXd& x,
                                  const Eigen::VectorXd& y,
                                  const Eigen::VectorXd& w, double sigma,
                                  const BayesRegConfig& cfg) {
  if (sigma <= 0.0) return -std::numeric_limits<double>::infinity();
  double rss = (y - x * w).squaredNorm();
  double n = double(y.size());
  return -n * std::log(sigma) - rss / (2.0 * sigma * sigma) -
         w.squaredNorm() / (2.0 * cfg.tau * cfg.tau) -
         sigma * sigma / (2.0 * cfg.sigma0 * cfg.sigma0);
}

struct BayesRegPosterior {
  int dim = 0;                // input dimension d (basis has 1+d+d(d+1)/2 terms)
  std::size_t chains = 0;
  std::size_t draws = 0;      // kept draws per chain
  Eigen::MatrixXd weights;    // (chains*draws) x P, chain-major rows
  Eigen::VectorXd sigma;      // chains*draws
  Eigen::VectorXd acceptance; // per chain, post-warmup proposal acceptance
};

// Component-wise random-walk Metropolis with per-parameter step sizes
// adapted toward a 20-40% acceptance rate during warmup only. The noise sd
// moves on the log scale (with the Jacobian term); chains start from
// overdispersed points drawn from per-chain seed substreams.
inline BayesRegPosterior bayes_fit(const Eigen::MatrixXd& theta,
                                   const Eigen::VectorXd& y,
                                   const BayesRegConfig& cfg) {
  require(theta.rows() == y.size(), "bayes_fit: ", theta.rows(),
          " inputs for ", y.size(), " targets");
  require(theta.rows() >= 2, "bayes_fit: need at least two rows");
  require(cfg.chains >= 2, "bayes_fit: need at least two chains, got ",
          cfg.chains);
  require(cfg.draws >= 1, "bayes_fit: need at least one kept draw");
  require(cfg.tau > 0.0 && cfg.sigma0 > 0.0,
          "bayes_fit: prior scales must be positive");
  require(cfg.fixed_sigma >= 0.0, "bayes_fit: fixed sigma must be >= 0");

  Eigen::MatrixXd x = design_matrix(theta);
  Eigen::Index n = x.rows();
  Eigen::Index p = x.cols();

  BayesRegPosterior post;
  post.dim = int(theta.cols());
  post.chains = cfg.chains;
  post.draws = cfg.draws;
  post.weights.resize(Eigen::Index(cfg.chains * cfg.draws), p);
  post.sigma.resize(Eigen::Index(cfg.chains * cfg.draws));
  post.acceptance.resize(Eigen::Index(cfg.chains));

  const bool sample_sigma = cfg.fixed_sigma == 0.0;
  const std::size_t tune_window = 100;

  for (std::size_t c = 0; c < cfg.chains; ++c) {
    Rng rng(derive_seed(cfg.seed, cat("chain:", c)));

    Eigen::VectorXd w(p);
    for (Eigen::Index j = 0; j < p; ++j) w[j] = 2.0 * rng.normal();
    double sigma = sample_sigma
                       ? std::exp(rng.uniform(std::log(0.25), std::log(4.0)))
                       : cfg.fixed_sigma;

    Eigen::VectorXd fit = x * w;
    double rss = (y - fit).squaredNorm();
    Eigen::VectorXd scale = Eigen::VectorXd::Constant(p, 0.1);
    double log_sigma_scale = 0.1;
    std::vector<std::size_t> window_acc(std::size_t(p) + 1, 0);

    std::size_t kept = 0, accepted = 0, proposed = 0;
    for (std::size_t it = 0; it < cfg.warmup + cfg.draws; ++it) {
      bool warm = it < cfg.warmup;

      for (Eigen::Index j = 0; j < p; ++j) {
        double step = scale[j] * rng.normal();
        double wj_new = w[j] + step;
        Eigen::VectorXd fit_new = fit + step * x.col(j);
        double rss_new = (y - fit_new).squaredNorm();
        double delta = -(rss_new - rss) / (2.0 * sigma * sigma) -
                       (wj_new * wj_new - w[j] * w[j]) /
                           (2.0 * cfg.tau * cfg.tau);
        bool accept = delta >= 0.0 || std::log(rng.uniform01()) < delta;
        if (accept) {
          w[j] = wj_new;
          fit.swap(fit_new);
          rss = rss_new;
          if (warm) ++window_acc[std::size_t(j)];
          if (!warm) ++accepted;
        }
        if (!warm) ++proposed;
      }

      if (sample_sigma) {
        double sigma_new = sigma * std::exp(log_sigma_scale * rng.normal());
        double delta = -double(n) * (std::log(sigma_new) - std::log(sigma)) -
                       rss * (1.0 / (2.0 * sigma_new * sigma_new) -
                              1.0 / (2.0 * sigma * sigma)) -
                       (sigma_new * sigma_new - sigma * sigma) /
                           (2.0 * cfg.sigma0 * cfg.sigma0) +
                       (std::log(sigma_new) - std::log(sigma));
        bool accept = delta >= 0.0 || std::log(rng.uniform01()) < delta;
        if (accept) {
          sigma = sigma_new;
          if (warm) ++window_acc[std::size_t(p)];
          if (!warm) ++accepted;
        }
        if (!warm) ++proposed;
      }

      if (warm && (it + 1) % tune_window == 0) {
        for (Eigen::Index j = 0; j < p; ++j) {
          double rate = double(window_acc[std::size_t(j)]) / double(tune_window);
          if (rate < 0.20) scale[j] *= 0.7;
          if (rate > 0.40) scale[j] *= 1.4;
          window_acc[std::size_t(j)] = 0;
        }
        if (sample_sigma) {
          double rate = double(window_acc[std::size_t(p)]) / double(tune_window);
          if (rate < 0.20) log_sigma_scale *= 0.7;
          if (rate > 0.40) log_sigma_scale *= 1.4;
          window_acc[std::size_t(p)] = 0;
        }
      }

      if (!warm) {
        Eigen::Index row = Eigen::Index(c * cfg.draws + kept);
        post.weights.row(row) = w.transpose();
        post.sigma[row] = sigma;
        ++kept;
      }
    }
    post.acceptance[Eigen::Index(c)] =
        proposed == 0 ? 0.0 : double(accepted) / double(proposed);
  }

  double pooled = post.acceptance.mean();
  require(pooled >= 0.01, "bayes_fit: sampler stalled, pooled acceptance ",
          pooled, " below 1%");
  return post;
}

// Gelman-Rubin potential scale reduction over kept draws.
inline double r_hat(const std::vector<Eigen::VectorXd>& chains) {
  require(chains.size() >= 2, "r_hat: need at least two chains, got ",
          chains.size());
  Eigen::Index n = chains[0].size();
  require(n >= 2, "r_hat: need at least two draws per chain");
  for (const auto& c : chains)
    require(c.size() == n, "r_hat: chain length mismatch: ", c.size(),
            " vs ", n);

  double m = double(chains.size());
  double w_acc = 0.0, grand = 0.0;
  std::vector<double> means;
  for (const auto& c : chains) {
    double mean = c.mean();
    means.push_back(mean);
    grand += mean / m;
    w_acc += (c.array() - mean).square().sum() / double(n - 1);
  }
  double w_var = w_acc / m;
  require(w_var > 0.0, "r_hat: zero within-chain variance");

  double b_acc = 0.0;
  for (double mean : means) b_acc += (mean - grand) * (mean - grand);
  double b = double(n) * b_acc / (m - 1.0);

  double pooled = (double(n - 1) / double(n)) * w_var + b / double(n);
  return std::sqrt(pooled / w_var);
}

// Per-parameter R-hat for the stored draws; the last entry is sigma.
inline Eigen::VectorXd posterior_r_hats(const BayesRegPosterior& post) {
  Eigen::Index p = post.weights.cols();
  Eigen::VectorXd out(p + 1);
  for (Eigen::Index j = 0; j <= p; ++j) {
    std::vector<Eigen::VectorXd> per_chain;
    for (std::size_t c = 0; c < post.chains; ++c) {
      Eigen::Index at = Eigen::Index(c * post.draws);
      Eigen::Index len = Eigen::Index(post.draws);
      if (j < p)
        per_chain.push_back(post.weights.col(j).segment(at, len));
      else
        per_chain.push_back(post.sigma.segment(at, len));
    }
    out[j] = r_hat(per_chain);
  }
  return out;
}

struct BayesPrediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

// Posterior predictive moments. For a linear form f = phi . w the mean is
// phi . wbar and the variance is phi^T Cov(w) phi (population covariance
// over draws) plus the mean of sigma^2; a single draw therefore gives
// exactly sigma^2.
inline BayesPrediction posterior_predict(const BayesRegPosterior& post,
                                         const Eigen::MatrixXd& theta) {
  require(theta.cols() == post.dim, "posterior_predict: input dim ",
          theta.cols(), " does not match posterior dim ", post.dim);
  Eigen::Index t = post.weights.rows();
  require(t >= 1, "posterior_predict: empty posterior");

  Eigen::VectorXd wbar = post.weights.colwise().mean();
  Eigen::MatrixXd centered = post.weights.rowwise() - wbar.transpose();
  Eigen::MatrixXd cov =
      (centered.transpose() * centered) / double(t);  // population
  double mean_sigma2 = post.sigma.squaredNorm() / double(t);

  Eigen::MatrixXd phi = design_matrix(theta);
  BayesPrediction out;
  out.mean = phi * wbar;
  out.var.resize(theta.rows());
  for (Eigen::Index i = 0; i < theta.rows(); ++i)
    out.var[i] = phi.row(i) * cov * phi.row(i).transpose() + mean_sigma2;
  return out;
}

inline void save_posterior_csv(const BayesRegPosterior& post,
                               const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_posterior_csv: cannot open ", path);
  out << "chain,draw";
  for (Eigen::Index j = 0; j < post.weights.cols(); ++j) out << ",w" << j;
  out << ",sigma\n";
  for (std::size_t c = 0; c < post.chains; ++c) {
    for (std::size_t d = 0; d < post.draws; ++d) {
      Eigen::Index row = Eigen::Index(c * post.draws + d);
      out << c << "," << d;
      for (Eigen::Index j = 0; j < post.weights.cols(); ++j)
        out << "," << fmt_double(post.weights(row, j));
      out << "," << fmt_double(post.sigma[row]) << "\n";
    }
  }
  require(out.good(), "save_posterior_csv: write failed for ", path);
}

inline BayesRegPosterior load_posterior_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_posterior_csv: cannot open ", path);
  std::string line;
  require(bool(std::getline(in, line)), "load_posterior_csv: empty file ",
          path);
  std::vector<std::string> header = split(line, ',');
  require(header.size() >= 4 && header[0] == "chain" && header[1] == "draw" &&
              header.back() == "sigma",
          "load_posterior_csv: unexpected header in ", path);
  Eigen::Index p = Eigen::Index(header.size()) - 3;
  for (Eigen::Index j = 0; j < p; ++j)
    require(header[std::size_t(j) + 2] == cat("w", j),
            "load_posterior_csv: unexpected weight column ",
            header[std::size_t(j) + 2]);

  int dim = 0;
  while (Eigen::Index(poly_terms(dim + 1).size()) < p) ++dim;
  ++dim;
  require(Eigen::Index(poly_terms(dim).size()) == p,
          "load_posterior_csv: ", p, " weight columns do not form a basis");

  std::vector<std::vector<double>> rows;
  std::size_t chains = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f = split(line, ',');
    require(f.size() == header.size(), "load_posterior_csv: row with ",
            f.size(), " fields, expected ", header.size());
    std::vector<double> vals;
    std::uint64_t chain = 0, draw = 0;
    require(parse_u64(f[0], chain) && parse_u64(f[1], draw),
            "load_posterior_csv: bad chain/draw indices in row ",
            rows.size() + 1);
    chains = std::max(chains, std::size_t(chain) + 1);
    for (std::size_t k = 2; k < f.size(); ++k) {
      double v = 0.0;
      require(parse_double(f[k], v), "load_posterior_csv: bad number '",
              f[k], "'");
      vals.push_back(v);
    }
    rows.push_back(std::move(vals));
  }
  require(!rows.empty(), "load_posterior_csv: no draws in ", path);
  require(chains >= 1 && rows.size() % chains == 0,
          "load_posterior_csv: ", rows.size(), " rows for ", chains,
          " chains");

  BayesRegPosterior post;
  post.dim = dim;
  post.chains = chains;
  post.draws = rows.size() / chains;
  post.weights.resize(Eigen::Index(rows.size()), p);
  post.sigma.resize(Eigen::Index(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (Eigen::Index j = 0; j < p; ++j)
      post.weights(Eigen::Index(r), j) = rows[r][std::size_t(j)];
    post.sigma[Eigen::Index(r)] = rows[r][std::size_t(p)];
  }
  return post;
}

}  // namespace wxrisk
