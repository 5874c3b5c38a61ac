// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <vector>

#include "wxrisk/ad.hpp"
#include "wxrisk/common.hpp"
#include "wxrisk/dspp.hpp"

namespace wxrisk {

constexpr double kDivergenceThreshold = 1e6;

struct TrainConfig {
  std::size_t epochs = 500;
  double learning_rate = 0.1;
  std::vector<std::size_t> decay_epochs = {100, 250, 350, 450};
  double decay_factor = 0.1;
  std::size_t batch = 1000;
  double beta = 1.0;  // KL weight
  std::uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& c) {
  require(c.learning_rate > 0.0, "train config: learning rate must be > 0");
  require(c.decay_factor > 0.0 && c.decay_factor <= 1.0,
          "train config: decay factor must be in (0, 1]");
  require(c.batch >= 1, "train config: batch size must be >= 1");
  require(c.beta >= 0.0, "train config: beta must be >= 0");
  for (std::size_t i = 0; i + 1 < c.decay_epochs.size(); ++i)
    require(c.decay_epochs[i] < c.decay_epochs[i + 1],
            "train config: decay epochs must be strictly increasing");
  if (c.epochs > 0 && !c.decay_epochs.empty())
    require(c.decay_epochs.back() < c.epochs,
            "train config: decay epoch ", c.decay_epochs.back(),
            " is not below epochs = ", c.epochs);
}

inline double lr_at_epoch(const TrainConfig& c, std::size_t epoch) {
  double lr = c.learning_rate;
  for (std::size_t d : c.decay_epochs)
    if (epoch >= d) lr *= c.decay_factor;
  return lr;
}

// Adam with the usual defaults; state slots follow the binder's order,
// which is fixed by the model structure.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<Eigen::MatrixXd> m1, m2;

  void step(const std::vector<Eigen::MatrixXd*>& slots,
            const std::vector<ad::Var>& leaves, double lr) {
    require(slots.size() == leaves.size(), "adam: ", slots.size(),
            " slots for ", leaves.size(), " leaves");
    if (m1.empty()) {
      for (auto* s : slots) {
        m1.push_back(Eigen::MatrixXd::Zero(s->rows(), s->cols()));
        m2.push_back(Eigen::MatrixXd::Zero(s->rows(), s->cols()));
      }
    }
    require(m1.size() == slots.size(), "adam: slot count changed from ",
            m1.size(), " to ", slots.size());
    ++t;
    double c1 = 1.0 - std::pow(beta1, double(t));
    double c2 = 1.0 - std::pow(beta2, double(t));
    for (std::size_t i = 0; i < slots.size(); ++i) {
      Eigen::MatrixXd g = ad::grad(leaves[i]);
      m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
      m2[i] = beta2 * m2[i] + (1.0 - beta2) * g.cwiseProduct(g);
      Eigen::ArrayXXd mhat = m1[i].array() / c1;
      Eigen::ArrayXXd vhat = m2[i].array() / c2;
      *slots[i] -= (lr * mhat / (vhat.sqrt() + eps)).matrix();
    }
  }
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

// Minibatch training of the full model by regularized maximum likelihood.
// Batches are drawn by reshuffling the row order every epoch from a seed
// substream, so a given (config, seed) pair replays exactly.
inline TrainResult train_dspp(DsppModel& model, const Eigen::MatrixXd& x_raw,
                              const Eigen::VectorXd& y,
                              const TrainConfig& cfg) {
  validate_train_config(cfg);
  require(x_raw.rows() == y.size(), "train_dspp: ", x_raw.rows(),
          " inputs for ", y.size(), " targets");
  require(x_raw.rows() >= 1, "train_dspp: empty training set");
  require(!model.layers.empty(), "train_dspp: empty model");

  Eigen::MatrixXd x_std = model.input_scaler.standardize_rows(x_raw);
  Eigen::Index n = x_std.rows();
  Eigen::Index batch = Eigen::Index(cfg.batch) < n ? Eigen::Index(cfg.batch) : n;

  TrainResult result;
  AdamState adam;
  std::deque<double> recent;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_at_epoch(cfg, epoch);
    Rng erng(derive_seed(cfg.seed, cat("epoch:", epoch)));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    erng.shuffle(order);

    double acc = 0.0;
    std::size_t batches = 0;
    for (Eigen::Index at = 0; at < n; at += batch) {
      Eigen::Index take = std::min(batch, n - at);
      Eigen::MatrixXd xb(take, x_std.cols());
      Eigen::VectorXd yb(take);
      for (Eigen::Index r = 0; r < take; ++r) {
        xb.row(r) = x_std.row(order[std::size_t(at + r)]);
        yb[r] = y[order[std::size_t(at + r)]];
      }

      ParamBinder pb;
      DsppVars dv = bind_dspp(model, pb);
      auto parts = dspp_objective_graph(model, dv, ad::constant(xb), yb,
                                        std::size_t(n), cfg.beta);
      double lv = parts.loss->value(0, 0);
      if (lv > kDivergenceThreshold) {
        std::string trace = "train_dspp: loss diverged past 1e6";
        trace += cat("; epoch ", epoch, ", loss ", lv, "; recent losses:");
        for (double r : recent) trace += cat(" ", r);
        fail(trace);
      }
      recent.push_back(lv);
      if (recent.size() > 10) recent.pop_front();

      ad::backward(parts.loss);
      adam.step(pb.slots, pb.leaves, lr);
      acc += lv;
      ++batches;
    }
    result.epoch_loss.push_back(acc / double(batches));
    // Partition of unity survives every step by construction; fail fast
    // here if the logits ever degenerate.
    quadrature_weights(model.quadrature);
  }
  return result;
}

}  // namespace wxrisk
