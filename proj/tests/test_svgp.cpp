// Apache License, Version 2.0, refer to LICENSE.txt

#include <Eigen/Cholesky>
#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"
#include "wxrisk/svgp.hpp"

using namespace wxrisk;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using wxtest::check_gradients;
using wxtest::randm;
using wxtest::weigh;

namespace {

void randomize_layer(SvgpLayer& l, Rng& rng) {
  l.inducing = randm(rng, l.inducing.rows(), l.input_dim, -2.0, 2.0);
  l.variational_mean =
      randm(rng, l.variational_mean.rows(), l.output_dim, -1.0, 1.0);
  for (auto& c : l.variational_chol_raw)
    c = randm(rng, c.rows(), c.cols(), -0.3, 0.3);
  l.kernel.raw_lengthscales = randm(rng, 1, l.input_dim, 0.0, 1.0);
  l.kernel.raw_outputscale = randm(rng, 1, 1, 0.0, 1.0);
  if (!l.constant_mean) {
    l.mean_weight = randm(rng, l.input_dim, l.output_dim, -1.0, 1.0);
    l.mean_bias = randm(rng, 1, l.output_dim, -0.5, 0.5);
  }
}

Eigen::MatrixXd chol_from_raw(const Eigen::MatrixXd& raw) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    for (Eigen::Index j = 0; j < i; ++j) c(i, j) = raw(i, j);
    c(i, i) = std::exp(raw(i, i));
  }
  return c;
}

}  // namespace

TEST_CASE("layer forward matches dense whitened formulas", "[svgp]") {
  Rng rng(401);
  SvgpLayer l = make_layer(2, 2, 6, false);
  randomize_layer(l, rng);
  Eigen::MatrixXd x = randm(rng, 5, 2, -2.0, 2.0);

  auto [mean, var] = layer_forward(l, x);
  REQUIRE(mean.rows() == 5);
  REQUIRE(mean.cols() == 2);
  REQUIRE(var.rows() == 5);
  REQUIRE(var.cols() == 2);
  REQUIRE((var.array() >= kLayerVarianceFloor).all());

  Eigen::Index m = 6, n = 5;
  Eigen::MatrixXd kzz(m, m), kzx(m, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j)
      kzz(i, j) = matern_cov(l.kernel, l.inducing.row(i).transpose(),
                             l.inducing.row(j).transpose());
    for (Eigen::Index j = 0; j < n; ++j)
      kzx(i, j) = matern_cov(l.kernel, l.inducing.row(i).transpose(),
                             x.row(j).transpose());
  }
  kzz.diagonal().array() += 1e-8;
  Eigen::MatrixXd big_l = kzz.llt().matrixL();
  Eigen::MatrixXd a = big_l.triangularView<Eigen::Lower>().solve(kzx);
  Eigen::MatrixXd mf = (x * l.mean_weight).rowwise() + l.mean_bias.row(0);
  Eigen::MatrixXd mean_o = mf + a.transpose() * l.variational_mean;
  double os = outputscale(l.kernel);

  for (int d = 0; d < 2; ++d) {
    Eigen::MatrixXd c = chol_from_raw(l.variational_chol_raw[std::size_t(d)]);
    Eigen::MatrixXd b = c.transpose() * a;
    for (Eigen::Index i = 0; i < n; ++i) {
      double var_o = os + b.col(i).squaredNorm() - a.col(i).squaredNorm();
      REQUIRE_THAT(var(i, d), WithinAbs(var_o, 1e-9) || WithinRel(var_o, 1e-9));
      REQUIRE_THAT(mean(i, d),
                   WithinAbs(mean_o(i, d), 1e-9) || WithinRel(mean_o(i, d), 1e-9));
    }
  }
}

TEST_CASE("prior variational parameters reproduce the prior exactly", "[svgp]") {
  Rng rng(402);
  SvgpLayer l = make_layer(3, 2, 8, false);
  Eigen::MatrixXd keep_mean = l.variational_mean;
  auto keep_chol = l.variational_chol_raw;
  randomize_layer(l, rng);
  l.variational_mean = keep_mean;  // back to the prior
  l.variational_chol_raw = keep_chol;

  Eigen::MatrixXd x = randm(rng, 7, 3, -2.0, 2.0);
  auto [mean, var] = layer_forward(l, x);

  double os = outputscale(l.kernel);
  for (Eigen::Index i = 0; i < 7; ++i)
    for (Eigen::Index d = 0; d < 2; ++d) REQUIRE(var(i, d) == os);

  Eigen::MatrixXd mf = (x * l.mean_weight).rowwise() + l.mean_bias.row(0);
  REQUIRE_THAT((mean - mf).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-14));
}

TEST_CASE("constant mean layer emits its bias everywhere", "[svgp]") {
  Rng rng(403);
  SvgpLayer l = make_layer(3, 1, 5, true);
  randomize_layer(l, rng);
  l.variational_mean.setZero();
  for (auto& c : l.variational_chol_raw) c.setZero();
  l.mean_bias(0, 0) = 0.37;

  Eigen::MatrixXd x = randm(rng, 6, 3, -2.0, 2.0);
  auto [mean, var] = layer_forward(l, x);
  for (Eigen::Index i = 0; i < 6; ++i) {
    REQUIRE(mean(i, 0) == 0.37);
    REQUIRE(var(i, 0) == outputscale(l.kernel));
  }
}

TEST_CASE("layer kl is zero at the prior", "[svgp]") {
  Rng rng(404);
  SvgpLayer l = make_layer(2, 3, 7, false);
  Eigen::MatrixXd keep_mean = l.variational_mean;
  auto keep_chol = l.variational_chol_raw;
  randomize_layer(l, rng);
  l.variational_mean = keep_mean;
  l.variational_chol_raw = keep_chol;
  REQUIRE(layer_kl(l) == 0.0);
}

TEST_CASE("layer kl matches the gaussian kl oracle", "[svgp]") {
  Rng rng(405);
  SvgpLayer l = make_layer(2, 2, 5, false);
  randomize_layer(l, rng);

  double oracle = 0.0;
  Eigen::Index m = 5;
  for (int d = 0; d < 2; ++d) {
    Eigen::MatrixXd c = chol_from_raw(l.variational_chol_raw[std::size_t(d)]);
    Eigen::MatrixXd cov = c * c.transpose();
    Eigen::MatrixXd lc = cov.llt().matrixL();
    double logdet = 2.0 * lc.diagonal().array().log().sum();
    oracle += 0.5 * (cov.trace() + l.variational_mean.col(d).squaredNorm() -
                     double(m) - logdet);
  }
  REQUIRE_THAT(layer_kl(l), WithinRel(oracle, 1e-10));
}

TEST_CASE("layer kl stays nonnegative", "[svgp]") {
  Rng rng(406);
  for (int rep = 0; rep < 20; ++rep) {
    SvgpLayer l = make_layer(2, 2, 5, false);
    randomize_layer(l, rng);
    l.variational_mean = randm(rng, 5, 2, -2.0, 2.0);
    for (auto& c : l.variational_chol_raw)
      c = randm(rng, 5, 5, -0.8, 0.8);
    double kl = layer_kl(l);
    REQUIRE(kl >= -1e-9);
    REQUIRE(kl > 0.0);
  }
}

TEST_CASE("layer graph gradients", "[svgp]") {
  Rng rng(407);
  SvgpLayer meta = make_layer(2, 2, 4, false);

  std::vector<Eigen::MatrixXd> xs = {
      randm(rng, 1, 2, 0.0, 1.0),    // raw lengthscales
      randm(rng, 1, 1, 0.0, 1.0),    // raw outputscale
      randm(rng, 4, 2, -2.0, 2.0),   // inducing
      randm(rng, 4, 2, -1.0, 1.0),   // variational mean
      randm(rng, 4, 4, -0.3, 0.3),   // chol raw, dim 0
      randm(rng, 4, 4, -0.3, 0.3),   // chol raw, dim 1
      randm(rng, 2, 2, -1.0, 1.0),   // mean weight
      randm(rng, 1, 2, -0.5, 0.5),   // mean bias
      randm(rng, 3, 2, -2.0, 2.0),   // inputs
  };
  check_gradients(xs, [&meta](const std::vector<ad::Var>& v) {
    LayerVars lv;
    lv.kernel = KernelVars{meta.kernel.half_order, v[0], v[1]};
    lv.inducing = v[2];
    lv.variational_mean = v[3];
    lv.chol_raw = {v[4], v[5]};
    lv.mean_weight = v[6];
    lv.mean_bias = v[7];
    LayerOut out = layer_forward_graph(meta, lv, v[8]);
    Rng w(41);
    auto s = ad::add(weigh(out.mean, w), weigh(out.var, w));
    return ad::add(s, layer_kl_graph(meta, lv));
  });
}

TEST_CASE("constant mean layer gradients", "[svgp]") {
  Rng rng(408);
  SvgpLayer meta = make_layer(2, 1, 4, true);

  std::vector<Eigen::MatrixXd> xs = {
      randm(rng, 1, 2, 0.0, 1.0),   randm(rng, 1, 1, 0.0, 1.0),
      randm(rng, 4, 2, -2.0, 2.0),  randm(rng, 4, 1, -1.0, 1.0),
      randm(rng, 4, 4, -0.3, 0.3),  randm(rng, 1, 1, -0.5, 0.5),
      randm(rng, 3, 2, -2.0, 2.0),
  };
  check_gradients(xs, [&meta](const std::vector<ad::Var>& v) {
    LayerVars lv;
    lv.kernel = KernelVars{meta.kernel.half_order, v[0], v[1]};
    lv.inducing = v[2];
    lv.variational_mean = v[3];
    lv.chol_raw = {v[4]};
    lv.mean_bias = v[5];
    LayerOut out = layer_forward_graph(meta, lv, v[6]);
    Rng w(42);
    return ad::add(weigh(out.mean, w), weigh(out.var, w));
  });
}

TEST_CASE("layer forward rejects mismatched input dim", "[svgp]") {
  SvgpLayer l = make_layer(3, 1, 4, false);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(2, 2);
  REQUIRE_THROWS_WITH(layer_forward(l, x), ContainsSubstring("layer expects"));
}
