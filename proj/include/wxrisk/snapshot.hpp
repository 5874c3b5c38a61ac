// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "wxrisk/common.hpp"
#include "wxrisk/dspp.hpp"

namespace wxrisk {
namespace detail {

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m,
                                     const char* what) {
  require(m.allFinite(), "snapshot: non-finite entries in ", what);
  nlohmann::json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<double> data;
  data.reserve(std::size_t(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index jj = 0; jj < m.cols(); ++jj) data.push_back(m(i, jj));
  j["data"] = data;
  return j;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j,
                                        const char* what) {
  require(j.is_object() && j.contains("rows") && j.contains("cols") &&
              j.contains("data"),
          "snapshot: malformed matrix for ", what);
  Eigen::Index rows = j["rows"].get<Eigen::Index>();
  Eigen::Index cols = j["cols"].get<Eigen::Index>();
  const auto& data = j["data"];
  require(rows >= 0 && cols >= 0 &&
              data.size() == std::size_t(rows * cols),
          "snapshot: matrix size mismatch for ", what);
  Eigen::MatrixXd m(rows, cols);
  std::size_t at = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index jj = 0; jj < cols; ++jj)
      m(i, jj) = data[at++].get<double>();
  return m;
}

}  // namespace detail

inline nlohmann::json dspp_to_json(const DsppModel& m) {
  nlohmann::json j;
  j["kind"] = "dspp-model";
  j["version"] = 1;
  j["input_scaler"]["mean"] =
      detail::matrix_to_json(m.input_scaler.mean, "scaler mean");
  j["input_scaler"]["std"] =
      detail::matrix_to_json(m.input_scaler.std, "scaler std");
  j["raw_obs_noise"] = detail::matrix_to_json(m.raw_obs_noise, "obs noise");
  j["quadrature"]["sites"] =
      detail::matrix_to_json(m.quadrature.sites, "sites");
  j["quadrature"]["weight_logits"] =
      detail::matrix_to_json(m.quadrature.weight_logits, "weight logits");

  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) {
    nlohmann::json lj;
    lj["input_dim"] = l.input_dim;
    lj["output_dim"] = l.output_dim;
    lj["constant_mean"] = l.constant_mean;
    lj["kernel"]["half_order"] = l.kernel.half_order;
    lj["kernel"]["raw_lengthscales"] =
        detail::matrix_to_json(l.kernel.raw_lengthscales, "lengthscales");
    lj["kernel"]["raw_outputscale"] =
        detail::matrix_to_json(l.kernel.raw_outputscale, "outputscale");
    lj["inducing"] = detail::matrix_to_json(l.inducing, "inducing");
    lj["variational_mean"] =
        detail::matrix_to_json(l.variational_mean, "variational mean");
    nlohmann::json chols = nlohmann::json::array();
    for (const auto& c : l.variational_chol_raw)
      chols.push_back(detail::matrix_to_json(c, "variational chol"));
    lj["variational_chol_raw"] = chols;
    if (!l.constant_mean)
      lj["mean_weight"] = detail::matrix_to_json(l.mean_weight, "mean weight");
    lj["mean_bias"] = detail::matrix_to_json(l.mean_bias, "mean bias");
    layers.push_back(lj);
  }
  j["layers"] = layers;
  return j;
}

inline DsppModel dspp_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.value("kind", "") == "dspp-model",
          "snapshot: not a model snapshot");
  require(j.value("version", 0) == 1, "snapshot: unsupported version ",
          j.value("version", 0));

  DsppModel m;
  m.input_scaler.mean =
      detail::matrix_from_json(j["input_scaler"]["mean"], "scaler mean");
  m.input_scaler.std =
      detail::matrix_from_json(j["input_scaler"]["std"], "scaler std");
  m.raw_obs_noise = detail::matrix_from_json(j["raw_obs_noise"], "obs noise");
  m.quadrature.sites =
      detail::matrix_from_json(j["quadrature"]["sites"], "sites");
  m.quadrature.weight_logits = detail::matrix_from_json(
      j["quadrature"]["weight_logits"], "weight logits");

  require(j.contains("layers") && j["layers"].is_array() &&
              !j["layers"].empty(),
          "snapshot: missing layers");
  for (const auto& lj : j["layers"]) {
    SvgpLayer l;
    l.input_dim = lj["input_dim"].get<int>();
    l.output_dim = lj["output_dim"].get<int>();
    l.constant_mean = lj["constant_mean"].get<bool>();
    l.kernel.half_order = lj["kernel"]["half_order"].get<int>();
    l.kernel.raw_lengthscales =
        detail::matrix_from_json(lj["kernel"]["raw_lengthscales"],
                                 "lengthscales");
    l.kernel.raw_outputscale = detail::matrix_from_json(
        lj["kernel"]["raw_outputscale"], "outputscale");
    l.inducing = detail::matrix_from_json(lj["inducing"], "inducing");
    l.variational_mean =
        detail::matrix_from_json(lj["variational_mean"], "variational mean");
    for (const auto& cj : lj["variational_chol_raw"])
      l.variational_chol_raw.push_back(
          detail::matrix_from_json(cj, "variational chol"));
    if (!l.constant_mean)
      l.mean_weight = detail::matrix_from_json(lj["mean_weight"], "mean weight");
    l.mean_bias = detail::matrix_from_json(lj["mean_bias"], "mean bias");

    require(l.kernel.raw_lengthscales.cols() == l.input_dim &&
                l.inducing.cols() == l.input_dim &&
                l.variational_mean.cols() == l.output_dim &&
                l.variational_chol_raw.size() == std::size_t(l.output_dim),
            "snapshot: inconsistent layer shapes");
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline void save_dspp(const DsppModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_dspp: cannot open ", path);
  out << dspp_to_json(m).dump(1, '\t') << "\n";
  require(out.good(), "save_dspp: write failed for ", path);
}

inline DsppModel load_dspp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_dspp: cannot open ", path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail("load_dspp: cannot parse ", path, ": ", e.what());
  }
  return dspp_from_json(j);
}

}  // namespace wxrisk
