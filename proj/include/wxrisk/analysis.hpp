// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "wxrisk/binning.hpp"
#include "wxrisk/dataset.hpp"
#include "wxrisk/dspp.hpp"
#include "wxrisk/metrics.hpp"
#include "wxrisk/train.hpp"

namespace wxrisk {

// Model-agnostic prediction hooks over raw (unstandardized) inputs. The
// referenced model must outlive the hook.
using MeanPredictor = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;
using MeanStdPredictor = std::function<
    std::pair<Eigen::VectorXd, Eigen::VectorXd>(const Eigen::MatrixXd&)>;

inline MeanPredictor dspp_mean_predictor(const DsppModel& m) {
  return [&m](const Eigen::MatrixXd& x) { return dspp_predict(m, x).mean; };
}

inline MeanStdPredictor dspp_mean_std_predictor(const DsppModel& m) {
  return [&m](const Eigen::MatrixXd& x) {
    DsppPrediction p = dspp_predict(m, x);
    return std::make_pair(p.mean, Eigen::VectorXd(p.var.cwiseSqrt()));
  };
}

struct EvalReport {
  std::string state;
  std::string model_id;
  double mape = 0.0;
  double r_squared = 0.0;
  std::size_t n_test = 0;
};

inline EvalReport evaluate_model(const std::string& state,
                                 const std::string& model_id,
                                 const MeanPredictor& predict,
                                 const Eigen::MatrixXd& x_test,
                                 const Eigen::VectorXd& y_test) {
  require(x_test.rows() == y_test.size(), "evaluate_model: ", x_test.rows(),
          " inputs for ", y_test.size(), " targets");
  Eigen::VectorXd pred = predict(x_test);
  require(pred.size() == y_test.size(), "evaluate_model: predictor returned ",
          pred.size(), " values for ", y_test.size(), " inputs");
  EvalReport r;
  r.state = state;
  r.model_id = model_id;
  r.mape = mape(pred, y_test);
  r.r_squared = r_squared(pred, y_test);
  r.n_test = std::size_t(y_test.size());
  return r;
}

struct ImportanceReport {
  double baseline_mape = 0.0;
  std::vector<int> order;            // input positions, most important first
  std::vector<std::string> ranking;  // parameter names aligned with order
  std::vector<double> mape_deltas;   // aligned with order
};

// Knocks out one input at a time by pinning it at its training mean (zero in
// standardized coordinates) across the whole test set, and ranks inputs by
// how much the knockout degrades MAPE. Ties break toward the lower index.
inline ImportanceReport ablate_importance(const MeanPredictor& predict,
                                          const Standardizer& scaler,
                                          const std::vector<std::string>& names,
                                          const Eigen::MatrixXd& x_test,
                                          const Eigen::VectorXd& y_test) {
  const Eigen::Index d = scaler.dim();
  require(x_test.cols() == d, "ablate_importance: ", x_test.cols(),
          " input columns for scaler dim ", d);
  require(names.size() == std::size_t(d),
          "ablate_importance: names/dim mismatch");
  require(x_test.rows() == y_test.size(), "ablate_importance: ",
          x_test.rows(), " inputs for ", y_test.size(), " targets");

  double base = mape(predict(x_test), y_test);
  std::vector<double> deltas(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::MatrixXd ablated = x_test;
    ablated.col(j).setConstant(scaler.mean[j]);
    deltas[std::size_t(j)] = mape(predict(ablated), y_test) - base;
  }

  std::vector<int> order(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) order[std::size_t(j)] = int(j);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    double da = deltas[std::size_t(a)], db = deltas[std::size_t(b)];
    return da > db || (da == db && a < b);
  });

  ImportanceReport rep;
  rep.baseline_mape = base;
  rep.order = order;
  for (int j : order) {
    rep.ranking.push_back(names[std::size_t(j)]);
    rep.mape_deltas.push_back(deltas[std::size_t(j)]);
  }
  return rep;
}

inline ImportanceReport ablate_importance(const DsppModel& m,
                                          const std::vector<std::string>& names,
                                          const Eigen::MatrixXd& x_test,
                                          const Eigen::VectorXd& y_test) {
  return ablate_importance(dspp_mean_predictor(m), m.input_scaler, names,
                           x_test, y_test);
}

// Input positions kept when the 2nd (and optionally 3rd, ...) most important
// parameters are dropped. Returned in ascending position order.
inline std::vector<int> reduced_selection(const ImportanceReport& imp,
                                          int n_drop) {
  require(n_drop >= 1, "reduced_selection: n_drop must be >= 1, got ", n_drop);
  require(std::size_t(n_drop) < imp.order.size(),
          "reduced_selection: dropping ", n_drop, " of ", imp.order.size(),
          " parameters leaves none");
  std::vector<int> keep;
  keep.push_back(imp.order[0]);
  for (std::size_t r = std::size_t(n_drop) + 1; r < imp.order.size(); ++r)
    keep.push_back(imp.order[r]);
  std::sort(keep.begin(), keep.end());
  return keep;
}

struct ReducedModel {
  std::vector<int> selected;  // dataset parameter indices actually used
  std::vector<BinnedSample> bins;
  DsppModel model;
  TrainResult trace;
};

// Drops the 2nd (n_drop=1) or the 2nd and 3rd (n_drop=2) most important
// parameters, re-bins the raw data over the remaining ones (the bin box
// loses the dropped axes, so populations grow), and trains a fresh model.
// The full model is never touched.
inline ReducedModel retrain_reduced(const StateDataset& ds,
                                    const std::vector<int>& full_selected,
                                    const ImportanceReport& imp, int n_drop,
                                    const BinPolicy& policy,
                                    const DsppArch& arch,
                                    const TrainConfig& train_cfg,
                                    std::uint64_t seed) {
  require(imp.order.size() == full_selected.size(),
          "retrain_reduced: importance covers ", imp.order.size(),
          " parameters, selection has ", full_selected.size());
  std::vector<int> keep = reduced_selection(imp, n_drop);

  ReducedModel out;
  std::vector<std::string> names;
  for (int pos : keep) {
    int idx = full_selected[std::size_t(pos)];
    out.selected.push_back(idx);
    names.push_back(ds.specs[std::size_t(idx)].name);
  }

  out.bins = build_binned_dataset(ds, out.selected, policy,
                                  derive_seed(seed, "reduced-bins"));
  Eigen::MatrixXd x = bin_centers(out.bins);
  Eigen::VectorXd y = bin_levels(out.bins);
  out.model = init_dspp(x, arch, derive_seed(seed, "reduced-init"), names);
  out.trace = train_dspp(out.model, x, y, train_cfg);
  return out;
}

// Regular cell grid in raw units; cell (i_0, ..., i_{d-1}) maps to the flat
// index with the last axis fastest.
struct GridSpec {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
  std::vector<int> cells;
};

inline GridSpec make_grid(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                          const std::vector<int>& cells) {
  require(lo.size() >= 1, "make_grid: empty grid");
  require(lo.size() == hi.size() && std::size_t(lo.size()) == cells.size(),
          "make_grid: lo/hi/cells size mismatch");
  for (Eigen::Index d = 0; d < lo.size(); ++d) {
    require(hi[d] > lo[d], "make_grid: axis ", d, " has empty extent [",
            lo[d], ", ", hi[d], "]");
    require(cells[std::size_t(d)] >= 1, "make_grid: axis ", d, " has ",
            cells[std::size_t(d)], " cells");
  }
  return {lo, hi, cells};
}

// 50 cells per axis for 2-D views, 25 per axis otherwise.
inline GridSpec default_grid(const Eigen::VectorXd& lo,
                             const Eigen::VectorXd& hi) {
  int per_axis = lo.size() == 2 ? 50 : 25;
  return make_grid(lo, hi, std::vector<int>(std::size_t(lo.size()), per_axis));
}

inline std::size_t grid_cell_count(const GridSpec& g) {
  std::size_t n = 1;
  for (int c : g.cells) n *= std::size_t(c);
  return n;
}

inline std::vector<int> grid_unflatten(const GridSpec& g, std::size_t flat) {
  std::vector<int> idx(g.cells.size());
  for (std::size_t d = g.cells.size(); d-- > 0;) {
    idx[d] = int(flat % std::size_t(g.cells[d]));
    flat /= std::size_t(g.cells[d]);
  }
  return idx;
}

inline std::size_t grid_flatten(const GridSpec& g, const std::vector<int>& idx) {
  require(idx.size() == g.cells.size(), "grid_flatten: index dim mismatch");
  std::size_t flat = 0;
  for (std::size_t d = 0; d < idx.size(); ++d) {
    require(idx[d] >= 0 && idx[d] < g.cells[d], "grid_flatten: index ",
            idx[d], " outside axis ", d);
    flat = flat * std::size_t(g.cells[d]) + std::size_t(idx[d]);
  }
  return flat;
}

inline double grid_cell_width(const GridSpec& g, Eigen::Index d) {
  return (g.hi[d] - g.lo[d]) / double(g.cells[std::size_t(d)]);
}

inline Eigen::VectorXd grid_cell_center(const GridSpec& g,
                                        const std::vector<int>& idx) {
  Eigen::VectorXd c(g.lo.size());
  for (Eigen::Index d = 0; d < g.lo.size(); ++d)
    c[d] = g.lo[d] + (double(idx[std::size_t(d)]) + 0.5) * grid_cell_width(g, d);
  return c;
}

// All cell centers, one row per flat index.
inline Eigen::MatrixXd grid_centers(const GridSpec& g) {
  std::size_t n = grid_cell_count(g);
  Eigen::MatrixXd x(Eigen::Index(n), g.lo.size());
  for (std::size_t f = 0; f < n; ++f)
    x.row(Eigen::Index(f)) = grid_cell_center(g, grid_unflatten(g, f)).transpose();
  return x;
}

struct TriggerRegion {
  double threshold = 0.0;
  std::vector<std::size_t> cells;  // flat indices, ascending
  Eigen::MatrixXd bounding_box;    // dim x 2, raw-unit lo/hi of the cell hull
};

// Cells whose predicted mean dropout level reaches the threshold, grouped
// into face-connected components. Components are emitted in order of their
// smallest flat cell index.
inline std::vector<TriggerRegion> trigger_regions(const MeanPredictor& predict,
                                                  const GridSpec& grid,
                                                  double threshold) {
  require(threshold > 0.0 && threshold < 1.0,
          "trigger_regions: threshold must be in (0, 1), got ", threshold);
  GridSpec g = make_grid(grid.lo, grid.hi, grid.cells);

  std::size_t total = grid_cell_count(g);
  Eigen::VectorXd mean = predict(grid_centers(g));
  require(mean.size() == Eigen::Index(total),
          "trigger_regions: predictor returned ", mean.size(),
          " values for ", total, " cells");

  std::vector<char> marked(total, 0);
  for (std::size_t f = 0; f < total; ++f)
    marked[f] = mean[Eigen::Index(f)] >= threshold ? 1 : 0;

  std::vector<char> seen(total, 0);
  std::vector<TriggerRegion> regions;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < total; ++start) {
    if (!marked[start] || seen[start]) continue;
    TriggerRegion reg;
    reg.threshold = threshold;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      std::size_t f = stack.back();
      stack.pop_back();
      reg.cells.push_back(f);
      std::vector<int> idx = grid_unflatten(g, f);
      for (std::size_t d = 0; d < idx.size(); ++d) {
        for (int step : {-1, 1}) {
          int next = idx[d] + step;
          if (next < 0 || next >= g.cells[d]) continue;
          std::vector<int> nidx = idx;
          nidx[d] = next;
          std::size_t nf = grid_flatten(g, nidx);
          if (marked[nf] && !seen[nf]) {
            seen[nf] = 1;
            stack.push_back(nf);
          }
        }
      }
    }
    std::sort(reg.cells.begin(), reg.cells.end());

    reg.bounding_box.resize(g.lo.size(), 2);
    for (Eigen::Index d = 0; d < g.lo.size(); ++d) {
      reg.bounding_box(d, 0) = g.hi[d];
      reg.bounding_box(d, 1) = g.lo[d];
    }
    for (std::size_t f : reg.cells) {
      std::vector<int> idx = grid_unflatten(g, f);
      for (Eigen::Index d = 0; d < g.lo.size(); ++d) {
        double w = grid_cell_width(g, d);
        double cell_lo = g.lo[d] + double(idx[std::size_t(d)]) * w;
        reg.bounding_box(d, 0) = std::min(reg.bounding_box(d, 0), cell_lo);
        reg.bounding_box(d, 1) = std::max(reg.bounding_box(d, 1), cell_lo + w);
      }
    }
    regions.push_back(std::move(reg));
  }
  return regions;
}

inline nlohmann::json trigger_regions_to_json(
    const std::vector<TriggerRegion>& regions, const GridSpec& grid,
    const std::vector<std::string>& names) {
  require(names.size() == std::size_t(grid.lo.size()),
          "trigger_regions_to_json: names/grid dim mismatch");
  nlohmann::json out;
  out["kind"] = "trigger-regions";
  out["parameters"] = names;
  out["grid"] = {{"cells", grid.cells},
                 {"lo", std::vector<double>(grid.lo.begin(), grid.lo.end())},
                 {"hi", std::vector<double>(grid.hi.begin(), grid.hi.end())}};
  out["regions"] = nlohmann::json::array();
  for (const auto& r : regions) {
    nlohmann::json jr;
    jr["threshold"] = r.threshold;
    jr["n_cells"] = r.cells.size();
    jr["cells"] = r.cells;
    jr["bounding_box"] = nlohmann::json::array();
    for (Eigen::Index d = 0; d < r.bounding_box.rows(); ++d)
      jr["bounding_box"].push_back({{"parameter", names[std::size_t(d)]},
                                    {"lo", r.bounding_box(d, 0)},
                                    {"hi", r.bounding_box(d, 1)}});
    out["regions"].push_back(std::move(jr));
  }
  return out;
}

// Axis-aligned box in raw units.
struct Box {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
};

inline bool box_contains(const Box& b, const Eigen::VectorXd& x) {
  for (Eigen::Index d = 0; d < b.lo.size(); ++d)
    if (x[d] < b.lo[d] || x[d] > b.hi[d]) return false;
  return true;
}

// Mean predictive standard deviation over the grid cell centers inside each
// of the two boxes.
inline std::pair<double, double> uncertainty_profile(
    const MeanStdPredictor& predict, const Box& dense, const Box& empty,
    const GridSpec& grid) {
  GridSpec g = make_grid(grid.lo, grid.hi, grid.cells);
  for (const Box* b : {&dense, &empty})
    require(b->lo.size() == g.lo.size() && b->hi.size() == g.lo.size(),
            "uncertainty_profile: region dim mismatch");

  Eigen::MatrixXd centers = grid_centers(g);
  auto mean_sd_over = [&](const Box& b, const char* label) {
    std::vector<Eigen::Index> inside;
    for (Eigen::Index i = 0; i < centers.rows(); ++i)
      if (box_contains(b, centers.row(i).transpose())) inside.push_back(i);
    require(!inside.empty(), "uncertainty_profile: ", label,
            " region contains no grid cell centers");
    Eigen::MatrixXd sub(Eigen::Index(inside.size()), centers.cols());
    for (std::size_t k = 0; k < inside.size(); ++k)
      sub.row(Eigen::Index(k)) = centers.row(inside[k]);
    auto [mu, sd] = predict(sub);
    require(sd.size() == Eigen::Index(inside.size()),
            "uncertainty_profile: predictor size mismatch");
    (void)mu;
    return sd.mean();
  };
  double sd_dense = mean_sd_over(dense, "dense");
  double sd_empty = mean_sd_over(empty, "empty");
  return {sd_dense, sd_empty};
}

// One row of the headline comparison table.
struct ReportRow {
  std::string state;
  double mape_dspp = 0.0;
  double mape_dspp1 = 0.0;
  double mape_dspp2 = 0.0;
  double mape_bayes = 0.0;
  std::array<std::string, 3> top;  // most important parameters, a1 first
};

inline void save_report_csv(const std::vector<ReportRow>& rows,
                            const std::string& path) {
  require(!rows.empty(), "save_report_csv: no rows");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_report_csv: cannot open ", path);
  out << "state,dspp,dspp1,dspp2,bayesian,a1,a2,a3\n";
  for (const auto& r : rows)
    out << r.state << ',' << fmt_double(r.mape_dspp) << ','
        << fmt_double(r.mape_dspp1) << ',' << fmt_double(r.mape_dspp2) << ','
        << fmt_double(r.mape_bayes) << ',' << r.top[0] << ',' << r.top[1]
        << ',' << r.top[2] << '\n';
  require(out.good(), "save_report_csv: write failed for ", path);
}

}  // namespace wxrisk
