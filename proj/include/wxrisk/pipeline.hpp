// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "wxrisk/analysis.hpp"
#include "wxrisk/bayesreg.hpp"
#include "wxrisk/binning.hpp"
#include "wxrisk/cluster.hpp"
#include "wxrisk/common.hpp"
#include "wxrisk/dataset.hpp"
#include "wxrisk/dspp.hpp"
#include "wxrisk/metrics.hpp"
#include "wxrisk/snapshot.hpp"
#include "wxrisk/synthetic.hpp"
#include "wxrisk/train.hpp"

namespace wxrisk {

// Every tunable of the pipeline, with defaults matching the reference
// configuration. Stage seeds are derived from the one root seed through
// named substreams, never configured separately.
struct PipelineConfig {
  std::string input;      // raw measurement csv consumed by `ingest`
  std::string out_dir = "out";
  std::string state;      // empty = every state present in the data
  std::uint64_t seed = 0;
  int jobs = 1;

  std::vector<std::string> synth_states = {"ZZ"};
  std::size_t synth_n = 200000;
  double synth_noise = 0.02;
  double synth_heavy_tail = 0.02;
  std::string synth_truth = "interaction";
  std::vector<double> synth_coeffs;  // empty = family default

  std::vector<std::string> params = {"temperature", "wind_speed",
                                     "precipitation"};

  BinPolicy bins;
  int featsel_k = 3;
  DsppArch arch;
  TrainConfig train;
  BayesRegConfig bayes;

  std::size_t n_test = 1000;
  double threshold = 0.5;
  int figure_cells = 50;
  int trigger_cells = 25;
  std::size_t errorbar_samples = 30;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ',';
    out += parts[i];
  }
  return out;
}

template <class T, class Fmt>
std::string join_fmt(const std::vector<T>& parts, Fmt&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ',';
    out += fmt(parts[i]);
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  if (trim(value).empty()) return out;
  for (const auto& piece : split(value, ',')) out.push_back(trim(piece));
  return out;
}

inline double config_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  require(parse_double(value, v), "config: key '", key, "' has bad number '",
          value, "'");
  return v;
}

inline std::uint64_t config_u64(const std::string& key,
                                const std::string& value) {
  std::uint64_t v = 0;
  require(parse_u64(value, v), "config: key '", key,
          "' has bad integer '", value, "'");
  return v;
}

inline int config_int(const std::string& key, const std::string& value) {
  std::uint64_t v = config_u64(key, value);
  require(v <= std::uint64_t(std::numeric_limits<int>::max()),
          "config: key '", key, "' value ", v, " too large");
  return int(v);
}

inline bool config_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  fail("config: key '", key, "' must be true or false, got '", value, "'");
}

}  // namespace detail

inline void apply_config_kv(PipelineConfig& c, const std::string& key,
                            const std::string& value) {
  using detail::config_bool;
  using detail::config_double;
  using detail::config_int;
  using detail::config_u64;
  using detail::split_list;

  if (key == "input") c.input = value;
  else if (key == "out") c.out_dir = value;
  else if (key == "state") c.state = value;
  else if (key == "seed") c.seed = config_u64(key, value);
  else if (key == "jobs") c.jobs = config_int(key, value);
  else if (key == "params") c.params = split_list(value);
  else if (key == "synth.states") c.synth_states = split_list(value);
  else if (key == "synth.n") c.synth_n = config_u64(key, value);
  else if (key == "synth.noise") c.synth_noise = config_double(key, value);
  else if (key == "synth.heavy_tail") c.synth_heavy_tail = config_double(key, value);
  else if (key == "synth.truth") c.synth_truth = value;
  else if (key == "synth.coeffs") {
    c.synth_coeffs.clear();
    for (const auto& piece : split_list(value))
      c.synth_coeffs.push_back(config_double(key, piece));
  } else if (key == "bins.target") c.bins.target = config_u64(key, value);
  else if (key == "bins.min_members") c.bins.min_members = config_u64(key, value);
  else if (key == "bins.groups") c.bins.groups = config_u64(key, value);
  else if (key == "bins.attempt_factor") c.bins.attempt_factor = config_u64(key, value);
  else if (key == "bins.shuffle") c.bins.shuffle_members = config_bool(key, value);
  else if (key == "featsel.k") c.featsel_k = config_int(key, value);
  else if (key == "dspp.layers") {
    c.arch.layer_dims.clear();
    for (const auto& piece : split_list(value))
      c.arch.layer_dims.push_back(config_int(key, piece));
  } else if (key == "dspp.inducing") c.arch.inducing = config_int(key, value);
  else if (key == "dspp.sites") c.arch.sites = config_int(key, value);
  else if (key == "dspp.matern") c.arch.half_order = config_int(key, value);
  else if (key == "train.epochs") c.train.epochs = config_u64(key, value);
  else if (key == "train.lr") c.train.learning_rate = config_double(key, value);
  else if (key == "train.decay_epochs") {
    c.train.decay_epochs.clear();
    for (const auto& piece : split_list(value))
      c.train.decay_epochs.push_back(config_u64(key, piece));
  } else if (key == "train.decay_factor") c.train.decay_factor = config_double(key, value);
  else if (key == "train.batch") c.train.batch = config_u64(key, value);
  else if (key == "train.beta") c.train.beta = config_double(key, value);
  else if (key == "bayes.chains") c.bayes.chains = config_u64(key, value);
  else if (key == "bayes.draws") c.bayes.draws = config_u64(key, value);
  else if (key == "bayes.warmup") c.bayes.warmup = config_u64(key, value);
  else if (key == "bayes.tau") c.bayes.tau = config_double(key, value);
  else if (key == "bayes.sigma0") c.bayes.sigma0 = config_double(key, value);
  else if (key == "eval.n_test") c.n_test = config_u64(key, value);
  else if (key == "trigger.threshold") c.threshold = config_double(key, value);
  else if (key == "trigger.cells") c.trigger_cells = config_int(key, value);
  else if (key == "figure.cells") c.figure_cells = config_int(key, value);
  else if (key == "figure.errorbars") c.errorbar_samples = config_u64(key, value);
  else fail("config: unknown key '", key, "'");
}

// key = value lines; '#' starts a comment; values may be double-quoted.
inline PipelineConfig parse_config_text(const std::string& text,
                                        PipelineConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    require(eq != std::string::npos, "config: line ", lineno,
            " has no '=': ", line);
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    apply_config_kv(base, key, value);
  }
  return base;
}

inline PipelineConfig load_config(const std::string& path,
                                  PipelineConfig base = {}) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "config: cannot open ", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

// Canonical text form; this exact byte sequence is what gets hashed, so two
// configs agree iff their canonical texts do. The output directory and job
// count are execution details with no effect on results, so they are left
// out and the hash identifies the computation alone.
inline std::string config_text(const PipelineConfig& c) {
  using detail::join;
  using detail::join_fmt;
  std::ostringstream o;
  o << "input = " << c.input << '\n';
  o << "state = " << c.state << '\n';
  o << "seed = " << c.seed << '\n';
  o << "params = " << join(c.params) << '\n';
  o << "synth.states = " << join(c.synth_states) << '\n';
  o << "synth.n = " << c.synth_n << '\n';
  o << "synth.noise = " << fmt_double(c.synth_noise) << '\n';
  o << "synth.heavy_tail = " << fmt_double(c.synth_heavy_tail) << '\n';
  o << "synth.truth = " << c.synth_truth << '\n';
  o << "synth.coeffs = " << join_fmt(c.synth_coeffs, fmt_double) << '\n';
  o << "bins.target = " << c.bins.target << '\n';
  o << "bins.min_members = " << c.bins.min_members << '\n';
  o << "bins.groups = " << c.bins.groups << '\n';
  o << "bins.attempt_factor = " << c.bins.attempt_factor << '\n';
  o << "bins.shuffle = " << (c.bins.shuffle_members ? "true" : "false") << '\n';
  o << "featsel.k = " << c.featsel_k << '\n';
  o << "dspp.layers = "
    << join_fmt(c.arch.layer_dims, [](int v) { return cat(v); }) << '\n';
  o << "dspp.inducing = " << c.arch.inducing << '\n';
  o << "dspp.sites = " << c.arch.sites << '\n';
  o << "dspp.matern = " << c.arch.half_order << '\n';
  o << "train.epochs = " << c.train.epochs << '\n';
  o << "train.lr = " << fmt_double(c.train.learning_rate) << '\n';
  o << "train.decay_epochs = "
    << join_fmt(c.train.decay_epochs, [](std::size_t v) { return cat(v); })
    << '\n';
  o << "train.decay_factor = " << fmt_double(c.train.decay_factor) << '\n';
  o << "train.batch = " << c.train.batch << '\n';
  o << "train.beta = " << fmt_double(c.train.beta) << '\n';
  o << "bayes.chains = " << c.bayes.chains << '\n';
  o << "bayes.draws = " << c.bayes.draws << '\n';
  o << "bayes.warmup = " << c.bayes.warmup << '\n';
  o << "bayes.tau = " << fmt_double(c.bayes.tau) << '\n';
  o << "bayes.sigma0 = " << fmt_double(c.bayes.sigma0) << '\n';
  o << "eval.n_test = " << c.n_test << '\n';
  o << "trigger.threshold = " << fmt_double(c.threshold) << '\n';
  o << "trigger.cells = " << c.trigger_cells << '\n';
  o << "figure.cells = " << c.figure_cells << '\n';
  o << "figure.errorbars = " << c.errorbar_samples << '\n';
  return o.str();
}

inline std::string config_hash(const PipelineConfig& c) {
  return hex64(fnv1a64(config_text(c)));
}

inline void validate_pipeline_config(const PipelineConfig& c) {
  require(c.jobs >= 1, "config: jobs must be >= 1, got ", c.jobs);
  require(!c.out_dir.empty(), "config: out is empty");
  require(!c.params.empty(), "config: params is empty");
  for (std::size_t i = 0; i < c.params.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      require(c.params[i] != c.params[j], "config: duplicate param '",
              c.params[i], "'");
  require(c.synth_truth == "constant" || c.synth_truth == "single" ||
              c.synth_truth == "interaction",
          "config: synth.truth must be constant, single, or interaction");
  require(c.n_test >= 1, "config: eval.n_test must be >= 1");
  require(c.threshold > 0.0 && c.threshold < 1.0,
          "config: trigger.threshold must be in (0, 1), got ", c.threshold);
  require(c.figure_cells >= 1 && c.trigger_cells >= 1,
          "config: grid cell counts must be >= 1");
  validate_train_config(c.train);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open ", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open ", path, " for writing");
  out.write(content.data(), std::streamsize(content.size()));
  require(out.good(), "write failed for ", path);
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  write_file(path, j.dump(1, '\t') + "\n");
}

namespace detail {

inline std::string stage_path(const PipelineConfig& c, const std::string& rel) {
  return (std::filesystem::path(c.out_dir) / rel).string();
}

// Write-side variant: makes sure the parent directory exists first.
inline std::string out_path(const PipelineConfig& c, const std::string& rel) {
  std::filesystem::path p = std::filesystem::path(c.out_dir) / rel;
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  return p.string();
}

inline void require_artifact(const std::string& stage, const PipelineConfig& c,
                             const std::string& rel,
                             const std::string& producer) {
  require(std::filesystem::exists(stage_path(c, rel)), stage,
          ": missing artifact ", stage_path(c, rel), "; run ", producer,
          " first");
}

// Manifest: the stage, the resolved-config hash, the root seed, and a size +
// FNV-1a fingerprint per artifact. Wall time is logged to stderr instead so
// manifests stay byte-identical across reruns.
inline void write_manifest(const PipelineConfig& c, const std::string& stage,
                           std::vector<std::string> rel_files) {
  std::sort(rel_files.begin(), rel_files.end());
  nlohmann::json j;
  j["stage"] = stage;
  j["config"] = config_hash(c);
  j["seed"] = c.seed;
  j["artifacts"] = nlohmann::json::array();
  for (const auto& rel : rel_files) {
    std::string bytes = read_file(stage_path(c, rel));
    j["artifacts"].push_back({{"file", rel},
                              {"bytes", bytes.size()},
                              {"fnv1a", hex64(fnv1a64(bytes))}});
  }
  write_json_file(stage_path(c, "manifest." + stage + ".json"), j);
}

template <class F>
void for_each_state(const std::vector<std::string>& states, int jobs,
                    F&& body) {
  if (jobs <= 1 || states.size() <= 1) {
    for (const auto& s : states) body(s);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_err;
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= states.size()) return;
      try {
        body(states[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_err) first_err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  std::size_t n = std::min<std::size_t>(std::size_t(jobs), states.size());
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_err) std::rethrow_exception(first_err);
}

inline IngestResult load_data(const std::string& stage,
                              const PipelineConfig& c) {
  require_artifact(stage, c, "data.csv", "synth or ingest");
  return load_csv(stage_path(c, "data.csv"));
}

inline std::vector<std::string> states_to_process(const PipelineConfig& c,
                                                  const IngestResult& data) {
  if (!c.state.empty()) {
    require(data.states.count(c.state) == 1, "state '", c.state,
            "' not present in data.csv");
    return {c.state};
  }
  std::vector<std::string> out;
  for (const auto& [name, ds] : data.states) out.push_back(name);
  require(!out.empty(), "data.csv holds no usable states");
  return out;
}

inline std::vector<int> selected_indices(const StateDataset& ds,
                                         const std::vector<std::string>& params) {
  std::vector<int> out;
  for (const auto& name : params) {
    int found = -1;
    for (const auto& spec : ds.specs)
      if (spec.name == name) found = spec.index;
    require(found >= 0, "parameter '", name, "' not present in state ",
            ds.state, " data");
    out.push_back(found);
  }
  return out;
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.begin(), v.end());
}

inline GroundTruth config_truth(const PipelineConfig& c) {
  GroundTruth gt;
  if (c.synth_truth == "constant") gt = constant_truth(0.1);
  else if (c.synth_truth == "single") gt = single_param_truth();
  else gt = interaction_truth();
  if (!c.synth_coeffs.empty()) gt.coeffs = c.synth_coeffs;
  return gt;
}

inline double column_median(const Eigen::VectorXd& col) {
  std::vector<double> v(col.begin(), col.end());
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

// Plot-ready grid over the model's first one or two inputs, remaining inputs
// pinned at their training medians. Columns: axis params, mean, std.
inline std::string figure_grid_csv(const DsppModel& model,
                                   const std::vector<std::string>& names,
                                   const Eigen::MatrixXd& train_x, int cells) {
  const Eigen::Index dim = model.input_scaler.dim();
  require(Eigen::Index(names.size()) == dim,
          "figure_grid_csv: names/model dim mismatch");
  require(train_x.cols() == dim, "figure_grid_csv: train data dim mismatch");
  const Eigen::Index axes = std::min<Eigen::Index>(2, dim);

  Eigen::VectorXd lo(axes), hi(axes);
  for (Eigen::Index a = 0; a < axes; ++a) {
    lo[a] = train_x.col(a).minCoeff();
    hi[a] = train_x.col(a).maxCoeff();
  }
  GridSpec grid = make_grid(lo, hi, std::vector<int>(std::size_t(axes), cells));
  Eigen::MatrixXd axis_pts = grid_centers(grid);

  Eigen::MatrixXd query(axis_pts.rows(), dim);
  for (Eigen::Index a = 0; a < axes; ++a) query.col(a) = axis_pts.col(a);
  for (Eigen::Index d = axes; d < dim; ++d)
    query.col(d).setConstant(column_median(train_x.col(d)));

  DsppPrediction pred = dspp_predict(model, query);
  std::ostringstream o;
  for (Eigen::Index a = 0; a < axes; ++a) o << names[std::size_t(a)] << ',';
  o << "mean,std\n";
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    for (Eigen::Index a = 0; a < axes; ++a) o << fmt_double(query(i, a)) << ',';
    o << fmt_double(pred.mean[i]) << ','
      << fmt_double(std::sqrt(pred.var[i])) << '\n';
  }
  return o.str();
}

}  // namespace detail

inline std::vector<std::string> run_synth(const PipelineConfig& c) {
  require(!c.synth_states.empty(), "synth: synth.states is empty");
  std::vector<StateDataset> generated;
  for (const auto& st : c.synth_states) {
    SyntheticConfig scfg;
    scfg.state = st;
    scfg.n_measurements = c.synth_n;
    scfg.noise_scale = c.synth_noise;
    scfg.heavy_tail_fraction = c.synth_heavy_tail;
    scfg.ground_truth = detail::config_truth(c);
    scfg.seed = c.seed;
    generated.push_back(generate_synthetic(scfg));
  }
  std::vector<const StateDataset*> ptrs;
  for (const auto& ds : generated) ptrs.push_back(&ds);
  std::filesystem::create_directories(c.out_dir);
  save_csv(detail::stage_path(c, "data.csv"), ptrs);
  write_file(detail::stage_path(c, "config.txt"), config_text(c));
  return {"config.txt", "data.csv"};
}

inline std::vector<std::string> run_ingest(const PipelineConfig& c) {
  require(!c.input.empty(), "ingest: config key 'input' is empty");
  IngestResult data = load_csv(c.input);
  require(!data.states.empty(), "ingest: no usable rows in ", c.input);
  std::vector<const StateDataset*> ptrs;
  for (const auto& [name, ds] : data.states) ptrs.push_back(&ds);
  std::filesystem::create_directories(c.out_dir);
  save_csv(detail::stage_path(c, "data.csv"), ptrs);

  nlohmann::json rep;
  rep["kind"] = "ingest-report";
  rep["accepted"] = data.report.accepted;
  rep["rejected"] = nlohmann::json::object();
  for (const auto& [reason, n] : data.report.rejected)
    rep["rejected"][reason] = n;
  write_json_file(detail::stage_path(c, "ingest_report.json"), rep);
  write_file(detail::stage_path(c, "config.txt"), config_text(c));
  return {"config.txt", "data.csv", "ingest_report.json"};
}

inline std::vector<std::string> run_preprocess(const PipelineConfig& c) {
  IngestResult data = detail::load_data("preprocess", c);
  std::vector<std::string> states = detail::states_to_process(c, data);

  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    const StateDataset& ds = data.states.at(st);
    std::vector<int> selected = detail::selected_indices(ds, c.params);
    std::vector<BinnedSample> bins = build_binned_dataset(
        ds, selected, c.bins, derive_seed(c.seed, cat("bins:", st)));
    require(bins.size() > c.n_test, "preprocess: state ", st, " produced ",
            bins.size(), " bins; need more than eval.n_test = ", c.n_test,
            " (raise bins.target or lower eval.n_test)");
    auto [train, test] = split_train_test(
        bins, c.n_test, derive_seed(c.seed, cat("split:", st)));
    save_bins_csv(detail::out_path(c, st + "/bins.csv"), bins);
    save_bins_csv(detail::out_path(c, st + "/bins.train.csv"), train);
    save_bins_csv(detail::out_path(c, st + "/bins.test.csv"), test);
  });

  std::vector<std::string> files;
  for (const auto& st : states) {
    files.push_back(st + "/bins.csv");
    files.push_back(st + "/bins.train.csv");
    files.push_back(st + "/bins.test.csv");
  }
  return files;
}

inline std::vector<std::string> run_featsel(const PipelineConfig& c) {
  IngestResult data = detail::load_data("featsel", c);
  std::vector<std::string> states = detail::states_to_process(c, data);

  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    const StateDataset& ds = data.states.at(st);
    CorrelationMatrix corr = pearson_matrix(ds);
    auto [leaves, dist] = correlation_distance(corr);
    Dendrogram dend = upgma(dist);
    std::vector<std::string> reps =
        select_representatives(corr, dend, c.featsel_k);

    nlohmann::json j;
    j["kind"] = "featsel";
    j["state"] = st;
    j["labels"] = corr.labels;
    j["dropped"] = corr.dropped;
    j["correlation"] = nlohmann::json::array();
    for (Eigen::Index r = 0; r < corr.values.rows(); ++r)
      j["correlation"].push_back(
          detail::to_std(corr.values.row(r).transpose()));
    j["leaves"] = leaves;
    j["merges"] = nlohmann::json::array();
    for (const Merge& m : dend.merges)
      j["merges"].push_back({{"a", m.a},
                             {"b", m.b},
                             {"height", m.height},
                             {"size", m.size}});
    j["representatives"] = reps;
    j["selected"] = c.params;
    write_json_file(detail::stage_path(c, st + "/featsel.json"), j);
  });

  std::vector<std::string> files;
  for (const auto& st : states) files.push_back(st + "/featsel.json");
  return files;
}

inline std::vector<std::string> run_train_dspp(const PipelineConfig& c) {
  std::vector<std::string> states;
  {
    IngestResult data = detail::load_data("train-dspp", c);
    states = detail::states_to_process(c, data);
  }
  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    detail::require_artifact("train-dspp", c, st + "/bins.train.csv",
                             "preprocess");
    std::vector<BinnedSample> train =
        load_bins_csv(detail::stage_path(c, st + "/bins.train.csv"));
    Eigen::MatrixXd x = bin_centers(train);
    Eigen::VectorXd y = bin_levels(train);
    DsppModel model = init_dspp(
        x, c.arch, derive_seed(c.seed, cat("dspp-init:", st)), c.params);
    TrainConfig tc = c.train;
    tc.seed = derive_seed(c.seed, cat("dspp-train:", st));
    TrainResult res = train_dspp(model, x, y, tc);
    save_dspp(model, detail::out_path(c, st + "/dspp.json"));

    std::ostringstream o;
    o << "epoch,loss\n";
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
      o << e << ',' << fmt_double(res.epoch_loss[e]) << '\n';
    write_file(detail::stage_path(c, st + "/dspp_loss.csv"), o.str());
  });

  std::vector<std::string> files;
  for (const auto& st : states) {
    files.push_back(st + "/dspp.json");
    files.push_back(st + "/dspp_loss.csv");
  }
  return files;
}

inline std::vector<std::string> run_train_bayes(const PipelineConfig& c) {
  std::vector<std::string> states;
  {
    IngestResult data = detail::load_data("train-bayes", c);
    states = detail::states_to_process(c, data);
  }
  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    detail::require_artifact("train-bayes", c, st + "/bins.train.csv",
                             "preprocess");
    std::vector<BinnedSample> train =
        load_bins_csv(detail::stage_path(c, st + "/bins.train.csv"));
    Eigen::MatrixXd x = bin_centers(train);
    Eigen::VectorXd y = bin_levels(train);
    Standardizer scaler = fit_standardizer(x, c.params);

    BayesRegConfig bcfg = c.bayes;
    bcfg.seed = derive_seed(c.seed, cat("bayes:", st));
    BayesRegPosterior post =
        bayes_fit(scaler.standardize_rows(x), y, bcfg);
    Eigen::VectorXd r_hats = posterior_r_hats(post);
    for (Eigen::Index j = 0; j < r_hats.size(); ++j)
      if (r_hats[j] >= 1.01)
        std::cerr << "wxrisk: warning: state " << st << " bayes parameter "
                  << j << " has r_hat " << r_hats[j] << "\n";

    save_posterior_csv(post, detail::out_path(c, st + "/bayes_draws.csv"));
    Eigen::VectorXd wbar = post.weights.colwise().mean();
    Eigen::VectorXd wsd(post.weights.cols());
    for (Eigen::Index j = 0; j < post.weights.cols(); ++j)
      wsd[j] = std::sqrt(
          (post.weights.col(j).array() - wbar[j]).square().mean());

    nlohmann::json j;
    j["kind"] = "bayes-posterior-summary";
    j["state"] = st;
    j["chains"] = post.chains;
    j["draws"] = post.draws;
    j["params"] = c.params;
    j["weight_mean"] = detail::to_std(wbar);
    j["weight_sd"] = detail::to_std(wsd);
    j["sigma_mean"] = post.sigma.mean();
    j["r_hats"] = detail::to_std(r_hats);
    j["acceptance"] = detail::to_std(post.acceptance);
    j["scaler"] = {{"mean", detail::to_std(scaler.mean)},
                   {"std", detail::to_std(scaler.std)}};
    write_json_file(detail::stage_path(c, st + "/bayes_summary.json"), j);
  });

  std::vector<std::string> files;
  for (const auto& st : states) {
    files.push_back(st + "/bayes_draws.csv");
    files.push_back(st + "/bayes_summary.json");
  }
  return files;
}

namespace detail {

inline Standardizer scaler_from_json(const nlohmann::json& j) {
  Standardizer s;
  std::vector<double> mean = j.at("mean").get<std::vector<double>>();
  std::vector<double> sd = j.at("std").get<std::vector<double>>();
  require(mean.size() == sd.size() && !mean.empty(),
          "bayes summary: malformed scaler");
  s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(),
                                             Eigen::Index(mean.size()));
  s.std = Eigen::Map<const Eigen::VectorXd>(sd.data(),
                                            Eigen::Index(sd.size()));
  return s;
}

}  // namespace detail

inline std::vector<std::string> run_evaluate(const PipelineConfig& c) {
  std::vector<std::string> states;
  {
    IngestResult data = detail::load_data("evaluate", c);
    states = detail::states_to_process(c, data);
  }
  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    detail::require_artifact("evaluate", c, st + "/bins.test.csv",
                             "preprocess");
    detail::require_artifact("evaluate", c, st + "/dspp.json", "train-dspp");
    detail::require_artifact("evaluate", c, st + "/bayes_draws.csv",
                             "train-bayes");
    detail::require_artifact("evaluate", c, st + "/bayes_summary.json",
                             "train-bayes");

    std::vector<BinnedSample> test =
        load_bins_csv(detail::stage_path(c, st + "/bins.test.csv"));
    Eigen::MatrixXd xt = bin_centers(test);
    Eigen::VectorXd yt = bin_levels(test);

    DsppModel model = load_dspp(detail::stage_path(c, st + "/dspp.json"));
    EvalReport dspp_eval =
        evaluate_model(st, "dspp", dspp_mean_predictor(model), xt, yt);

    BayesRegPosterior post =
        load_posterior_csv(detail::stage_path(c, st + "/bayes_draws.csv"));
    nlohmann::json summary = nlohmann::json::parse(
        read_file(detail::stage_path(c, st + "/bayes_summary.json")));
    Standardizer scaler = detail::scaler_from_json(summary.at("scaler"));
    MeanPredictor bayes_hook = [&](const Eigen::MatrixXd& q) {
      return posterior_predict(post, scaler.standardize_rows(q)).mean;
    };
    EvalReport bayes_eval = evaluate_model(st, "bayesian", bayes_hook, xt, yt);

    nlohmann::json j;
    j["kind"] = "evaluation";
    j["state"] = st;
    j["n_test"] = dspp_eval.n_test;
    j["models"] = {
        {"dspp",
         {{"mape", dspp_eval.mape}, {"r_squared", dspp_eval.r_squared}}},
        {"bayesian",
         {{"mape", bayes_eval.mape}, {"r_squared", bayes_eval.r_squared}}}};
    write_json_file(detail::stage_path(c, st + "/eval.json"), j);
  });

  std::vector<std::string> files;
  for (const auto& st : states) files.push_back(st + "/eval.json");
  return files;
}

inline std::vector<std::string> run_ablate(const PipelineConfig& c) {
  std::vector<std::string> states;
  {
    IngestResult data = detail::load_data("ablate", c);
    states = detail::states_to_process(c, data);
  }
  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    detail::require_artifact("ablate", c, st + "/bins.test.csv", "preprocess");
    detail::require_artifact("ablate", c, st + "/dspp.json", "train-dspp");
    std::vector<BinnedSample> test =
        load_bins_csv(detail::stage_path(c, st + "/bins.test.csv"));
    DsppModel model = load_dspp(detail::stage_path(c, st + "/dspp.json"));
    ImportanceReport imp = ablate_importance(model, c.params,
                                             bin_centers(test),
                                             bin_levels(test));
    nlohmann::json j;
    j["kind"] = "importance";
    j["state"] = st;
    j["baseline_mape"] = imp.baseline_mape;
    j["order"] = imp.order;
    j["ranking"] = imp.ranking;
    j["deltas"] = imp.mape_deltas;
    write_json_file(detail::stage_path(c, st + "/importance.json"), j);
  });

  std::vector<std::string> files;
  for (const auto& st : states) files.push_back(st + "/importance.json");
  return files;
}

inline std::vector<std::string> run_retrain_reduced(const PipelineConfig& c) {
  IngestResult data = detail::load_data("retrain-reduced", c);
  std::vector<std::string> states = detail::states_to_process(c, data);

  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    detail::require_artifact("retrain-reduced", c, st + "/importance.json",
                             "ablate");
    detail::require_artifact("retrain-reduced", c, st + "/bins.test.csv",
                             "preprocess");
    nlohmann::json impj = nlohmann::json::parse(
        read_file(detail::stage_path(c, st + "/importance.json")));
    ImportanceReport imp;
    imp.order = impj.at("order").get<std::vector<int>>();
    imp.baseline_mape = impj.at("baseline_mape").get<double>();

    const StateDataset& ds = data.states.at(st);
    std::vector<int> full_selected = detail::selected_indices(ds, c.params);
    require(imp.order.size() == full_selected.size(),
            "retrain-reduced: importance covers ", imp.order.size(),
            " parameters, config selects ", full_selected.size());

    // Reduced models are scored on the same held-out bins as the full
    // model, with test centers projected onto the surviving parameters, so
    // the report's MAPE columns are comparable.
    std::vector<BinnedSample> shared_test =
        load_bins_csv(detail::stage_path(c, st + "/bins.test.csv"));
    Eigen::MatrixXd xt_full = bin_centers(shared_test);
    Eigen::VectorXd yt = bin_levels(shared_test);

    nlohmann::json j;
    j["kind"] = "retrain";
    j["state"] = st;
    for (int n_drop : {1, 2}) {
      if (std::size_t(n_drop) >= imp.order.size()) break;
      std::string tag = cat("dspp", n_drop);
      std::vector<int> keep = reduced_selection(imp, n_drop);
      std::vector<int> selected;
      std::vector<std::string> names;
      for (int pos : keep) {
        selected.push_back(full_selected[std::size_t(pos)]);
        names.push_back(c.params[std::size_t(pos)]);
      }
      std::vector<BinnedSample> bins = build_binned_dataset(
          ds, selected, c.bins,
          derive_seed(c.seed, cat("bins-", tag, ":", st)));
      save_bins_csv(detail::out_path(c, st + "/bins." + tag + ".csv"), bins);

      Eigen::MatrixXd x = bin_centers(bins);
      Eigen::VectorXd y = bin_levels(bins);
      DsppModel model = init_dspp(
          x, c.arch, derive_seed(c.seed, cat(tag, "-init:", st)), names);
      TrainConfig tc = c.train;
      tc.seed = derive_seed(c.seed, cat(tag, "-train:", st));
      train_dspp(model, x, y, tc);
      save_dspp(model, detail::out_path(c, st + "/" + tag + ".json"));

      Eigen::MatrixXd xt(xt_full.rows(), Eigen::Index(keep.size()));
      for (std::size_t k = 0; k < keep.size(); ++k)
        xt.col(Eigen::Index(k)) = xt_full.col(keep[k]);
      EvalReport ev =
          evaluate_model(st, tag, dspp_mean_predictor(model), xt, yt);
      j[tag] = {{"params", names},
                {"n_bins", bins.size()},
                {"mape", ev.mape},
                {"r_squared", ev.r_squared}};
    }
    write_json_file(detail::stage_path(c, st + "/retrain.json"), j);
  });

  std::vector<std::string> files;
  for (const auto& st : states) {
    files.push_back(st + "/retrain.json");
    for (int n_drop : {1, 2}) {
      if (std::size_t(n_drop) >= c.params.size()) break;
      std::string tag = cat("dspp", n_drop);
      files.push_back(st + "/" + tag + ".json");
      files.push_back(st + "/bins." + tag + ".csv");
    }
  }
  return files;
}

inline std::vector<std::string> run_triggers(const PipelineConfig& c) {
  IngestResult data = detail::load_data("triggers", c);
  std::vector<std::string> states = detail::states_to_process(c, data);

  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    detail::require_artifact("triggers", c, st + "/dspp.json", "train-dspp");
    DsppModel model = load_dspp(detail::stage_path(c, st + "/dspp.json"));
    const StateDataset& ds = data.states.at(st);
    std::vector<int> selected = detail::selected_indices(ds, c.params);

    Eigen::VectorXd lo(Eigen::Index(selected.size()));
    Eigen::VectorXd hi(Eigen::Index(selected.size()));
    for (std::size_t k = 0; k < selected.size(); ++k) {
      lo[Eigen::Index(k)] = ds.param_ranges[std::size_t(selected[k])].lo;
      hi[Eigen::Index(k)] = ds.param_ranges[std::size_t(selected[k])].hi;
    }
    GridSpec grid = make_grid(
        lo, hi, std::vector<int>(selected.size(), c.trigger_cells));
    std::vector<TriggerRegion> regions =
        trigger_regions(dspp_mean_predictor(model), grid, c.threshold);

    nlohmann::json j = trigger_regions_to_json(regions, grid, c.params);
    j["state"] = st;
    write_json_file(detail::stage_path(c, st + "/triggers.json"), j);
  });

  std::vector<std::string> files;
  for (const auto& st : states) files.push_back(st + "/triggers.json");
  return files;
}

inline std::vector<std::string> run_report(const PipelineConfig& c) {
  std::vector<std::string> states;
  {
    IngestResult data = detail::load_data("report", c);
    states = detail::states_to_process(c, data);
  }

  std::vector<ReportRow> rows;
  nlohmann::json a1_map = nlohmann::json::object();
  for (const auto& st : states) {
    detail::require_artifact("report", c, st + "/eval.json", "evaluate");
    detail::require_artifact("report", c, st + "/importance.json", "ablate");
    detail::require_artifact("report", c, st + "/retrain.json",
                             "retrain-reduced");
    nlohmann::json ev = nlohmann::json::parse(
        read_file(detail::stage_path(c, st + "/eval.json")));
    nlohmann::json imp = nlohmann::json::parse(
        read_file(detail::stage_path(c, st + "/importance.json")));
    nlohmann::json ret = nlohmann::json::parse(
        read_file(detail::stage_path(c, st + "/retrain.json")));

    ReportRow row;
    row.state = st;
    row.mape_dspp = ev.at("models").at("dspp").at("mape").get<double>();
    row.mape_bayes = ev.at("models").at("bayesian").at("mape").get<double>();
    row.mape_dspp1 =
        ret.contains("dspp1") ? ret["dspp1"].at("mape").get<double>() : 0.0;
    row.mape_dspp2 =
        ret.contains("dspp2") ? ret["dspp2"].at("mape").get<double>() : 0.0;
    auto ranking = imp.at("ranking").get<std::vector<std::string>>();
    for (std::size_t k = 0; k < 3; ++k)
      row.top[k] = k < ranking.size() ? ranking[k] : "";
    rows.push_back(row);
    a1_map[st] = row.top[0];
  }
  save_report_csv(rows, detail::out_path(c, "report.csv"));
  write_json_file(detail::stage_path(c, "map_a1.json"),
                  {{"kind", "importance-map"}, {"a1", a1_map}});

  std::vector<std::string> files = {"report.csv", "map_a1.json"};
  detail::for_each_state(states, c.jobs, [&](const std::string& st) {
    detail::require_artifact("report", c, st + "/dspp.json", "train-dspp");
    detail::require_artifact("report", c, st + "/bins.train.csv",
                             "preprocess");
    DsppModel model = load_dspp(detail::stage_path(c, st + "/dspp.json"));
    std::vector<BinnedSample> train =
        load_bins_csv(detail::stage_path(c, st + "/bins.train.csv"));
    Eigen::MatrixXd x = bin_centers(train);
    write_file(detail::stage_path(c, st + "/grid_dspp.csv"),
               detail::figure_grid_csv(model, c.params, x, c.figure_cells));

    nlohmann::json ret = nlohmann::json::parse(
        read_file(detail::stage_path(c, st + "/retrain.json")));
    for (int n_drop : {1, 2}) {
      std::string tag = cat("dspp", n_drop);
      if (!ret.contains(tag)) continue;
      DsppModel reduced =
          load_dspp(detail::stage_path(c, st + "/" + tag + ".json"));
      std::vector<BinnedSample> rtrain = load_bins_csv(
          detail::stage_path(c, st + "/bins." + tag + ".csv"));
      auto names = ret[tag].at("params").get<std::vector<std::string>>();
      write_file(detail::stage_path(c, st + "/grid_" + tag + ".csv"),
                 detail::figure_grid_csv(reduced, names, bin_centers(rtrain),
                                         c.figure_cells));
    }

    // Error-bar probes: random points in the training support of the full
    // model, with predictive mean and std.
    Rng rng(derive_seed(c.seed, cat("errorbars:", st)));
    Eigen::MatrixXd probes(Eigen::Index(c.errorbar_samples), x.cols());
    for (Eigen::Index i = 0; i < probes.rows(); ++i)
      for (Eigen::Index d = 0; d < x.cols(); ++d)
        probes(i, d) = rng.uniform(x.col(d).minCoeff(), x.col(d).maxCoeff());
    DsppPrediction pred = dspp_predict(model, probes);
    std::ostringstream o;
    for (const auto& name : c.params) o << name << ',';
    o << "mean,std\n";
    for (Eigen::Index i = 0; i < probes.rows(); ++i) {
      for (Eigen::Index d = 0; d < probes.cols(); ++d)
        o << fmt_double(probes(i, d)) << ',';
      o << fmt_double(pred.mean[i]) << ','
        << fmt_double(std::sqrt(pred.var[i])) << '\n';
    }
    write_file(detail::stage_path(c, st + "/errorbars.csv"), o.str());
  });

  for (const auto& st : states) {
    files.push_back(st + "/grid_dspp.csv");
    for (int n_drop : {1, 2}) {
      if (std::size_t(n_drop) >= c.params.size()) break;
      files.push_back(st + "/grid_dspp" + cat(n_drop) + ".csv");
    }
    files.push_back(st + "/errorbars.csv");
  }
  return files;
}

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {
      "synth",    "ingest",   "preprocess",      "featsel",
      "train-dspp", "train-bayes", "evaluate",   "ablate",
      "retrain-reduced", "triggers", "report"};
  return names;
}

// Runs one stage, writes its manifest, and returns the artifact list
// (relative to the output directory). Stage timing goes to stderr only.
inline std::vector<std::string> run_stage(const PipelineConfig& c,
                                          const std::string& stage) {
  validate_pipeline_config(c);
  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> files;
  if (stage == "synth") files = run_synth(c);
  else if (stage == "ingest") files = run_ingest(c);
  else if (stage == "preprocess") files = run_preprocess(c);
  else if (stage == "featsel") files = run_featsel(c);
  else if (stage == "train-dspp") files = run_train_dspp(c);
  else if (stage == "train-bayes") files = run_train_bayes(c);
  else if (stage == "evaluate") files = run_evaluate(c);
  else if (stage == "ablate") files = run_ablate(c);
  else if (stage == "retrain-reduced") files = run_retrain_reduced(c);
  else if (stage == "triggers") files = run_triggers(c);
  else if (stage == "report") files = run_report(c);
  else fail("unknown stage '", stage, "'; valid stages: ",
            detail::join(stage_names()));
  detail::write_manifest(c, stage, files);
  auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                std::chrono::steady_clock::now() - t0)
                .count();
  std::cerr << "wxrisk: " << stage << " finished in " << ms << " ms\n";
  return files;
}

}  // namespace wxrisk
