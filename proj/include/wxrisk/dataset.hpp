// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "wxrisk/common.hpp"

namespace wxrisk {

struct WeatherParamSpec {
  std::string name;
  std::string unit;
  int index = 0;
};

inline void validate_schema(const std::vector<WeatherParamSpec>& specs) {
  require(!specs.empty(), "schema: no weather parameters");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    require(specs[i].index == int(i), "schema: parameter '", specs[i].name,
            "' has index ", specs[i].index, ", expected ", i);
    require(!specs[i].name.empty(), "schema: empty parameter name at index ", i);
    for (std::size_t j = 0; j < i; ++j)
      require(specs[j].name != specs[i].name, "schema: duplicate parameter name '",
              specs[i].name, "'");
  }
}

struct Measurement {
  std::string state;
  Eigen::VectorXd params;
  double hours_checked = 0.0;
  double hours_dropout = 0.0;
};

// Dropout probability of a single measurement window.
inline double dropout_probability(const Measurement& m) {
  require(m.hours_checked > 0.0, "dropout_probability: hours_checked is ",
          m.hours_checked, " for state ", m.state);
  return m.hours_dropout / m.hours_checked;
}

struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct StateDataset {
  std::string state;
  std::vector<WeatherParamSpec> specs;
  std::vector<Measurement> measurements;
  std::vector<ParamRange> param_ranges;
};

inline void recompute_ranges(StateDataset& ds) {
  const std::size_t d = ds.specs.size();
  ds.param_ranges.assign(d, ParamRange{});
  if (ds.measurements.empty()) return;
  for (std::size_t j = 0; j < d; ++j) {
    double lo = ds.measurements[0].params[j];
    double hi = lo;
    for (const auto& m : ds.measurements) {
      lo = std::min(lo, m.params[j]);
      hi = std::max(hi, m.params[j]);
    }
    ds.param_ranges[j] = {lo, hi};
  }
}

inline void check_dataset(const StateDataset& ds) {
  validate_schema(ds.specs);
  require(ds.param_ranges.size() == ds.specs.size(), "dataset ", ds.state,
          ": ranges/specs size mismatch");
  for (const auto& m : ds.measurements) {
    require(m.params.size() == Eigen::Index(ds.specs.size()), "dataset ",
            ds.state, ": measurement has ", m.params.size(), " params, expected ",
            ds.specs.size());
    require(m.hours_checked >= 0.0 && m.hours_dropout >= 0.0 &&
                m.hours_dropout <= m.hours_checked,
            "dataset ", ds.state, ": hours invariant violated (checked=",
            m.hours_checked, ", dropout=", m.hours_dropout, ")");
    for (std::size_t j = 0; j < ds.specs.size(); ++j)
      require(m.params[j] >= ds.param_ranges[j].lo &&
                  m.params[j] <= ds.param_ranges[j].hi,
              "dataset ", ds.state, ": param '", ds.specs[j].name,
              "' outside recorded range");
  }
}

// Per-coordinate affine map to zero mean, unit variance.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  Eigen::Index dim() const { return mean.size(); }

  Eigen::VectorXd standardize(const Eigen::VectorXd& x) const {
    require(x.size() == mean.size(), "standardize: got ", x.size(),
            " coords, expected ", mean.size());
    return (x - mean).cwiseQuotient(std);
  }

  Eigen::VectorXd destandardize(const Eigen::VectorXd& z) const {
    require(z.size() == mean.size(), "destandardize: got ", z.size(),
            " coords, expected ", mean.size());
    return mean + z.cwiseProduct(std);
  }

  // Rows are observations.
  Eigen::MatrixXd standardize_rows(const Eigen::MatrixXd& X) const {
    require(X.cols() == mean.size(), "standardize_rows: got ", X.cols(),
            " columns, expected ", mean.size());
    return (X.rowwise() - mean.transpose())
        .array()
        .rowwise() /
        std.transpose().array();
  }
};

// Sample mean and sample (n-1) standard deviation per column. Zero-variance
// columns are an error naming the offending parameter.
inline Standardizer fit_standardizer(const Eigen::MatrixXd& X,
                                     const std::vector<std::string>& names) {
  require(X.rows() >= 2, "fit_standardizer: need at least 2 rows, got ", X.rows());
  require(names.size() == std::size_t(X.cols()),
          "fit_standardizer: names/columns mismatch");
  Standardizer s;
  s.mean = X.colwise().mean();
  s.std.resize(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    double v =
        (X.col(j).array() - s.mean[j]).square().sum() / double(X.rows() - 1);
    require(v > 0.0, "fit_standardizer: parameter '", names[std::size_t(j)],
            "' has zero variance");
    s.std[j] = std::sqrt(v);
  }
  return s;
}

inline Eigen::MatrixXd param_matrix(const StateDataset& ds,
                                    const std::vector<int>& selected) {
  Eigen::MatrixXd X(ds.measurements.size(), selected.size());
  for (std::size_t i = 0; i < ds.measurements.size(); ++i)
    for (std::size_t j = 0; j < selected.size(); ++j) {
      require(selected[j] >= 0 && selected[j] < int(ds.specs.size()),
              "param_matrix: selected index ", selected[j], " out of range");
      X(Eigen::Index(i), Eigen::Index(j)) = ds.measurements[i].params[selected[j]];
    }
  return X;
}

inline Standardizer fit_standardizer(const StateDataset& ds,
                                     const std::vector<int>& selected) {
  std::vector<std::string> names;
  names.reserve(selected.size());
  for (int j : selected) names.push_back(ds.specs[std::size_t(j)].name);
  return fit_standardizer(param_matrix(ds, selected), names);
}

struct RejectionReport {
  std::map<std::string, std::size_t> rejected;
  std::size_t accepted = 0;

  std::size_t total_rejected() const {
    std::size_t n = 0;
    for (const auto& [k, v] : rejected) n += v;
    return n;
  }
};

struct IngestResult {
  std::map<std::string, StateDataset> states;
  RejectionReport report;
};

namespace detail {

inline std::string chomp(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

}  // namespace detail

// CSV layout: state,<param columns...>,hours_checked,hours_dropout.
// Malformed rows are dropped and tallied by reason; a malformed header is a
// hard schema error.
inline IngestResult load_csv(std::istream& in,
                             const std::vector<WeatherParamSpec>& schema) {
  validate_schema(schema);
  const std::size_t ncols = schema.size() + 3;

  std::string line;
  require(bool(std::getline(in, line)), "ingest: empty input, no header");
  auto header = split(detail::chomp(line), ',');
  require(header.size() == ncols, "ingest: header has ", header.size(),
          " columns, expected ", ncols);
  require(header.front() == "state", "ingest: first header column is '",
          header.front(), "', expected 'state'");
  for (std::size_t j = 0; j < schema.size(); ++j)
    require(header[j + 1] == schema[j].name, "ingest: header column ", j + 1,
            " is '", header[j + 1], "', expected '", schema[j].name, "'");
  require(header[ncols - 2] == "hours_checked" && header[ncols - 1] == "hours_dropout",
          "ingest: trailing header columns must be hours_checked,hours_dropout");

  IngestResult out;
  while (std::getline(in, line)) {
    std::string body = detail::chomp(line);
    if (body.empty()) continue;
    auto cells = split(body, ',');
    auto reject = [&](const char* reason) { out.report.rejected[reason]++; };
    if (cells.size() != ncols) {
      reject("wrong_field_count");
      continue;
    }
    if (cells[0].size() != 2) {
      reject("bad_state_code");
      continue;
    }
    Measurement m;
    m.state = cells[0];
    m.params.resize(Eigen::Index(schema.size()));
    bool ok = true;
    bool finite = true;
    for (std::size_t j = 0; j + 1 < ncols && ok; ++j) {
      double v;
      if (!parse_double(cells[j + 1], v)) {
        ok = false;
        break;
      }
      if (!std::isfinite(v)) finite = false;
      if (j < schema.size())
        m.params[Eigen::Index(j)] = v;
      else if (j == schema.size())
        m.hours_checked = v;
      else
        m.hours_dropout = v;
    }
    if (!ok) {
      reject("unparsable_number");
      continue;
    }
    if (!finite) {
      reject("non_finite_value");
      continue;
    }
    if (m.hours_checked < 0.0 || m.hours_dropout < 0.0) {
      reject("negative_hours");
      continue;
    }
    if (m.hours_dropout > m.hours_checked) {
      reject("dropout_exceeds_checked");
      continue;
    }
    auto& ds = out.states[m.state];
    if (ds.measurements.empty()) {
      ds.state = m.state;
      ds.specs = schema;
    }
    ds.measurements.push_back(std::move(m));
    out.report.accepted++;
  }
  for (auto& [name, ds] : out.states) recompute_ranges(ds);
  return out;
}

inline IngestResult load_csv(const std::string& path,
                             const std::vector<WeatherParamSpec>& schema) {
  std::ifstream in(path);
  require(bool(in), "ingest: cannot open ", path);
  return load_csv(in, schema);
}

// Schema derived from the header row itself (units unknown).
inline IngestResult load_csv(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "ingest: cannot open ", path);
  std::string line;
  require(bool(std::getline(in, line)), "ingest: empty input, no header");
  auto header = split(detail::chomp(line), ',');
  require(header.size() >= 4, "ingest: header has ", header.size(),
          " columns, need at least state,<param>,hours_checked,hours_dropout");
  std::vector<WeatherParamSpec> schema;
  for (std::size_t j = 1; j + 2 < header.size(); ++j)
    schema.push_back({header[j], "", int(j - 1)});
  in.seekg(0);
  return load_csv(in, schema);
}

inline void save_csv(std::ostream& out, const StateDataset& ds) {
  out << "state";
  for (const auto& s : ds.specs) out << ',' << s.name;
  out << ",hours_checked,hours_dropout\n";
  for (const auto& m : ds.measurements) {
    out << m.state;
    for (Eigen::Index j = 0; j < m.params.size(); ++j)
      out << ',' << fmt_double(m.params[j]);
    out << ',' << fmt_double(m.hours_checked) << ',' << fmt_double(m.hours_dropout)
        << '\n';
  }
}

inline void save_csv(const std::string& path,
                     const std::vector<const StateDataset*>& states) {
  require(!states.empty(), "save_csv: no datasets");
  std::ofstream out(path, std::ios::binary);
  require(bool(out), "save_csv: cannot open ", path);
  out << "state";
  for (const auto& s : states.front()->specs) out << ',' << s.name;
  out << ",hours_checked,hours_dropout\n";
  for (const StateDataset* ds : states) {
    for (const auto& m : ds->measurements) {
      out << m.state;
      for (Eigen::Index j = 0; j < m.params.size(); ++j)
        out << ',' << fmt_double(m.params[j]);
      out << ',' << fmt_double(m.hours_checked) << ','
          << fmt_double(m.hours_dropout) << '\n';
    }
  }
}

// Deterministic split: indices shuffled by seed, first n_test become the
// test set, both halves returned in original order.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split_train_test(
    const std::vector<T>& items, std::size_t n_test, std::uint64_t seed) {
  require(n_test < items.size(), "split_train_test: n_test=", n_test,
          " must be smaller than item count ", items.size());
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "train_test_split"));
  rng.shuffle(idx);
  std::vector<std::size_t> test_idx(idx.begin(), idx.begin() + long(n_test));
  std::vector<std::size_t> train_idx(idx.begin() + long(n_test), idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::pair<std::vector<T>, std::vector<T>> out;
  out.first.reserve(train_idx.size());
  out.second.reserve(test_idx.size());
  for (auto i : train_idx) out.first.push_back(items[i]);
  for (auto i : test_idx) out.second.push_back(items[i]);
  return out;
}

}  // namespace wxrisk
