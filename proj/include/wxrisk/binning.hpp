// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "wxrisk/common.hpp"
#include "wxrisk/dataset.hpp"

namespace wxrisk {

// Bin extent along each selected parameter is 1/12 of that parameter's
// observed range.
inline constexpr double kBinWidthDivisor = 12.0;

struct BinSpec {
  Eigen::VectorXd centers;
  Eigen::VectorXd widths;
};

// Uniformly random bin center inside each selected parameter's range.
// A degenerate range (lo == hi) cannot host a bin.
inline BinSpec sample_bin_spec(const StateDataset& ds,
                               const std::vector<int>& selected, Rng& rng) {
  require(!selected.empty(), "sample_bin_spec: no parameters selected");
  BinSpec spec;
  spec.centers.resize(Eigen::Index(selected.size()));
  spec.widths.resize(Eigen::Index(selected.size()));
  for (std::size_t j = 0; j < selected.size(); ++j) {
    require(selected[j] >= 0 && selected[j] < int(ds.specs.size()),
            "sample_bin_spec: selected index ", selected[j], " out of range");
    const auto& r = ds.param_ranges[std::size_t(selected[j])];
    require(r.hi > r.lo, "sample_bin_spec: parameter '",
            ds.specs[std::size_t(selected[j])].name, "' has degenerate range [",
            r.lo, ", ", r.hi, "]");
    spec.centers[Eigen::Index(j)] = rng.uniform(r.lo, r.hi);
    spec.widths[Eigen::Index(j)] = (r.hi - r.lo) / kBinWidthDivisor;
  }
  return spec;
}

// Closed membership intervals on every selected axis.
inline bool bin_membership(const Measurement& m, const BinSpec& spec,
                           const std::vector<int>& selected) {
  require(spec.centers.size() == Eigen::Index(selected.size()),
          "bin_membership: spec dimension ", spec.centers.size(),
          " != selected count ", selected.size());
  for (std::size_t j = 0; j < selected.size(); ++j) {
    double v = m.params[selected[j]];
    double half = spec.widths[Eigen::Index(j)] / 2.0;
    double c = spec.centers[Eigen::Index(j)];
    if (v < c - half || v > c + half) return false;
  }
  return true;
}

// Group size q = floor(n / groups). With q >= 1 the number of complete
// groups floor(n/q) is always >= groups, so the group-count floor of 22
// keeps the largest group index above 20.
inline std::size_t choose_group_size(std::size_t n,
                                     std::size_t min_members = 4000,
                                     std::size_t groups = 24) {
  require(groups >= 22, "choose_group_size: groups=", groups,
          " too small, need >= 22 complete groups");
  require(min_members >= groups, "choose_group_size: min_members=", min_members,
          " below group count ", groups);
  require(n >= min_members, "choose_group_size: bin population ", n,
          " below minimum ", min_members);
  return n / groups;
}

// Median of consecutive complete group means. The trailing n mod q values
// do not form a complete group and are dropped; with an even group count
// the two central order statistics are averaged.
inline double median_of_means(const std::vector<double>& values, std::size_t q) {
  require(q >= 1, "median_of_means: group size must be >= 1");
  require(q <= values.size(), "median_of_means: group size ", q,
          " exceeds value count ", values.size());
  const std::size_t k = values.size() / q;
  std::vector<double> means(k);
  for (std::size_t g = 0; g < k; ++g) {
    double s = 0.0;
    for (std::size_t i = g * q; i < (g + 1) * q; ++i) s += values[i];
    means[g] = s / double(q);
  }
  std::sort(means.begin(), means.end());
  if (k % 2 == 1) return means[k / 2];
  return (means[k / 2 - 1] + means[k / 2]) / 2.0;
}

struct BinnedSample {
  Eigen::VectorXd centers;
  double p_d = 0.0;
  std::size_t n_members = 0;
  std::size_t group_size = 0;
};

struct BinPolicy {
  std::size_t target = 1500;        // accepted bins wanted
  std::size_t min_members = 4000;   // minimum population per accepted bin
  std::size_t groups = 24;          // complete groups for the median of means
  std::size_t attempt_factor = 50;  // attempt cap = factor * target
  bool shuffle_members = false;     // optional pre-shuffle of member order
};

namespace detail {

struct SortedColumn {
  std::vector<double> values;       // ascending
  std::vector<std::size_t> rows;    // measurement index per sorted value
};

}  // namespace detail

// Monte Carlo bin harvest: random candidate boxes are accepted when their
// population reaches policy.min_members; each accepted bin's dropout level
// is the median of means over its members in dataset order. Rows with
// hours_checked == 0 carry no dropout probability and never join a bin.
// Candidate attempts use independent seed substreams, so results do not
// depend on evaluation order.
inline std::vector<BinnedSample> build_binned_dataset(
    const StateDataset& ds, const std::vector<int>& selected,
    const BinPolicy& policy, std::uint64_t seed) {
  require(!selected.empty(), "build_binned_dataset: no parameters selected");
  if (policy.target == 0) return {};
  require(policy.attempt_factor >= 1, "build_binned_dataset: attempt_factor < 1");

  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < ds.measurements.size(); ++i)
    if (ds.measurements[i].hours_checked > 0.0) usable.push_back(i);
  require(usable.size() >= policy.min_members, "build_binned_dataset: only ",
          usable.size(), " usable measurements, bins need at least ",
          policy.min_members);

  // Per selected parameter, a value-sorted view for fast candidate scans.
  std::vector<detail::SortedColumn> cols(selected.size());
  for (std::size_t j = 0; j < selected.size(); ++j) {
    auto& col = cols[j];
    col.values.reserve(usable.size());
    col.rows.reserve(usable.size());
    std::vector<std::size_t> order(usable.size());
    for (std::size_t i = 0; i < usable.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      double va = ds.measurements[usable[a]].params[selected[j]];
      double vb = ds.measurements[usable[b]].params[selected[j]];
      return va < vb || (va == vb && usable[a] < usable[b]);
    });
    for (std::size_t i : order) {
      col.values.push_back(ds.measurements[usable[i]].params[selected[j]]);
      col.rows.push_back(usable[i]);
    }
  }

  const std::size_t cap = policy.attempt_factor * policy.target;
  std::vector<BinnedSample> bins;
  std::size_t best_seen = 0;
  std::vector<std::size_t> members;
  std::vector<double> pvals;

  for (std::size_t attempt = 0; attempt < cap && bins.size() < policy.target;
       ++attempt) {
    Rng rng(derive_seed(seed, cat("bin:", attempt)));
    BinSpec spec = sample_bin_spec(ds, selected, rng);

    // Scan the axis with the fewest in-interval candidates.
    std::size_t scan_axis = 0;
    std::size_t scan_count = usable.size() + 1;
    for (std::size_t j = 0; j < selected.size(); ++j) {
      double half = spec.widths[Eigen::Index(j)] / 2.0;
      auto lo = std::lower_bound(cols[j].values.begin(), cols[j].values.end(),
                                 spec.centers[Eigen::Index(j)] - half);
      auto hi = std::upper_bound(cols[j].values.begin(), cols[j].values.end(),
                                 spec.centers[Eigen::Index(j)] + half);
      std::size_t count = std::size_t(hi - lo);
      if (count < scan_count) {
        scan_count = count;
        scan_axis = j;
      }
    }
    if (scan_count < policy.min_members) {
      best_seen = std::max(best_seen, scan_count);
      continue;
    }

    members.clear();
    const auto& col = cols[scan_axis];
    double half = spec.widths[Eigen::Index(scan_axis)] / 2.0;
    double lo = spec.centers[Eigen::Index(scan_axis)] - half;
    double hi = spec.centers[Eigen::Index(scan_axis)] + half;
    auto first = std::lower_bound(col.values.begin(), col.values.end(), lo);
    auto last = std::upper_bound(col.values.begin(), col.values.end(), hi);
    for (auto it = first; it != last; ++it) {
      std::size_t row = col.rows[std::size_t(it - col.values.begin())];
      if (bin_membership(ds.measurements[row], spec, selected))
        members.push_back(row);
    }
    best_seen = std::max(best_seen, members.size());
    if (members.size() < policy.min_members) continue;

    std::sort(members.begin(), members.end());  // dataset order
    if (policy.shuffle_members) rng.shuffle(members);
    pvals.clear();
    pvals.reserve(members.size());
    for (std::size_t row : members)
      pvals.push_back(dropout_probability(ds.measurements[row]));

    BinnedSample b;
    b.centers = spec.centers;
    b.n_members = members.size();
    b.group_size = choose_group_size(b.n_members, policy.min_members, policy.groups);
    b.p_d = median_of_means(pvals, b.group_size);
    require(b.n_members / b.group_size > 21,
            "build_binned_dataset: internal group-count invariant broken");
    bins.push_back(std::move(b));
  }

  require(!bins.empty(), "build_binned_dataset: 0 accepted bins after ", cap,
          " attempts for state ", ds.state, "; largest candidate had ", best_seen,
          " members against a minimum of ", policy.min_members,
          "; data may be too dispersed for this bin width");
  return bins;
}

inline void save_bins_csv(const std::string& path,
                          const std::vector<BinnedSample>& bins) {
  require(!bins.empty(), "save_bins_csv: no bins");
  std::ofstream out(path, std::ios::binary);
  require(bool(out), "save_bins_csv: cannot open ", path);
  const Eigen::Index d = bins.front().centers.size();
  for (Eigen::Index j = 0; j < d; ++j) out << 'a' << '_' << (j + 1) << ',';
  out << "p_D,n_members,q\n";
  for (const auto& b : bins) {
    require(b.centers.size() == d, "save_bins_csv: ragged bin dimensions");
    for (Eigen::Index j = 0; j < d; ++j) out << fmt_double(b.centers[j]) << ',';
    out << fmt_double(b.p_d) << ',' << b.n_members << ',' << b.group_size << '\n';
  }
}

inline std::vector<BinnedSample> load_bins_csv(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "load_bins_csv: cannot open ", path);
  std::string line;
  require(bool(std::getline(in, line)), "load_bins_csv: empty file ", path);
  auto header = split(detail::chomp(line), ',');
  require(header.size() >= 4, "load_bins_csv: malformed header in ", path);
  const std::size_t d = header.size() - 3;
  for (std::size_t j = 0; j < d; ++j)
    require(header[j] == cat("a_", j + 1), "load_bins_csv: header column ", j,
            " is '", header[j], "', expected 'a_", j + 1, "'");
  require(header[d] == "p_D" && header[d + 1] == "n_members" && header[d + 2] == "q",
          "load_bins_csv: trailing header columns must be p_D,n_members,q");
  std::vector<BinnedSample> bins;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::string body = detail::chomp(line);
    if (body.empty()) continue;
    auto cells = split(body, ',');
    require(cells.size() == header.size(), "load_bins_csv: line ", lineno,
            " has ", cells.size(), " fields, expected ", header.size());
    BinnedSample b;
    b.centers.resize(Eigen::Index(d));
    for (std::size_t j = 0; j < d; ++j)
      require(parse_double(cells[j], b.centers[Eigen::Index(j)]),
              "load_bins_csv: bad number at line ", lineno, " column ", j);
    std::uint64_t n = 0, q = 0;
    require(parse_double(cells[d], b.p_d) && parse_u64(cells[d + 1], n) &&
                parse_u64(cells[d + 2], q),
            "load_bins_csv: bad trailing fields at line ", lineno);
    b.n_members = n;
    b.group_size = q;
    bins.push_back(std::move(b));
  }
  return bins;
}

// Bin centers as a row-per-bin matrix, and dropout levels as a vector.
inline Eigen::MatrixXd bin_centers(const std::vector<BinnedSample>& bins) {
  require(!bins.empty(), "bin_centers: no bins");
  Eigen::MatrixXd X(bins.size(), bins.front().centers.size());
  for (std::size_t i = 0; i < bins.size(); ++i) {
    require(bins[i].centers.size() == X.cols(), "bin_centers: ragged bins");
    X.row(Eigen::Index(i)) = bins[i].centers.transpose();
  }
  return X;
}

inline Eigen::VectorXd bin_levels(const std::vector<BinnedSample>& bins) {
  Eigen::VectorXd y(bins.size());
  for (std::size_t i = 0; i < bins.size(); ++i) y[Eigen::Index(i)] = bins[i].p_d;
  return y;
}

}  // namespace wxrisk
