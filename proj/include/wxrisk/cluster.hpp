// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <string>
#include <vector>

#include "wxrisk/common.hpp"
#include "wxrisk/dataset.hpp"

namespace wxrisk {

struct CorrelationMatrix {
  std::vector<std::string> labels;    // weather params + "dropout_probability"
  Eigen::MatrixXd values;
  std::vector<std::string> dropped;   // constant columns excluded with warning
};

// Pearson correlations between every weather parameter and the per-row
// dropout probability. Constant columns cannot be correlated and are
// excluded (recorded in .dropped). Computed as S_xy / sqrt(S_xx * S_yy),
// which pins the diagonal at exactly 1.
inline CorrelationMatrix pearson_matrix(const StateDataset& ds) {
  std::vector<std::string> names;
  std::vector<Eigen::VectorXd> columns;

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.measurements.size(); ++i)
    if (ds.measurements[i].hours_checked > 0.0) rows.push_back(i);
  require(rows.size() >= 2, "pearson_matrix: need at least 2 usable rows, got ",
          rows.size());

  const Eigen::Index n = Eigen::Index(rows.size());
  for (std::size_t j = 0; j < ds.specs.size(); ++j) {
    Eigen::VectorXd c(n);
    for (Eigen::Index i = 0; i < n; ++i)
      c[i] = ds.measurements[rows[std::size_t(i)]].params[Eigen::Index(j)];
    names.push_back(ds.specs[j].name);
    columns.push_back(std::move(c));
  }
  Eigen::VectorXd pd(n);
  for (Eigen::Index i = 0; i < n; ++i)
    pd[i] = dropout_probability(ds.measurements[rows[std::size_t(i)]]);
  names.push_back("dropout_probability");
  columns.push_back(std::move(pd));

  CorrelationMatrix out;
  std::vector<Eigen::VectorXd> centered;
  std::vector<double> ss;
  for (std::size_t j = 0; j < columns.size(); ++j) {
    Eigen::VectorXd c = columns[j].array() - columns[j].mean();
    double s = c.squaredNorm();
    if (s == 0.0) {
      out.dropped.push_back(names[j]);
      continue;
    }
    out.labels.push_back(names[j]);
    centered.push_back(std::move(c));
    ss.push_back(s);
  }
  require(out.labels.size() >= 2, "pearson_matrix: fewer than 2 non-constant columns");

  const Eigen::Index m = Eigen::Index(out.labels.size());
  out.values.resize(m, m);
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b <= a; ++b) {
      double r = centered[std::size_t(a)].dot(centered[std::size_t(b)]) /
                 std::sqrt(ss[std::size_t(a)] * ss[std::size_t(b)]);
      r = std::clamp(r, -1.0, 1.0);
      out.values(a, b) = r;
      out.values(b, a) = r;
    }
  return out;
}

// Leaf dissimilarities 1 - |corr| over the weather parameters only (the
// dropout column is the clustering target, not a leaf).
inline std::pair<std::vector<std::string>, Eigen::MatrixXd> correlation_distance(
    const CorrelationMatrix& corr) {
  std::vector<Eigen::Index> keep;
  std::vector<std::string> labels;
  for (std::size_t j = 0; j < corr.labels.size(); ++j)
    if (corr.labels[j] != "dropout_probability") {
      keep.push_back(Eigen::Index(j));
      labels.push_back(corr.labels[j]);
    }
  require(keep.size() >= 2, "correlation_distance: need at least 2 parameters");
  Eigen::MatrixXd d(keep.size(), keep.size());
  for (std::size_t a = 0; a < keep.size(); ++a)
    for (std::size_t b = 0; b < keep.size(); ++b)
      d(Eigen::Index(a), Eigen::Index(b)) =
          std::max(0.0, 1.0 - std::abs(corr.values(keep[a], keep[b])));
  return {labels, d};
}

struct Merge {
  int a = 0;          // cluster ids; leaves are 0..n-1, merge t creates n+t
  int b = 0;
  double height = 0.0;
  int size = 0;       // members in the new cluster
};

struct Dendrogram {
  int n_leaves = 0;
  std::vector<Merge> merges;

  // Member leaves of a cluster id, ascending.
  std::vector<int> members(int id) const {
    if (id < n_leaves) return {id};
    const Merge& m = merges[std::size_t(id - n_leaves)];
    auto out = members(m.a);
    auto rhs = members(m.b);
    out.insert(out.end(), rhs.begin(), rhs.end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

namespace detail {

// Average linkage evaluated directly: flat mean of the original leaf
// distances over all cross-cluster member pairs, accumulated in ascending
// member order. Cheap at the leaf counts seen here and leaves no room for
// update-formula drift.
inline double flat_average_distance(const Eigen::MatrixXd& dist,
                                    const std::vector<int>& a,
                                    const std::vector<int>& b) {
  double s = 0.0;
  for (int i : a)
    for (int j : b) s += dist(i, j);
  return s / (double(a.size()) * double(b.size()));
}

}  // namespace detail

// Agglomerative average-linkage clustering of a symmetric dissimilarity
// matrix with zero diagonal. Ties pick the lowest (row, col) id pair among
// active clusters.
inline Dendrogram upgma(const Eigen::MatrixXd& dist) {
  const Eigen::Index n = dist.rows();
  require(n >= 2, "upgma: need at least 2 leaves, got ", n);
  require(dist.cols() == n, "upgma: matrix is ", n, "x", dist.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    require(dist(i, i) == 0.0, "upgma: nonzero diagonal at ", i);
    for (Eigen::Index j = 0; j < n; ++j) {
      require(dist(i, j) >= 0.0, "upgma: negative distance at (", i, ",", j, ")");
      require(dist(i, j) == dist(j, i), "upgma: asymmetric at (", i, ",", j, ")");
    }
  }

  Dendrogram dend;
  dend.n_leaves = int(n);
  std::vector<int> active;
  std::vector<std::vector<int>> members;
  for (int i = 0; i < int(n); ++i) {
    active.push_back(i);
    members.push_back({i});
  }

  double last_height = 0.0;
  while (active.size() > 1) {
    std::size_t bi = 0, bj = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < active.size(); ++i)
      for (std::size_t j = i + 1; j < active.size(); ++j) {
        double d = detail::flat_average_distance(dist, members[i], members[j]);
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    require(best >= last_height - 1e-12,
            "upgma: internal monotonicity violation");  // UPGMA heights are monotone
    last_height = std::max(last_height, best);

    Merge m;
    m.a = active[bi];
    m.b = active[bj];
    m.height = best;
    std::vector<int> merged = members[bi];
    merged.insert(merged.end(), members[bj].begin(), members[bj].end());
    std::sort(merged.begin(), merged.end());
    m.size = int(merged.size());

    int new_id = int(n) + int(dend.merges.size());
    dend.merges.push_back(m);
    // Replace i with the merged cluster, drop j.
    active[bi] = new_id;
    members[bi] = std::move(merged);
    active.erase(active.begin() + long(bj));
    members.erase(members.begin() + long(bj));
  }
  return dend;
}

// Clusters remaining after replaying all but the last (k-1) merges; each
// cluster is its sorted member list, clusters ordered by smallest member.
inline std::vector<std::vector<int>> cut_clusters(const Dendrogram& dend, int k) {
  require(k >= 1 && k <= dend.n_leaves, "cut_clusters: k=", k,
          " outside [1, ", dend.n_leaves, "]");
  std::vector<int> active;
  std::vector<std::vector<int>> members;
  for (int i = 0; i < dend.n_leaves; ++i) {
    active.push_back(i);
    members.push_back({i});
  }
  const std::size_t apply = std::size_t(dend.n_leaves - k);
  require(apply <= dend.merges.size(), "cut_clusters: dendrogram has only ",
          dend.merges.size(), " merges");
  for (std::size_t t = 0; t < apply; ++t) {
    const Merge& m = dend.merges[t];
    std::size_t ia = 0, ib = 0;
    bool fa = false, fb = false;
    for (std::size_t i = 0; i < active.size(); ++i) {
      if (active[i] == m.a) { ia = i; fa = true; }
      if (active[i] == m.b) { ib = i; fb = true; }
    }
    require(fa && fb, "cut_clusters: merge ", t, " references inactive clusters");
    if (ia > ib) std::swap(ia, ib);
    std::vector<int> merged = members[ia];
    merged.insert(merged.end(), members[ib].begin(), members[ib].end());
    std::sort(merged.begin(), merged.end());
    active[ia] = dend.n_leaves + int(t);
    members[ia] = std::move(merged);
    active.erase(active.begin() + long(ib));
    members.erase(members.begin() + long(ib));
  }
  std::sort(members.begin(), members.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return members;
}

// One representative per cluster: the member most correlated (in absolute
// value) with dropout probability; ties resolve to the lower leaf index.
// Returned in cluster order (clusters sorted by smallest member).
inline std::vector<std::string> select_representatives(
    const CorrelationMatrix& corr, const Dendrogram& dend, int k) {
  Eigen::Index target = -1;
  for (std::size_t j = 0; j < corr.labels.size(); ++j)
    if (corr.labels[j] == "dropout_probability") target = Eigen::Index(j);
  require(target >= 0, "select_representatives: no dropout_probability column");

  std::vector<Eigen::Index> leaf_col;
  std::vector<std::string> leaf_name;
  for (std::size_t j = 0; j < corr.labels.size(); ++j)
    if (Eigen::Index(j) != target) {
      leaf_col.push_back(Eigen::Index(j));
      leaf_name.push_back(corr.labels[j]);
    }
  require(int(leaf_col.size()) == dend.n_leaves,
          "select_representatives: dendrogram has ", dend.n_leaves,
          " leaves but correlation matrix has ", leaf_col.size(), " parameters");
  require(k >= 1 && k <= dend.n_leaves, "select_representatives: k=", k,
          " outside [1, ", dend.n_leaves, "]");

  std::vector<std::string> out;
  for (const auto& cluster : cut_clusters(dend, k)) {
    int best = cluster.front();
    double best_abs = -1.0;
    for (int leaf : cluster) {
      double a = std::abs(corr.values(leaf_col[std::size_t(leaf)], target));
      if (a > best_abs) {
        best_abs = a;
        best = leaf;
      }
    }
    out.push_back(leaf_name[std::size_t(best)]);
  }
  return out;
}

}  // namespace wxrisk
