// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "wxrisk/common.hpp"

namespace wxrisk::ad {

// One node of a reverse-mode differentiation graph over dense matrices.
// `pull` scatters this node's gradient into its parents' gradients. Nodes
// reachable only through constants carry no parents and no pull, so constant
// subgraphs cost nothing during backward.
class Node {
 public:
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> pull;
};

using Var = std::shared_ptr<Node>;

inline Var constant(Eigen::MatrixXd v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

inline Var scalar_const(double v) {
  return constant(Eigen::MatrixXd::Constant(1, 1, v));
}

inline Var leaf(Eigen::MatrixXd v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

namespace detail {

inline Var fresh(Eigen::MatrixXd v, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

inline void same_shape(const Var& a, const Var& b, const char* op) {
  require(a->value.rows() == b->value.rows() &&
              a->value.cols() == b->value.cols(),
          op, ": shape mismatch ", a->value.rows(), "x", a->value.cols(),
          " vs ", b->value.rows(), "x", b->value.cols());
}

inline void scalar_shape(const Var& a, const char* op) {
  require(a->value.rows() == 1 && a->value.cols() == 1, op,
          ": expected 1x1, got ", a->value.rows(), "x", a->value.cols());
}

}  // namespace detail

// Seeds the (scalar) root with gradient 1 and runs every pull in reverse
// topological order. Leaf gradients stay in place for the caller to read.
inline void backward(const Var& root) {
  require(root->value.size() == 1, "ad::backward: root must be 1x1, got ",
          root->value.rows(), "x", root->value.cols());
  require(root->requires_grad,
          "ad::backward: root does not depend on any leaf");

  // Postorder appends producers before consumers; walking it backwards gives
  // a valid reverse-topological schedule even with shared subgraphs.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  seen.insert(root.get());
  stack.push_back({root.get(), 0});
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order)
    n->grad = Eigen::MatrixXd::Zero(n->value.rows(), n->value.cols());
  root->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->pull) (*it)->pull();
}

inline const Eigen::MatrixXd& grad(const Var& v) {
  require(v->grad.size() == v->value.size(),
          "ad::grad: no gradient recorded; run backward over a graph that "
          "uses this leaf");
  return v->grad;
}

// ---- elementwise and linear ops ----

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "ad::add");
  Var out = detail::fresh(a->value + b->value, {a, b});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *pb = b.get();
    out->pull = [o, pa, pb] {
      if (pa->requires_grad) pa->grad += o->grad;
      if (pb->requires_grad) pb->grad += o->grad;
    };
  }
  return out;
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "ad::sub");
  Var out = detail::fresh(a->value - b->value, {a, b});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *pb = b.get();
    out->pull = [o, pa, pb] {
      if (pa->requires_grad) pa->grad += o->grad;
      if (pb->requires_grad) pb->grad -= o->grad;
    };
  }
  return out;
}

inline Var neg(const Var& a) {
  Var out = detail::fresh(-a->value, {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] { pa->grad -= o->grad; };
  }
  return out;
}

inline Var scale(const Var& a, double c) {
  Var out = detail::fresh(c * a->value, {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa, c] { pa->grad += c * o->grad; };
  }
  return out;
}

inline Var cadd(const Var& a, double c) {
  Var out = detail::fresh(a->value.array() + c, {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] { pa->grad += o->grad; };
  }
  return out;
}

inline Var mul(const Var& a, const Var& b) {
  require(a->value.cols() == b->value.rows(), "ad::mul: inner dims ",
          a->value.cols(), " vs ", b->value.rows());
  Var out = detail::fresh(a->value * b->value, {a, b});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *pb = b.get();
    out->pull = [o, pa, pb] {
      if (pa->requires_grad) pa->grad.noalias() += o->grad * pb->value.transpose();
      if (pb->requires_grad) pb->grad.noalias() += pa->value.transpose() * o->grad;
    };
  }
  return out;
}

inline Var cwise_mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "ad::cwise_mul");
  Var out = detail::fresh(a->value.cwiseProduct(b->value), {a, b});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *pb = b.get();
    out->pull = [o, pa, pb] {
      if (pa->requires_grad) pa->grad += o->grad.cwiseProduct(pb->value);
      if (pb->requires_grad) pb->grad += o->grad.cwiseProduct(pa->value);
    };
  }
  return out;
}

inline Var cwise_div(const Var& a, const Var& b) {
  detail::same_shape(a, b, "ad::cwise_div");
  Var out = detail::fresh(a->value.cwiseQuotient(b->value), {a, b});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *pb = b.get();
    out->pull = [o, pa, pb] {
      if (pa->requires_grad) pa->grad += o->grad.cwiseQuotient(pb->value);
      if (pb->requires_grad)
        pb->grad -= o->grad.cwiseProduct(o->value).cwiseQuotient(pb->value);
    };
  }
  return out;
}

inline Var cwise_square(const Var& a) {
  Var out = detail::fresh(a->value.cwiseProduct(a->value), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] { pa->grad += 2.0 * o->grad.cwiseProduct(pa->value); };
  }
  return out;
}

inline Var cwise_sqrt(const Var& a) {
  require((a->value.array() >= 0.0).all(),
          "ad::cwise_sqrt: negative entry, min = ", a->value.minCoeff());
  Var out = detail::fresh(a->value.cwiseSqrt(), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] {
      pa->grad += 0.5 * o->grad.cwiseQuotient(o->value);
    };
  }
  return out;
}

inline Var cwise_exp(const Var& a) {
  Var out = detail::fresh(a->value.array().exp().matrix(), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] { pa->grad += o->grad.cwiseProduct(o->value); };
  }
  return out;
}

inline Var cwise_log(const Var& a) {
  require((a->value.array() > 0.0).all(),
          "ad::cwise_log: non-positive entry, min = ", a->value.minCoeff());
  Var out = detail::fresh(a->value.array().log().matrix(), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] { pa->grad += o->grad.cwiseQuotient(pa->value); };
  }
  return out;
}

// Elementwise max(a, c); the gradient passes through where a >= c.
inline Var cwise_max_const(const Var& a, double c) {
  Var out = detail::fresh(a->value.array().max(c).matrix(), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    double cc = c;
    out->pull = [o, pa, cc] {
      pa->grad += o->grad.cwiseProduct(
          (pa->value.array() >= cc).cast<double>().matrix());
    };
  }
  return out;
}

inline Var cwise_softplus(const Var& a) {
  Eigen::MatrixXd v = a->value.unaryExpr([](double x) { return softplus(x); });
  Var out = detail::fresh(std::move(v), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] {
      pa->grad += o->grad.cwiseProduct(
          pa->value.unaryExpr([](double x) { return sigmoid(x); }));
    };
  }
  return out;
}

inline Var transpose(const Var& a) {
  Var out = detail::fresh(a->value.transpose(), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] { pa->grad += o->grad.transpose(); };
  }
  return out;
}

inline Var sum_all(const Var& a) {
  Var out = detail::fresh(Eigen::MatrixXd::Constant(1, 1, a->value.sum()), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] {
      pa->grad.array() += o->grad(0, 0);
    };
  }
  return out;
}

// Row-wise squared norms, n x 1.
inline Var row_sum_sq(const Var& a) {
  Var out = detail::fresh(a->value.rowwise().squaredNorm(), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] {
      pa->grad += 2.0 *
          (pa->value.array().colwise() * o->grad.col(0).array()).matrix();
    };
  }
  return out;
}

// Column-wise squared norms, 1 x n.
inline Var col_sum_sq(const Var& a) {
  Var out = detail::fresh(a->value.colwise().squaredNorm(), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] {
      pa->grad += 2.0 *
          (pa->value.array().rowwise() * o->grad.row(0).array()).matrix();
    };
  }
  return out;
}

inline Var entry(const Var& a, Eigen::Index i, Eigen::Index j) {
  require(i >= 0 && i < a->value.rows() && j >= 0 && j < a->value.cols(),
          "ad::entry: (", i, ",", j, ") outside ", a->value.rows(), "x",
          a->value.cols());
  Var out = detail::fresh(Eigen::MatrixXd::Constant(1, 1, a->value(i, j)), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa, i, j] { pa->grad(i, j) += o->grad(0, 0); };
  }
  return out;
}

inline Var hcat(const std::vector<Var>& parts) {
  require(!parts.empty(), "ad::hcat: no parts");
  Eigen::Index rows = parts.front()->value.rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p->value.rows() == rows, "ad::hcat: row mismatch ",
            p->value.rows(), " vs ", rows);
    cols += p->value.cols();
  }
  Eigen::MatrixXd v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p->value.cols()) = p->value;
    at += p->value.cols();
  }
  Var out = detail::fresh(std::move(v), parts);
  if (out->requires_grad) {
    Node* o = out.get();
    std::vector<Node*> raw;
    raw.reserve(parts.size());
    for (const auto& p : parts) raw.push_back(p.get());
    out->pull = [o, raw] {
      Eigen::Index at = 0;
      for (Node* p : raw) {
        if (p->requires_grad)
          p->grad += o->grad.middleCols(at, p->value.cols());
        at += p->value.cols();
      }
    };
  }
  return out;
}

// a + ones * r, r a 1 x d row broadcast down a's rows.
inline Var add_rowvec(const Var& a, const Var& r) {
  require(r->value.rows() == 1 && r->value.cols() == a->value.cols(),
          "ad::add_rowvec: r is ", r->value.rows(), "x", r->value.cols(),
          ", want 1x", a->value.cols());
  Var out = detail::fresh(
      (a->value.array().rowwise() + r->value.row(0).array()).matrix(), {a, r});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *pr = r.get();
    out->pull = [o, pa, pr] {
      if (pa->requires_grad) pa->grad += o->grad;
      if (pr->requires_grad) pr->grad += o->grad.colwise().sum();
    };
  }
  return out;
}

// a scaled per column by the 1 x d row r.
inline Var mul_rowvec(const Var& a, const Var& r) {
  require(r->value.rows() == 1 && r->value.cols() == a->value.cols(),
          "ad::mul_rowvec: r is ", r->value.rows(), "x", r->value.cols(),
          ", want 1x", a->value.cols());
  Var out = detail::fresh(
      (a->value.array().rowwise() * r->value.row(0).array()).matrix(), {a, r});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *pr = r.get();
    out->pull = [o, pa, pr] {
      if (pa->requires_grad)
        pa->grad += (o->grad.array().rowwise() * pr->value.row(0).array()).matrix();
      if (pr->requires_grad)
        pr->grad += o->grad.cwiseProduct(pa->value).colwise().sum();
    };
  }
  return out;
}

// s * a with a 1x1 scale node.
inline Var scale_by(const Var& a, const Var& s) {
  detail::scalar_shape(s, "ad::scale_by");
  Var out = detail::fresh(s->value(0, 0) * a->value, {a, s});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *ps = s.get();
    out->pull = [o, pa, ps] {
      if (pa->requires_grad) pa->grad += ps->value(0, 0) * o->grad;
      if (ps->requires_grad)
        ps->grad(0, 0) += o->grad.cwiseProduct(pa->value).sum();
    };
  }
  return out;
}

// a + s * b with a 1x1 scale node.
inline Var add_scaled(const Var& a, const Var& b, const Var& s) {
  detail::same_shape(a, b, "ad::add_scaled");
  detail::scalar_shape(s, "ad::add_scaled");
  Var out = detail::fresh(a->value + s->value(0, 0) * b->value, {a, b, s});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get(), *pb = b.get(), *ps = s.get();
    out->pull = [o, pa, pb, ps] {
      if (pa->requires_grad) pa->grad += o->grad;
      if (pb->requires_grad) pb->grad += ps->value(0, 0) * o->grad;
      if (ps->requires_grad)
        ps->grad(0, 0) += o->grad.cwiseProduct(pb->value).sum();
    };
  }
  return out;
}

// Stable log(sum(exp)) across each row, n x 1.
inline Var logsumexp_rows(const Var& a) {
  const auto& v = a->value;
  Eigen::VectorXd m = v.rowwise().maxCoeff();
  Eigen::MatrixXd centered =
      (v.array().colwise() - m.array()).exp().matrix();
  Eigen::VectorXd sums = centered.rowwise().sum();
  Eigen::MatrixXd out_v = (m.array() + sums.array().log()).matrix();
  Var out = detail::fresh(std::move(out_v), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    // softmax weights per row
    Eigen::MatrixXd w =
        (centered.array().colwise() / sums.array()).matrix();
    out->pull = [o, pa, w = std::move(w)] {
      pa->grad += (w.array().colwise() * o->grad.col(0).array()).matrix();
    };
  }
  return out;
}

// ---- structured ops ----

// Strict lower triangle copied from a, diagonal exp(a_ii), zero above.
inline Var lower_tri_exp_diag(const Var& a) {
  require(a->value.rows() == a->value.cols(),
          "ad::lower_tri_exp_diag: matrix must be square");
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(a->value.rows(), a->value.cols());
  v.triangularView<Eigen::StrictlyLower>() = a->value;
  v.diagonal() = a->value.diagonal().array().exp();
  Var out = detail::fresh(std::move(v), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] {
      Eigen::MatrixXd g = Eigen::MatrixXd::Zero(o->grad.rows(), o->grad.cols());
      g.triangularView<Eigen::StrictlyLower>() = o->grad;
      g.diagonal() = o->grad.diagonal().cwiseProduct(o->value.diagonal());
      pa->grad += g;
    };
  }
  return out;
}

inline Var sum_log_diag(const Var& a) {
  require(a->value.rows() == a->value.cols(),
          "ad::sum_log_diag: matrix must be square");
  require((a->value.diagonal().array() > 0.0).all(),
          "ad::sum_log_diag: non-positive diagonal");
  double s = a->value.diagonal().array().log().sum();
  Var out = detail::fresh(Eigen::MatrixXd::Constant(1, 1, s), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] {
      pa->grad.diagonal() +=
          o->grad(0, 0) * pa->value.diagonal().cwiseInverse();
    };
  }
  return out;
}

// Lower Cholesky factor of a + jitter*I with jitter escalating tenfold from
// `base` until the factorization succeeds; conditioning error past `cap`.
inline Var cholesky_jitter(const Var& a, double base = 1e-8,
                           double cap = 1e-4) {
  require(a->value.rows() == a->value.cols(),
          "ad::cholesky_jitter: matrix must be square");
  const Eigen::Index n = a->value.rows();
  Eigen::MatrixXd L;
  bool ok = false;
  for (double j = base; j <= cap * (1.0 + 1e-12); j *= 10.0) {
    Eigen::LLT<Eigen::MatrixXd> llt(
        a->value + j * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) {
      L = llt.matrixL();
      ok = true;
      break;
    }
  }
  require(ok, "ad::cholesky_jitter: factorization failed with jitter up to ",
          cap, "; matrix is badly conditioned");
  Var out = detail::fresh(std::move(L), {a});
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.get();
    out->pull = [o, pa] {
      // Murray's backward: with Lbar masked to the lower triangle,
      // Phi = lower-with-halved-diagonal(L^T Lbar),
      // Abar += sym(L^-T Phi L^-1).
      const Eigen::MatrixXd& L = o->value;
      Eigen::MatrixXd Lbar =
          o->grad.triangularView<Eigen::Lower>();
      Eigen::MatrixXd phi = (L.transpose() * Lbar).eval();
      Eigen::MatrixXd lower = phi.triangularView<Eigen::Lower>();
      lower.diagonal() *= 0.5;
      Eigen::MatrixXd t = L.transpose()
                              .triangularView<Eigen::Upper>()
                              .solve(lower);
      Eigen::MatrixXd s =
          L.transpose().triangularView<Eigen::Upper>().solve(t.transpose());
      pa->grad += 0.5 * (s + s.transpose());
    };
  }
  return out;
}

// C = L^-1 B for lower-triangular L.
inline Var solve_lower(const Var& l, const Var& b) {
  require(l->value.rows() == l->value.cols(),
          "ad::solve_lower: L must be square");
  require(l->value.rows() == b->value.rows(), "ad::solve_lower: L is ",
          l->value.rows(), "x", l->value.cols(), ", B has ", b->value.rows(),
          " rows");
  Eigen::MatrixXd c =
      l->value.triangularView<Eigen::Lower>().solve(b->value);
  Var out = detail::fresh(std::move(c), {l, b});
  if (out->requires_grad) {
    Node *o = out.get(), *pl = l.get(), *pb = b.get();
    out->pull = [o, pl, pb] {
      Eigen::MatrixXd g = pl->value.transpose()
                              .triangularView<Eigen::Upper>()
                              .solve(o->grad);
      if (pb->requires_grad) pb->grad += g;
      if (pl->requires_grad) {
        Eigen::MatrixXd full = -g * o->value.transpose();
        pl->grad += full.triangularView<Eigen::Lower>();
      }
    };
  }
  return out;
}

// Matern covariance of order half_order/2 (1, 3, or 5) as a function of the
// SQUARED scaled distance, unit outputscale. Working on squared distances
// keeps the derivative finite at zero for orders 3 and 5; tiny negative
// inputs from cancellation clamp to 0 with zero derivative.
inline Var matern_unit_sq(const Var& s, int half_order) {
  require(half_order == 1 || half_order == 3 || half_order == 5,
          "ad::matern_unit_sq: half_order must be 1, 3, or 5, got ",
          half_order);
  Eigen::MatrixXd k(s->value.rows(), s->value.cols());
  Eigen::MatrixXd dkds(s->value.rows(), s->value.cols());
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    for (Eigen::Index j = 0; j < k.cols(); ++j) {
      double raw = s->value(i, j);
      double sv = raw < 0.0 ? 0.0 : raw;
      double t = std::sqrt(double(half_order) * sv);
      double e = std::exp(-t);
      double kv = 0.0, dv = 0.0;
      if (half_order == 1) {
        kv = e;
        dv = sv == 0.0 ? 0.0 : -e / (2.0 * t);
      } else if (half_order == 3) {
        kv = (1.0 + t) * e;
        dv = -1.5 * e;
      } else {
        kv = (1.0 + t + t * t / 3.0) * e;
        dv = -(5.0 / 6.0) * (1.0 + t) * e;
      }
      if (raw < 0.0) dv = 0.0;
      k(i, j) = kv;
      dkds(i, j) = dv;
    }
  }
  Var out = detail::fresh(std::move(k), {s});
  if (out->requires_grad) {
    Node *o = out.get(), *ps = s.get();
    out->pull = [o, ps, dkds = std::move(dkds)] {
      ps->grad += o->grad.cwiseProduct(dkds);
    };
  }
  return out;
}

}  // namespace wxrisk::ad
