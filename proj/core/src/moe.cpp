// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/errors.hpp"

namespace moelab {

namespace {

constexpr double kStdEps = 1e-6;

/// Rank-order kept indices for every row of the noisy logits, flattened to
/// rows*k, plus the ascending per-row selection sets.
void select_topk(const Mat& noisy, int k, std::vector<int>* kept_flat,
                 std::vector<std::vector<int>>* selected) {
  kept_flat->clear();
  kept_flat->reserve(static_cast<std::size_t>(noisy.rows) * k);
  selected->assign(static_cast<std::size_t>(noisy.rows), {});
  for (int i = 0; i < noisy.rows; ++i) {
    auto ord = rank_desc({noisy.row(i), static_cast<std::size_t>(noisy.cols)});
    auto& sel = (*selected)[static_cast<std::size_t>(i)];
    for (int j = 0; j < k; ++j) {
      kept_flat->push_back(ord[static_cast<std::size_t>(j)]);
      sel.push_back(ord[static_cast<std::size_t>(j)]);
    }
    std::sort(sel.begin(), sel.end());
  }
}

/// Scatter a rows x k kept-weight matrix back to rows x n with zeros elsewhere.
Mat scatter_kept(const Mat& wk, const std::vector<int>& kept_flat, int n) {
  Mat out(wk.rows, n);
  for (int i = 0; i < wk.rows; ++i) {
    for (int j = 0; j < wk.cols; ++j) {
      out.at(i, kept_flat[static_cast<std::size_t>(i) * wk.cols + j]) += wk.at(i, j);
    }
  }
  return out;
}

void check_k(int k, int n) {
  if (k < 1 || k > n) {
    throw ConfigError("gate: k=" + std::to_string(k) + " out of range for " +
                      std::to_string(n) + " experts");
  }
}

}  // namespace

std::vector<int> rank_desc(std::span<const double> v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return v[static_cast<std::size_t>(a)] > v[static_cast<std::size_t>(b)];
  });  // stable: equal values keep the lower index first
  return idx;
}

std::vector<int> topk_indices(std::span<const double> v, int k) {
  check_k(k, static_cast<int>(v.size()));
  auto ord = rank_desc(v);
  ord.resize(static_cast<std::size_t>(k));
  return ord;
}

GateTensors gate_soft(Tape& t, Tensor x, Tensor wg, Tensor bg) {
  GateTensors g;
  Tensor z = t.add_bias(t.matmul(x, wg), bg);
  g.weights = t.softmax_rows(z);
  const int n = t.cols(g.weights);
  g.selected.assign(static_cast<std::size_t>(t.rows(g.weights)), {});
  for (auto& sel : g.selected) {
    sel.resize(static_cast<std::size_t>(n));
    std::iota(sel.begin(), sel.end(), 0);
  }
  return g;
}

GateTensors gate_noisy_topk(Tape& t, Tensor x, Tensor wg, Tensor bg, Tensor wn,
                            int k, bool training, Rng* rng) {
  const int n = t.cols(wg);
  check_k(k, n);

  Tensor z = t.add_bias(t.matmul(x, wg), bg);
  // Standardize per row so the noise operates on a consistent scale.
  Tensor mu = t.row_mean(z);
  Tensor zc = t.sub_bcast_col(z, mu);
  Tensor var = t.row_mean(t.mul(zc, zc));
  Tensor sd = t.add_scalar(t.sqrt(var), kStdEps);
  Tensor zt = t.div_bcast_col(zc, sd);

  GateTensors g;
  g.clean_std = zt;
  if (training) {
    if (rng == nullptr) throw InternalError("gate: training mode requires an rng");
    g.noise_std = t.softplus(t.matmul(x, wn));
    Tensor eps = randn(t, *rng, t.rows(zt), n);
    g.noisy = t.add(zt, t.mul(eps, g.noise_std));
  } else {
    g.noisy = zt;  // deterministic inference routing
  }

  std::vector<int> kept_flat;
  select_topk(t.val(g.noisy), k, &kept_flat, &g.selected);
  Tensor kept = t.gather_cols(g.noisy, kept_flat, k);
  Tensor wk = t.softmax_rows(kept);
  g.weights = t.scatter_cols(wk, kept_flat, n);
  return g;
}

GateEval gate_soft_eval(const Mat& x, const Mat& wg, const Mat& bg) {
  GateEval g;
  g.weights = kern::softmax_rows(kern::linear(x, wg, bg));
  g.selected.assign(static_cast<std::size_t>(x.rows), {});
  for (auto& sel : g.selected) {
    sel.resize(static_cast<std::size_t>(wg.cols));
    std::iota(sel.begin(), sel.end(), 0);
  }
  return g;
}

GateEval gate_topk_eval(const Mat& x, const Mat& wg, const Mat& bg, int k) {
  const int n = wg.cols;
  check_k(k, n);
  GateEval g;
  g.clean_std = kern::standardize_rows(kern::linear(x, wg, bg), kStdEps);
  std::vector<int> kept_flat;
  select_topk(g.clean_std, k, &kept_flat, &g.selected);
  Mat kept(g.clean_std.rows, k);
  for (int i = 0; i < kept.rows; ++i) {
    for (int j = 0; j < k; ++j) {
      kept.at(i, j) = g.clean_std.at(i, kept_flat[static_cast<std::size_t>(i) * k + j]);
    }
  }
  g.weights = scatter_kept(kern::softmax_rows(kept), kept_flat, n);
  return g;
}

namespace {

GateDecision decide_from_row(const Mat& clean, const Mat& noisy, const Mat* sigma,
                             int k) {
  GateDecision d;
  const int n = clean.cols;
  d.clean.assign(clean.row(0), clean.row(0) + n);
  d.noisy.assign(noisy.row(0), noisy.row(0) + n);
  if (sigma != nullptr) d.noise_std.assign(sigma->row(0), sigma->row(0) + n);
  std::vector<int> kept_flat;
  std::vector<std::vector<int>> sel;
  select_topk(noisy, k, &kept_flat, &sel);
  d.selected = sel[0];
  Mat kept(1, k);
  for (int j = 0; j < k; ++j) kept.at(0, j) = noisy.at(0, kept_flat[static_cast<std::size_t>(j)]);
  Mat wk = kern::softmax_rows(kept);
  Mat w = scatter_kept(wk, kept_flat, n);
  d.weights.assign(w.row(0), w.row(0) + n);
  return d;
}

}  // namespace

GateDecision gate_soft_decide(const Mat& h, const Mat& wg, const Mat& bg) {
  Mat z = kern::linear(h, wg, bg);
  Mat w = kern::softmax_rows(z);
  GateDecision d;
  d.clean.assign(z.row(0), z.row(0) + z.cols);
  d.noisy = d.clean;
  d.weights.assign(w.row(0), w.row(0) + w.cols);
  d.selected.resize(static_cast<std::size_t>(w.cols));
  std::iota(d.selected.begin(), d.selected.end(), 0);
  return d;
}

GateDecision gate_topk_decide(const Mat& h, const Mat& wg, const Mat& bg,
                              const Mat& wn, int k, bool training, Rng* rng) {
  check_k(k, wg.cols);
  Mat zt = kern::standardize_rows(kern::linear(h, wg, bg), kStdEps);
  if (!training) return decide_from_row(zt, zt, nullptr, k);
  if (rng == nullptr) throw InternalError("gate: training mode requires an rng");
  Mat sigma = kern::softplus(kern::linear(h, wn, Mat()));
  Mat noisy(1, zt.cols);
  for (int j = 0; j < zt.cols; ++j) {
    noisy.at(0, j) = zt.at(0, j) + rng->normal() * sigma.at(0, j);
  }
  return decide_from_row(zt, noisy, &sigma, k);
}

std::vector<double> combine(const GateDecision& d,
                            const std::vector<std::vector<double>>& expert_outputs) {
  if (expert_outputs.size() != d.selected.size()) {
    throw InternalError("combine: expected " + std::to_string(d.selected.size()) +
                        " expert outputs, got " + std::to_string(expert_outputs.size()));
  }
  if (expert_outputs.empty()) throw InternalError("combine: no expert outputs");
  std::vector<double> out(expert_outputs[0].size(), 0.0);
  for (std::size_t s = 0; s < d.selected.size(); ++s) {
    const auto& e = expert_outputs[s];
    if (e.size() != out.size()) throw InternalError("combine: output size mismatch");
    const double w = d.weights[static_cast<std::size_t>(d.selected[s])];
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * e[j];
  }
  return out;
}

Tensor loss_kl_uniform(Tape& t, Tensor weights) {
  const Mat& w = t.val(weights);
  for (int i = 0; i < w.rows; ++i) {
    double s = 0.0;
    const double* row = w.row(i);
    for (int j = 0; j < w.cols; ++j) s += row[j];
    if (std::fabs(s - 1.0) > 1e-6) {
      throw NumericError("kl_uniform: weight row " + std::to_string(i) +
                         " sums to " + std::to_string(s));
    }
  }
  Tensor pbar = t.col_mean(weights);
  // sum_i p_i ln p_i + p_i ln N, with 0 ln 0 := 0.
  return t.reduce_sum(t.add(t.xlogx(pbar), t.scale(pbar, std::log(static_cast<double>(w.cols)))));
}

Tensor cv_squared(Tape& t, Tensor row) {
  Tensor m = t.row_mean(row);
  Tensor d = t.sub_bcast_col(row, m);
  Tensor var = t.row_mean(t.mul(d, d));  // population variance
  return t.div(var, t.mul(m, m));
}

Tensor loss_importance(Tape& t, Tensor weights) {
  Tensor imp = t.col_sum(weights);
  const Mat& v = t.val(imp);
  bool any = false;
  for (double x : v.d) any = any || x != 0.0;
  if (!any) throw NumericError("importance: all importances are zero");
  return cv_squared(t, imp);
}

Tensor loss_load(Tape& t, Tensor clean_std, Tensor noisy, Tensor noise_std, int k) {
  const Mat& h = t.val(noisy);
  const int n = h.cols;
  if (k >= n) {
    // Every expert is always kept; loads are identical by construction.
    return t.constant(Mat::zeros(1, 1));
  }
  check_k(k, n);
  const Mat& sig = t.val(noise_std);
  for (double s : sig.d) {
    if (!(s > 0.0)) throw NumericError("load: noise std must be positive");
  }

  // thr[i][j] = k-th highest noisy logit among experts != j. With ord the
  // descending ranking, that is ord[k] when j itself ranks in the top k and
  // ord[k-1] otherwise.
  std::vector<int> thr_idx(static_cast<std::size_t>(h.rows) * n);
  std::vector<int> pos(static_cast<std::size_t>(n));
  for (int i = 0; i < h.rows; ++i) {
    auto ord = rank_desc({h.row(i), static_cast<std::size_t>(n)});
    for (int r = 0; r < n; ++r) pos[static_cast<std::size_t>(ord[static_cast<std::size_t>(r)])] = r;
    for (int j = 0; j < n; ++j) {
      thr_idx[static_cast<std::size_t>(i) * n + j] =
          pos[static_cast<std::size_t>(j)] < k ? ord[static_cast<std::size_t>(k)]
                                               : ord[static_cast<std::size_t>(k - 1)];
    }
  }
  Tensor thr = t.gather_cols(noisy, thr_idx, n);
  Tensor p = t.normal_cdf(t.div(t.sub(clean_std, thr), noise_std));
  return cv_squared(t, t.col_sum(p));
}

RoutingAccum::RoutingAccum(int classes, int experts)
    : sum_(classes, experts),
      class_count_(static_cast<std::size_t>(classes), 0),
      total_(static_cast<std::size_t>(experts), 0.0) {}

void RoutingAccum::add(std::span<const double> weights_row, int label) {
  if (static_cast<int>(weights_row.size()) != sum_.cols) {
    throw InternalError("routing stats: weight row size mismatch");
  }
  if (label < 0 || label >= sum_.rows) throw InternalError("routing stats: bad label");
  for (int j = 0; j < sum_.cols; ++j) {
    sum_.at(label, j) += weights_row[static_cast<std::size_t>(j)];
    total_[static_cast<std::size_t>(j)] += weights_row[static_cast<std::size_t>(j)];
  }
  class_count_[static_cast<std::size_t>(label)]++;
  count_++;
}

RoutingStats RoutingAccum::finalize() const {
  if (count_ == 0) throw UsageError("routing stats: no decisions recorded");
  RoutingStats st;
  st.utilization.resize(static_cast<std::size_t>(sum_.cols));
  for (int j = 0; j < sum_.cols; ++j) {
    st.utilization[static_cast<std::size_t>(j)] = total_[static_cast<std::size_t>(j)] / count_;
  }
  st.class_expert = Mat(sum_.rows, sum_.cols);
  for (int c = 0; c < sum_.rows; ++c) {
    const long cnt = class_count_[static_cast<std::size_t>(c)];
    for (int j = 0; j < sum_.cols; ++j) {
      st.class_expert.at(c, j) = cnt > 0 ? sum_.at(c, j) / cnt : 0.0;
    }
  }
  return st;
}

}  // namespace moelab
