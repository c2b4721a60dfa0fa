// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/curvature.hpp"

#include <algorithm>
#include <cmath>

#include "moelab/errors.hpp"
#include "moelab/rng.hpp"
#include "moelab/tape.hpp"

namespace moelab {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Mirrors the tape's cross-entropy forward term for term so graph and
// graph-free losses agree bitwise on identical logits.
double ce_mean_eval(const Mat& logits, std::span<const int> labels) {
  const int bsz = logits.rows, c = logits.cols;
  double loss = 0.0;
  for (int i = 0; i < bsz; ++i) {
    const double* zi = logits.row(i);
    double mx = zi[0];
    for (int j = 1; j < c; ++j) mx = zi[j] > mx ? zi[j] : mx;
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(zi[j] - mx);
    loss += mx + std::log(sum) - zi[labels[static_cast<std::size_t>(i)]];
  }
  return loss / bsz;
}

Mat shard_features(const Dataset& ds, int start, int n) {
  Mat x(n, ds.dim());
  for (int r = 0; r < n; ++r) {
    std::copy_n(ds.features.row(start + r), ds.dim(), x.row(r));
  }
  return x;
}

std::vector<int> shard_labels(const Dataset& ds, int start, int n) {
  return {ds.labels.begin() + start, ds.labels.begin() + start + n};
}

}  // namespace

void ScalarFunction::check_dim(std::size_t got, const char* what) const {
  if (got != dim()) {
    throw UsageError(std::string(what) + " has size " + std::to_string(got) +
                     ", function dimension is " + std::to_string(dim()));
  }
}

double hvp(ScalarFunction& f, std::span<const double> x,
           std::span<const double> v, std::span<double> out) {
  if (x.size() != f.dim() || v.size() != f.dim() || out.size() != f.dim()) {
    throw UsageError("hvp: span sizes must equal the function dimension");
  }
  return f.hvp(x, v, out);
}

SplitTaskLoss::SplitTaskLoss(const Model& model, const Dataset& split)
    : model_(model), split_(split) {
  if (split.rows() == 0) throw UsageError("curvature split is empty");
  if (split.dim() != model.config().input_dim) {
    throw ConfigError("split dimension does not match the model input");
  }
}

double SplitTaskLoss::value(std::span<const double> x) {
  check_dim(x.size(), "params");
  double acc = 0.0;
  for (int start = 0; start < split_.rows(); start += kShard) {
    const int n = std::min(kShard, split_.rows() - start);
    const auto out = Model::forward_eval_at(model_.config(), model_.layout(), x,
                                            shard_features(split_, start, n));
    const auto labels = shard_labels(split_, start, n);
    acc += ce_mean_eval(out.logits, labels) * n;
  }
  return acc / split_.rows();
}

void SplitTaskLoss::gradient(std::span<const double> x, std::span<double> g) {
  check_dim(x.size(), "params");
  check_dim(g.size(), "gradient buffer");
  std::fill(g.begin(), g.end(), 0.0);
  std::vector<double> gs(dim());
  for (int start = 0; start < split_.rows(); start += kShard) {
    const int n = std::min(kShard, split_.rows() - start);
    Tape t;
    Bound b = model_.bind(t, x, {});
    auto fwd = model_.forward(t, b, shard_features(split_, start, n), false, nullptr);
    Tensor task = t.cross_entropy_mean(fwd.logits, shard_labels(split_, start, n));
    t.backward(task);
    model_.read_grads(t, b, gs);
    const double w = static_cast<double>(n) / split_.rows();
    for (std::size_t i = 0; i < gs.size(); ++i) g[i] += gs[i] * w;
  }
}

double SplitTaskLoss::hvp(std::span<const double> x, std::span<const double> v,
                          std::span<double> hv) {
  check_dim(x.size(), "params");
  check_dim(v.size(), "direction");
  check_dim(hv.size(), "hvp buffer");
  std::fill(hv.begin(), hv.end(), 0.0);
  std::vector<double> hs(dim());
  double acc = 0.0;
  for (int start = 0; start < split_.rows(); start += kShard) {
    const int n = std::min(kShard, split_.rows() - start);
    Tape t(true);
    Bound b = model_.bind(t, x, v);
    auto fwd = model_.forward(t, b, shard_features(split_, start, n), false, nullptr);
    Tensor task = t.cross_entropy_mean(fwd.logits, shard_labels(split_, start, n));
    t.backward(task);
    model_.read_grad_tangents(t, b, hs);
    const double w = static_cast<double>(n) / split_.rows();
    for (std::size_t i = 0; i < hs.size(); ++i) hv[i] += hs[i] * w;
    acc += t.val(task).d[0] * n;
  }
  return acc / split_.rows();
}

BatchLossFunction::BatchLossFunction(const Model& model, Mat x,
                                     std::vector<int> labels, bool training,
                                     std::uint64_t noise_seed)
    : model_(model),
      x_(std::move(x)),
      labels_(std::move(labels)),
      training_(training),
      noise_seed_(noise_seed) {
  if (x_.rows != static_cast<int>(labels_.size())) {
    throw UsageError("batch rows and label count differ");
  }
}

double BatchLossFunction::run(std::span<const double> x,
                              std::span<const double> v, std::span<double> g,
                              std::span<double> hv) {
  Tape t(!hv.empty());
  Bound b = model_.bind(t, x, v);
  Rng noise(noise_seed_, fnv1a("gate_noise"));
  auto fwd = model_.forward(t, b, x_, training_, &noise);
  auto losses = model_.build_loss(t, fwd, labels_, training_);
  const double val = t.val(losses.total).d[0];
  if (!g.empty() || !hv.empty()) {
    t.backward(losses.total);
    if (!g.empty()) model_.read_grads(t, b, g);
    if (!hv.empty()) model_.read_grad_tangents(t, b, hv);
  }
  return val;
}

double BatchLossFunction::value(std::span<const double> x) {
  check_dim(x.size(), "params");
  return run(x, {}, {}, {});
}

void BatchLossFunction::gradient(std::span<const double> x, std::span<double> g) {
  check_dim(x.size(), "params");
  check_dim(g.size(), "gradient buffer");
  run(x, {}, g, {});
}

double BatchLossFunction::hvp(std::span<const double> x,
                              std::span<const double> v, std::span<double> hv) {
  check_dim(x.size(), "params");
  check_dim(v.size(), "direction");
  check_dim(hv.size(), "hvp buffer");
  return run(x, v, {}, hv);
}

namespace {

struct PowerRun {
  double lambda = 0;
  int iters = 0;
  bool converged = false;
};

// Iterates v <- Av / ||Av|| with A = H + shift*I; returns the last Rayleigh
// quotient of A. v holds the final unit vector.
PowerRun power_run(ScalarFunction& f, std::span<const double> x, double shift,
                   double tol, int max_iters, std::vector<double>& v) {
  const std::size_t d = f.dim();
  std::vector<double> w(d);
  PowerRun run;
  double prev = 0.0;
  for (int it = 1; it <= max_iters; ++it) {
    f.hvp(x, v, w);
    if (shift != 0.0) {
      for (std::size_t i = 0; i < d; ++i) w[i] += shift * v[i];
    }
    const double lam = dot(v, w);
    if (!std::isfinite(lam)) {
      throw NumericError("power iteration produced a non-finite estimate");
    }
    const double wn = norm2(w);
    if (wn == 0.0) {
      throw NumericError("power iteration hit a zero Hessian-vector product");
    }
    for (std::size_t i = 0; i < d; ++i) v[i] = w[i] / wn;
    run.lambda = lam;
    run.iters = it;
    if (it > 1 && std::abs(lam - prev) <= tol * std::max(std::abs(lam), 1e-12)) {
      run.converged = true;
      break;
    }
    prev = lam;
  }
  return run;
}

}  // namespace

PowerResult lambda_max(ScalarFunction& f, std::span<const double> x, double tol,
                       int max_iters, std::uint64_t seed) {
  if (x.size() != f.dim()) throw UsageError("lambda_max: params size mismatch");
  if (!(tol > 0)) throw UsageError("lambda_max: tol must be > 0");
  if (max_iters < 1) throw UsageError("lambda_max: max_iters must be >= 1");

  Rng rng(seed, fnv1a("power_iteration"));
  std::vector<double> v(f.dim());
  for (auto& e : v) e = rng.normal();
  const double n0 = norm2(v);
  if (n0 == 0.0) throw NumericError("power iteration start vector is zero");
  for (auto& e : v) e /= n0;

  PowerRun run = power_run(f, x, 0.0, tol, max_iters, v);
  PowerResult out;
  out.lambda = run.lambda;
  out.iters = run.iters;
  out.converged = run.converged;

  if (run.lambda < 0.0) {
    // Dominant magnitude is negative; shift the spectrum positive so the
    // algebraic maximum dominates, then shift back.
    const double shift = 1.5 * std::abs(run.lambda);
    for (auto& e : v) e = rng.normal();
    const double n1 = norm2(v);
    if (n1 == 0.0) throw NumericError("power iteration start vector is zero");
    for (auto& e : v) e /= n1;
    PowerRun second = power_run(f, x, shift, tol, max_iters, v);
    out.lambda = second.lambda - shift;
    out.iters = run.iters + second.iters;
    out.converged = second.converged;
  }

  out.eigenvector = v;
  std::vector<double> w(f.dim());
  f.hvp(x, v, w);
  double rss = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = w[i] - out.lambda * v[i];
    rss += r * r;
  }
  out.residual = std::sqrt(rss) / std::max(std::abs(out.lambda), 1e-30);
  return out;
}

TraceResult hessian_trace(ScalarFunction& f, std::span<const double> x,
                          int samples, std::uint64_t seed) {
  if (x.size() != f.dim()) throw UsageError("hessian_trace: params size mismatch");
  if (samples < 2) throw UsageError("hessian_trace: samples must be >= 2");

  Rng rng(seed, fnv1a("hutchinson"));
  std::vector<double> v(f.dim()), hv(f.dim());
  std::vector<double> est(static_cast<std::size_t>(samples));
  for (int s = 0; s < samples; ++s) {
    for (auto& e : v) e = rng.rademacher();
    f.hvp(x, v, hv);
    est[static_cast<std::size_t>(s)] = dot(v, hv);
  }
  double mean = 0.0;
  for (double e : est) mean += e;
  mean /= samples;
  double var = 0.0;
  for (double e : est) var += (e - mean) * (e - mean);
  var /= (samples - 1);

  TraceResult out;
  out.estimate = mean;
  out.stderr_of_mean = std::sqrt(var / samples);
  out.samples = samples;
  return out;
}

std::vector<SweepRow> eigen_sweep(ScalarFunction& f, std::span<const double> x,
                                  std::span<const double> v,
                                  std::span<const double> alphas) {
  if (x.size() != f.dim() || v.size() != f.dim()) {
    throw UsageError("eigen_sweep: span sizes must equal the function dimension");
  }
  if (std::abs(norm2(v) - 1.0) > 1e-9) {
    throw UsageError("eigen_sweep: direction must be unit norm");
  }
  std::vector<double> scratch(x.begin(), x.end());
  std::vector<SweepRow> rows;
  rows.reserve(alphas.size());
  for (double a : alphas) {
    for (std::size_t i = 0; i < scratch.size(); ++i) scratch[i] = x[i] + a * v[i];
    rows.push_back({a, f.value(scratch)});
  }
  return rows;
}

namespace {

std::vector<std::vector<int>> selections_at(const Model& model,
                                            std::span<const double> params,
                                            const Dataset& split) {
  constexpr int kChunk = 256;
  std::vector<std::vector<int>> sel;
  sel.reserve(static_cast<std::size_t>(split.rows()));
  for (int start = 0; start < split.rows(); start += kChunk) {
    const int n = std::min(kChunk, split.rows() - start);
    auto out = Model::forward_eval_at(model.config(), model.layout(), params,
                                      shard_features(split, start, n));
    for (auto& s : out.selected) sel.push_back(std::move(s));
  }
  return sel;
}

}  // namespace

std::vector<int> routing_flip_count(const Model& model, std::span<const double> v,
                                    std::span<const double> alphas,
                                    const Dataset& split) {
  if (!model.config().is_topk()) {
    throw UsageError("routing flips are defined for sparse and hard heads only");
  }
  if (v.size() != model.param_count()) {
    throw UsageError("routing_flip_count: direction size mismatch");
  }
  if (split.rows() == 0) throw UsageError("routing_flip_count: split is empty");

  const auto base_params = model.params();
  const auto base_sel = selections_at(model, base_params, split);
  std::vector<double> scratch(base_params.begin(), base_params.end());
  std::vector<int> flips;
  flips.reserve(alphas.size());
  for (double a : alphas) {
    for (std::size_t i = 0; i < scratch.size(); ++i) {
      scratch[i] = base_params[i] + a * v[i];
    }
    const auto sel = selections_at(model, scratch, split);
    int count = 0;
    for (std::size_t r = 0; r < sel.size(); ++r) {
      if (sel[r] != base_sel[r]) ++count;
    }
    flips.push_back(count);
  }
  return flips;
}

std::vector<double> alpha_grid(double lo, double hi, int points) {
  if (points < 1) throw UsageError("alpha_grid: points must be >= 1");
  if (hi < lo) throw UsageError("alpha_grid: hi must be >= lo");
  std::vector<double> grid(static_cast<std::size_t>(points));
  if (points == 1) {
    grid[0] = lo;
    return grid;
  }
  const double span = hi - lo;
  for (int i = 0; i < points; ++i) {
    grid[static_cast<std::size_t>(i)] = lo + span * i / (points - 1);
  }
  return grid;
}

PowerResult lambda_max(const Model& model, const Dataset& split, double tol,
                       int max_iters, std::uint64_t seed) {
  SplitTaskLoss f(model, split);
  return lambda_max(f, model.params(), tol, max_iters, seed);
}

TraceResult hessian_trace(const Model& model, const Dataset& split, int samples,
                          std::uint64_t seed) {
  SplitTaskLoss f(model, split);
  return hessian_trace(f, model.params(), samples, seed);
}

}  // namespace moelab
