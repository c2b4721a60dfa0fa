// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>

#include "moelab/errors.hpp"
#include "moelab/rng.hpp"
#include "moelab/tape.hpp"

namespace moelab {

namespace {

// Type-7 quantile (linear interpolation between order statistics).
double quantile(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  const double h = static_cast<double>(n - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= n) return sorted[n - 1];
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

std::vector<BenchRow> bench(const Model& model, const std::string& name,
                            const BenchConfig& cfg) {
  cfg.validate();
  std::vector<BenchRow> rows;
  Rng base(cfg.seed, fnv1a("bench_input"));

  for (int bs : cfg.batch_sizes) {
    Rng rng = base.substream(static_cast<std::uint64_t>(bs));
    Mat x(bs, model.config().input_dim);
    for (auto& v : x.d) v = rng.normal();

    const std::uint64_t nodes_before = Tape::nodes_created_total();
    for (int i = 0; i < cfg.warmup; ++i) {
      const auto out = model.forward_eval(x);
      if (!out.logits.all_finite()) {
        throw NumericError("bench produced non-finite logits for model '" +
                           name + "'");
      }
    }

    memtrack::reset_peak();
    std::vector<double> ms(static_cast<std::size_t>(cfg.measured));
    for (int i = 0; i < cfg.measured; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = model.forward_eval(x);
      const auto t1 = std::chrono::steady_clock::now();
      if (!out.logits.all_finite()) {
        throw NumericError("bench produced non-finite logits for model '" +
                           name + "'");
      }
      ms[static_cast<std::size_t>(i)] =
          std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    const std::size_t peak = memtrack::peak_bytes();
    if (Tape::nodes_created_total() != nodes_before) {
      throw InternalError("benchmark loop created graph nodes");
    }

    std::sort(ms.begin(), ms.end());
    BenchRow row;
    row.model = name;
    row.batch_size = bs;
    row.params_m = static_cast<double>(model.param_count()) / 1e6;
    row.ms_per_batch_median = quantile(ms, 0.5);
    row.ms_iqr = quantile(ms, 0.75) - quantile(ms, 0.25);
    row.img_per_s = bs * 1000.0 / row.ms_per_batch_median;
    row.peak_mem_bytes = peak;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<CompareEntry> compare_report(const std::vector<BenchRow>& rows) {
  std::map<std::string, std::map<int, const BenchRow*>> by_model;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (!by_model.count(r.model)) order.push_back(r.model);
    by_model[r.model][r.batch_size] = &r;
  }
  if (by_model.size() < 2) {
    throw UsageError("compare_report needs at least two benchmarked models");
  }

  std::set<int> batches;
  for (const auto& [b, row] : by_model.begin()->second) {
    (void)row;
    batches.insert(b);
  }
  for (const auto& [m, per_batch] : by_model) {
    std::set<int> got;
    for (const auto& [b, row] : per_batch) {
      (void)row;
      got.insert(b);
    }
    if (got != batches) {
      throw UsageError("compare_report: model '" + m +
                       "' was benchmarked with different batch sizes");
    }
  }
  if (!by_model.count("dense")) {
    throw UsageError("compare_report needs a row named 'dense' as the baseline");
  }

  std::vector<CompareEntry> out;
  for (int b : batches) {
    const BenchRow* dense = by_model["dense"][b];
    const BenchRow* soft =
        by_model.count("soft") ? by_model["soft"][b] : nullptr;
    // Rank models by throughput within each batch size.
    std::vector<const BenchRow*> ranked;
    for (const auto& m : order) ranked.push_back(by_model[m][b]);
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const BenchRow* a, const BenchRow* c) {
                       return a->img_per_s > c->img_per_s;
                     });
    for (const BenchRow* r : ranked) {
      CompareEntry e;
      e.model = r->model;
      e.batch_size = b;
      e.ms_ratio_vs_dense = r->ms_per_batch_median / dense->ms_per_batch_median;
      e.img_ratio_vs_dense = r->img_per_s / dense->img_per_s;
      if (r->model == "sparse" && soft != nullptr) {
        e.has_soft_flag = true;
        e.sparse_slower_than_soft =
            r->ms_per_batch_median > soft->ms_per_batch_median;
      }
      out.push_back(std::move(e));
    }
  }
  return out;
}

}  // namespace moelab
