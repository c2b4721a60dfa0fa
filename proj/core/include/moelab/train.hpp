// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/data.hpp"
#include "moelab/model.hpp"

namespace moelab {

/// Coupled weight decay: g' = g + wd*theta; v <- momentum*v + g';
/// theta <- theta - lr*v. Non-finite gradients abort with a diagnostic.
void sgd_step(std::span<double> params, std::span<const double> grads,
              std::span<double> velocity, double lr, double momentum,
              double weight_decay);

/// 1-based index of the first occurrence of the series maximum.
int epoch_to_threshold(std::span<const double> series);

struct EpochRow {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double task_loss = 0;
  double aux_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  std::vector<double> utilization;  // one entry per expert; {1} for dense
};

struct RunMetrics {
  std::vector<EpochRow> rows;
  double m_a = 0;  // max train accuracy
  int ett_m_a = 0;
  double v_a = 0;  // max validation accuracy
  int ett_v_a = 0;
  std::uint64_t seed = 0;
  std::string checkpoint_path;
};

/// Where train() writes its artifacts; an empty out_dir disables all file
/// output (metrics stay in the returned RunMetrics).
struct TrainSink {
  std::filesystem::path out_dir;
  std::string config_json;  // canonical, embedded in checkpoint and summary
  std::string config_hash;
  std::vector<std::string> overrides;  // recorded in summary.json only
  std::string data_source;
};

/// SGD loop over the training split. Per-epoch rows stream to metrics.csv
/// row by row; the best-validation-accuracy checkpoint is kept; divergence
/// (non-finite loss or gradients) aborts with the partial CSV preserved.
/// Deterministic for a fixed config and seed.
RunMetrics train(Model& model, const LoadedData& data, const TrainConfig& cfg,
                 const TrainSink& sink);

/// Eval-mode accuracy (argmax of logits, ties to the lower class index).
double evaluate_accuracy(const Model& model, const Dataset& split);

/// Header matching EpochRow serialization for `experts` utilization columns.
std::string metrics_csv_header(int experts);

}  // namespace moelab
