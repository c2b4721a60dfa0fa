// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::string lr_schedule = "constant";  // constant | cosine
  std::uint64_t seed = 1;
  bool drop_last = false;
  void validate() const;
};

struct DataConfig {
  std::string source = "auto";  // auto | synthetic | cifar10
  std::string data_dir;         // falls back to MOE_LAB_DATA_DIR
  int train_count = 2000;
  int val_count = 500;
  int test_count = 1000;
  // Synthetic generator knobs; ignored for cifar10.
  int classes = 10;
  int clusters_per_class = 2;
  int dim = 32;
  int n_per_class = 350;
  double spread = 0.15;
  std::uint64_t seed = 7;
  bool normalize = true;
  void validate() const;
};

struct CurvatureConfig {
  double tol = 1e-3;
  int max_iters = 200;
  int samples = 100;
  double alpha_min = -1.0;
  double alpha_max = 1.0;
  int alpha_points = 41;
  std::uint64_t seed = 1;
  void validate() const;
};

struct BenchConfig {
  std::vector<int> batch_sizes{1, 32, 256};
  int warmup = 10;
  int measured = 100;
  std::uint64_t seed = 1;
  std::string device = "cpu";  // others reserved
  void validate() const;
};

struct LabConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  CurvatureConfig curvature;
  BenchConfig bench;
  void validate() const;
};

/// Strict parse: unknown keys are configuration errors, missing keys take
/// defaults. An empty string parses to the default config.
LabConfig parse_lab_config(const std::string& json_text);

/// Canonical serialization: every field materialized, keys sorted. Equal
/// configs dump to identical bytes.
std::string dump_lab_config(const LabConfig& cfg);

/// Applies dotted-path overrides ("model.head=sparse", "train.lr=0.1") to the
/// JSON text. Values parse as JSON when possible, else as strings.
std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::string>& overrides);

/// 16 hex digits of the canonical dump; embedded in every artifact.
std::string config_hash(const LabConfig& cfg);

/// Resolves the source (auto prefers CIFAR-10 binaries when a directory is
/// known), subsamples to the requested counts, splits, and normalizes with
/// training-split statistics (3 channel groups for cifar10, per-dimension
/// for synthetic).
LoadedData load_data(const DataConfig& cfg);

/// The loaded dataset must match the model's input width and class count.
void check_compat(const Dataset& train, const ModelConfig& model);

}  // namespace moelab
