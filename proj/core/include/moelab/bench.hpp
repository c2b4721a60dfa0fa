// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct BenchRow {
  std::string model;
  int batch_size = 0;
  double params_m = 0;  // parameters in millions
  double ms_per_batch_median = 0;
  double ms_iqr = 0;
  double img_per_s = 0;
  std::size_t peak_mem_bytes = 0;
};

/// Times eval-mode forwards on one fixed random batch per size (median and
/// IQR over measured iterations after warmup). Asserts that no graph nodes
/// were created, tracks the allocator high-water mark, and aborts on
/// non-finite outputs.
std::vector<BenchRow> bench(const Model& model, const std::string& name,
                            const BenchConfig& cfg);

struct CompareEntry {
  std::string model;
  int batch_size = 0;
  double ms_ratio_vs_dense = 0;
  double img_ratio_vs_dense = 0;
  // Meaningful on sparse rows when a soft row for the same batch exists.
  bool has_soft_flag = false;
  bool sparse_slower_than_soft = false;
};

/// Ratio table against the dense baseline. Needs at least two distinct
/// models covering identical batch-size sets, one of them named "dense".
std::vector<CompareEntry> compare_report(const std::vector<BenchRow>& rows);

}  // namespace moelab
