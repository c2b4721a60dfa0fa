// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace moelab {

struct ReportOptions {
  std::vector<std::filesystem::path> run_dirs;
  std::filesystem::path out_dir;
  // Run dirs whose artifacts carry mismatched config hashes are skipped
  // unless forced.
  bool force = false;
};

struct ReportResult {
  std::vector<std::string> warnings;
  std::vector<std::filesystem::path> written;
};

/// Consolidates run directories into plotting-ready CSV tables plus a
/// report.md overview: accuracy/ETT, curvature, efficiency (theoretical
/// flops ratios next to measured timings), utilization time series,
/// class-expert routing, and eigenvalue sweeps. Missing artifacts are
/// listed and the report stays partial rather than failing.
ReportResult write_report(const ReportOptions& opts);

}  // namespace moelab
