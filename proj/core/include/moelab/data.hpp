// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

/// Immutable after construction; features are row-major N x D.
struct Dataset {
  Mat features;
  std::vector<int> labels;
  int classes = 0;
  std::string split = "full";  // full | train | val | test
  std::string source;          // cifar10 | synthetic

  int rows() const { return features.rows; }
  int dim() const { return features.cols; }
};

/// Per-group normalization statistics (population mean/std). The feature
/// dimension is divided into `groups` equal contiguous blocks: 3 blocks for
/// CIFAR-10 channel planes, dim blocks for per-dimension stats.
struct NormStats {
  int groups = 0;
  std::vector<double> mean;
  std::vector<double> stdev;
};

/// CIFAR-10 binary records: 1 label byte + 3072 pixel bytes (R, G, B planes,
/// row-major). Pixels are scaled to [0,1]; normalization is applied separately
/// with training-split statistics.
Dataset parse_cifar10(std::span<const std::uint8_t> bytes);

/// Gaussian blobs: each class owns clusters_per_class centers drawn once from
/// the seeded generator; points are centers + spread * standard normal,
/// assigned round-robin over the class's clusters. Balanced and deterministic.
Dataset synth_clusters(std::uint64_t seed, int classes, int clusters_per_class,
                       int dim, int n_per_class, double spread);

/// Class-stratified, seed-deterministic, disjoint and exhaustive split.
/// Fractions must be positive and sum to 1 within 1e-9.
std::array<Dataset, 3> split_dataset(const Dataset& ds,
                                     std::array<double, 3> fractions,
                                     std::uint64_t seed);

/// Stratified subsample of n rows (all rows when n >= ds.rows()).
Dataset stratified_subsample(const Dataset& ds, int n, std::uint64_t seed);

NormStats compute_norm(const Dataset& train, int groups);
void apply_norm(Dataset& ds, const NormStats& stats);

/// Cache format: magic, JSON header (counts, shapes, labels, stats, seed),
/// raw little-endian float64 feature blob. Round-trips bit-exactly.
void save_cache(const std::filesystem::path& path, const Dataset& ds,
                const NormStats& stats, std::uint64_t seed);
struct CacheFile {
  Dataset dataset;
  NormStats stats;
  std::uint64_t seed = 0;
};
CacheFile load_cache(const std::filesystem::path& path);

/// Single-consumer shuffled batch view; one pass yields every index once.
class BatchIterator {
 public:
  struct Batch {
    Mat x;
    std::vector<int> labels;
    std::vector<int> indices;
  };

  BatchIterator(const Dataset& ds, int batch_size, Rng rng, bool shuffle,
                bool drop_last);
  bool next(Batch* out);

 private:
  const Dataset& ds_;
  int batch_size_;
  bool drop_last_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

/// Everything training needs, already split and normalized.
struct LoadedData {
  Dataset train, val, test;
  NormStats stats;
  std::string source_used;
};

}  // namespace moelab
