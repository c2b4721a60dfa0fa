// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moelab/moe.hpp"
#include "moelab/tape.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

/// Architecture description. The backbone is a perceptron: input_dim through
/// the listed hidden sizes to feature_dim, relu after every layer; an empty
/// list means features are the raw input (input_dim must equal feature_dim).
/// The dense head is a single expert-shaped perceptron of width expert_hidden
/// and ignores experts/k.
struct ModelConfig {
  std::vector<int> backbone;
  int input_dim = 32;
  int feature_dim = 32;
  std::string head = "dense";  // dense | soft | sparse | hard
  int experts = 1;
  int expert_hidden = 16;
  int k = 1;
  int classes = 10;
  double lambda_kl = 0.0;
  double lambda_imp = 0.0;
  double lambda_load = 0.0;
  std::uint64_t seed = 1;

  bool is_moe() const { return head != "dense"; }
  bool is_topk() const { return head == "sparse" || head == "hard"; }
  int effective_k() const { return head == "hard" ? 1 : (head == "sparse" ? k : experts); }
  void validate() const;  ///< throws ConfigError
};

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t count() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Disjoint named slices covering a flat parameter vector exactly.
class ParamLayout {
 public:
  void add(const std::string& name, int rows, int cols);
  std::size_t total() const { return total_; }
  const std::vector<ParamSlice>& slices() const { return slices_; }
  const ParamSlice& slice(const std::string& name) const;
  std::size_t index(const std::string& name) const;
  bool has(const std::string& name) const;

 private:
  std::vector<ParamSlice> slices_;
  std::size_t total_ = 0;
};

/// Per-tape leaf handles for every slice, in layout order.
struct Bound {
  const ParamLayout* layout = nullptr;
  std::vector<Tensor> tensors;
  Tensor get(const std::string& name) const;
};

/// Analytic per-input multiply-accumulate counts (weight matmuls only).
struct FlopCounts {
  std::uint64_t backbone = 0;
  std::uint64_t gate = 0;
  std::uint64_t experts_active = 0;
  std::uint64_t experts_total = 0;
  double active_ratio() const {
    return static_cast<double>(experts_active) / static_cast<double>(experts_total);
  }
};

FlopCounts count_flops(const ModelConfig& cfg);

class Model {
 public:
  /// Validates the config and initializes parameters deterministically from
  /// config.seed; every slice draws from its own name-keyed stream.
  static Model build(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<const double> params() const { return params_; }
  std::span<double> mutable_params() {
    cache_dirty_ = true;
    return params_;
  }
  std::size_t param_count() const { return params_.size(); }
  std::size_t head_param_count() const;

  Bound bind(Tape& t) const;  ///< leaves from the model's own parameters
  Bound bind(Tape& t, std::span<const double> x, std::span<const double> tangent) const;
  void read_grads(const Tape& t, const Bound& b, std::span<double> g) const;
  void read_grad_tangents(const Tape& t, const Bound& b, std::span<double> hv) const;

  struct TapeForward {
    Tensor logits;
    GateTensors gate;
    bool has_gate = false;
  };
  /// Training mode draws gating noise from noise_rng (top-k heads only);
  /// eval mode routes deterministically.
  TapeForward forward(Tape& t, const Bound& b, const Mat& x, bool training,
                      Rng* noise_rng) const;

  struct Losses {
    Tensor total;
    Tensor task;
    Tensor aux;  // invalid when has_aux is false
    bool has_aux = false;
  };
  /// task = mean cross-entropy. In training mode adds lambda_kl*KL for the
  /// soft head, lambda_imp*importance + lambda_load*load for top-k heads.
  Losses build_loss(Tape& t, const TapeForward& f, const std::vector<int>& labels,
                    bool training) const;

  struct EvalOut {
    Mat logits;
    Mat weights;                             // empty for dense
    std::vector<std::vector<int>> selected;  // empty for dense
    bool has_gate = false;
  };
  /// Graph-free eval forward; bit-identical to the tape forward in eval mode.
  EvalOut forward_eval(const Mat& x) const;
  static EvalOut forward_eval_at(const ModelConfig& cfg, const ParamLayout& layout,
                                 std::span<const double> params, const Mat& x);

 private:
  Model() = default;
  // Slice-shaped copies of params_ for the eval path, rebuilt after mutation.
  const std::vector<Mat>& slice_mats() const;

  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<double> params_;
  mutable std::vector<Mat> cache_;
  mutable bool cache_dirty_ = true;
};

/// Checkpoint: magic, format version, JSON header (config, seed, count),
/// little-endian float64 blob, trailing CRC32 of everything before it.
void save_checkpoint(const std::filesystem::path& path,
                     const std::string& config_json_text, std::uint64_t seed,
                     std::span<const double> params);

struct Checkpoint {
  std::string config_json;  // canonical text
  std::uint64_t seed = 0;
  std::vector<double> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace moelab
