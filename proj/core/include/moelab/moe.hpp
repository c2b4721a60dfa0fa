// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "moelab/rng.hpp"
#include "moelab/tape.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

/// Per-input routing outcome. For top-k gates the clean logits are the
/// standardized values (the noise operates on that scale); for the soft gate
/// they are the raw logits. noise_std/noisy are empty in eval mode, where
/// noisy logits coincide with clean ones.
struct GateDecision {
  std::vector<double> clean;
  std::vector<double> noise_std;
  std::vector<double> noisy;
  std::vector<int> selected;      // ascending expert indices
  std::vector<double> weights;    // size N, zero outside selection, sums to 1
};

/// Batched gate outputs recorded on a tape. `weights` always carries the
/// combination weights; the remaining tensors are only valid for top-k gates.
struct GateTensors {
  Tensor weights;
  Tensor clean_std;
  Tensor noisy;
  Tensor noise_std;
  std::vector<std::vector<int>> selected;  // per row, ascending
};

/// Batched gate outputs without a tape, for eval/bench forwards.
struct GateEval {
  Mat weights;
  Mat clean_std;
  std::vector<std::vector<int>> selected;
};

/// Indices 0..n-1 ranked by value descending; equal values keep the lower
/// index first.
std::vector<int> rank_desc(std::span<const double> v);
std::vector<int> topk_indices(std::span<const double> v, int k);

GateTensors gate_soft(Tape& t, Tensor x, Tensor wg, Tensor bg);
/// Noisy top-k gating on standardized clean logits. Training adds
/// eps*softplus(x*wn) noise before selection; eval selects on the clean
/// standardized logits directly and never touches the noise path. Combination
/// weights are a softmax over the k kept (noisy) logits, scattered back.
GateTensors gate_noisy_topk(Tape& t, Tensor x, Tensor wg, Tensor bg, Tensor wn,
                            int k, bool training, Rng* rng);

GateEval gate_soft_eval(const Mat& x, const Mat& wg, const Mat& bg);
GateEval gate_topk_eval(const Mat& x, const Mat& wg, const Mat& bg, int k);

/// Single-input wrappers used by tests and reporting.
GateDecision gate_soft_decide(const Mat& h, const Mat& wg, const Mat& bg);
GateDecision gate_topk_decide(const Mat& h, const Mat& wg, const Mat& bg,
                              const Mat& wn, int k, bool training, Rng* rng);

/// Weighted sum of expert logits; outputs must be supplied exactly for the
/// selected experts, in selection order.
std::vector<double> combine(const GateDecision& d,
                            const std::vector<std::vector<double>>& expert_outputs);

/// KL(mean routing || uniform) = sum_i p_i ln(p_i N), p = column mean of the
/// batch weights. Rows must sum to 1 within 1e-6.
Tensor loss_kl_uniform(Tape& t, Tensor weights);
/// Squared coefficient of variation of per-expert importance (column sums).
Tensor loss_importance(Tape& t, Tensor weights);
///// Smooth load loss: Load_i = sum_x Phi((clean_i - thr_i)/sigma_i) with thr_i
/// the k-th highest noisy logit among the other experts; returns CV^2(Load).
/// Degenerate k >= N keeps every expert always selected, so the loss is a
/// constant zero. Gradients flow through clean, noisy (the threshold) and
/// sigma; the threshold's position is treated as locally constant.
Tensor loss_load(Tape& t, Tensor clean_std, Tensor noisy, Tensor noise_std, int k);
/// Population-variance CV^2 of a 1 x n row vector.
Tensor cv_squared(Tape& t, Tensor row);

struct RoutingStats {
  std::vector<double> utilization;  // mean weight per expert, sums to 1
  Mat class_expert;                 // [classes x experts], rows sum to 1
};

/// Streaming accumulator over per-input weight rows.
class RoutingAccum {
 public:
  RoutingAccum(int classes, int experts);
  void add(std::span<const double> weights_row, int label);
  RoutingStats finalize() const;  ///< requires at least one decision

 private:
  Mat sum_;
  std::vector<long> class_count_;
  std::vector<double> total_;
  long count_ = 0;
};

}  // namespace moelab
