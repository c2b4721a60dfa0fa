// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

/// Handle into a Tape. Valid only for the tape that produced it.
struct Tensor {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over Mat values.
///
/// With tangents enabled every op also propagates a forward (directional)
/// derivative, and backward() additionally propagates the tangent of each
/// adjoint. Seeding leaf tangents with a direction v then makes the leaf
/// adjoint tangents equal exactly (H·v) of the scalar output: the Hessian is
/// never materialized.
///
/// Single-threaded; one backward() per constructed graph is the expected use.
class Tape {
 public:
  explicit Tape(bool with_tangent = false) : tangent_(with_tangent) {}

  bool tangent_enabled() const { return tangent_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  /// Process-wide count of nodes ever recorded, for no-graph assertions.
  static std::uint64_t nodes_created_total();

  /// Differentiable input. Tangent (same shape) is the direction seed; when
  /// omitted it is zero.
  Tensor leaf(Mat v);
  Tensor leaf(Mat v, Mat tangent);
  /// Non-differentiable input (data batches, noise draws).
  Tensor constant(Mat v);

  const Mat& val(Tensor t) const;
  /// Adjoint, valid after backward(); zero-sized for constants.
  const Mat& grad(Tensor t) const;
  /// Tangent of the adjoint, valid after backward() with tangents enabled.
  const Mat& grad_tangent(Tensor t) const;
  int rows(Tensor t) const { return val(t).rows; }
  int cols(Tensor t) const { return val(t).cols; }

  Tensor matmul(Tensor a, Tensor b);
  Tensor add_bias(Tensor x, Tensor b);  ///< x: m×n, b: 1×n broadcast over rows
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor div(Tensor a, Tensor b);
  Tensor scale(Tensor a, double c);
  Tensor add_scalar(Tensor a, double c);
  Tensor relu(Tensor a);
  Tensor softplus(Tensor a);
  Tensor sqrt(Tensor a);        ///< d/dx at x==0 treated as 0 (subgradient)
  Tensor xlogx(Tensor a);       ///< x·ln x with 0·ln 0 := 0; x must be ≥ 0
  Tensor normal_cdf(Tensor a);  ///< standard normal Φ
  Tensor softmax_rows(Tensor a);
  Tensor log_softmax_rows(Tensor a);
  Tensor row_mean(Tensor a);  ///< m×n → m×1
  Tensor col_mean(Tensor a);  ///< m×n → 1×n
  Tensor col_sum(Tensor a);   ///< m×n → 1×n
  Tensor reduce_sum(Tensor a);
  Tensor reduce_mean(Tensor a);
  Tensor sub_bcast_col(Tensor x, Tensor c);  ///< x: m×n, c: m×1
  Tensor div_bcast_col(Tensor x, Tensor c);
  Tensor mul_bcast_col(Tensor x, Tensor c);
  Tensor concat_rows(Tensor a, Tensor b);
  Tensor gather_rows(Tensor x, std::vector<int> idx);
  /// Zero matrix of out_rows rows with row j of x accumulated at idx[j].
  Tensor scatter_rows(Tensor x, std::vector<int> idx, int out_rows);
  /// out[i,j] = x[i, idx[i*k+j]]; idx holds m·k column indices.
  Tensor gather_cols(Tensor x, std::vector<int> idx, int k);
  /// Inverse of gather_cols: out m×out_cols, out[i, idx[i*k+j]] += x[i,j].
  Tensor scatter_cols(Tensor x, std::vector<int> idx, int out_cols);
  /// Column vector of x[rows[i], cols[i]].
  Tensor gather_pairs(Tensor x, std::vector<int> rows, std::vector<int> cols);
  /// Mean over the batch of (logsumexp(z_b) - z_b[label_b]); fused and
  /// log-sum-exp stabilized, saves softmax probabilities for double backward.
  Tensor cross_entropy_mean(Tensor logits, std::vector<int> labels);

  /// Reverse pass from a scalar output. Computes adjoints for every
  /// grad-requiring node and, with tangents enabled, their tangents too.
  void backward(Tensor loss);

 private:
  struct Node {
    std::uint8_t op = 0;
    bool needs_grad = false;
    int a = -1;
    int b = -1;
    double c0 = 0.0;  // scalar operand for scale / add_scalar
    int aux = 0;      // scatter width, gather k, concat split row
    Mat val, tan, grad, gtan;
    Mat saved, saved_tan;  // softmax probs (+tangent) for fused losses
    std::vector<int> idx;
  };

  Tensor push(Node n);
  Node& at(Tensor t);
  const Node& at(Tensor t) const;
  void check_same_shape(const char* op, Tensor a, Tensor b) const;
  Tensor unary(std::uint8_t op, Tensor a);

  std::vector<Node> nodes_;
  bool tangent_ = false;
};

/// Constant tensor of i.i.d. standard normal draws.
class Rng;
Tensor randn(Tape& tape, Rng& rng, int rows, int cols);

}  // namespace moelab
