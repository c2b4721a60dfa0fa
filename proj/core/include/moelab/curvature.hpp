// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/model.hpp"

namespace moelab {

/// Twice-differentiable scalar field over a flat parameter vector. hvp
/// computes H·v exactly (tangent-of-gradient), never materializing H, and
/// returns the value at x. Span sizes must equal dim().
class ScalarFunction {
 public:
  virtual ~ScalarFunction() = default;
  virtual std::size_t dim() const = 0;
  virtual double value(std::span<const double> x) = 0;
  virtual void gradient(std::span<const double> x, std::span<double> g) = 0;
  virtual double hvp(std::span<const double> x, std::span<const double> v,
                     std::span<double> hv) = 0;

 protected:
  void check_dim(std::size_t got, const char* what) const;
};

/// Size-checked convenience wrapper; returns the value at x.
double hvp(ScalarFunction& f, std::span<const double> x,
           std::span<const double> v, std::span<double> out);

/// Mean cross-entropy of a model over a whole split, as a function of the
/// flat parameters. Routing runs in eval mode: the selection is treated as
/// locally constant, so derivatives measure curvature within the current
/// routing region. The split is processed in fixed shards of kShard rows
/// with an ordered reduction; results do not depend on split size beyond
/// the data itself.
class SplitTaskLoss final : public ScalarFunction {
 public:
  static constexpr int kShard = 256;

  SplitTaskLoss(const Model& model, const Dataset& split);
  std::size_t dim() const override { return model_.param_count(); }
  double value(std::span<const double> x) override;
  void gradient(std::span<const double> x, std::span<double> g) override;
  double hvp(std::span<const double> x, std::span<const double> v,
             std::span<double> hv) override;

 private:
  const Model& model_;
  const Dataset& split_;
};

/// Training-mode total loss (task + weighted aux) on one fixed batch. The
/// gating noise is redrawn identically on every call from noise_seed, so the
/// function is deterministic and differentiable; used by derivative oracles.
class BatchLossFunction final : public ScalarFunction {
 public:
  BatchLossFunction(const Model& model, Mat x, std::vector<int> labels,
                    bool training, std::uint64_t noise_seed);
  std::size_t dim() const override { return model_.param_count(); }
  double value(std::span<const double> x) override;
  void gradient(std::span<const double> x, std::span<double> g) override;
  double hvp(std::span<const double> x, std::span<const double> v,
             std::span<double> hv) override;

 private:
  double run(std::span<const double> x, std::span<const double> v,
             std::span<double> g, std::span<double> hv);
  const Model& model_;
  Mat x_;
  std::vector<int> labels_;
  bool training_;
  std::uint64_t noise_seed_;
};

struct PowerResult {
  double lambda = 0;
  std::vector<double> eigenvector;  // unit norm
  int iters = 0;
  double residual = 0;  // ||Hv - lambda v|| / max(|lambda|, tiny)
  bool converged = false;
};

/// Power iteration on the HVP oracle, started from a seeded normal vector.
/// Converges when successive Rayleigh quotients differ relatively by < tol.
/// A negative dominant eigenvalue triggers one shifted rerun (H + 1.5|A|I)
/// so the reported value is the algebraically largest eigenvalue.
PowerResult lambda_max(ScalarFunction& f, std::span<const double> x, double tol,
                       int max_iters, std::uint64_t seed);

struct TraceResult {
  double estimate = 0;
  double stderr_of_mean = 0;
  int samples = 0;
};

/// Hutchinson estimator: mean of v'Hv over Rademacher vectors drawn
/// sequentially from one stream (doubling samples extends the same draws).
TraceResult hessian_trace(ScalarFunction& f, std::span<const double> x,
                          int samples, std::uint64_t seed);

struct SweepRow {
  double alpha = 0;
  double loss = 0;
};

/// Loss at x + alpha*v per grid point; x itself is never mutated. v must be
/// unit norm within 1e-9.
std::vector<SweepRow> eigen_sweep(ScalarFunction& f, std::span<const double> x,
                                  std::span<const double> v,
                                  std::span<const double> alphas);

/// Per-alpha count of split rows whose selected expert set at theta + alpha*v
/// differs from the set at theta (eval-mode routing both sides). Top-k heads
/// only.
std::vector<int> routing_flip_count(const Model& model, std::span<const double> v,
                                    std::span<const double> alphas,
                                    const Dataset& split);

/// Uniform grid of `points` values over [lo, hi]; symmetric grids with an
/// odd point count contain 0 exactly.
std::vector<double> alpha_grid(double lo, double hi, int points);

// Convenience wrappers over SplitTaskLoss at the model's current parameters.
PowerResult lambda_max(const Model& model, const Dataset& split, double tol,
                       int max_iters, std::uint64_t seed);
TraceResult hessian_trace(const Model& model, const Dataset& split, int samples,
                          std::uint64_t seed);

}  // namespace moelab
