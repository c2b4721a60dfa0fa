// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Microbenchmarks for the hot paths: eval forward, one training step, and
// the gating primitives.
#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "moelab/model.hpp"
#include "moelab/moe.hpp"
#include "moelab/rng.hpp"
#include "moelab/tape.hpp"
#include "moelab/train.hpp"

namespace {

using namespace moelab;

Model make_model(const std::string& head) {
  ModelConfig mc;
  mc.backbone = {};
  mc.input_dim = 64;
  mc.feature_dim = 64;
  mc.head = head;
  mc.experts = head == "dense" ? 1 : 8;
  mc.expert_hidden = head == "dense" ? 72 : 16;
  mc.k = head == "hard" ? 1 : 2;
  mc.classes = 10;
  mc.seed = 7;
  return Model::build(mc);
}

Mat make_input(int rows, int cols, std::uint64_t seed) {
  Mat x(rows, cols);
  Rng rng(seed, 0);
  rng.fill_uniform(x.d, -1.0, 1.0);
  return x;
}

void bm_forward_eval(benchmark::State& state, const char* head) {
  const Model model = make_model(head);
  const int bs = static_cast<int>(state.range(0));
  const Mat x = make_input(bs, 64, 11);
  for (auto _ : state) {
    auto out = model.forward_eval(x);
    benchmark::DoNotOptimize(out.logits.d.data());
  }
  state.SetItemsProcessed(state.iterations() * bs);
}

void bm_train_step(benchmark::State& state, const char* head) {
  Model model = make_model(head);
  const int bs = 32;
  const Mat x = make_input(bs, 64, 13);
  std::vector<int> labels;
  Rng lab(17, 1);
  for (int i = 0; i < bs; ++i) labels.push_back(static_cast<int>(lab.next_u64() % 10));
  Rng noise(19, fnv1a("gate_noise"));
  std::vector<double> grads(model.param_count());
  std::vector<double> vel(model.param_count(), 0.0);
  for (auto _ : state) {
    Tape t;
    Bound b = model.bind(t);
    auto fwd = model.forward(t, b, x, true, &noise);
    auto losses = model.build_loss(t, fwd, labels, true);
    t.backward(losses.total);
    model.read_grads(t, b, grads);
    sgd_step(model.mutable_params(), grads, vel, 0.01, 0.9, 1e-4);
    benchmark::DoNotOptimize(grads.data());
  }
  state.SetItemsProcessed(state.iterations() * bs);
}

void bm_gate_topk_eval(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0));
  const int experts = 8;
  const Mat h = make_input(rows, 64, 23);
  Mat w(64, experts), b(1, experts);
  Rng rng(29, 0);
  rng.fill_normal(w.d);
  rng.fill_normal(b.d);
  for (auto _ : state) {
    auto g = gate_topk_eval(h, w, b, 2);
    benchmark::DoNotOptimize(g.weights.d.data());
  }
  state.SetItemsProcessed(state.iterations() * rows);
}

}  // namespace

BENCHMARK_CAPTURE(bm_forward_eval, dense, "dense")->Arg(1)->Arg(8)->Arg(64);
BENCHMARK_CAPTURE(bm_forward_eval, soft, "soft")->Arg(1)->Arg(8)->Arg(64);
BENCHMARK_CAPTURE(bm_forward_eval, sparse, "sparse")->Arg(1)->Arg(8)->Arg(64);
BENCHMARK_CAPTURE(bm_forward_eval, hard, "hard")->Arg(1)->Arg(8)->Arg(64);
BENCHMARK_CAPTURE(bm_train_step, dense, "dense");
BENCHMARK_CAPTURE(bm_train_step, soft, "soft");
BENCHMARK_CAPTURE(bm_train_step, sparse, "sparse");
BENCHMARK(bm_gate_topk_eval)->Arg(1)->Arg(64);

BENCHMARK_MAIN();
