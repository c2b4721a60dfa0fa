// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "moelab/bench.hpp"
#include "moelab/errors.hpp"

using namespace moelab;

namespace {

ModelConfig tiny_model(const std::string& head) {
  ModelConfig mc;
  mc.backbone = {};
  mc.input_dim = 6;
  mc.feature_dim = 6;
  mc.head = head;
  mc.experts = head == "dense" ? 1 : 4;
  mc.expert_hidden = 5;
  mc.k = head == "hard" ? 1 : 2;
  mc.classes = 3;
  mc.seed = 9;
  return mc;
}

BenchConfig tiny_bench() {
  BenchConfig bc;
  bc.batch_sizes = {1, 4};
  bc.warmup = 2;
  bc.measured = 10;
  bc.seed = 5;
  return bc;
}

BenchRow make_row(const std::string& model, int bs, double ms) {
  BenchRow r;
  r.model = model;
  r.batch_size = bs;
  r.params_m = 0.001;
  r.ms_per_batch_median = ms;
  r.ms_iqr = 0.1;
  r.img_per_s = bs * 1000.0 / ms;
  r.peak_mem_bytes = 1024;
  return r;
}

}  // namespace

TEST_SUITE_BEGIN("bench");

TEST_CASE("bench fills one consistent row per batch size") {
  Model m = Model::build(tiny_model("dense"));
  auto rows = bench(m, "dense", tiny_bench());
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].batch_size == 1);
  CHECK(rows[1].batch_size == 4);
  for (const auto& r : rows) {
    CHECK(r.model == "dense");
    CHECK(r.params_m == static_cast<double>(m.param_count()) / 1e6);
    CHECK(r.ms_per_batch_median > 0.0);
    CHECK(r.ms_iqr >= 0.0);
    CHECK(r.peak_mem_bytes > 0);
    const double want = r.batch_size * 1000.0 / r.ms_per_batch_median;
    CHECK(r.img_per_s == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("bench runs every head type without touching the tape") {
  for (const std::string head : {"soft", "sparse", "hard"}) {
    Model m = Model::build(tiny_model(head));
    const auto before = Tape::nodes_created_total();
    auto rows = bench(m, head, tiny_bench());
    CHECK(rows.size() == 2);
    CHECK(Tape::nodes_created_total() == before);
  }
}

TEST_CASE("bench rejects models that produce non-finite logits") {
  Model m = Model::build(tiny_model("dense"));
  // Poison the output bias; earlier params can be masked by relu.
  const auto& b2 = m.layout().slice("head.e0.b2");
  m.mutable_params()[b2.offset] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)bench(m, "dense", tiny_bench()), NumericError);
}

TEST_CASE("compare_report computes ratios against the dense baseline") {
  std::vector<BenchRow> rows{
      make_row("dense", 1, 2.0),  make_row("dense", 8, 12.0),
      make_row("soft", 1, 4.0),   make_row("soft", 8, 18.0),
      make_row("sparse", 1, 3.0), make_row("sparse", 8, 24.0),
  };
  auto entries = compare_report(rows);
  REQUIRE(entries.size() == 6);

  auto find = [&](const std::string& model, int bs) -> const CompareEntry& {
    for (const auto& e : entries) {
      if (e.model == model && e.batch_size == bs) return e;
    }
    REQUIRE(false);
    return entries[0];
  };

  CHECK(find("dense", 1).ms_ratio_vs_dense == 1.0);
  CHECK(find("dense", 1).img_ratio_vs_dense == 1.0);
  CHECK(find("soft", 1).ms_ratio_vs_dense == 2.0);
  CHECK(find("soft", 1).img_ratio_vs_dense == 0.5);
  CHECK(find("sparse", 1).ms_ratio_vs_dense == 1.5);
  CHECK(find("sparse", 8).ms_ratio_vs_dense == 2.0);

  // Sparse is faster than soft at bs=1 and slower at bs=8.
  CHECK(find("sparse", 1).has_soft_flag);
  CHECK_FALSE(find("sparse", 1).sparse_slower_than_soft);
  CHECK(find("sparse", 8).has_soft_flag);
  CHECK(find("sparse", 8).sparse_slower_than_soft);
  CHECK_FALSE(find("soft", 1).has_soft_flag);
  CHECK_FALSE(find("dense", 8).has_soft_flag);

  // Entries are grouped by batch size and ranked by throughput inside it.
  CHECK(entries[0].batch_size == 1);
  CHECK(entries[0].model == "dense");
  CHECK(entries[1].model == "sparse");
  CHECK(entries[2].model == "soft");
  CHECK(entries[3].batch_size == 8);
  CHECK(entries[3].model == "dense");
}

TEST_CASE("compare_report without a soft run leaves the flag unset") {
  std::vector<BenchRow> rows{make_row("dense", 1, 2.0), make_row("sparse", 1, 9.0)};
  auto entries = compare_report(rows);
  REQUIRE(entries.size() == 2);
  for (const auto& e : entries) CHECK_FALSE(e.has_soft_flag);
}

TEST_CASE("compare_report validates its input table") {
  std::vector<BenchRow> one_model{make_row("dense", 1, 2.0), make_row("dense", 8, 3.0)};
  CHECK_THROWS_AS((void)compare_report(one_model), UsageError);

  std::vector<BenchRow> no_dense{make_row("soft", 1, 2.0), make_row("sparse", 1, 3.0)};
  CHECK_THROWS_AS((void)compare_report(no_dense), UsageError);

  std::vector<BenchRow> ragged{make_row("dense", 1, 2.0), make_row("dense", 8, 3.0),
                               make_row("soft", 1, 2.5)};
  CHECK_THROWS_AS((void)compare_report(ragged), UsageError);
}

TEST_SUITE_END();
