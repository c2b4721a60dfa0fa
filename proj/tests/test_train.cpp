// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "moelab/config.hpp"
#include "moelab/errors.hpp"
#include "moelab/train.hpp"

using namespace moelab;

namespace {

LabConfig tiny_lab(const std::string& head, std::uint64_t seed) {
  LabConfig cfg;
  cfg.model.backbone = {};
  cfg.model.input_dim = 8;
  cfg.model.feature_dim = 8;
  cfg.model.head = head;
  cfg.model.experts = head == "dense" ? 1 : 3;
  cfg.model.expert_hidden = 6;
  cfg.model.k = head == "sparse" ? 2 : 1;
  cfg.model.classes = 4;
  cfg.model.seed = seed;
  cfg.train.epochs = 5;
  cfg.train.batch_size = 16;
  cfg.train.lr = 0.05;
  cfg.train.momentum = 0.9;
  cfg.train.weight_decay = 1e-4;
  cfg.train.seed = seed;
  cfg.data.source = "synthetic";
  cfg.data.classes = 4;
  cfg.data.dim = 8;
  cfg.data.clusters_per_class = 1;
  cfg.data.n_per_class = 40;
  cfg.data.spread = 0.2;
  cfg.data.train_count = 96;
  cfg.data.val_count = 32;
  cfg.data.test_count = 32;
  cfg.data.seed = 5;
  return cfg;
}

RunMetrics run_once(const LabConfig& cfg, const std::filesystem::path& out) {
  LoadedData data = load_data(cfg.data);
  Model model = Model::build(cfg.model);
  TrainSink sink;
  sink.out_dir = out;
  sink.config_json = dump_lab_config(cfg);
  sink.config_hash = config_hash(cfg);
  sink.data_source = data.source_used;
  return train(model, data, cfg.train, sink);
}

}  // namespace

TEST_SUITE_BEGIN("train");

TEST_CASE("sgd_step matches the worked examples") {
  // Plain SGD: theta = 1, g = 0.5, lr = 0.1 -> 0.95.
  std::vector<double> p{1.0}, g{0.5}, v{0.0};
  sgd_step(p, g, v, 0.1, 0.0, 0.0);
  CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-15));

  // Coupled weight decay: theta = 1, g = 0, wd = 0.1, lr = 0.1 -> 0.99.
  p = {1.0};
  g = {0.0};
  v = {0.0};
  sgd_step(p, g, v, 0.1, 0.0, 0.1);
  CHECK(p[0] == doctest::Approx(0.99).epsilon(1e-15));

  // Momentum accumulates velocity across steps.
  p = {0.0};
  g = {1.0};
  v = {0.0};
  sgd_step(p, g, v, 0.1, 0.9, 0.0);
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-15));
  sgd_step(p, g, v, 0.1, 0.9, 0.0);
  // v2 = 0.9*1 + 1 = 1.9; p = -0.1 - 0.19
  CHECK(p[0] == doctest::Approx(-0.29).epsilon(1e-12));
}

TEST_CASE("sgd_step rejects bad input") {
  std::vector<double> p{1.0, 2.0}, g{0.5}, v{0.0, 0.0};
  CHECK_THROWS_AS(sgd_step(p, g, v, 0.1, 0.0, 0.0), UsageError);
  std::vector<double> g2{std::numeric_limits<double>::quiet_NaN(), 0.0};
  CHECK_THROWS_AS(sgd_step(p, g2, v, 0.1, 0.0, 0.0), NumericError);
}

TEST_CASE("epoch_to_threshold finds the first maximum") {
  CHECK(epoch_to_threshold(std::vector<double>{0.5, 0.9, 0.9, 0.8}) == 2);
  CHECK(epoch_to_threshold(std::vector<double>{0.7}) == 1);
  CHECK(epoch_to_threshold(std::vector<double>{0.1, 0.2, 0.3}) == 3);
  CHECK(epoch_to_threshold(std::vector<double>{0.3, 0.1, 0.1}) == 1);
  CHECK_THROWS_AS((void)epoch_to_threshold(std::vector<double>{}), UsageError);
}

TEST_CASE("metrics_csv_header lists one utilization column per expert") {
  CHECK(metrics_csv_header(1) ==
        "epoch,train_loss,task_loss,aux_loss,train_acc,val_acc,util_0");
  CHECK(metrics_csv_header(3) ==
        "epoch,train_loss,task_loss,aux_loss,train_acc,val_acc,util_0,util_1,util_2");
}

TEST_CASE("training improves the loss and fills every row field") {
  RunMetrics m = run_once(tiny_lab("dense", 1), {});
  CHECK(m.rows.size() == 5);
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    const EpochRow& r = m.rows[i];
    CHECK(r.epoch == static_cast<int>(i) + 1);
    CHECK(r.train_acc >= 0.0);
    CHECK(r.train_acc <= 1.0);
    CHECK(r.val_acc >= 0.0);
    CHECK(r.val_acc <= 1.0);
    CHECK(r.utilization == std::vector<double>{1.0});
    CHECK(std::isfinite(r.train_loss));
    CHECK(r.aux_loss == 0.0);
    CHECK(r.task_loss == r.train_loss);  // no aux term for dense
  }
  CHECK(m.rows.back().train_loss < m.rows.front().train_loss);
  CHECK(m.ett_m_a >= 1);
  CHECK(m.ett_m_a <= 5);
  CHECK(m.ett_v_a >= 1);
  CHECK(m.ett_v_a <= 5);
  CHECK(m.m_a >= m.rows.front().train_acc - 1e-12);
}

TEST_CASE("moe training reports utilization that sums to one") {
  LabConfig cfg = tiny_lab("sparse", 2);
  cfg.model.lambda_imp = 0.01;
  cfg.model.lambda_load = 0.01;
  RunMetrics m = run_once(cfg, {});
  for (const auto& r : m.rows) {
    CHECK(r.utilization.size() == 3);
    double s = 0;
    for (double u : r.utilization) {
      CHECK(u >= 0.0);
      s += u;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(r.aux_loss >= 0.0);
  }
}

TEST_CASE("training is deterministic for a fixed config and seed") {
  RunMetrics a = run_once(tiny_lab("sparse", 3), {});
  RunMetrics b = run_once(tiny_lab("sparse", 3), {});
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].train_loss == b.rows[i].train_loss);
    CHECK(a.rows[i].val_acc == b.rows[i].val_acc);
    CHECK(a.rows[i].utilization == b.rows[i].utilization);
  }
  RunMetrics c = run_once(tiny_lab("sparse", 4), {});
  bool differs = false;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    differs = differs || a.rows[i].train_loss != c.rows[i].train_loss;
  }
  CHECK(differs);
}

TEST_CASE("weight decay shrinks the parameter norm") {
  LabConfig no_wd = tiny_lab("dense", 5);
  no_wd.train.weight_decay = 0.0;
  no_wd.train.epochs = 3;
  LabConfig wd = no_wd;
  wd.train.weight_decay = 0.05;

  LoadedData data = load_data(no_wd.data);
  Model m1 = Model::build(no_wd.model);
  Model m2 = Model::build(wd.model);
  TrainSink sink;
  (void)train(m1, data, no_wd.train, sink);
  (void)train(m2, data, wd.train, sink);
  double n1 = 0, n2 = 0;
  for (double x : m1.params()) n1 += x * x;
  for (double x : m2.params()) n2 += x * x;
  CHECK(n2 < n1);
}

TEST_CASE("cosine schedule trains deterministically") {
  LabConfig cfg = tiny_lab("dense", 6);
  cfg.train.lr_schedule = "cosine";
  RunMetrics a = run_once(cfg, {});
  RunMetrics b = run_once(cfg, {});
  CHECK(a.rows.back().train_loss == b.rows.back().train_loss);
}

TEST_CASE("train writes metrics, summary and best checkpoint") {
  testutil::TempDir tmp;
  LabConfig cfg = tiny_lab("soft", 7);
  cfg.model.lambda_kl = 0.01;
  RunMetrics m = run_once(cfg, tmp.path());

  const std::string csv = testutil::read_file(tmp / "metrics.csv");
  CHECK(csv.rfind("# config_hash=" + config_hash(cfg) + " seed=7", 0) == 0);
  CHECK(csv.find(metrics_csv_header(3)) != std::string::npos);
  // One line per epoch plus stamp and header.
  int lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == 2 + cfg.train.epochs);

  nlohmann::json summary = nlohmann::json::parse(testutil::read_file(tmp / "summary.json"));
  CHECK(summary["seed"] == 7);
  CHECK(summary["config_hash"] == config_hash(cfg));
  CHECK(summary["epochs"] == 5);
  CHECK(summary["m_a"].get<double>() == doctest::Approx(m.m_a));
  CHECK(summary["ett_v_a"].get<int>() == m.ett_v_a);
  CHECK(summary["diverged"] == false);
  CHECK(summary["best_checkpoint"] == "best.ckpt");
  CHECK(summary["data_source"] == "synthetic");

  Checkpoint ck = load_checkpoint(tmp / "best.ckpt");
  CHECK(ck.params.size() == Model::build(cfg.model).param_count());
  CHECK(m.checkpoint_path == (tmp / "best.ckpt").string());
}

TEST_CASE("divergence aborts with a numeric error and keeps partial artifacts") {
  testutil::TempDir tmp;
  LabConfig cfg = tiny_lab("dense", 8);
  cfg.train.lr = 1e14;  // guaranteed blow-up
  cfg.train.epochs = 30;
  CHECK_THROWS_AS((void)run_once(cfg, tmp.path()), NumericError);
  CHECK(std::filesystem::exists(tmp / "metrics.csv"));
  nlohmann::json summary = nlohmann::json::parse(testutil::read_file(tmp / "summary.json"));
  CHECK(summary["diverged"] == true);
  CHECK(summary["diverged_epoch"].get<int>() >= 1);
}

TEST_CASE("evaluate_accuracy breaks argmax ties toward the lower class") {
  LabConfig cfg = tiny_lab("dense", 9);
  LoadedData data = load_data(cfg.data);
  Model m = Model::build(cfg.model);
  auto p = m.mutable_params();
  std::fill(p.begin(), p.end(), 0.0);  // all logits equal -> predict class 0
  double frac0 = 0;
  for (int y : data.val.labels) frac0 += y == 0 ? 1.0 : 0.0;
  frac0 /= data.val.rows();
  CHECK(evaluate_accuracy(m, data.val) == doctest::Approx(frac0).epsilon(1e-12));
}

TEST_SUITE_END();
