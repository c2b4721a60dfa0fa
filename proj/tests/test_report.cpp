// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "moelab/config.hpp"
#include "moelab/errors.hpp"
#include "moelab/report.hpp"
#include "moelab/train.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

LabConfig run_config(const std::string& head) {
  LabConfig cfg = parse_lab_config("");
  cfg.model.backbone = {};
  cfg.model.input_dim = 6;
  cfg.model.feature_dim = 6;
  cfg.model.head = head;
  cfg.model.experts = head == "dense" ? 1 : 2;
  cfg.model.expert_hidden = 4;
  cfg.model.k = 1;
  cfg.model.classes = 3;
  cfg.model.seed = 3;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 12;
  cfg.train.lr = 0.05;
  cfg.train.seed = 5;
  cfg.data.source = "synthetic";
  cfg.data.classes = 3;
  cfg.data.clusters_per_class = 1;
  cfg.data.dim = 6;
  cfg.data.n_per_class = 20;
  cfg.data.spread = 0.3;
  cfg.data.train_count = 36;
  cfg.data.val_count = 12;
  cfg.data.test_count = 12;
  return cfg;
}

void make_run(const fs::path& dir, const std::string& head) {
  LabConfig cfg = run_config(head);
  LoadedData data = load_data(cfg.data);
  Model model = Model::build(cfg.model);
  fs::create_directories(dir);
  TrainSink sink{dir, dump_lab_config(cfg), config_hash(cfg), {}, data.source_used};
  (void)train(model, data, cfg.train, sink);
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

// Replaces the stamp hash in an artifact so it disagrees with summary.json.
void tamper_stamp(const fs::path& csv) {
  std::ifstream in(csv);
  std::stringstream rest;
  std::string first;
  std::getline(in, first);
  rest << in.rdbuf();
  std::ofstream out(csv, std::ios::trunc);
  out << "# config_hash=0000000000000000 seed=1\n" << rest.str();
}

}  // namespace

TEST_SUITE_BEGIN("report");

TEST_CASE("a report consolidates runs into tables and an overview") {
  testutil::TempDir tmp;
  make_run(tmp / "run_a", "dense");
  make_run(tmp / "run_b", "soft");

  ReportOptions opts;
  opts.run_dirs = {tmp / "run_a", tmp / "run_b"};
  opts.out_dir = tmp / "report";
  ReportResult res = write_report(opts);
  CHECK(res.warnings.empty());

  const char* const expected[] = {
      "runs.csv",       "table_accuracy.csv",        "table_curvature.csv",
      "table_efficiency.csv", "utilization_timeseries.csv", "class_expert_long.csv",
      "sweep_consolidated.csv", "report.md"};
  for (const char* name : expected) {
    CAPTURE(name);
    CHECK(fs::exists(opts.out_dir / name));
  }
  CHECK(res.written.size() == 8);

  const std::string runs = testutil::read_file(opts.out_dir / "runs.csv");
  CHECK(count_lines(runs) == 3);
  CHECK(runs.rfind("run,model,config_hash,seed,data_source\n", 0) == 0);
  CHECK(runs.find("run_a,dense,") != std::string::npos);
  CHECK(runs.find("run_b,soft(N=2),") != std::string::npos);
  CHECK(runs.find("synthetic") != std::string::npos);
  CHECK(runs.find(config_hash(run_config("dense"))) != std::string::npos);

  const std::string acc = testutil::read_file(opts.out_dir / "table_accuracy.csv");
  CHECK(count_lines(acc) == 3);
  CHECK(acc.rfind("run,model,m_a,ett_m_a,v_a,ett_v_a,seed,config_hash\n", 0) == 0);

  // One row per epoch per utilization column: 3 for dense, 6 for two experts.
  const std::string util =
      testutil::read_file(opts.out_dir / "utilization_timeseries.csv");
  CHECK(count_lines(util) == 1 + 3 + 6);
  CHECK(util.rfind("run,epoch,expert,utilization\n", 0) == 0);

  const std::string md = testutil::read_file(opts.out_dir / "report.md");
  CHECK(md.find("# Run report") != std::string::npos);
  CHECK(md.find("## Accuracy") != std::string::npos);
  // Analysis artifacts were never produced, so they are listed as missing.
  CHECK(md.find("## Missing artifacts") != std::string::npos);
  CHECK(md.find("run_a: curvature.csv") != std::string::npos);
  CHECK(md.find("run_b: bench.csv") != std::string::npos);
}

TEST_CASE("hash-tampered runs are skipped unless forced") {
  testutil::TempDir tmp;
  make_run(tmp / "good", "dense");
  make_run(tmp / "bad", "dense");
  tamper_stamp(tmp / "bad" / "metrics.csv");

  ReportOptions opts;
  opts.run_dirs = {tmp / "good", tmp / "bad"};
  opts.out_dir = tmp / "report";
  ReportResult res = write_report(opts);
  REQUIRE(res.warnings.size() == 1);
  CHECK(res.warnings[0].find("mismatched config hashes") != std::string::npos);
  const std::string runs = testutil::read_file(opts.out_dir / "runs.csv");
  CHECK(count_lines(runs) == 2);  // header + the good run only
  CHECK(runs.find("bad,") == std::string::npos);
  // The skip is also visible in the overview.
  const std::string md = testutil::read_file(opts.out_dir / "report.md");
  CHECK(md.find("## Warnings") != std::string::npos);

  opts.force = true;
  opts.out_dir = tmp / "report_forced";
  ReportResult forced = write_report(opts);
  const std::string fruns = testutil::read_file(opts.out_dir / "runs.csv");
  CHECK(count_lines(fruns) == 3);
  bool merged_warning = false;
  for (const auto& w : forced.warnings) {
    merged_warning |= w.find("merged by --force") != std::string::npos;
  }
  CHECK(merged_warning);
}

TEST_CASE("runs without artifacts are skipped with a warning") {
  testutil::TempDir tmp;
  make_run(tmp / "good", "dense");
  fs::create_directories(tmp / "empty");

  ReportOptions opts;
  opts.run_dirs = {tmp / "good", tmp / "empty", tmp / "never_created"};
  opts.out_dir = tmp / "report";
  ReportResult res = write_report(opts);
  REQUIRE(res.warnings.size() == 2);
  CHECK(res.warnings[0].find("no artifacts found") != std::string::npos);
  CHECK(res.warnings[1].find("not a directory") != std::string::npos);
  const std::string runs = testutil::read_file(opts.out_dir / "runs.csv");
  CHECK(count_lines(runs) == 2);
}

TEST_CASE("reports with nothing usable are usage errors") {
  testutil::TempDir tmp;
  fs::create_directories(tmp / "empty");
  ReportOptions opts;
  opts.out_dir = tmp / "report";
  CHECK_THROWS_AS((void)write_report(opts), UsageError);
  opts.run_dirs = {tmp / "empty"};
  CHECK_THROWS_AS((void)write_report(opts), UsageError);
}

TEST_SUITE_END();
