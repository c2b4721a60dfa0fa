// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "moelab/config.hpp"
#include "moelab/errors.hpp"

using namespace moelab;

namespace {

// 10 classes, `per_class` records each, cycling labels; 3073-byte records.
void write_fake_cifar(const std::filesystem::path& file, int records, int salt) {
  std::ofstream f(file, std::ios::binary);
  for (int r = 0; r < records; ++r) {
    const unsigned char label = static_cast<unsigned char>(r % 10);
    f.put(static_cast<char>(label));
    for (int p = 0; p < 3072; ++p) {
      f.put(static_cast<char>((r * 31 + p * 7 + salt) % 256));
    }
  }
}

}  // namespace

TEST_SUITE_BEGIN("config");

TEST_CASE("an empty string parses to the default config") {
  LabConfig cfg = parse_lab_config("");
  CHECK(cfg.model.head == "dense");
  CHECK(cfg.train.epochs == 60);
  CHECK(cfg.data.source == "auto");
  CHECK(cfg.bench.device == "cpu");
}

TEST_CASE("the canonical dump is a serialization fixpoint") {
  LabConfig cfg = parse_lab_config("");
  const std::string once = dump_lab_config(cfg);
  const std::string twice = dump_lab_config(parse_lab_config(once));
  CHECK(once == twice);
  CHECK(once.find("\"model\"") != std::string::npos);
  CHECK(once.find("\"bench\"") != std::string::npos);
}

TEST_CASE("partial configs inherit defaults for missing keys") {
  LabConfig cfg = parse_lab_config(R"({"train":{"lr":0.125,"epochs":3}})");
  CHECK(cfg.train.lr == 0.125);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.momentum == 0.9);  // untouched default
  CHECK(cfg.model.experts == 1);
}

TEST_CASE("unknown keys and malformed JSON are rejected") {
  CHECK_THROWS_AS((void)parse_lab_config(R"({"modell":{}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"model":{"bogus":1}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"train":{"lr":0.1,)"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config("[1,2]"), ConfigError);
}

TEST_CASE("typed getters enforce their JSON types") {
  CHECK_THROWS_AS((void)parse_lab_config(R"({"train":{"lr":"fast"}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"model":{"experts":2.5}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"train":{"seed":-3}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"train":{"drop_last":1}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"model":{"head":7}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"bench":{"batch_sizes":3}})"), ConfigError);
  // Whole-valued floats are accepted as integers.
  LabConfig cfg = parse_lab_config(R"({"model":{"experts":4.0}})");
  CHECK(cfg.model.experts == 4);
}

TEST_CASE("validation rejects out-of-range values") {
  CHECK_THROWS_AS((void)parse_lab_config(R"({"train":{"momentum":1.0}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"train":{"lr":0.0}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"train":{"lr_schedule":"step"}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"bench":{"measured":9}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"bench":{"warmup":0}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"bench":{"device":"gpu"}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"data":{"spread":0.0}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"data":{"classes":1}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"curvature":{"samples":1}})"), ConfigError);
  CHECK_THROWS_AS((void)parse_lab_config(R"({"model":{"head":"mixture"}})"), ConfigError);
}

TEST_CASE("overrides patch dotted paths with typed values") {
  const std::string base = R"({"train":{"lr":0.05}})";
  std::vector<std::string> ov{"train.lr=0.1", "model.head=sparse",
                              "data.normalize=false", "train.epochs=7"};
  LabConfig cfg = parse_lab_config(apply_overrides(base, ov));
  CHECK(cfg.train.lr == 0.1);
  CHECK(cfg.model.head == "sparse");
  CHECK(cfg.data.normalize == false);
  CHECK(cfg.train.epochs == 7);

  // Quoted values parse as JSON strings; bare words fall back to strings.
  LabConfig q = parse_lab_config(apply_overrides("", {R"(model.head="hard")",
                                                      "model.k=1"}));
  CHECK(q.model.head == "hard");
  CHECK(q.model.k == 1);
}

TEST_CASE("override syntax errors are usage errors") {
  CHECK_THROWS_AS((void)apply_overrides("", {"no_equals"}), UsageError);
  CHECK_THROWS_AS((void)apply_overrides("", {"=5"}), UsageError);
  CHECK_THROWS_AS((void)apply_overrides("", {"train..lr=1"}), UsageError);
  CHECK_THROWS_AS((void)apply_overrides(R"({"train":{"lr":0.05}})",
                                        {"train.lr.deep=1"}),
                  UsageError);
  // Overrides inventing unknown keys still fail at parse time.
  CHECK_THROWS_AS((void)parse_lab_config(apply_overrides("", {"model.width=3"})),
                  ConfigError);
}

TEST_CASE("the config hash is 16 hex digits and tracks content") {
  LabConfig a = parse_lab_config("");
  const std::string ha = config_hash(a);
  REQUIRE(ha.size() == 16);
  CHECK(ha.find_first_not_of("0123456789abcdef") == std::string::npos);
  CHECK(config_hash(parse_lab_config(dump_lab_config(a))) == ha);

  LabConfig b = parse_lab_config(R"({"train":{"lr":0.051}})");
  CHECK(config_hash(b) != ha);
}

TEST_CASE("synthetic loading subsamples, splits and normalizes") {
  unsetenv("MOE_LAB_DATA_DIR");
  DataConfig dc;
  dc.source = "synthetic";
  dc.classes = 3;
  dc.clusters_per_class = 1;
  dc.dim = 5;
  dc.n_per_class = 50;
  dc.spread = 0.4;
  dc.seed = 11;
  dc.train_count = 90;
  dc.val_count = 30;
  dc.test_count = 30;
  LoadedData ld = load_data(dc);
  CHECK(ld.source_used == "synthetic");
  CHECK(ld.train.rows() == 90);
  CHECK(ld.val.rows() == 30);
  CHECK(ld.test.rows() == 30);
  CHECK(ld.train.dim() == 5);
  CHECK(ld.train.classes == 3);

  // Per-dimension standardization on the training split.
  for (int j = 0; j < 5; ++j) {
    double mean = 0;
    for (int i = 0; i < 90; ++i) mean += ld.train.features.at(i, j);
    mean /= 90;
    CHECK(std::fabs(mean) < 1e-9);
    double var = 0;
    for (int i = 0; i < 90; ++i) {
      const double d = ld.train.features.at(i, j) - mean;
      var += d * d;
    }
    var /= 90;
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }

  LoadedData again = load_data(dc);
  CHECK(again.train.features.d == ld.train.features.d);
  CHECK(again.val.labels == ld.val.labels);
}

TEST_CASE("auto falls back to synthetic without a data directory") {
  unsetenv("MOE_LAB_DATA_DIR");
  DataConfig dc;
  dc.source = "auto";
  dc.classes = 2;
  dc.clusters_per_class = 1;
  dc.dim = 4;
  dc.n_per_class = 30;
  dc.train_count = 30;
  dc.val_count = 15;
  dc.test_count = 15;
  LoadedData ld = load_data(dc);
  CHECK(ld.source_used == "synthetic");
}

TEST_CASE("a directory of cifar batches is merged, split and normalized") {
  testutil::TempDir dir;
  write_fake_cifar(dir / "data_batch_1.bin", 30, 0);
  write_fake_cifar(dir / "data_batch_2.bin", 30, 5);

  DataConfig dc;
  dc.source = "cifar10";
  dc.data_dir = dir.path().string();
  dc.train_count = 20;
  dc.val_count = 10;
  dc.test_count = 10;
  LoadedData ld = load_data(dc);
  CHECK(ld.source_used == "cifar10:" + dir.path().string());
  CHECK(ld.train.rows() == 20);
  CHECK(ld.val.rows() == 10);
  CHECK(ld.test.rows() == 10);
  CHECK(ld.train.dim() == 3072);
  CHECK(ld.train.classes == 10);
  CHECK(ld.stats.mean.size() == 3);  // three channel groups

  // auto prefers cifar when the directory holds .bin files.
  dc.source = "auto";
  LoadedData auto_ld = load_data(dc);
  CHECK(auto_ld.source_used == "cifar10:" + dir.path().string());
}

TEST_CASE("the data directory falls back to MOE_LAB_DATA_DIR") {
  testutil::TempDir dir;
  write_fake_cifar(dir / "data_batch_1.bin", 60, 2);
  setenv("MOE_LAB_DATA_DIR", dir.path().string().c_str(), 1);

  DataConfig dc;
  dc.source = "cifar10";
  dc.train_count = 20;
  dc.val_count = 10;
  dc.test_count = 10;
  LoadedData ld = load_data(dc);
  CHECK(ld.source_used == "cifar10:" + dir.path().string());
  unsetenv("MOE_LAB_DATA_DIR");

  // Without the variable the same config cannot resolve a directory.
  CHECK_THROWS_AS((void)load_data(dc), ConfigError);
}

TEST_CASE("loading fails cleanly when the dataset is too small") {
  unsetenv("MOE_LAB_DATA_DIR");
  DataConfig dc;
  dc.source = "synthetic";
  dc.classes = 2;
  dc.clusters_per_class = 1;
  dc.dim = 4;
  dc.n_per_class = 10;  // 20 rows total
  dc.train_count = 30;
  dc.val_count = 5;
  dc.test_count = 5;
  CHECK_THROWS_AS((void)load_data(dc), ConfigError);
}

TEST_CASE("check_compat rejects shape and class mismatches") {
  Dataset ds = synth_clusters(1, 3, 1, 6, 10, 0.3);
  ModelConfig mc;
  mc.backbone = {};
  mc.input_dim = 6;
  mc.feature_dim = 6;
  mc.classes = 3;
  CHECK_NOTHROW(check_compat(ds, mc));
  mc.input_dim = 7;
  CHECK_THROWS_AS(check_compat(ds, mc), ConfigError);
  mc.input_dim = 6;
  mc.classes = 4;
  CHECK_THROWS_AS(check_compat(ds, mc), ConfigError);
}

TEST_SUITE_END();
