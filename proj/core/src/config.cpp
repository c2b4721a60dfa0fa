// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "moelab/errors.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> known) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    bool ok = false;
    for (const char* k : known) {
      if (key == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("unknown config key '" + where + key + "'");
  }
}

const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

std::string at(const std::string& where, const char* key) {
  return where + key;
}

double get_double(const json& v, const std::string& name) {
  if (!v.is_number()) throw ConfigError("config key '" + name + "' must be a number");
  return v.get<double>();
}

int get_int(const json& v, const std::string& name) {
  if (v.is_number_integer()) return v.get<int>();
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d == std::floor(d)) return static_cast<int>(d);
  }
  throw ConfigError("config key '" + name + "' must be an integer");
}

std::uint64_t get_u64(const json& v, const std::string& name) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer()) {
    const std::int64_t i = v.get<std::int64_t>();
    if (i >= 0) return static_cast<std::uint64_t>(i);
  }
  throw ConfigError("config key '" + name + "' must be a non-negative integer");
}

bool get_bool(const json& v, const std::string& name) {
  if (!v.is_boolean()) throw ConfigError("config key '" + name + "' must be a boolean");
  return v.get<bool>();
}

std::string get_string(const json& v, const std::string& name) {
  if (!v.is_string()) throw ConfigError("config key '" + name + "' must be a string");
  return v.get<std::string>();
}

std::vector<int> get_int_list(const json& v, const std::string& name) {
  if (!v.is_array()) throw ConfigError("config key '" + name + "' must be an array");
  std::vector<int> out;
  out.reserve(v.size());
  for (const auto& e : v) out.push_back(get_int(e, name + "[]"));
  return out;
}

void parse_model(const json& obj, ModelConfig* m) {
  const std::string w = "model.";
  check_keys(obj, w,
             {"backbone", "input_dim", "feature_dim", "head", "experts",
              "expert_hidden", "k", "classes", "lambda_kl", "lambda_imp",
              "lambda_load", "seed"});
  if (auto* v = find(obj, "backbone")) m->backbone = get_int_list(*v, at(w, "backbone"));
  if (auto* v = find(obj, "input_dim")) m->input_dim = get_int(*v, at(w, "input_dim"));
  if (auto* v = find(obj, "feature_dim")) m->feature_dim = get_int(*v, at(w, "feature_dim"));
  if (auto* v = find(obj, "head")) m->head = get_string(*v, at(w, "head"));
  if (auto* v = find(obj, "experts")) m->experts = get_int(*v, at(w, "experts"));
  if (auto* v = find(obj, "expert_hidden")) m->expert_hidden = get_int(*v, at(w, "expert_hidden"));
  if (auto* v = find(obj, "k")) m->k = get_int(*v, at(w, "k"));
  if (auto* v = find(obj, "classes")) m->classes = get_int(*v, at(w, "classes"));
  if (auto* v = find(obj, "lambda_kl")) m->lambda_kl = get_double(*v, at(w, "lambda_kl"));
  if (auto* v = find(obj, "lambda_imp")) m->lambda_imp = get_double(*v, at(w, "lambda_imp"));
  if (auto* v = find(obj, "lambda_load")) m->lambda_load = get_double(*v, at(w, "lambda_load"));
  if (auto* v = find(obj, "seed")) m->seed = get_u64(*v, at(w, "seed"));
}

void parse_train(const json& obj, TrainConfig* t) {
  const std::string w = "train.";
  check_keys(obj, w,
             {"epochs", "batch_size", "lr", "momentum", "weight_decay",
              "lr_schedule", "seed", "drop_last"});
  if (auto* v = find(obj, "epochs")) t->epochs = get_int(*v, at(w, "epochs"));
  if (auto* v = find(obj, "batch_size")) t->batch_size = get_int(*v, at(w, "batch_size"));
  if (auto* v = find(obj, "lr")) t->lr = get_double(*v, at(w, "lr"));
  if (auto* v = find(obj, "momentum")) t->momentum = get_double(*v, at(w, "momentum"));
  if (auto* v = find(obj, "weight_decay")) t->weight_decay = get_double(*v, at(w, "weight_decay"));
  if (auto* v = find(obj, "lr_schedule")) t->lr_schedule = get_string(*v, at(w, "lr_schedule"));
  if (auto* v = find(obj, "seed")) t->seed = get_u64(*v, at(w, "seed"));
  if (auto* v = find(obj, "drop_last")) t->drop_last = get_bool(*v, at(w, "drop_last"));
}

void parse_data(const json& obj, DataConfig* d) {
  const std::string w = "data.";
  check_keys(obj, w,
             {"source", "data_dir", "train_count", "val_count", "test_count",
              "classes", "clusters_per_class", "dim", "n_per_class", "spread",
              "seed", "normalize"});
  if (auto* v = find(obj, "source")) d->source = get_string(*v, at(w, "source"));
  if (auto* v = find(obj, "data_dir")) d->data_dir = get_string(*v, at(w, "data_dir"));
  if (auto* v = find(obj, "train_count")) d->train_count = get_int(*v, at(w, "train_count"));
  if (auto* v = find(obj, "val_count")) d->val_count = get_int(*v, at(w, "val_count"));
  if (auto* v = find(obj, "test_count")) d->test_count = get_int(*v, at(w, "test_count"));
  if (auto* v = find(obj, "classes")) d->classes = get_int(*v, at(w, "classes"));
  if (auto* v = find(obj, "clusters_per_class"))
    d->clusters_per_class = get_int(*v, at(w, "clusters_per_class"));
  if (auto* v = find(obj, "dim")) d->dim = get_int(*v, at(w, "dim"));
  if (auto* v = find(obj, "n_per_class")) d->n_per_class = get_int(*v, at(w, "n_per_class"));
  if (auto* v = find(obj, "spread")) d->spread = get_double(*v, at(w, "spread"));
  if (auto* v = find(obj, "seed")) d->seed = get_u64(*v, at(w, "seed"));
  if (auto* v = find(obj, "normalize")) d->normalize = get_bool(*v, at(w, "normalize"));
}

void parse_curvature(const json& obj, CurvatureConfig* c) {
  const std::string w = "curvature.";
  check_keys(obj, w,
             {"tol", "max_iters", "samples", "alpha_min", "alpha_max",
              "alpha_points", "seed"});
  if (auto* v = find(obj, "tol")) c->tol = get_double(*v, at(w, "tol"));
  if (auto* v = find(obj, "max_iters")) c->max_iters = get_int(*v, at(w, "max_iters"));
  if (auto* v = find(obj, "samples")) c->samples = get_int(*v, at(w, "samples"));
  if (auto* v = find(obj, "alpha_min")) c->alpha_min = get_double(*v, at(w, "alpha_min"));
  if (auto* v = find(obj, "alpha_max")) c->alpha_max = get_double(*v, at(w, "alpha_max"));
  if (auto* v = find(obj, "alpha_points")) c->alpha_points = get_int(*v, at(w, "alpha_points"));
  if (auto* v = find(obj, "seed")) c->seed = get_u64(*v, at(w, "seed"));
}

void parse_bench(const json& obj, BenchConfig* b) {
  const std::string w = "bench.";
  check_keys(obj, w, {"batch_sizes", "warmup", "measured", "seed", "device"});
  if (auto* v = find(obj, "batch_sizes")) b->batch_sizes = get_int_list(*v, at(w, "batch_sizes"));
  if (auto* v = find(obj, "warmup")) b->warmup = get_int(*v, at(w, "warmup"));
  if (auto* v = find(obj, "measured")) b->measured = get_int(*v, at(w, "measured"));
  if (auto* v = find(obj, "seed")) b->seed = get_u64(*v, at(w, "seed"));
  if (auto* v = find(obj, "device")) b->device = get_string(*v, at(w, "device"));
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("train.lr must be > 0");
  if (!(momentum >= 0 && momentum < 1)) {
    throw ConfigError("train.momentum must be in [0, 1)");
  }
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw ConfigError("train.lr_schedule must be constant or cosine");
  }
}

void DataConfig::validate() const {
  if (source != "auto" && source != "synthetic" && source != "cifar10") {
    throw ConfigError("data.source must be auto, synthetic or cifar10");
  }
  if (train_count < 1 || val_count < 1 || test_count < 1) {
    throw ConfigError("data split counts must be >= 1");
  }
  if (classes < 2) throw ConfigError("data.classes must be >= 2");
  if (clusters_per_class < 1) throw ConfigError("data.clusters_per_class must be >= 1");
  if (dim < 1) throw ConfigError("data.dim must be >= 1");
  if (n_per_class < 1) throw ConfigError("data.n_per_class must be >= 1");
  if (!(spread > 0)) throw ConfigError("data.spread must be > 0");
}

void CurvatureConfig::validate() const {
  if (!(tol > 0)) throw ConfigError("curvature.tol must be > 0");
  if (max_iters < 1) throw ConfigError("curvature.max_iters must be >= 1");
  if (samples < 2) throw ConfigError("curvature.samples must be >= 2");
  if (alpha_points < 1) throw ConfigError("curvature.alpha_points must be >= 1");
  if (alpha_max < alpha_min) throw ConfigError("curvature.alpha_max must be >= alpha_min");
}

void BenchConfig::validate() const {
  if (batch_sizes.empty()) throw ConfigError("bench.batch_sizes must be nonempty");
  for (int b : batch_sizes) {
    if (b < 1) throw ConfigError("bench.batch_sizes entries must be >= 1");
  }
  if (warmup < 1) throw ConfigError("bench.warmup must be >= 1");
  if (measured < 10) throw ConfigError("bench.measured must be >= 10");
  if (device != "cpu") {
    throw ConfigError("bench.device '" + device + "' is reserved; only cpu is available");
  }
}

void LabConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  curvature.validate();
  bench.validate();
}

LabConfig parse_lab_config(const std::string& json_text) {
  LabConfig cfg;
  if (json_text.empty()) {
    cfg.validate();
    return cfg;
  }
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be a JSON object");
  check_keys(root, "", {"model", "train", "data", "curvature", "bench"});
  if (auto* v = find(root, "model")) parse_model(*v, &cfg.model);
  if (auto* v = find(root, "train")) parse_train(*v, &cfg.train);
  if (auto* v = find(root, "data")) parse_data(*v, &cfg.data);
  if (auto* v = find(root, "curvature")) parse_curvature(*v, &cfg.curvature);
  if (auto* v = find(root, "bench")) parse_bench(*v, &cfg.bench);
  cfg.validate();
  return cfg;
}

std::string dump_lab_config(const LabConfig& cfg) {
  json j;
  json& m = j["model"];
  m["backbone"] = cfg.model.backbone;
  m["input_dim"] = cfg.model.input_dim;
  m["feature_dim"] = cfg.model.feature_dim;
  m["head"] = cfg.model.head;
  m["experts"] = cfg.model.experts;
  m["expert_hidden"] = cfg.model.expert_hidden;
  m["k"] = cfg.model.k;
  m["classes"] = cfg.model.classes;
  m["lambda_kl"] = cfg.model.lambda_kl;
  m["lambda_imp"] = cfg.model.lambda_imp;
  m["lambda_load"] = cfg.model.lambda_load;
  m["seed"] = cfg.model.seed;
  json& t = j["train"];
  t["epochs"] = cfg.train.epochs;
  t["batch_size"] = cfg.train.batch_size;
  t["lr"] = cfg.train.lr;
  t["momentum"] = cfg.train.momentum;
  t["weight_decay"] = cfg.train.weight_decay;
  t["lr_schedule"] = cfg.train.lr_schedule;
  t["seed"] = cfg.train.seed;
  t["drop_last"] = cfg.train.drop_last;
  json& d = j["data"];
  d["source"] = cfg.data.source;
  d["data_dir"] = cfg.data.data_dir;
  d["train_count"] = cfg.data.train_count;
  d["val_count"] = cfg.data.val_count;
  d["test_count"] = cfg.data.test_count;
  d["classes"] = cfg.data.classes;
  d["clusters_per_class"] = cfg.data.clusters_per_class;
  d["dim"] = cfg.data.dim;
  d["n_per_class"] = cfg.data.n_per_class;
  d["spread"] = cfg.data.spread;
  d["seed"] = cfg.data.seed;
  d["normalize"] = cfg.data.normalize;
  json& c = j["curvature"];
  c["tol"] = cfg.curvature.tol;
  c["max_iters"] = cfg.curvature.max_iters;
  c["samples"] = cfg.curvature.samples;
  c["alpha_min"] = cfg.curvature.alpha_min;
  c["alpha_max"] = cfg.curvature.alpha_max;
  c["alpha_points"] = cfg.curvature.alpha_points;
  c["seed"] = cfg.curvature.seed;
  json& b = j["bench"];
  b["batch_sizes"] = cfg.bench.batch_sizes;
  b["warmup"] = cfg.bench.warmup;
  b["measured"] = cfg.bench.measured;
  b["seed"] = cfg.bench.seed;
  b["device"] = cfg.bench.device;
  return j.dump();
}

std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::string>& overrides) {
  json root;
  if (json_text.empty()) {
    root = json::object();
  } else {
    try {
      root = json::parse(json_text);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw UsageError("override '" + kv + "' is not of the form key.path=value");
    }
    const std::string path = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // bare strings need no quotes

    json* node = &root;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string tok = path.substr(start, dot - start);
      if (tok.empty()) throw UsageError("override path '" + path + "' has an empty segment");
      if (dot == std::string::npos) {
        (*node)[tok] = value;
        break;
      }
      node = &(*node)[tok];
      if (!node->is_object() && !node->is_null()) {
        throw UsageError("override path '" + path + "' crosses a non-object value");
      }
      start = dot + 1;
    }
  }
  return root.dump();
}

std::string config_hash(const LabConfig& cfg) {
  const std::uint64_t h = fnv1a(dump_lab_config(cfg));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 16);
}

namespace {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw UsageError("cannot open data file '" + p.string() + "'");
  std::vector<char> tmp((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
  return {tmp.begin(), tmp.end()};
}

std::vector<std::filesystem::path> cifar_bins(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(dir, ec)) {
    if (e.is_regular_file() && e.path().extension() == ".bin") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

Dataset load_cifar_dir(const std::string& dir) {
  const auto files = cifar_bins(dir);
  if (files.empty()) {
    throw ConfigError("no CIFAR-10 .bin files found in '" + dir + "'");
  }
  Dataset all;
  for (const auto& p : files) {
    Dataset part = parse_cifar10(read_file_bytes(p));
    if (all.rows() == 0) {
      all = std::move(part);
    } else {
      const int r0 = all.rows();
      Mat merged(r0 + part.rows(), all.dim());
      std::copy_n(all.features.d.data(), all.features.size(), merged.d.data());
      std::copy_n(part.features.d.data(), part.features.size(),
                  merged.d.data() + all.features.size());
      all.features = std::move(merged);
      all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
      (void)r0;
    }
  }
  return all;
}

}  // namespace

LoadedData load_data(const DataConfig& cfg) {
  cfg.validate();
  std::string dir = cfg.data_dir;
  if (dir.empty()) {
    if (const char* env = std::getenv("MOE_LAB_DATA_DIR")) dir = env;
  }
  std::string source = cfg.source;
  if (source == "auto") {
    source = (!dir.empty() && !cifar_bins(dir).empty()) ? "cifar10" : "synthetic";
  }

  Dataset full;
  int groups = 0;
  if (source == "cifar10") {
    if (dir.empty()) {
      throw ConfigError(
          "data.source cifar10 needs data.data_dir or MOE_LAB_DATA_DIR");
    }
    full = load_cifar_dir(dir);
    groups = 3;
  } else {
    full = synth_clusters(cfg.seed, cfg.classes, cfg.clusters_per_class, cfg.dim,
                          cfg.n_per_class, cfg.spread);
    groups = cfg.dim;
  }

  const int want = cfg.train_count + cfg.val_count + cfg.test_count;
  if (full.rows() < want) {
    throw ConfigError("dataset has " + std::to_string(full.rows()) +
                      " examples, split counts need " + std::to_string(want));
  }
  Dataset sub = stratified_subsample(full, want, cfg.seed);
  const double total = static_cast<double>(want);
  const std::array<double, 3> fractions{cfg.train_count / total,
                                        cfg.val_count / total,
                                        cfg.test_count / total};
  auto splits = split_dataset(sub, fractions, cfg.seed);

  LoadedData out;
  out.train = std::move(splits[0]);
  out.val = std::move(splits[1]);
  out.test = std::move(splits[2]);
  if (cfg.normalize) {
    out.stats = compute_norm(out.train, groups);
    apply_norm(out.train, out.stats);
    apply_norm(out.val, out.stats);
    apply_norm(out.test, out.stats);
  }
  out.source_used = source == "cifar10" ? "cifar10:" + dir : "synthetic";
  return out;
}

void check_compat(const Dataset& train, const ModelConfig& model) {
  if (train.dim() != model.input_dim) {
    throw ConfigError("data dimension " + std::to_string(train.dim()) +
                      " does not match model.input_dim " +
                      std::to_string(model.input_dim));
  }
  if (train.classes != model.classes) {
    throw ConfigError("data has " + std::to_string(train.classes) +
                      " classes, model.classes is " + std::to_string(model.classes));
  }
}

}  // namespace moelab
