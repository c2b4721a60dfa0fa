// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// moe-lab: train MoE classifier heads, analyze curvature and routing,
// benchmark inference, and consolidate run artifacts.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moelab/artifacts.hpp"
#include "moelab/bench.hpp"
#include "moelab/config.hpp"
#include "moelab/curvature.hpp"
#include "moelab/errors.hpp"
#include "moelab/model.hpp"
#include "moelab/moe.hpp"
#include "moelab/report.hpp"
#include "moelab/train.hpp"

namespace {

using namespace moelab;

std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct Resolved {
  LabConfig cfg;
  std::string canonical;
  std::string hash;
};

Resolved resolve_config(const std::string& config_path,
                        const std::vector<std::string>& sets) {
  std::string text = config_path.empty() ? "" : read_text_file(config_path);
  if (!sets.empty()) text = apply_overrides(text, sets);
  Resolved r;
  r.cfg = parse_lab_config(text);
  r.canonical = dump_lab_config(r.cfg);
  r.hash = config_hash(r.cfg);
  return r;
}

Resolved resolve_from_checkpoint(const Checkpoint& ck,
                                 const std::vector<std::string>& sets) {
  std::string text = ck.config_json;
  if (!sets.empty()) text = apply_overrides(text, sets);
  Resolved r;
  r.cfg = parse_lab_config(text);
  r.canonical = dump_lab_config(r.cfg);
  r.hash = config_hash(r.cfg);
  return r;
}

Model model_from_checkpoint(const Checkpoint& ck, const ModelConfig& cfg) {
  Model m = Model::build(cfg);
  if (ck.params.size() != m.param_count()) {
    throw DataFormatError("checkpoint has " + std::to_string(ck.params.size()) +
                          " parameters, config expects " +
                          std::to_string(m.param_count()));
  }
  auto p = m.mutable_params();
  std::copy(ck.params.begin(), ck.params.end(), p.begin());
  return m;
}

const Dataset& pick_split(const LoadedData& data, const std::string& name) {
  if (name == "train") return data.train;
  if (name == "val") return data.val;
  if (name == "test") return data.test;
  throw UsageError("unknown split '" + name + "' (expected train, val or test)");
}

int run_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out) {
  Resolved r = resolve_config(config_path, sets);
  RunLock lock(out);
  atomic_write_file(std::filesystem::path(out) / "config.json", r.canonical + "\n");

  LoadedData data = load_data(r.cfg.data);
  check_compat(data.train, r.cfg.model);
  Model model = Model::build(r.cfg.model);

  TrainSink sink;
  sink.out_dir = out;
  sink.config_json = r.canonical;
  sink.config_hash = r.hash;
  sink.overrides = sets;
  sink.data_source = data.source_used;
  RunMetrics m = train(model, data, r.cfg.train, sink);

  std::printf("train: data=%s epochs=%d M_A=%.4f ETT=%d V_A=%.4f ETT=%d out=%s\n",
              data.source_used.c_str(), r.cfg.train.epochs, m.m_a, m.ett_m_a,
              m.v_a, m.ett_v_a, out.c_str());
  return 0;
}

int run_analyze_hessian(const std::string& ckpt_path,
                        const std::vector<std::string>& sets,
                        std::vector<std::string> splits, std::string out) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Resolved r = resolve_from_checkpoint(ck, sets);
  Model model = model_from_checkpoint(ck, r.cfg.model);
  LoadedData data = load_data(r.cfg.data);
  check_compat(data.train, r.cfg.model);

  if (splits.empty()) splits.push_back("train");
  for (const auto& s : splits) pick_split(data, s);
  if (out.empty()) {
    out = std::filesystem::path(ckpt_path).parent_path().string();
    if (out.empty()) out = ".";
  }
  RunLock lock(out);
  const CurvatureConfig& cc = r.cfg.curvature;

  CsvWriter curvature(std::filesystem::path(out) / "curvature.csv");
  curvature.line(artifact_stamp(r.hash, cc.seed));
  curvature.line("metric,split,value,stderr_or_residual,iters_or_samples,seed");

  std::vector<SweepRow> sweep_rows;
  std::vector<int> flips;
  bool have_sweep = false;
  bool sweep_has_flips = false;

  for (std::size_t i = 0; i < splits.size(); ++i) {
    const Dataset& ds = pick_split(data, splits[i]);
    PowerResult pr = lambda_max(model, ds, cc.tol, cc.max_iters, cc.seed);
    if (!pr.converged) {
      std::fprintf(stderr,
                   "moe-lab: warning: lambda_max on split %s unconverged after "
                   "%d iterations (residual %g)\n",
                   splits[i].c_str(), pr.iters, pr.residual);
    }
    curvature.line("lambda_max," + splits[i] + "," + format_double(pr.lambda) +
                   "," + format_double(pr.residual) + "," +
                   std::to_string(pr.iters) + "," + std::to_string(cc.seed));
    TraceResult tr = hessian_trace(model, ds, cc.samples, cc.seed);
    curvature.line("hessian_trace," + splits[i] + "," + format_double(tr.estimate) + "," +
                   format_double(tr.stderr_of_mean) + "," +
                   std::to_string(tr.samples) + "," + std::to_string(cc.seed));
    std::printf("analyze-hessian: split=%s lambda_max=%g (iters=%d residual=%g) "
                "trace=%g (se=%g)\n",
                splits[i].c_str(), pr.lambda, pr.iters, pr.residual, tr.estimate,
                tr.stderr_of_mean);

    // The sweep runs along the first split's dominant eigenvector.
    if (i == 0) {
      const auto alphas = alpha_grid(cc.alpha_min, cc.alpha_max, cc.alpha_points);
      SplitTaskLoss f(model, ds);
      sweep_rows = eigen_sweep(f, model.params(), pr.eigenvector, alphas);
      if (model.config().is_topk()) {
        flips = routing_flip_count(model, pr.eigenvector, alphas, ds);
        sweep_has_flips = true;
      }
      have_sweep = true;
    }
  }
  curvature.finalize();

  if (have_sweep) {
    CsvWriter sweep(std::filesystem::path(out) / "sweep.csv");
    sweep.line(artifact_stamp(r.hash, cc.seed));
    sweep.line(sweep_has_flips ? "alpha,loss,flip_count" : "alpha,loss");
    for (std::size_t i = 0; i < sweep_rows.size(); ++i) {
      std::string row = format_double(sweep_rows[i].alpha) + "," +
                        format_double(sweep_rows[i].loss);
      if (sweep_has_flips) row += "," + std::to_string(flips[i]);
      sweep.line(row);
    }
    sweep.finalize();
  }
  std::printf("analyze-hessian: wrote %s/curvature.csv and %s/sweep.csv\n",
              out.c_str(), out.c_str());
  return 0;
}

int run_analyze_routing(const std::string& ckpt_path,
                        const std::vector<std::string>& sets,
                        const std::string& split, std::string out) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Resolved r = resolve_from_checkpoint(ck, sets);
  if (!r.cfg.model.is_moe()) {
    throw UsageError("routing analysis needs a MoE head (soft, sparse or hard)");
  }
  Model model = model_from_checkpoint(ck, r.cfg.model);
  LoadedData data = load_data(r.cfg.data);
  check_compat(data.train, r.cfg.model);
  const Dataset& ds = pick_split(data, split);
  if (out.empty()) {
    out = std::filesystem::path(ckpt_path).parent_path().string();
    if (out.empty()) out = ".";
  }
  RunLock lock(out);

  RoutingAccum accum(r.cfg.model.classes, r.cfg.model.experts);
  constexpr int kChunk = 512;
  for (int start = 0; start < ds.rows(); start += kChunk) {
    const int n = std::min(kChunk, ds.rows() - start);
    Mat x(n, ds.dim());
    for (int row = 0; row < n; ++row) {
      std::copy_n(ds.features.row(start + row), ds.dim(), x.row(row));
    }
    const auto fwd = model.forward_eval(x);
    for (int row = 0; row < n; ++row) {
      accum.add(std::span<const double>(fwd.weights.row(row),
                                        static_cast<std::size_t>(fwd.weights.cols)),
                ds.labels[static_cast<std::size_t>(start + row)]);
    }
  }
  RoutingStats stats = accum.finalize();

  CsvWriter util(std::filesystem::path(out) / "utilization.csv");
  util.line(artifact_stamp(r.hash, ck.seed));
  util.line("expert,utilization");
  double entropy = 0.0;
  for (std::size_t e = 0; e < stats.utilization.size(); ++e) {
    util.line(std::to_string(e) + "," + format_double(stats.utilization[e]));
    const double u = stats.utilization[e];
    if (u > 0) entropy -= u * std::log(u);
  }
  util.finalize();

  CsvWriter ce(std::filesystem::path(out) / "class_expert.csv");
  ce.line(artifact_stamp(r.hash, ck.seed));
  std::string header = "class";
  for (int e = 0; e < stats.class_expert.cols; ++e) {
    header += ",expert_" + std::to_string(e);
  }
  ce.line(header);
  for (int c = 0; c < stats.class_expert.rows; ++c) {
    std::string row = std::to_string(c);
    for (int e = 0; e < stats.class_expert.cols; ++e) {
      row += "," + format_double(stats.class_expert.at(c, e));
    }
    ce.line(row);
  }
  ce.finalize();

  std::printf("analyze-routing: split=%s utilization entropy=%.6f (ln N=%.6f) out=%s\n",
              split.c_str(), entropy,
              std::log(static_cast<double>(r.cfg.model.experts)), out.c_str());
  return 0;
}

int run_bench(const std::string& config_path, const std::vector<std::string>& sets,
              std::vector<std::string> heads, const std::string& out) {
  Resolved r = resolve_config(config_path, sets);
  if (heads.empty()) heads.push_back(r.cfg.model.head);
  for (const auto& h : heads) {
    if (std::count(heads.begin(), heads.end(), h) > 1) {
      throw UsageError("duplicate head '" + h + "' in bench list");
    }
  }
  RunLock lock(out);

  std::vector<BenchRow> rows;
  for (const auto& h : heads) {
    ModelConfig mc = r.cfg.model;
    mc.head = h;
    if (h == "hard") mc.k = 1;
    Model m = Model::build(mc);
    auto part = bench(m, h, r.cfg.bench);
    rows.insert(rows.end(), part.begin(), part.end());
    for (const auto& row : part) {
      std::printf("bench: model=%s batch=%d ms=%.4f iqr=%.4f img/s=%.1f peak=%zu\n",
                  row.model.c_str(), row.batch_size, row.ms_per_batch_median,
                  row.ms_iqr, row.img_per_s, row.peak_mem_bytes);
    }
  }

  CsvWriter csv(std::filesystem::path(out) / "bench.csv");
  csv.line(artifact_stamp(r.hash, r.cfg.bench.seed));
  csv.line("model,batch_size,params_m,ms_per_batch_median,ms_iqr,img_per_s,peak_mem_bytes");
  for (const auto& row : rows) {
    csv.line(row.model + "," + std::to_string(row.batch_size) + "," +
             format_double(row.params_m) + "," +
             format_double(row.ms_per_batch_median) + "," +
             format_double(row.ms_iqr) + "," + format_double(row.img_per_s) +
             "," + std::to_string(row.peak_mem_bytes));
  }
  csv.finalize();

  if (heads.size() >= 2) {
    auto entries = compare_report(rows);
    CsvWriter cmp(std::filesystem::path(out) / "compare.csv");
    cmp.line(artifact_stamp(r.hash, r.cfg.bench.seed));
    cmp.line("model,batch_size,ms_ratio_vs_dense,img_ratio_vs_dense,sparse_slower_than_soft");
    for (const auto& e : entries) {
      std::string row = e.model + "," + std::to_string(e.batch_size) + "," +
                        format_double(e.ms_ratio_vs_dense) + "," +
                        format_double(e.img_ratio_vs_dense) + ",";
      if (e.has_soft_flag) row += e.sparse_slower_than_soft ? "1" : "0";
      cmp.line(row);
    }
    cmp.finalize();
  }
  std::printf("bench: wrote %s/bench.csv\n", out.c_str());
  return 0;
}

int run_report(const std::vector<std::string>& run_dirs, const std::string& out,
               bool force) {
  ReportOptions opts;
  for (const auto& d : run_dirs) opts.run_dirs.push_back(d);
  opts.out_dir = out;
  opts.force = force;
  ReportResult res = write_report(opts);
  for (const auto& w : res.warnings) {
    std::fprintf(stderr, "moe-lab: warning: %s\n", w.c_str());
  }
  std::printf("report: wrote %zu files to %s\n", res.written.size(), out.c_str());
  return 0;
}

const char* error_kind(int exit_code) {
  switch (exit_code) {
    case 2:
      return "usage";
    case 3:
      return "config";
    case 4:
      return "data-format";
    case 5:
      return "numeric";
    default:
      return "internal";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixture-of-experts laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_path, split = "train";
  std::vector<std::string> sets, splits, heads, run_dirs;
  bool force = false;

  auto* t = app.add_subcommand("train", "train a model and write run artifacts");
  t->add_option("--config", config_path, "JSON config file");
  t->add_option("--set", sets, "dotted-path override, key.path=value");
  t->add_option("--out", out_dir, "run directory")->required();

  auto* h = app.add_subcommand("analyze-hessian",
                               "curvature diagnostics at a checkpoint");
  h->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  h->add_option("--set", sets, "dotted-path override, key.path=value");
  h->add_option("--split", splits, "split to analyze (repeatable)");
  h->add_option("--out", out_dir, "output directory (default: checkpoint dir)");

  auto* rt = app.add_subcommand("analyze-routing",
                                "expert utilization and class-expert matrix");
  rt->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  rt->add_option("--set", sets, "dotted-path override, key.path=value");
  rt->add_option("--split", split, "split to analyze");
  rt->add_option("--out", out_dir, "output directory (default: checkpoint dir)");

  auto* b = app.add_subcommand("bench", "wall-clock inference benchmark");
  b->add_option("--config", config_path, "JSON config file");
  b->add_option("--set", sets, "dotted-path override, key.path=value");
  b->add_option("--head", heads, "head to bench (repeatable; default: config's)");
  b->add_option("--out", out_dir, "output directory")->required();

  auto* rp = app.add_subcommand("report", "consolidate run directories");
  rp->add_option("--run", run_dirs, "run directory (repeatable)")->required();
  rp->add_option("--out", out_dir, "output directory")->required();
  rp->add_flag("--force", force, "merge artifacts with mismatched config hashes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::fprintf(stderr, "moe-lab: usage error: %s\n", e.what());
    return 2;
  }

  try {
    if (t->parsed()) return run_train(config_path, sets, out_dir);
    if (h->parsed()) return run_analyze_hessian(ckpt_path, sets, splits, out_dir);
    if (rt->parsed()) return run_analyze_routing(ckpt_path, sets, split, out_dir);
    if (b->parsed()) return run_bench(config_path, sets, heads, out_dir);
    if (rp->parsed()) return run_report(run_dirs, out_dir, force);
    std::fprintf(stderr, "moe-lab: usage error: no command given\n");
    return 2;
  } catch (const moelab::Error& e) {
    std::fprintf(stderr, "moe-lab: %s error: %s\n", error_kind(e.exit_code()),
                 e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "moe-lab: internal error: %s\n", e.what());
    return 1;
  }
}
