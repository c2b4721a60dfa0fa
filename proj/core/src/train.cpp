// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/train.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "json.hpp"
#include "moelab/artifacts.hpp"
#include "moelab/errors.hpp"
#include "moelab/rng.hpp"
#include "moelab/tape.hpp"

namespace moelab {

void sgd_step(std::span<double> params, std::span<const double> grads,
              std::span<double> velocity, double lr, double momentum,
              double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw UsageError("sgd_step: params, grads and velocity sizes differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("non-finite gradient at parameter index " +
                         std::to_string(i));
    }
    const double g = grads[i] + weight_decay * params[i];
    velocity[i] = momentum * velocity[i] + g;
    params[i] -= lr * velocity[i];
  }
}

int epoch_to_threshold(std::span<const double> series) {
  if (series.empty()) throw UsageError("epoch_to_threshold: series is empty");
  std::size_t best = 0;
  for (std::size_t i = 1; i < series.size(); ++i) {
    if (series[i] > series[best]) best = i;
  }
  return static_cast<int>(best) + 1;
}

double evaluate_accuracy(const Model& model, const Dataset& split) {
  if (split.rows() == 0) throw UsageError("cannot evaluate on an empty split");
  constexpr int kChunk = 512;
  int correct = 0;
  for (int start = 0; start < split.rows(); start += kChunk) {
    const int n = std::min(kChunk, split.rows() - start);
    Mat x(n, split.dim());
    for (int r = 0; r < n; ++r) {
      std::copy_n(split.features.row(start + r), split.dim(), x.row(r));
    }
    const auto out = model.forward_eval(x);
    for (int r = 0; r < n; ++r) {
      const double* row = out.logits.row(r);
      int arg = 0;
      for (int c = 1; c < out.logits.cols; ++c) {
        if (row[c] > row[arg]) arg = c;
      }
      if (arg == split.labels[static_cast<std::size_t>(start + r)]) ++correct;
    }
  }
  return static_cast<double>(correct) / split.rows();
}

std::string metrics_csv_header(int experts) {
  std::string h = "epoch,train_loss,task_loss,aux_loss,train_acc,val_acc";
  for (int e = 0; e < experts; ++e) h += ",util_" + std::to_string(e);
  return h;
}

namespace {

std::string row_to_csv(const EpochRow& r) {
  std::string s = std::to_string(r.epoch);
  s += "," + format_double(r.train_loss);
  s += "," + format_double(r.task_loss);
  s += "," + format_double(r.aux_loss);
  s += "," + format_double(r.train_acc);
  s += "," + format_double(r.val_acc);
  for (double u : r.utilization) s += "," + format_double(u);
  return s;
}

void write_summary(const TrainSink& sink, const RunMetrics& m, int epochs,
                   bool diverged, int diverged_epoch) {
  nlohmann::json j;
  try {
    j["config"] = nlohmann::json::parse(sink.config_json);
  } catch (const nlohmann::json::exception&) {
    j["config"] = nullptr;
  }
  j["config_hash"] = sink.config_hash;
  j["seed"] = m.seed;
  j["epochs"] = epochs;
  j["m_a"] = m.m_a;
  j["ett_m_a"] = m.ett_m_a;
  j["v_a"] = m.v_a;
  j["ett_v_a"] = m.ett_v_a;
  j["best_checkpoint"] = m.checkpoint_path.empty()
                             ? ""
                             : std::filesystem::path(m.checkpoint_path)
                                   .filename()
                                   .string();
  j["data_source"] = sink.data_source;
  j["overrides"] = sink.overrides;
  j["diverged"] = diverged;
  if (diverged) j["diverged_epoch"] = diverged_epoch;
  atomic_write_file(sink.out_dir / "summary.json", j.dump() + "\n");
}

}  // namespace

RunMetrics train(Model& model, const LoadedData& data, const TrainConfig& cfg,
                 const TrainSink& sink) {
  cfg.validate();
  check_compat(data.train, model.config());
  const bool write = !sink.out_dir.empty();
  const int util_cols = model.config().is_moe() ? model.config().experts : 1;

  RunMetrics metrics;
  metrics.seed = cfg.seed;

  std::unique_ptr<CsvWriter> csv;
  if (write) {
    std::filesystem::create_directories(sink.out_dir);
    csv = std::make_unique<CsvWriter>(sink.out_dir / "metrics.csv");
    csv->line(artifact_stamp(sink.config_hash, cfg.seed));
    csv->line(metrics_csv_header(util_cols));
  }

  std::vector<double> velocity(model.param_count(), 0.0);
  std::vector<double> grads(model.param_count(), 0.0);
  Rng noise_rng(cfg.seed, fnv1a("gate_noise"));
  Rng shuffle_base(cfg.seed, fnv1a("batch_order"));

  double best_val = -1.0;
  const auto ckpt_path = sink.out_dir / "best.ckpt";

  auto diverged_abort = [&](int epoch, const std::string& why) {
    if (write) {
      csv->finalize();
      write_summary(sink, metrics, cfg.epochs, true, epoch);
    }
    throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                       ": " + why);
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double lr = cfg.lr;
    if (cfg.lr_schedule == "cosine") {
      lr = cfg.lr * 0.5 *
           (1.0 + std::cos(std::numbers::pi * (epoch - 1) / cfg.epochs));
    }

    BatchIterator it(data.train, cfg.batch_size, shuffle_base.substream(
                                                     static_cast<std::uint64_t>(epoch)),
                     true, cfg.drop_last);
    double sum_total = 0, sum_task = 0, sum_aux = 0;
    std::vector<double> util_sum(static_cast<std::size_t>(util_cols), 0.0);
    long n_seen = 0;

    BatchIterator::Batch batch;
    while (it.next(&batch)) {
      try {
        Tape t;
        Bound bound = model.bind(t);
        auto fwd = model.forward(t, bound, batch.x, true, &noise_rng);
        auto losses = model.build_loss(t, fwd, batch.labels, true);
        const double total_v = t.val(losses.total).d[0];
        if (!std::isfinite(total_v)) {
          throw NumericError("total loss is not finite");
        }
        const double task_v = t.val(losses.task).d[0];
        const double aux_v = losses.has_aux ? t.val(losses.aux).d[0] : 0.0;

        t.backward(losses.total);
        model.read_grads(t, bound, grads);
        sgd_step(model.mutable_params(), grads, velocity, lr, cfg.momentum,
                 cfg.weight_decay);

        const int bs = batch.x.rows;
        sum_total += total_v * bs;
        sum_task += task_v * bs;
        sum_aux += aux_v * bs;
        n_seen += bs;
        if (fwd.has_gate) {
          const Mat& w = t.val(fwd.gate.weights);
          for (int r = 0; r < w.rows; ++r) {
            const double* wr = w.row(r);
            for (int e = 0; e < w.cols; ++e) util_sum[static_cast<std::size_t>(e)] += wr[e];
          }
        } else {
          util_sum[0] += bs;
        }
      } catch (const NumericError& e) {
        diverged_abort(epoch, e.what());
      }
    }
    if (n_seen == 0) throw UsageError("training split yields no batches");

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = sum_total / static_cast<double>(n_seen);
    row.task_loss = sum_task / static_cast<double>(n_seen);
    row.aux_loss = sum_aux / static_cast<double>(n_seen);
    row.train_acc = evaluate_accuracy(model, data.train);
    row.val_acc = evaluate_accuracy(model, data.val);
    row.utilization.resize(static_cast<std::size_t>(util_cols));
    for (int e = 0; e < util_cols; ++e) {
      row.utilization[static_cast<std::size_t>(e)] =
          util_sum[static_cast<std::size_t>(e)] / static_cast<double>(n_seen);
    }
    metrics.rows.push_back(row);
    if (csv) csv->line(row_to_csv(row));

    if (row.val_acc > best_val) {
      best_val = row.val_acc;
      if (write) {
        save_checkpoint(ckpt_path, sink.config_json, cfg.seed, model.params());
        metrics.checkpoint_path = ckpt_path.string();
      }
    }
  }

  std::vector<double> train_accs, val_accs;
  train_accs.reserve(metrics.rows.size());
  val_accs.reserve(metrics.rows.size());
  for (const auto& r : metrics.rows) {
    train_accs.push_back(r.train_acc);
    val_accs.push_back(r.val_acc);
  }
  metrics.ett_m_a = epoch_to_threshold(train_accs);
  metrics.m_a = train_accs[static_cast<std::size_t>(metrics.ett_m_a - 1)];
  metrics.ett_v_a = epoch_to_threshold(val_accs);
  metrics.v_a = val_accs[static_cast<std::size_t>(metrics.ett_v_a - 1)];

  if (write) {
    csv->finalize();
    write_summary(sink, metrics, cfg.epochs, false, 0);
  }
  return metrics;
}

}  // namespace moelab
