// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/model.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <utility>

#include "json.hpp"
#include "moelab/errors.hpp"
#include "moelab/rng.hpp"

namespace moelab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

namespace {

using nlohmann::json;

constexpr char kCkptMagic[8] = {'M', 'O', 'E', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCkptVersion = 1;

std::string expert_prefix(int e) { return "head.e" + std::to_string(e) + "."; }

std::string layer_prefix(std::size_t i) {
  return "backbone.l" + std::to_string(i) + ".";
}

// Weight matrices draw uniform (-1/sqrt(fan_in), 1/sqrt(fan_in)) from a
// stream keyed by the slice name, so identically named slices initialize
// identically across architectures. Biases and the noise projection stay 0.
void init_weight(std::vector<double>& params, const ParamSlice& s,
                 std::uint64_t seed) {
  Rng rng(seed, fnv1a(s.name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(s.rows));
  for (std::size_t i = 0; i < s.count(); ++i) {
    params[s.offset + i] = (2.0 * rng.uniform() - 1.0) * bound;
  }
}

// Layer widths along the backbone: input, hidden sizes, feature dim. An
// empty hidden list means the identity backbone (no layers at all).
std::vector<int> backbone_dims(const ModelConfig& cfg) {
  std::vector<int> dims;
  dims.push_back(cfg.input_dim);
  if (!cfg.backbone.empty()) {
    for (int s : cfg.backbone) dims.push_back(s);
    dims.push_back(cfg.feature_dim);
  }
  return dims;
}

int num_experts(const ModelConfig& cfg) {
  return cfg.head == "dense" ? 1 : cfg.experts;
}

}  // namespace

void ModelConfig::validate() const {
  if (head != "dense" && head != "soft" && head != "sparse" && head != "hard") {
    throw ConfigError("unknown head kind '" + head +
                      "' (expected dense, soft, sparse or hard)");
  }
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (expert_hidden < 1) throw ConfigError("expert_hidden must be >= 1");
  if (classes < 2) throw ConfigError("classes must be >= 2");
  for (int s : backbone) {
    if (s < 1) throw ConfigError("backbone sizes must be >= 1");
  }
  if (backbone.empty() && input_dim != feature_dim) {
    throw ConfigError(
        "empty backbone requires input_dim == feature_dim (features are the "
        "raw input)");
  }
  if (is_moe()) {
    if (experts < 1) throw ConfigError("experts must be >= 1");
  }
  if (head == "sparse") {
    if (k < 1 || k > experts) {
      throw ConfigError("sparse head requires 1 <= k <= experts, got k=" +
                        std::to_string(k) + ", experts=" +
                        std::to_string(experts));
    }
  }
  if (head == "hard" && k != 1) {
    throw ConfigError("hard head requires k == 1, got k=" + std::to_string(k));
  }
  if (lambda_kl < 0 || lambda_imp < 0 || lambda_load < 0) {
    throw ConfigError("loss weights must be >= 0");
  }
}

void ParamLayout::add(const std::string& name, int rows, int cols) {
  if (has(name)) throw InternalError("duplicate param slice '" + name + "'");
  ParamSlice s;
  s.name = name;
  s.offset = total_;
  s.rows = rows;
  s.cols = cols;
  total_ += s.count();
  slices_.push_back(std::move(s));
}

std::size_t ParamLayout::index(const std::string& name) const {
  for (std::size_t i = 0; i < slices_.size(); ++i) {
    if (slices_[i].name == name) return i;
  }
  throw InternalError("unknown param slice '" + name + "'");
}

const ParamSlice& ParamLayout::slice(const std::string& name) const {
  return slices_[index(name)];
}

bool ParamLayout::has(const std::string& name) const {
  for (const auto& s : slices_) {
    if (s.name == name) return true;
  }
  return false;
}

Tensor Bound::get(const std::string& name) const {
  return tensors[layout->index(name)];
}

FlopCounts count_flops(const ModelConfig& cfg) {
  cfg.validate();
  FlopCounts f;
  const auto dims = backbone_dims(cfg);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    f.backbone += static_cast<std::uint64_t>(dims[i]) * dims[i + 1];
  }
  const std::uint64_t per_expert =
      static_cast<std::uint64_t>(cfg.feature_dim) * cfg.expert_hidden +
      static_cast<std::uint64_t>(cfg.expert_hidden) * cfg.classes;
  if (cfg.head == "dense") {
    f.gate = 0;
    f.experts_total = per_expert;
    f.experts_active = per_expert;
  } else {
    f.gate = static_cast<std::uint64_t>(cfg.feature_dim) * cfg.experts;
    f.experts_total = per_expert * cfg.experts;
    f.experts_active =
        cfg.head == "soft" ? f.experts_total
                           : per_expert * static_cast<std::uint64_t>(cfg.effective_k());
  }
  return f;
}

Model Model::build(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;

  const auto dims = backbone_dims(cfg);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    m.layout_.add(layer_prefix(i) + "w", dims[i], dims[i + 1]);
    m.layout_.add(layer_prefix(i) + "b", 1, dims[i + 1]);
  }
  const int n = num_experts(cfg);
  for (int e = 0; e < n; ++e) {
    m.layout_.add(expert_prefix(e) + "w1", cfg.feature_dim, cfg.expert_hidden);
    m.layout_.add(expert_prefix(e) + "b1", 1, cfg.expert_hidden);
    m.layout_.add(expert_prefix(e) + "w2", cfg.expert_hidden, cfg.classes);
    m.layout_.add(expert_prefix(e) + "b2", 1, cfg.classes);
  }
  if (cfg.is_moe()) {
    m.layout_.add("head.gate.w", cfg.feature_dim, cfg.experts);
    m.layout_.add("head.gate.b", 1, cfg.experts);
    if (cfg.is_topk()) m.layout_.add("head.noise.w", cfg.feature_dim, cfg.experts);
  }

  m.params_.assign(m.layout_.total(), 0.0);
  for (const auto& s : m.layout_.slices()) {
    const bool is_weight = s.name.ends_with(".w") || s.name.ends_with(".w1") ||
                           s.name.ends_with(".w2");
    if (is_weight && s.name != "head.noise.w") init_weight(m.params_, s, cfg.seed);
  }
  return m;
}

std::size_t Model::head_param_count() const {
  std::size_t n = 0;
  for (const auto& s : layout_.slices()) {
    if (s.name.starts_with("head.")) n += s.count();
  }
  return n;
}

Bound Model::bind(Tape& t) const { return bind(t, params_, {}); }

Bound Model::bind(Tape& t, std::span<const double> x,
                  std::span<const double> tangent) const {
  if (x.size() != layout_.total()) {
    throw UsageError("parameter vector has size " + std::to_string(x.size()) +
                     ", layout expects " + std::to_string(layout_.total()));
  }
  if (!tangent.empty() && tangent.size() != layout_.total()) {
    throw UsageError("tangent vector size mismatch");
  }
  Bound b;
  b.layout = &layout_;
  b.tensors.reserve(layout_.slices().size());
  for (const auto& s : layout_.slices()) {
    Mat v(s.rows, s.cols);
    std::copy_n(x.data() + s.offset, s.count(), v.d.data());
    if (tangent.empty()) {
      b.tensors.push_back(t.leaf(std::move(v)));
    } else {
      Mat tv(s.rows, s.cols);
      std::copy_n(tangent.data() + s.offset, s.count(), tv.d.data());
      b.tensors.push_back(t.leaf(std::move(v), std::move(tv)));
    }
  }
  return b;
}

void Model::read_grads(const Tape& t, const Bound& b, std::span<double> g) const {
  if (g.size() != layout_.total()) throw UsageError("gradient buffer size mismatch");
  for (std::size_t i = 0; i < layout_.slices().size(); ++i) {
    const auto& s = layout_.slices()[i];
    const Mat& gm = t.grad(b.tensors[i]);
    std::copy_n(gm.d.data(), s.count(), g.data() + s.offset);
  }
}

void Model::read_grad_tangents(const Tape& t, const Bound& b,
                               std::span<double> hv) const {
  if (hv.size() != layout_.total()) throw UsageError("hvp buffer size mismatch");
  for (std::size_t i = 0; i < layout_.slices().size(); ++i) {
    const auto& s = layout_.slices()[i];
    const Mat& gm = t.grad_tangent(b.tensors[i]);
    std::copy_n(gm.d.data(), s.count(), hv.data() + s.offset);
  }
}

namespace {

Tensor expert_fwd(Tape& t, const Bound& b, int e, Tensor h) {
  const std::string p = expert_prefix(e);
  Tensor a = t.relu(t.add_bias(t.matmul(h, b.get(p + "w1")), b.get(p + "b1")));
  return t.add_bias(t.matmul(a, b.get(p + "w2")), b.get(p + "b2"));
}

Mat expert_fwd_eval(const std::vector<Mat>& mats, const ParamLayout& layout,
                    int e, const Mat& h) {
  const std::string p = expert_prefix(e);
  Mat a = kern::relu(kern::linear(h, mats[layout.index(p + "w1")],
                                  mats[layout.index(p + "b1")]));
  return kern::linear(a, mats[layout.index(p + "w2")],
                      mats[layout.index(p + "b2")]);
}

// Rows routed to each expert, ascending, from per-row ascending selections.
std::vector<std::vector<int>> rows_by_expert(
    const std::vector<std::vector<int>>& selected, int experts) {
  std::vector<std::vector<int>> rows(static_cast<std::size_t>(experts));
  for (std::size_t r = 0; r < selected.size(); ++r) {
    for (int e : selected[r]) rows[static_cast<std::size_t>(e)].push_back(static_cast<int>(r));
  }
  return rows;
}

}  // namespace

Model::TapeForward Model::forward(Tape& t, const Bound& b, const Mat& x,
                                  bool training, Rng* noise_rng) const {
  if (x.cols != cfg_.input_dim) {
    throw ConfigError("input has " + std::to_string(x.cols) +
                      " columns, model expects " + std::to_string(cfg_.input_dim));
  }
  if (x.rows < 1) throw ConfigError("input batch is empty");

  Tensor h = t.constant(x);
  const auto dims = backbone_dims(cfg_);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::string p = layer_prefix(i);
    h = t.relu(t.add_bias(t.matmul(h, b.get(p + "w")), b.get(p + "b")));
  }

  TapeForward out;
  if (cfg_.head == "dense") {
    out.logits = expert_fwd(t, b, 0, h);
    return out;
  }

  out.has_gate = true;
  if (cfg_.head == "soft") {
    out.gate = gate_soft(t, h, b.get("head.gate.w"), b.get("head.gate.b"));
    Tensor acc;
    for (int e = 0; e < cfg_.experts; ++e) {
      Tensor ye = expert_fwd(t, b, e, h);
      std::vector<int> rows(static_cast<std::size_t>(x.rows));
      std::vector<int> cols(static_cast<std::size_t>(x.rows), e);
      for (int r = 0; r < x.rows; ++r) rows[static_cast<std::size_t>(r)] = r;
      Tensor we = t.gather_pairs(out.gate.weights, std::move(rows), std::move(cols));
      Tensor yw = t.mul_bcast_col(ye, we);
      acc = (e == 0) ? yw : t.add(acc, yw);
    }
    out.logits = acc;
    return out;
  }

  out.gate = gate_noisy_topk(t, h, b.get("head.gate.w"), b.get("head.gate.b"),
                             b.get("head.noise.w"), cfg_.effective_k(), training,
                             noise_rng);
  const auto rows = rows_by_expert(out.gate.selected, cfg_.experts);
  Tensor acc;
  bool first = true;
  // Expert-major dispatch in fixed expert order: gather the routed rows, run
  // the expert once, weight, scatter back. Unselected experts never run.
  for (int e = 0; e < cfg_.experts; ++e) {
    const auto& re = rows[static_cast<std::size_t>(e)];
    if (re.empty()) continue;
    Tensor xe = t.gather_rows(h, re);
    Tensor ye = expert_fwd(t, b, e, xe);
    std::vector<int> cols(re.size(), e);
    Tensor we = t.gather_pairs(out.gate.weights, re, std::move(cols));
    Tensor yw = t.mul_bcast_col(ye, we);
    Tensor se = t.scatter_rows(yw, re, x.rows);
    acc = first ? se : t.add(acc, se);
    first = false;
  }
  if (first) throw InternalError("top-k gate selected no experts");
  out.logits = acc;
  return out;
}

Model::Losses Model::build_loss(Tape& t, const TapeForward& f,
                                const std::vector<int>& labels,
                                bool training) const {
  Losses out;
  out.task = t.cross_entropy_mean(f.logits, labels);
  if (training && f.has_gate) {
    std::vector<Tensor> terms;
    if (cfg_.head == "soft" && cfg_.lambda_kl > 0) {
      terms.push_back(t.scale(loss_kl_uniform(t, f.gate.weights), cfg_.lambda_kl));
    }
    if (cfg_.is_topk()) {
      if (cfg_.lambda_imp > 0) {
        terms.push_back(t.scale(loss_importance(t, f.gate.weights), cfg_.lambda_imp));
      }
      if (cfg_.lambda_load > 0) {
        terms.push_back(t.scale(
            loss_load(t, f.gate.clean_std, f.gate.noisy, f.gate.noise_std,
                      cfg_.effective_k()),
            cfg_.lambda_load));
      }
    }
    if (!terms.empty()) {
      Tensor aux = terms[0];
      for (std::size_t i = 1; i < terms.size(); ++i) aux = t.add(aux, terms[i]);
      out.aux = aux;
      out.has_aux = true;
    }
  }
  out.total = out.has_aux ? t.add(out.task, out.aux) : out.task;
  return out;
}

namespace {

Model::EvalOut eval_impl(const ModelConfig& cfg, const ParamLayout& layout,
                         const std::vector<Mat>& mats, const Mat& x) {
  if (x.cols != cfg.input_dim) {
    throw ConfigError("input has " + std::to_string(x.cols) +
                      " columns, model expects " + std::to_string(cfg.input_dim));
  }
  if (x.rows < 1) throw ConfigError("input batch is empty");

  Mat h = x;
  const auto dims = backbone_dims(cfg);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::string p = layer_prefix(i);
    h = kern::relu(kern::linear(h, mats[layout.index(p + "w")],
                                mats[layout.index(p + "b")]));
  }

  Model::EvalOut out;
  if (cfg.head == "dense") {
    out.logits = expert_fwd_eval(mats, layout, 0, h);
    return out;
  }

  out.has_gate = true;
  const Mat& wg = mats[layout.index("head.gate.w")];
  const Mat& bg = mats[layout.index("head.gate.b")];

  if (cfg.head == "soft") {
    GateEval g = gate_soft_eval(h, wg, bg);
    Mat acc;
    for (int e = 0; e < cfg.experts; ++e) {
      Mat ye = expert_fwd_eval(mats, layout, e, h);
      // Mirrors mul_bcast_col with the gathered weight column.
      for (int r = 0; r < ye.rows; ++r) {
        const double w = g.weights.at(r, e);
        double* yr = ye.row(r);
        for (int c = 0; c < ye.cols; ++c) yr[c] = yr[c] * w;
      }
      if (e == 0) {
        acc = std::move(ye);
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) acc.d[i] += ye.d[i];
      }
    }
    out.logits = std::move(acc);
    out.weights = std::move(g.weights);
    out.selected = std::move(g.selected);
    return out;
  }

  GateEval g = gate_topk_eval(h, wg, bg, cfg.effective_k());
  const auto rows = rows_by_expert(g.selected, cfg.experts);
  Mat acc;
  bool first = true;
  for (int e = 0; e < cfg.experts; ++e) {
    const auto& re = rows[static_cast<std::size_t>(e)];
    if (re.empty()) continue;
    Mat xe(static_cast<int>(re.size()), h.cols);
    for (std::size_t j = 0; j < re.size(); ++j) {
      std::copy_n(h.row(re[j]), h.cols, xe.row(static_cast<int>(j)));
    }
    Mat ye = expert_fwd_eval(mats, layout, e, xe);
    Mat se(x.rows, ye.cols);
    for (std::size_t j = 0; j < re.size(); ++j) {
      const double w = g.weights.at(re[j], e);
      const double* yr = ye.row(static_cast<int>(j));
      double* sr = se.row(re[j]);
      for (int c = 0; c < ye.cols; ++c) sr[c] += yr[c] * w;
    }
    if (first) {
      acc = std::move(se);
      first = false;
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc.d[i] += se.d[i];
    }
  }
  if (first) throw InternalError("top-k gate selected no experts");
  out.logits = std::move(acc);
  out.weights = std::move(g.weights);
  out.selected = std::move(g.selected);
  return out;
}

}  // namespace

const std::vector<Mat>& Model::slice_mats() const {
  if (cache_dirty_) {
    cache_.clear();
    cache_.reserve(layout_.slices().size());
    for (const auto& s : layout_.slices()) {
      Mat v(s.rows, s.cols);
      std::copy_n(params_.data() + s.offset, s.count(), v.d.data());
      cache_.push_back(std::move(v));
    }
    cache_dirty_ = false;
  }
  return cache_;
}

Model::EvalOut Model::forward_eval(const Mat& x) const {
  return eval_impl(cfg_, layout_, slice_mats(), x);
}

Model::EvalOut Model::forward_eval_at(const ModelConfig& cfg,
                                      const ParamLayout& layout,
                                      std::span<const double> params,
                                      const Mat& x) {
  if (params.size() != layout.total()) {
    throw UsageError("parameter vector size mismatch");
  }
  std::vector<Mat> mats;
  mats.reserve(layout.slices().size());
  for (const auto& s : layout.slices()) {
    Mat v(s.rows, s.cols);
    std::copy_n(params.data() + s.offset, s.count(), v.d.data());
    mats.push_back(std::move(v));
  }
  return eval_impl(cfg, layout, mats, x);
}

namespace {

void append_u64(std::string& buf, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  buf.append(b, 8);
}

void append_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

std::uint32_t crc_of(const std::string& buf) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(buf.data()),
              static_cast<uInt>(buf.size())));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const std::string& config_json_text, std::uint64_t seed,
                     std::span<const double> params) {
  json cfg;
  try {
    cfg = json::parse(config_json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  json header;
  header["config"] = cfg;
  header["format_version"] = kCkptVersion;
  header["param_count"] = params.size();
  header["seed"] = seed;
  const std::string htext = header.dump();

  std::string buf;
  buf.reserve(8 + 4 + 8 + htext.size() + params.size() * 8 + 4);
  buf.append(kCkptMagic, 8);
  append_u32(buf, kCkptVersion);
  append_u64(buf, htext.size());
  buf.append(htext);
  buf.append(reinterpret_cast<const char*>(params.data()), params.size() * 8);
  append_u32(buf, crc_of(buf));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw UsageError("cannot open '" + tmp.string() + "' for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw UsageError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open checkpoint '" + path.string() + "'");
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  const std::size_t kFixed = 8 + 4 + 8;
  if (buf.size() < kFixed + 4) {
    throw DataFormatError("checkpoint '" + path.string() + "' is truncated");
  }
  if (std::memcmp(buf.data(), kCkptMagic, 8) != 0) {
    throw DataFormatError("checkpoint '" + path.string() + "' has bad magic bytes");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, buf.data() + 8, 4);
  if (version != kCkptVersion) {
    throw DataFormatError("checkpoint version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kCkptVersion) + ")");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, buf.data() + 12, 8);
  if (kFixed + hlen + 4 > buf.size()) {
    throw DataFormatError("checkpoint '" + path.string() + "' is truncated");
  }

  std::uint32_t stored_crc = 0;
  std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
  const std::string body = buf.substr(0, buf.size() - 4);
  if (crc_of(body) != stored_crc) {
    throw DataFormatError("checkpoint '" + path.string() + "' failed its checksum");
  }

  json header;
  try {
    header = json::parse(buf.substr(kFixed, hlen));
  } catch (const json::exception& e) {
    throw DataFormatError(std::string("checkpoint header is not valid JSON: ") +
                          e.what());
  }
  if (!header.contains("config") || !header.contains("param_count") ||
      !header.contains("seed")) {
    throw DataFormatError("checkpoint header is missing required fields");
  }

  Checkpoint ck;
  ck.config_json = header["config"].dump();
  ck.seed = header["seed"].get<std::uint64_t>();
  const std::uint64_t n = header["param_count"].get<std::uint64_t>();
  const std::size_t blob_off = kFixed + hlen;
  if (blob_off + n * 8 + 4 != buf.size()) {
    throw DataFormatError("checkpoint blob length does not match param_count");
  }
  ck.params.resize(n);
  std::memcpy(ck.params.data(), buf.data() + blob_off, n * 8);
  return ck;
}

}  // namespace moelab
