// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "moelab/errors.hpp"

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "cache and checkpoint blobs assume a little-endian host");

namespace moelab {

namespace {

constexpr int kCifarRecord = 3073;
constexpr int kCifarPixels = 3072;
constexpr double kCenterScale = 3.0;  // blob centers ~ N(0, kCenterScale^2 I)

void shuffle_indices(std::vector<int>& v, Rng& rng) {
  // Fisher-Yates; floor(uniform * (i+1)) is safe since uniform() < 1.
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(v[i - 1], v[j]);
  }
}

Dataset select_rows(const Dataset& ds, const std::vector<int>& idx,
                    const std::string& split) {
  Dataset out;
  out.features = Mat(static_cast<int>(idx.size()), ds.dim());
  out.labels.reserve(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const double* src = ds.features.row(idx[r]);
    double* dst = out.features.row(static_cast<int>(r));
    std::copy(src, src + ds.dim(), dst);
    out.labels.push_back(ds.labels[static_cast<std::size_t>(idx[r])]);
  }
  out.classes = ds.classes;
  out.source = ds.source;
  out.split = split;
  return out;
}

std::vector<std::vector<int>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<int>> per(static_cast<std::size_t>(ds.classes));
  for (int i = 0; i < ds.rows(); ++i) {
    per[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);
  }
  return per;
}

/// Largest-remainder apportionment of n items to the given fractions.
std::vector<int> apportion(int n, std::span<const double> fractions) {
  std::vector<int> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> rema;
  int assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    double exact = fractions[i] * n;
    counts[i] = static_cast<int>(exact);
    assigned += counts[i];
    rema.push_back({exact - counts[i], i});
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;  // ties keep lower split index first
  });
  for (int r = 0; r < n - assigned; ++r) counts[rema[static_cast<std::size_t>(r)].second]++;
  return counts;
}

}  // namespace

Dataset parse_cifar10(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw DataFormatError("cifar10: empty input");
  if (bytes.size() % kCifarRecord != 0) {
    throw DataFormatError(
        "cifar10: byte length " + std::to_string(bytes.size()) +
        " is not a multiple of 3073 (partial record at offset " +
        std::to_string(bytes.size() - bytes.size() % kCifarRecord) + ")");
  }
  const int n = static_cast<int>(bytes.size() / kCifarRecord);
  Dataset ds;
  ds.features = Mat(n, kCifarPixels);
  ds.labels.reserve(static_cast<std::size_t>(n));
  ds.classes = 10;
  ds.source = "cifar10";
  for (int i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + static_cast<std::size_t>(i) * kCifarRecord;
    if (rec[0] > 9) {
      throw DataFormatError("cifar10: record " + std::to_string(i) +
                            " has label byte " + std::to_string(rec[0]));
    }
    ds.labels.push_back(rec[0]);
    double* row = ds.features.row(i);
    for (int p = 0; p < kCifarPixels; ++p) row[p] = rec[1 + p] / 255.0;
  }
  return ds;
}

Dataset synth_clusters(std::uint64_t seed, int classes, int clusters_per_class,
                       int dim, int n_per_class, double spread) {
  if (classes < 1 || clusters_per_class < 1 || dim < 1 || n_per_class < 1) {
    throw UsageError("synth_clusters: all counts must be >= 1");
  }
  if (!(spread > 0.0)) throw UsageError("synth_clusters: spread must be > 0");

  Rng base(seed);
  Rng center_rng = base.substream(0);
  Rng point_rng = base.substream(1);

  std::vector<Mat> centers;
  centers.reserve(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    Mat m(clusters_per_class, dim);
    for (double& v : m.d) v = kCenterScale * center_rng.normal();
    centers.push_back(std::move(m));
  }

  Dataset ds;
  ds.features = Mat(classes * n_per_class, dim);
  ds.labels.reserve(static_cast<std::size_t>(classes) * n_per_class);
  ds.classes = classes;
  ds.source = "synthetic";
  int row = 0;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      const double* ctr = centers[static_cast<std::size_t>(c)].row(i % clusters_per_class);
      double* x = ds.features.row(row++);
      for (int j = 0; j < dim; ++j) x[j] = ctr[j] + spread * point_rng.normal();
      ds.labels.push_back(c);
    }
  }
  return ds;
}

std::array<Dataset, 3> split_dataset(const Dataset& ds,
                                     std::array<double, 3> fractions,
                                     std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw UsageError("split: fractions must be positive");
    sum += f;
  }
  if (std::fabs(sum - 1.0) > 1e-9) {
    throw UsageError("split: fractions sum to " + std::to_string(sum) + ", expected 1");
  }

  std::array<std::vector<int>, 3> picked;
  auto per_class = indices_by_class(ds);
  Rng base(seed);
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    auto& idx = per_class[c];
    Rng rng = base.substream(c);
    shuffle_indices(idx, rng);
    auto counts = apportion(static_cast<int>(idx.size()), fractions);
    std::size_t at = 0;
    for (int s = 0; s < 3; ++s) {
      for (int i = 0; i < counts[static_cast<std::size_t>(s)]; ++i) {
        picked[static_cast<std::size_t>(s)].push_back(idx[at++]);
      }
    }
  }
  static const char* kNames[3] = {"train", "val", "test"};
  std::array<Dataset, 3> out;
  for (int s = 0; s < 3; ++s) {
    auto& p = picked[static_cast<std::size_t>(s)];
    std::sort(p.begin(), p.end());  // keep original row order inside each split
    out[static_cast<std::size_t>(s)] = select_rows(ds, p, kNames[s]);
  }
  return out;
}

Dataset stratified_subsample(const Dataset& ds, int n, std::uint64_t seed) {
  if (n >= ds.rows()) return ds;
  auto per_class = indices_by_class(ds);
  std::vector<double> props;
  for (auto& idx : per_class) props.push_back(static_cast<double>(idx.size()) / ds.rows());
  auto counts = apportion(n, props);
  std::vector<int> take;
  Rng base(seed);
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    Rng rng = base.substream(c);
    shuffle_indices(per_class[c], rng);
    for (int i = 0; i < counts[c] && i < static_cast<int>(per_class[c].size()); ++i) {
      take.push_back(per_class[c][static_cast<std::size_t>(i)]);
    }
  }
  std::sort(take.begin(), take.end());
  return select_rows(ds, take, ds.split);
}

NormStats compute_norm(const Dataset& train, int groups) {
  if (groups < 1 || train.dim() % groups != 0) {
    throw UsageError("compute_norm: groups must divide the feature dimension");
  }
  const int width = train.dim() / groups;
  NormStats st;
  st.groups = groups;
  st.mean.assign(static_cast<std::size_t>(groups), 0.0);
  st.stdev.assign(static_cast<std::size_t>(groups), 0.0);
  const double count = static_cast<double>(train.rows()) * width;
  for (int i = 0; i < train.rows(); ++i) {
    const double* x = train.features.row(i);
    for (int g = 0; g < groups; ++g) {
      double s = 0.0;
      for (int j = 0; j < width; ++j) s += x[g * width + j];
      st.mean[static_cast<std::size_t>(g)] += s;
    }
  }
  for (int g = 0; g < groups; ++g) st.mean[static_cast<std::size_t>(g)] /= count;
  for (int i = 0; i < train.rows(); ++i) {
    const double* x = train.features.row(i);
    for (int g = 0; g < groups; ++g) {
      const double m = st.mean[static_cast<std::size_t>(g)];
      double s = 0.0;
      for (int j = 0; j < width; ++j) {
        const double d = x[g * width + j] - m;
        s += d * d;
      }
      st.stdev[static_cast<std::size_t>(g)] += s;
    }
  }
  for (int g = 0; g < groups; ++g) {
    st.stdev[static_cast<std::size_t>(g)] =
        std::sqrt(st.stdev[static_cast<std::size_t>(g)] / count);
  }
  return st;
}

void apply_norm(Dataset& ds, const NormStats& stats) {
  if (stats.groups < 1 || ds.dim() % stats.groups != 0) {
    throw UsageError("apply_norm: stats do not match the feature dimension");
  }
  const int width = ds.dim() / stats.groups;
  for (int i = 0; i < ds.rows(); ++i) {
    double* x = ds.features.row(i);
    for (int g = 0; g < stats.groups; ++g) {
      const double m = stats.mean[static_cast<std::size_t>(g)];
      const double s = std::max(stats.stdev[static_cast<std::size_t>(g)], 1e-12);
      for (int j = 0; j < width; ++j) x[g * width + j] = (x[g * width + j] - m) / s;
    }
  }
}

namespace {
constexpr char kCacheMagic[8] = {'M', 'O', 'E', 'D', 'A', 'T', 'A', '1'};
}

void save_cache(const std::filesystem::path& path, const Dataset& ds,
                const NormStats& stats, std::uint64_t seed) {
  nlohmann::json header;
  header["rows"] = ds.rows();
  header["dim"] = ds.dim();
  header["classes"] = ds.classes;
  header["split"] = ds.split;
  header["source"] = ds.source;
  header["labels"] = ds.labels;
  header["seed"] = seed;
  header["norm"] = {{"groups", stats.groups}, {"mean", stats.mean}, {"stdev", stats.stdev}};
  const std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataFormatError("cache: cannot open " + path.string() + " for writing");
  f.write(kCacheMagic, sizeof(kCacheMagic));
  std::uint64_t hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  f.write(reinterpret_cast<const char*>(ds.features.d.data()),
          static_cast<std::streamsize>(ds.features.size() * sizeof(double)));
  if (!f) throw DataFormatError("cache: short write to " + path.string());
}

CacheFile load_cache(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataFormatError("cache: cannot open " + path.string());
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0) {
    throw DataFormatError("cache: bad magic in " + path.string());
  }
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!f || hlen > (1ull << 30)) throw DataFormatError("cache: bad header length");
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw DataFormatError("cache: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw DataFormatError(std::string("cache: header is not valid JSON: ") + e.what());
  }

  CacheFile out;
  try {
    Dataset& ds = out.dataset;
    const int rows = header.at("rows").get<int>();
    const int dim = header.at("dim").get<int>();
    ds.classes = header.at("classes").get<int>();
    ds.split = header.at("split").get<std::string>();
    ds.source = header.at("source").get<std::string>();
    ds.labels = header.at("labels").get<std::vector<int>>();
    out.seed = header.at("seed").get<std::uint64_t>();
    out.stats.groups = header.at("norm").at("groups").get<int>();
    out.stats.mean = header.at("norm").at("mean").get<std::vector<double>>();
    out.stats.stdev = header.at("norm").at("stdev").get<std::vector<double>>();
    if (rows < 0 || dim < 0 || static_cast<int>(ds.labels.size()) != rows) {
      throw DataFormatError("cache: header counts are inconsistent");
    }
    ds.features = Mat(rows, dim);
  } catch (const nlohmann::json::exception& e) {
    throw DataFormatError(std::string("cache: malformed header: ") + e.what());
  }
  f.read(reinterpret_cast<char*>(out.dataset.features.d.data()),
         static_cast<std::streamsize>(out.dataset.features.size() * sizeof(double)));
  if (!f) throw DataFormatError("cache: truncated feature blob");
  return out;
}

BatchIterator::BatchIterator(const Dataset& ds, int batch_size, Rng rng,
                             bool shuffle, bool drop_last)
    : ds_(ds), batch_size_(batch_size), drop_last_(drop_last) {
  if (batch_size < 1) throw UsageError("batch iterator: batch size must be >= 1");
  order_.resize(static_cast<std::size_t>(ds.rows()));
  for (int i = 0; i < ds.rows(); ++i) order_[static_cast<std::size_t>(i)] = i;
  if (shuffle) shuffle_indices(order_, rng);
}

bool BatchIterator::next(Batch* out) {
  const std::size_t remaining = order_.size() - pos_;
  if (remaining == 0) return false;
  std::size_t take = std::min<std::size_t>(remaining, static_cast<std::size_t>(batch_size_));
  if (drop_last_ && take < static_cast<std::size_t>(batch_size_)) return false;
  out->x = Mat(static_cast<int>(take), ds_.dim());
  out->labels.resize(take);
  out->indices.resize(take);
  for (std::size_t r = 0; r < take; ++r) {
    const int src = order_[pos_ + r];
    std::copy(ds_.features.row(src), ds_.features.row(src) + ds_.dim(),
              out->x.row(static_cast<int>(r)));
    out->labels[r] = ds_.labels[static_cast<std::size_t>(src)];
    out->indices[r] = src;
  }
  pos_ += take;
  return true;
}

}  // namespace moelab
