// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/tensor.hpp"

#include <atomic>
#include <cmath>

#include "moelab/errors.hpp"

namespace moelab {

namespace memtrack {
namespace {
std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

std::size_t live_bytes() { return g_live.load(std::memory_order_relaxed); }
std::size_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }
void reset_peak() { g_peak.store(g_live.load(std::memory_order_relaxed), std::memory_order_relaxed); }

namespace detail {
void add(std::size_t bytes) {
  std::size_t now = g_live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  std::size_t peak = g_peak.load(std::memory_order_relaxed);
  while (now > peak &&
         !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}
void sub(std::size_t bytes) { g_live.fetch_sub(bytes, std::memory_order_relaxed); }
}  // namespace detail
}  // namespace memtrack

Mat Mat::full(int r, int c, double v) {
  Mat m(r, c);
  for (double& x : m.d) x = v;
  return m;
}

Mat Mat::from(int r, int c, std::initializer_list<double> vals) {
  if (static_cast<std::size_t>(r) * c != vals.size()) {
    throw InternalError("Mat::from: value count does not match shape");
  }
  Mat m(r, c);
  std::size_t i = 0;
  for (double v : vals) m.d[i++] = v;
  return m;
}

bool Mat::all_finite() const {
  for (double v : d) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace kern {

void mm_nn(Mat& c, const Mat& a, const Mat& b) {
  // i-k-j order: inner loop streams contiguous rows of B and C.
  const int m = a.rows, kk = a.cols, n = b.cols;
  for (int i = 0; i < m; ++i) {
    double* ci = c.row(i);
    const double* ai = a.row(i);
    for (int k = 0; k < kk; ++k) {
      const double aik = ai[k];
      const double* bk = b.row(k);
      for (int j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

void mm_nt(Mat& c, const Mat& a, const Mat& b) {
  // C[i,j] += dot(A row i, B row j); both rows contiguous.
  const int m = a.rows, kk = a.cols, n = b.rows;
  for (int i = 0; i < m; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (int j = 0; j < n; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (int k = 0; k < kk; ++k) s += ai[k] * bj[k];
      ci[j] += s;
    }
  }
}

void mm_tn(Mat& c, const Mat& a, const Mat& b) {
  // C[i,j] += sum_k A[k,i]·B[k,j]; rank-1 update per k keeps rows contiguous.
  const int m = a.cols, kk = a.rows, n = b.cols;
  for (int k = 0; k < kk; ++k) {
    const double* ak = a.row(k);
    const double* bk = b.row(k);
    for (int i = 0; i < m; ++i) {
      const double aki = ak[i];
      double* ci = c.row(i);
      for (int j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
}

Mat linear(const Mat& x, const Mat& w, const Mat& b) {
  Mat y(x.rows, w.cols);
  mm_nn(y, x, w);
  if (b.size() != 0) {
    for (int i = 0; i < y.rows; ++i) {
      double* yi = y.row(i);
      const double* bb = b.row(0);
      for (int j = 0; j < y.cols; ++j) yi[j] += bb[j];
    }
  }
  return y;
}

double relu_s(double x) { return x > 0.0 ? x : 0.0; }

double softplus_s(double x) {
  // max(x,0) + log1p(exp(-|x|)): no overflow for any finite x.
  return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double sigmoid_s(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

Mat relu(const Mat& x) {
  Mat y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) y.d[i] = relu_s(x.d[i]);
  return y;
}

Mat softplus(const Mat& x) {
  Mat y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) y.d[i] = softplus_s(x.d[i]);
  return y;
}

Mat softmax_rows(const Mat& z) {
  Mat s(z.rows, z.cols);
  for (int i = 0; i < z.rows; ++i) {
    const double* zi = z.row(i);
    double* si = s.row(i);
    double mx = zi[0];
    for (int j = 1; j < z.cols; ++j) mx = zi[j] > mx ? zi[j] : mx;
    double sum = 0.0;
    for (int j = 0; j < z.cols; ++j) {
      si[j] = std::exp(zi[j] - mx);
      sum += si[j];
    }
    for (int j = 0; j < z.cols; ++j) si[j] /= sum;
  }
  return s;
}

Mat standardize_rows(const Mat& z, double eps) {
  // Term-for-term mirror of the tape composition:
  // mu = row_mean(z); c = z - mu; var = row_mean(c*c); out = c / (sqrt(var)+eps).
  const int n = z.cols;
  Mat out(z.rows, z.cols);
  for (int i = 0; i < z.rows; ++i) {
    const double* zi = z.row(i);
    double* oi = out.row(i);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += zi[j];
    const double mu = sum / n;
    double sq = 0.0;
    for (int j = 0; j < n; ++j) {
      const double c = zi[j] - mu;
      sq += c * c;
    }
    const double denom = std::sqrt(sq / n) + eps;
    for (int j = 0; j < n; ++j) oi[j] = (zi[j] - mu) / denom;
  }
  return out;
}

}  // namespace kern

}  // namespace moelab
