// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "moelab/curvature.hpp"
#include "moelab/rng.hpp"

namespace testutil {

/// Unique directory under the system temp root, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    std::random_device rd;
    char buf[64];
    std::snprintf(buf, sizeof buf, "moelab-test-%08x-%u", rd(),
                  counter.fetch_add(1));
    path_ = std::filesystem::temp_directory_path() / buf;
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Central-difference gradient of f at x.
inline std::vector<double> fd_gradient(moelab::ScalarFunction& f,
                                       std::span<const double> x, double eps) {
  std::vector<double> xp(x.begin(), x.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = xp[i];
    xp[i] = xi + eps;
    const double up = f.value(xp);
    xp[i] = xi - eps;
    const double dn = f.value(xp);
    xp[i] = xi;
    g[i] = (up - dn) / (2.0 * eps);
  }
  return g;
}

/// Central difference of the analytic gradient along v: approximates H·v.
inline std::vector<double> fd_hvp(moelab::ScalarFunction& f,
                                  std::span<const double> x,
                                  std::span<const double> v, double eps) {
  std::vector<double> xp(x.begin(), x.end());
  std::vector<double> gp(x.size()), gn(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xp[i] = x[i] + eps * v[i];
  f.gradient(xp, gp);
  for (std::size_t i = 0; i < x.size(); ++i) xp[i] = x[i] - eps * v[i];
  f.gradient(xp, gn);
  std::vector<double> hv(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) hv[i] = (gp[i] - gn[i]) / (2.0 * eps);
  return hv;
}

/// max_i |a_i - b_i| / max(||a||_inf, ||b||_inf, floor)
inline double max_rel_err(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-10) {
  double scale = floor, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::fabs(a[i]), std::fabs(b[i])});
    diff = std::max(diff, std::fabs(a[i] - b[i]));
  }
  return diff / scale;
}

/// Dense Hessian via n HVPs against unit vectors, then symmetrized.
inline std::vector<double> dense_hessian(moelab::ScalarFunction& f,
                                         std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<double> h(n * n, 0.0), e(n, 0.0), col(n);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    f.hvp(x, e, col);
    e[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i) h[i * n + j] = col[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = 0.5 * (h[i * n + j] + h[j * n + i]);
      h[i * n + j] = m;
      h[j * n + i] = m;
    }
  }
  return h;
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. On return evals[j] pairs
/// with the eigenvector stored in column j of evecs (row-major n x n).
inline void jacobi_eig(int n, std::vector<double> a, std::vector<double>* evals,
                       std::vector<double>* evecs) {
  std::vector<double>& v = *evecs;
  v.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = 1.0;
  auto A = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };
  auto V = [&](int i, int j) -> double& { return v[static_cast<std::size_t>(i) * n + j]; };
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < n; ++i) {
          const double aip = A(i, p), aiq = A(i, q);
          A(i, p) = c * aip - s * aiq;
          A(i, q) = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          const double api = A(p, i), aqi = A(q, i);
          A(p, i) = c * api - s * aqi;
          A(q, i) = s * api + c * aqi;
        }
        for (int i = 0; i < n; ++i) {
          const double vip = V(i, p), viq = V(i, q);
          V(i, p) = c * vip - s * viq;
          V(i, q) = s * vip + c * viq;
        }
      }
    }
  }
  evals->resize(n);
  for (int i = 0; i < n; ++i) (*evals)[i] = A(i, i);
}

/// f(x) = 0.5 * sum_i diag_i * x_i^2; Hessian is diag(diag).
class Quadratic final : public moelab::ScalarFunction {
 public:
  explicit Quadratic(std::vector<double> diag) : diag_(std::move(diag)) {}
  std::size_t dim() const override { return diag_.size(); }
  double value(std::span<const double> x) override {
    check_dim(x.size(), "x");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += 0.5 * diag_[i] * x[i] * x[i];
    return s;
  }
  void gradient(std::span<const double> x, std::span<double> g) override {
    check_dim(x.size(), "x");
    check_dim(g.size(), "g");
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = diag_[i] * x[i];
  }
  double hvp(std::span<const double> x, std::span<const double> v,
             std::span<double> hv) override {
    check_dim(v.size(), "v");
    check_dim(hv.size(), "hv");
    for (std::size_t i = 0; i < v.size(); ++i) hv[i] = diag_[i] * v[i];
    return value(x);
  }

 private:
  std::vector<double> diag_;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace testutil
