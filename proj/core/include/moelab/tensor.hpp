// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <vector>

namespace moelab {

/// Tracks live and peak bytes of all Mat buffers in the process. The bench
/// harness reads the high-water mark; everything else can ignore this.
namespace memtrack {

std::size_t live_bytes();
std::size_t peak_bytes();
void reset_peak();  ///< peak := live

namespace detail {
void add(std::size_t bytes);
void sub(std::size_t bytes);
}  // namespace detail

template <class T>
struct Alloc {
  using value_type = T;
  Alloc() = default;
  template <class U>
  Alloc(const Alloc<U>&) {}
  T* allocate(std::size_t n) {
    detail::add(n * sizeof(T));
    return std::allocator<T>().allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::sub(n * sizeof(T));
    std::allocator<T>().deallocate(p, n);
  }
  friend bool operator==(const Alloc&, const Alloc&) { return true; }
  friend bool operator!=(const Alloc&, const Alloc&) { return false; }
};

}  // namespace memtrack

using dvec = std::vector<double, memtrack::Alloc<double>>;

/// Dense row-major float64 matrix. Vectors are 1xN or Nx1, scalars 1x1.
struct Mat {
  int rows = 0;
  int cols = 0;
  dvec d;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, 0.0) {}

  static Mat zeros(int r, int c) { return Mat(r, c); }
  static Mat full(int r, int c, double v);
  static Mat from(int r, int c, std::initializer_list<double> vals);

  double& at(int i, int j) { return d[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const { return d[static_cast<std::size_t>(i) * cols + j]; }
  double* row(int i) { return d.data() + static_cast<std::size_t>(i) * cols; }
  const double* row(int i) const { return d.data() + static_cast<std::size_t>(i) * cols; }

  std::size_t size() const { return d.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  bool all_finite() const;
};

/// Shared numeric kernels. The tape forward and the no-graph eval forward both
/// call these, which is what makes the two paths bit-identical.
namespace kern {

void mm_nn(Mat& c, const Mat& a, const Mat& b);  ///< C += A·B
void mm_nt(Mat& c, const Mat& a, const Mat& b);  ///< C += A·Bᵀ
void mm_tn(Mat& c, const Mat& a, const Mat& b);  ///< C += Aᵀ·B

/// out = X·W, plus row-broadcast bias when b is nonempty (b is 1 x cols).
Mat linear(const Mat& x, const Mat& w, const Mat& b);

Mat relu(const Mat& x);
Mat softplus(const Mat& x);
Mat softmax_rows(const Mat& z);  ///< log-sum-exp stabilized, per row

/// Per row: (z - mean) / (sqrt(popvar) + eps). Matches the primitive
/// composition used on the tape term for term.
Mat standardize_rows(const Mat& z, double eps);

double relu_s(double x);
double softplus_s(double x);
double sigmoid_s(double x);

}  // namespace kern

}  // namespace moelab
