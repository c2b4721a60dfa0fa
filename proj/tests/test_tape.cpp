// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "moelab/errors.hpp"
#include "moelab/rng.hpp"
#include "moelab/tape.hpp"

using namespace moelab;

namespace {

// Builds a scalar-valued graph from one differentiable leaf.
using Builder = std::function<Tensor(Tape&, Tensor)>;

double eval_scalar(const Builder& build, const Mat& x0) {
  Tape t;
  Tensor s = build(t, t.leaf(x0));
  return t.val(s).at(0, 0);
}

std::vector<double> tape_gradient(const Builder& build, const Mat& x0) {
  Tape t;
  Tensor leaf = t.leaf(x0);
  Tensor s = build(t, leaf);
  t.backward(s);
  const Mat& g = t.grad(leaf);
  return {g.d.begin(), g.d.end()};
}

// Max relative error between the tape gradient and central differences.
double grad_fd_err(const Builder& build, const Mat& x0, double eps = 1e-6) {
  const std::vector<double> g = tape_gradient(build, x0);
  std::vector<double> fd(g.size());
  Mat xp = x0;
  for (std::size_t i = 0; i < xp.d.size(); ++i) {
    const double xi = xp.d[i];
    xp.d[i] = xi + eps;
    const double up = eval_scalar(build, xp);
    xp.d[i] = xi - eps;
    const double dn = eval_scalar(build, xp);
    xp.d[i] = xi;
    fd[i] = (up - dn) / (2.0 * eps);
  }
  return testutil::max_rel_err(g, fd);
}

// Max relative error between the forward-over-reverse HVP and a central
// difference of tape gradients along v.
double hvp_fd_err(const Builder& build, const Mat& x0, const Mat& v,
                  double eps = 1e-5) {
  Tape t(true);
  Tensor leaf = t.leaf(x0, v);
  Tensor s = build(t, leaf);
  t.backward(s);
  const Mat& hvm = t.grad_tangent(leaf);
  std::vector<double> hv(hvm.d.begin(), hvm.d.end());

  Mat xp = x0, xn = x0;
  for (std::size_t i = 0; i < x0.d.size(); ++i) {
    xp.d[i] += eps * v.d[i];
    xn.d[i] -= eps * v.d[i];
  }
  const std::vector<double> gp = tape_gradient(build, xp);
  const std::vector<double> gn = tape_gradient(build, xn);
  std::vector<double> fd(hv.size());
  for (std::size_t i = 0; i < hv.size(); ++i) fd[i] = (gp[i] - gn[i]) / (2.0 * eps);
  return testutil::max_rel_err(hv, fd);
}

Mat rand_mat(int r, int c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  Rng rng(seed, 0);
  rng.fill_uniform(std::span<double>(m.d.data(), m.d.size()), lo, hi);
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("tape");

TEST_CASE("gradients of every op match finite differences") {
  struct Case {
    const char* name;
    Builder build;
    Mat x0;
  };
  const Mat x23 = rand_mat(2, 3, 1);
  const Mat x33 = rand_mat(3, 3, 2);
  const Mat pos23 = rand_mat(2, 3, 3, 0.3, 1.7);
  std::vector<Case> cases;

  cases.push_back({"matmul", [](Tape& t, Tensor a) {
    Tensor b = t.constant(rand_mat(3, 2, 10));
    return t.reduce_sum(t.matmul(a, b));
  }, x23});
  cases.push_back({"matmul_left_const", [](Tape& t, Tensor a) {
    Tensor c = t.constant(rand_mat(2, 2, 11));
    return t.reduce_sum(t.matmul(c, a));
  }, x23});
  cases.push_back({"add_bias", [](Tape& t, Tensor a) {
    Tensor b = t.constant(rand_mat(1, 3, 12));
    return t.reduce_sum(t.mul(t.add_bias(a, b), t.constant(rand_mat(2, 3, 13))));
  }, x23});
  cases.push_back({"add_bias_wrt_bias", [](Tape& t, Tensor a) {
    Tensor x = t.constant(rand_mat(4, 3, 14));
    return t.reduce_sum(t.relu(t.add_bias(x, a)));
  }, rand_mat(1, 3, 15)});
  cases.push_back({"add", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.add(a, a), t.constant(rand_mat(2, 3, 16))));
  }, x23});
  cases.push_back({"sub", [](Tape& t, Tensor a) {
    Tensor c = t.constant(rand_mat(2, 3, 17));
    return t.reduce_sum(t.mul(t.sub(a, c), a));
  }, x23});
  cases.push_back({"mul", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(a, a));
  }, x23});
  cases.push_back({"div", [](Tape& t, Tensor a) {
    Tensor c = t.constant(rand_mat(2, 3, 18, 0.5, 2.0));
    return t.reduce_sum(t.div(a, c));
  }, x23});
  cases.push_back({"div_wrt_denominator", [](Tape& t, Tensor a) {
    Tensor c = t.constant(rand_mat(2, 3, 19));
    return t.reduce_sum(t.div(c, a));
  }, pos23});
  cases.push_back({"scale_add_scalar", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.add_scalar(t.scale(a, -2.5), 0.75));
  }, x23});
  cases.push_back({"relu", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.relu(a));
  }, rand_mat(2, 3, 20, 0.2, 1.0)});
  cases.push_back({"softplus", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.softplus(a));
  }, x23});
  cases.push_back({"sqrt", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.sqrt(a));
  }, pos23});
  cases.push_back({"xlogx", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.xlogx(a));
  }, pos23});
  cases.push_back({"normal_cdf", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.normal_cdf(a));
  }, x23});
  cases.push_back({"softmax_rows", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.softmax_rows(a), t.constant(rand_mat(2, 3, 21))));
  }, x23});
  cases.push_back({"log_softmax_rows", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.log_softmax_rows(a), t.constant(rand_mat(2, 3, 22))));
  }, x23});
  cases.push_back({"row_mean", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.row_mean(a), t.constant(rand_mat(2, 1, 23))));
  }, x23});
  cases.push_back({"col_mean", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.col_mean(a), t.constant(rand_mat(1, 3, 24))));
  }, x23});
  cases.push_back({"col_sum", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.col_sum(a), t.constant(rand_mat(1, 3, 25))));
  }, x23});
  cases.push_back({"reduce_mean", [](Tape& t, Tensor a) {
    return t.reduce_mean(t.mul(a, a));
  }, x23});
  cases.push_back({"sub_bcast_col", [](Tape& t, Tensor a) {
    Tensor c = t.row_mean(a);
    return t.reduce_sum(t.mul(t.sub_bcast_col(a, c), a));
  }, x23});
  cases.push_back({"div_bcast_col", [](Tape& t, Tensor a) {
    Tensor c = t.constant(rand_mat(2, 1, 26, 0.5, 2.0));
    return t.reduce_sum(t.div_bcast_col(a, c));
  }, x23});
  cases.push_back({"div_bcast_col_wrt_col", [](Tape& t, Tensor a) {
    Tensor x = t.constant(rand_mat(2, 3, 27));
    return t.reduce_sum(t.div_bcast_col(x, a));
  }, rand_mat(2, 1, 28, 0.5, 2.0)});
  cases.push_back({"mul_bcast_col", [](Tape& t, Tensor a) {
    Tensor c = t.constant(rand_mat(2, 1, 29));
    return t.reduce_sum(t.mul(t.mul_bcast_col(a, c), a));
  }, x23});
  cases.push_back({"mul_bcast_col_wrt_col", [](Tape& t, Tensor a) {
    Tensor x = t.constant(rand_mat(2, 3, 30));
    return t.reduce_sum(t.mul_bcast_col(x, a));
  }, rand_mat(2, 1, 31)});
  cases.push_back({"concat_rows", [](Tape& t, Tensor a) {
    Tensor c = t.constant(rand_mat(1, 3, 32));
    return t.reduce_sum(t.mul(t.concat_rows(a, c), t.constant(rand_mat(3, 3, 33))));
  }, x23});
  cases.push_back({"gather_rows", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.gather_rows(a, {2, 0, 2}), t.constant(rand_mat(3, 3, 34))));
  }, x33});
  cases.push_back({"scatter_rows", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.scatter_rows(a, {3, 1}, 4), t.constant(rand_mat(4, 3, 35))));
  }, x23});
  cases.push_back({"gather_cols", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.gather_cols(a, {0, 2, 1, 1}, 2), t.constant(rand_mat(2, 2, 36))));
  }, x23});
  cases.push_back({"scatter_cols", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.scatter_cols(a, {0, 2, 1, 3}, 4), t.constant(rand_mat(2, 4, 37))));
  }, rand_mat(2, 2, 38)});
  cases.push_back({"gather_pairs", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.gather_pairs(a, {0, 1, 1}, {2, 0, 1}),
                              t.constant(rand_mat(3, 1, 39))));
  }, x23});
  cases.push_back({"cross_entropy_mean", [](Tape& t, Tensor a) {
    return t.cross_entropy_mean(a, {2, 0});
  }, x23});
  cases.push_back({"composite", [](Tape& t, Tensor a) {
    Tensor h = t.relu(t.add_bias(t.matmul(a, t.constant(rand_mat(3, 4, 40))),
                                 t.constant(rand_mat(1, 4, 41))));
    Tensor p = t.softmax_rows(h);
    return t.add(t.cross_entropy_mean(h, {1, 3}), t.reduce_mean(t.xlogx(p)));
  }, x23});

  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(grad_fd_err(c.build, c.x0) < 1e-5);
  }
}

TEST_CASE("hvp matches finite differences of gradients for every op") {
  const Mat x23 = rand_mat(2, 3, 51);
  const Mat v23 = rand_mat(2, 3, 52);
  struct Case {
    const char* name;
    Builder build;
    Mat x0, v;
  };
  std::vector<Case> cases;
  cases.push_back({"quadratic_matmul", [](Tape& t, Tensor a) {
    Tensor b = t.constant(rand_mat(3, 2, 60));
    Tensor y = t.matmul(a, b);
    return t.reduce_sum(t.mul(y, y));
  }, x23, v23});
  cases.push_back({"softmax_xent", [](Tape& t, Tensor a) {
    return t.cross_entropy_mean(a, {1, 2});
  }, x23, v23});
  cases.push_back({"softplus_chain", [](Tape& t, Tensor a) {
    return t.reduce_mean(t.mul(t.softplus(a), t.softplus(a)));
  }, x23, v23});
  cases.push_back({"normal_cdf_chain", [](Tape& t, Tensor a) {
    return t.reduce_sum(t.mul(t.normal_cdf(a), a));
  }, x23, v23});
  cases.push_back({"standardize_like", [](Tape& t, Tensor a) {
    Tensor mu = t.row_mean(a);
    Tensor cen = t.sub_bcast_col(a, mu);
    Tensor var = t.row_mean(t.mul(cen, cen));
    Tensor den = t.add_scalar(t.sqrt(var), 1e-6);
    Tensor z = t.div_bcast_col(cen, den);
    return t.cross_entropy_mean(z, {0, 2});
  }, x23, v23});
  cases.push_back({"gather_scatter_mix", [](Tape& t, Tensor a) {
    Tensor g = t.gather_rows(a, {1, 0, 1});
    Tensor s = t.scatter_rows(g, {0, 2, 1}, 3);
    Tensor p = t.softmax_rows(s);
    return t.reduce_mean(t.mul(p, s));
  }, x23, v23});
  cases.push_back({"kl_like", [](Tape& t, Tensor a) {
    Tensor p = t.softmax_rows(a);
    Tensor pbar = t.col_mean(p);
    return t.reduce_sum(t.xlogx(t.scale(pbar, 3.0)));
  }, x23, v23});

  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(hvp_fd_err(c.build, c.x0, c.v) < 1e-4);
  }
}

TEST_CASE("cross_entropy_mean matches the manual log-sum-exp form") {
  Mat z = Mat::from(2, 3, {2.0, -1.0, 0.5, 10.0, 10.0, 10.0});
  const std::vector<int> labels{0, 2};
  Tape t;
  Tensor s = t.cross_entropy_mean(t.leaf(z), labels);
  double want = 0;
  for (int i = 0; i < 2; ++i) {
    double mx = z.at(i, 0);
    for (int j = 1; j < 3; ++j) mx = std::max(mx, z.at(i, j));
    double lse = 0;
    for (int j = 0; j < 3; ++j) lse += std::exp(z.at(i, j) - mx);
    want += mx + std::log(lse) - z.at(i, labels[static_cast<std::size_t>(i)]);
  }
  want /= 2.0;
  CHECK(t.val(s).at(0, 0) == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("sqrt and xlogx use the stated conventions at zero") {
  Mat z = Mat::from(1, 2, {0.0, 4.0});
  Tape t;
  Tensor leaf = t.leaf(z);
  Tensor s = t.reduce_sum(t.sqrt(leaf));
  CHECK(t.val(s).at(0, 0) == 2.0);
  t.backward(s);
  CHECK(t.grad(leaf).at(0, 0) == 0.0);  // subgradient convention at 0
  CHECK(t.grad(leaf).at(0, 1) == doctest::Approx(0.25));

  Tape t2;
  Tensor leaf2 = t2.leaf(z);
  Tensor s2 = t2.reduce_sum(t2.xlogx(leaf2));
  CHECK(t2.val(s2).at(0, 0) == doctest::Approx(4.0 * std::log(4.0)));
  t2.backward(s2);
  CHECK(t2.grad(leaf2).at(0, 0) == 0.0);
  CHECK(t2.grad(leaf2).at(0, 1) == doctest::Approx(std::log(4.0) + 1.0));
}

TEST_CASE("constants get no gradient and randn is reproducible") {
  Tape t;
  Tensor c = t.constant(Mat::from(1, 2, {1, 2}));
  Tensor leaf = t.leaf(Mat::from(1, 2, {3, 4}));
  Tensor s = t.reduce_sum(t.mul(leaf, c));
  t.backward(s);
  CHECK(t.grad(c).size() == 0);
  CHECK(t.grad(leaf).at(0, 0) == 1.0);
  CHECK(t.grad(leaf).at(0, 1) == 2.0);

  Rng r1(7, 0), r2(7, 0);
  Tape ta, tb;
  Tensor n1 = randn(ta, r1, 2, 2);
  Tensor n2 = randn(tb, r2, 2, 2);
  CHECK(ta.val(n1).d == tb.val(n2).d);
}

TEST_CASE("error paths") {
  Tape t;
  Tensor a = t.leaf(Mat::from(2, 2, {1, 2, 3, 4}));
  Tensor b = t.leaf(Mat::from(1, 2, {1, 2}));
  CHECK_THROWS_AS((void)t.add(a, b), ConfigError);
  CHECK_THROWS_AS((void)t.matmul(b, b), ConfigError);
  CHECK_THROWS_AS(t.backward(a), UsageError);  // non-scalar loss
  CHECK_THROWS_AS((void)t.cross_entropy_mean(a, {0}), ConfigError);
  CHECK_THROWS_AS((void)t.cross_entropy_mean(a, {0, 7}), ConfigError);
}

TEST_CASE("node counter is process-wide and monotonic") {
  const auto before = Tape::nodes_created_total();
  Tape t;
  (void)t.leaf(Mat::zeros(1, 1));
  CHECK(Tape::nodes_created_total() == before + 1);
}

TEST_SUITE_END();
