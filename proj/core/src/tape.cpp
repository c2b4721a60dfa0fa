// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/tape.hpp"

#include <atomic>
#include <cmath>
#include <string>

#include "moelab/errors.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

constexpr std::uint8_t kLeaf = 0, kConst = 1, kMatmul = 2, kAddBias = 3,
                       kAdd = 4, kSub = 5, kMul = 6, kDiv = 7, kScale = 8,
                       kAddScalar = 9, kRelu = 10, kSoftplus = 11, kSqrt = 12,
                       kXlogx = 13, kNormalCdf = 14, kSoftmaxRows = 15,
                       kLogSoftmaxRows = 16, kRowMean = 17, kColMean = 18,
                       kColSum = 19, kReduceSum = 20, kReduceMean = 21,
                       kSubBcastCol = 22, kDivBcastCol = 23, kMulBcastCol = 24,
                       kConcatRows = 25, kGatherRows = 26, kScatterRows = 27,
                       kGatherCols = 28, kScatterCols = 29, kGatherPairs = 30,
                       kCrossEntropyMean = 31;

constexpr double kInvSqrt2Pi = 0.3989422804014327;

std::atomic<std::uint64_t> g_nodes_created{0};

std::string shape_str(const Mat& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

double phi_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

std::uint64_t Tape::nodes_created_total() { return g_nodes_created.load(); }

Tensor Tape::push(Node n) {
  g_nodes_created.fetch_add(1, std::memory_order_relaxed);
  if (tangent_ && n.tan.size() != n.val.size()) {
    n.tan = Mat(n.val.rows, n.val.cols);
  }
  nodes_.push_back(std::move(n));
  return Tensor{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::at(Tensor t) {
  if (t.id < 0 || t.id >= size()) throw InternalError("tape: invalid tensor handle");
  return nodes_[static_cast<std::size_t>(t.id)];
}

const Tape::Node& Tape::at(Tensor t) const {
  if (t.id < 0 || t.id >= size()) throw InternalError("tape: invalid tensor handle");
  return nodes_[static_cast<std::size_t>(t.id)];
}

void Tape::check_same_shape(const char* op, Tensor a, Tensor b) const {
  if (!at(a).val.same_shape(at(b).val)) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(at(a).val) +
                      " vs " + shape_str(at(b).val));
  }
}

Tensor Tape::leaf(Mat v) {
  Node n;
  n.op = kLeaf;
  n.needs_grad = true;
  n.val = std::move(v);
  return push(std::move(n));
}

Tensor Tape::leaf(Mat v, Mat tangent) {
  if (!tangent_) throw InternalError("tape: leaf tangent requires tangent-enabled tape");
  if (!v.same_shape(tangent)) throw InternalError("tape: leaf tangent shape mismatch");
  Node n;
  n.op = kLeaf;
  n.needs_grad = true;
  n.val = std::move(v);
  n.tan = std::move(tangent);
  return push(std::move(n));
}

Tensor Tape::constant(Mat v) {
  Node n;
  n.op = kConst;
  n.val = std::move(v);
  return push(std::move(n));
}

const Mat& Tape::val(Tensor t) const { return at(t).val; }
const Mat& Tape::grad(Tensor t) const { return at(t).grad; }
const Mat& Tape::grad_tangent(Tensor t) const { return at(t).gtan; }

Tensor Tape::matmul(Tensor ta, Tensor tb) {
  const Node& a = at(ta);
  const Node& b = at(tb);
  if (a.val.cols != b.val.rows) {
    throw ConfigError("matmul: shape mismatch " + shape_str(a.val) + " * " +
                      shape_str(b.val));
  }
  Node n;
  n.op = kMatmul;
  n.a = ta.id;
  n.b = tb.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  n.val = Mat(a.val.rows, b.val.cols);
  kern::mm_nn(n.val, a.val, b.val);
  if (tangent_) {
    n.tan = Mat(a.val.rows, b.val.cols);
    kern::mm_nn(n.tan, a.tan, b.val);
    kern::mm_nn(n.tan, a.val, b.tan);
  }
  return push(std::move(n));
}

Tensor Tape::add_bias(Tensor tx, Tensor tb) {
  const Node& x = at(tx);
  const Node& b = at(tb);
  if (b.val.rows != 1 || b.val.cols != x.val.cols) {
    throw ConfigError("add_bias: shape mismatch " + shape_str(x.val) + " + " +
                      shape_str(b.val));
  }
  Node n;
  n.op = kAddBias;
  n.a = tx.id;
  n.b = tb.id;
  n.needs_grad = x.needs_grad || b.needs_grad;
  n.val = Mat(x.val.rows, x.val.cols);
  for (int i = 0; i < x.val.rows; ++i) {
    const double* xi = x.val.row(i);
    const double* bb = b.val.row(0);
    double* oi = n.val.row(i);
    for (int j = 0; j < x.val.cols; ++j) oi[j] = xi[j] + bb[j];
  }
  if (tangent_) {
    n.tan = Mat(x.val.rows, x.val.cols);
    for (int i = 0; i < x.val.rows; ++i) {
      const double* xi = x.tan.row(i);
      const double* bb = b.tan.row(0);
      double* oi = n.tan.row(i);
      for (int j = 0; j < x.val.cols; ++j) oi[j] = xi[j] + bb[j];
    }
  }
  return push(std::move(n));
}

Tensor Tape::add(Tensor ta, Tensor tb) {
  check_same_shape("add", ta, tb);
  const Node& a = at(ta);
  const Node& b = at(tb);
  Node n;
  n.op = kAdd;
  n.a = ta.id;
  n.b = tb.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  n.val = Mat(a.val.rows, a.val.cols);
  for (std::size_t i = 0; i < a.val.size(); ++i) n.val.d[i] = a.val.d[i] + b.val.d[i];
  if (tangent_) {
    n.tan = Mat(a.val.rows, a.val.cols);
    for (std::size_t i = 0; i < a.val.size(); ++i) n.tan.d[i] = a.tan.d[i] + b.tan.d[i];
  }
  return push(std::move(n));
}

Tensor Tape::sub(Tensor ta, Tensor tb) {
  check_same_shape("sub", ta, tb);
  const Node& a = at(ta);
  const Node& b = at(tb);
  Node n;
  n.op = kSub;
  n.a = ta.id;
  n.b = tb.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  n.val = Mat(a.val.rows, a.val.cols);
  for (std::size_t i = 0; i < a.val.size(); ++i) n.val.d[i] = a.val.d[i] - b.val.d[i];
  if (tangent_) {
    n.tan = Mat(a.val.rows, a.val.cols);
    for (std::size_t i = 0; i < a.val.size(); ++i) n.tan.d[i] = a.tan.d[i] - b.tan.d[i];
  }
  return push(std::move(n));
}

Tensor Tape::mul(Tensor ta, Tensor tb) {
  check_same_shape("mul", ta, tb);
  const Node& a = at(ta);
  const Node& b = at(tb);
  Node n;
  n.op = kMul;
  n.a = ta.id;
  n.b = tb.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  n.val = Mat(a.val.rows, a.val.cols);
  for (std::size_t i = 0; i < a.val.size(); ++i) n.val.d[i] = a.val.d[i] * b.val.d[i];
  if (tangent_) {
    n.tan = Mat(a.val.rows, a.val.cols);
    for (std::size_t i = 0; i < a.val.size(); ++i) {
      n.tan.d[i] = a.tan.d[i] * b.val.d[i] + a.val.d[i] * b.tan.d[i];
    }
  }
  return push(std::move(n));
}

Tensor Tape::div(Tensor ta, Tensor tb) {
  check_same_shape("div", ta, tb);
  const Node& a = at(ta);
  const Node& b = at(tb);
  Node n;
  n.op = kDiv;
  n.a = ta.id;
  n.b = tb.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  n.val = Mat(a.val.rows, a.val.cols);
  for (std::size_t i = 0; i < a.val.size(); ++i) n.val.d[i] = a.val.d[i] / b.val.d[i];
  if (!n.val.all_finite()) throw NumericError("div: non-finite result");
  if (tangent_) {
    n.tan = Mat(a.val.rows, a.val.cols);
    for (std::size_t i = 0; i < a.val.size(); ++i) {
      n.tan.d[i] = (a.tan.d[i] - n.val.d[i] * b.tan.d[i]) / b.val.d[i];
    }
  }
  return push(std::move(n));
}

Tensor Tape::scale(Tensor ta, double c) {
  const Node& a = at(ta);
  Node n;
  n.op = kScale;
  n.a = ta.id;
  n.c0 = c;
  n.needs_grad = a.needs_grad;
  n.val = Mat(a.val.rows, a.val.cols);
  for (std::size_t i = 0; i < a.val.size(); ++i) n.val.d[i] = c * a.val.d[i];
  if (tangent_) {
    n.tan = Mat(a.val.rows, a.val.cols);
    for (std::size_t i = 0; i < a.val.size(); ++i) n.tan.d[i] = c * a.tan.d[i];
  }
  return push(std::move(n));
}

Tensor Tape::add_scalar(Tensor ta, double c) {
  const Node& a = at(ta);
  Node n;
  n.op = kAddScalar;
  n.a = ta.id;
  n.c0 = c;
  n.needs_grad = a.needs_grad;
  n.val = Mat(a.val.rows, a.val.cols);
  for (std::size_t i = 0; i < a.val.size(); ++i) n.val.d[i] = a.val.d[i] + c;
  if (tangent_) n.tan = a.tan;
  return push(std::move(n));
}

Tensor Tape::unary(std::uint8_t op, Tensor ta) {
  const Node& a = at(ta);
  Node n;
  n.op = op;
  n.a = ta.id;
  n.needs_grad = a.needs_grad;
  n.val = Mat(a.val.rows, a.val.cols);
  const std::size_t sz = a.val.size();
  switch (op) {
    case kRelu:
      for (std::size_t i = 0; i < sz; ++i) n.val.d[i] = kern::relu_s(a.val.d[i]);
      break;
    case kSoftplus:
      for (std::size_t i = 0; i < sz; ++i) n.val.d[i] = kern::softplus_s(a.val.d[i]);
      break;
    case kSqrt:
      for (std::size_t i = 0; i < sz; ++i) {
        if (a.val.d[i] < 0.0) throw NumericError("sqrt: negative input");
        n.val.d[i] = std::sqrt(a.val.d[i]);
      }
      break;
    case kXlogx:
      for (std::size_t i = 0; i < sz; ++i) {
        const double x = a.val.d[i];
        if (x < 0.0) throw NumericError("xlogx: negative input");
        n.val.d[i] = x > 0.0 ? x * std::log(x) : 0.0;
      }
      break;
    case kNormalCdf:
      for (std::size_t i = 0; i < sz; ++i) n.val.d[i] = normal_cdf_value(a.val.d[i]);
      break;
    default:
      throw InternalError("tape: unknown unary op");
  }
  if (tangent_) {
    n.tan = Mat(a.val.rows, a.val.cols);
    for (std::size_t i = 0; i < sz; ++i) {
      const double x = a.val.d[i];
      double d1 = 0.0;
      switch (op) {
        case kRelu: d1 = x > 0.0 ? 1.0 : 0.0; break;
        case kSoftplus: d1 = kern::sigmoid_s(x); break;
        case kSqrt: d1 = x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; break;
        case kXlogx: d1 = x > 0.0 ? std::log(x) + 1.0 : 0.0; break;
        case kNormalCdf: d1 = phi_pdf(x); break;
      }
      n.tan.d[i] = d1 * a.tan.d[i];
    }
  }
  return push(std::move(n));
}

Tensor Tape::relu(Tensor a) { return unary(kRelu, a); }
Tensor Tape::softplus(Tensor a) { return unary(kSoftplus, a); }
Tensor Tape::sqrt(Tensor a) { return unary(kSqrt, a); }
Tensor Tape::xlogx(Tensor a) { return unary(kXlogx, a); }
Tensor Tape::normal_cdf(Tensor a) { return unary(kNormalCdf, a); }

Tensor Tape::softmax_rows(Tensor ta) {
  const Node& a = at(ta);
  if (!a.val.all_finite()) throw NumericError("softmax: non-finite input");
  Node n;
  n.op = kSoftmaxRows;
  n.a = ta.id;
  n.needs_grad = a.needs_grad;
  n.val = kern::softmax_rows(a.val);
  if (tangent_) {
    // s_i' = s_i (z_i' - sum_j s_j z_j')
    n.tan = Mat(a.val.rows, a.val.cols);
    for (int i = 0; i < a.val.rows; ++i) {
      const double* s = n.val.row(i);
      const double* zt = a.tan.row(i);
      double* st = n.tan.row(i);
      double q = 0.0;
      for (int j = 0; j < a.val.cols; ++j) q += s[j] * zt[j];
      for (int j = 0; j < a.val.cols; ++j) st[j] = s[j] * (zt[j] - q);
    }
  }
  return push(std::move(n));
}

Tensor Tape::log_softmax_rows(Tensor ta) {
  const Node& a = at(ta);
  if (!a.val.all_finite()) throw NumericError("log_softmax: non-finite input");
  Node n;
  n.op = kLogSoftmaxRows;
  n.a = ta.id;
  n.needs_grad = a.needs_grad;
  n.val = Mat(a.val.rows, a.val.cols);
  n.saved = kern::softmax_rows(a.val);
  for (int i = 0; i < a.val.rows; ++i) {
    const double* zi = a.val.row(i);
    double* oi = n.val.row(i);
    double mx = zi[0];
    for (int j = 1; j < a.val.cols; ++j) mx = zi[j] > mx ? zi[j] : mx;
    double sum = 0.0;
    for (int j = 0; j < a.val.cols; ++j) sum += std::exp(zi[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < a.val.cols; ++j) oi[j] = zi[j] - lse;
  }
  if (tangent_) {
    n.tan = Mat(a.val.rows, a.val.cols);
    n.saved_tan = Mat(a.val.rows, a.val.cols);
    for (int i = 0; i < a.val.rows; ++i) {
      const double* s = n.saved.row(i);
      const double* zt = a.tan.row(i);
      double q = 0.0;
      for (int j = 0; j < a.val.cols; ++j) q += s[j] * zt[j];
      for (int j = 0; j < a.val.cols; ++j) {
        n.tan.row(i)[j] = zt[j] - q;
        n.saved_tan.row(i)[j] = s[j] * (zt[j] - q);
      }
    }
  }
  return push(std::move(n));
}

Tensor Tape::row_mean(Tensor ta) {
  const Node& a = at(ta);
  Node n;
  n.op = kRowMean;
  n.a = ta.id;
  n.needs_grad = a.needs_grad;
  n.val = Mat(a.val.rows, 1);
  for (int i = 0; i < a.val.rows; ++i) {
    double s = 0.0;
    const double* xi = a.val.row(i);
    for (int j = 0; j < a.val.cols; ++j) s += xi[j];
    n.val.at(i, 0) = s / a.val.cols;
  }
  if (tangent_) {
    n.tan = Mat(a.val.rows, 1);
    for (int i = 0; i < a.val.rows; ++i) {
      double s = 0.0;
      const double* xi = a.tan.row(i);
      for (int j = 0; j < a.val.cols; ++j) s += xi[j];
      n.tan.at(i, 0) = s / a.val.cols;
    }
  }
  return push(std::move(n));
}

Tensor Tape::col_mean(Tensor ta) {
  const Node& a = at(ta);
  Node n;
  n.op = kColMean;
  n.a = ta.id;
  n.needs_grad = a.needs_grad;
  auto reduce = [&](const Mat& src) {
    Mat out(1, src.cols);
    for (int i = 0; i < src.rows; ++i) {
      const double* xi = src.row(i);
      for (int j = 0; j < src.cols; ++j) out.d[j] += xi[j];
    }
    for (int j = 0; j < src.cols; ++j) out.d[j] /= src.rows;
    return out;
  };
  n.val = reduce(a.val);
  if (tangent_) n.tan = reduce(a.tan);
  return push(std::move(n));
}

Tensor Tape::col_sum(Tensor ta) {
  const Node& a = at(ta);
  Node n;
  n.op = kColSum;
  n.a = ta.id;
  n.needs_grad = a.needs_grad;
  auto reduce = [&](const Mat& src) {
    Mat out(1, src.cols);
    for (int i = 0; i < src.rows; ++i) {
      const double* xi = src.row(i);
      for (int j = 0; j < src.cols; ++j) out.d[j] += xi[j];
    }
    return out;
  };
  n.val = reduce(a.val);
  if (tangent_) n.tan = reduce(a.tan);
  return push(std::move(n));
}

Tensor Tape::reduce_sum(Tensor ta) {
  const Node& a = at(ta);
  Node n;
  n.op = kReduceSum;
  n.a = ta.id;
  n.needs_grad = a.needs_grad;
  auto reduce = [](const Mat& src) {
    double s = 0.0;
    for (double v : src.d) s += v;
    Mat out(1, 1);
    out.d[0] = s;
    return out;
  };
  n.val = reduce(a.val);
  if (tangent_) n.tan = reduce(a.tan);
  return push(std::move(n));
}

Tensor Tape::reduce_mean(Tensor ta) {
  const Node& a = at(ta);
  if (a.val.size() == 0) throw ConfigError("reduce_mean: empty input");
  Node n;
  n.op = kReduceMean;
  n.a = ta.id;
  n.needs_grad = a.needs_grad;
  auto reduce = [&](const Mat& src) {
    double s = 0.0;
    for (double v : src.d) s += v;
    Mat out(1, 1);
    out.d[0] = s / static_cast<double>(src.size());
    return out;
  };
  n.val = reduce(a.val);
  if (tangent_) n.tan = reduce(a.tan);
  return push(std::move(n));
}

namespace {
void check_col_vec(const char* op, const Mat& x, const Mat& c) {
  if (c.cols != 1 || c.rows != x.rows) {
    throw ConfigError(std::string(op) + ": shape mismatch " +
                      std::to_string(x.rows) + "x" + std::to_string(x.cols) +
                      " with column " + std::to_string(c.rows) + "x" +
                      std::to_string(c.cols));
  }
}
}  // namespace

Tensor Tape::sub_bcast_col(Tensor tx, Tensor tc) {
  const Node& x = at(tx);
  const Node& c = at(tc);
  check_col_vec("sub_bcast_col", x.val, c.val);
  Node n;
  n.op = kSubBcastCol;
  n.a = tx.id;
  n.b = tc.id;
  n.needs_grad = x.needs_grad || c.needs_grad;
  n.val = Mat(x.val.rows, x.val.cols);
  for (int i = 0; i < x.val.rows; ++i) {
    const double ci = c.val.at(i, 0);
    for (int j = 0; j < x.val.cols; ++j) n.val.at(i, j) = x.val.at(i, j) - ci;
  }
  if (tangent_) {
    n.tan = Mat(x.val.rows, x.val.cols);
    for (int i = 0; i < x.val.rows; ++i) {
      const double ci = c.tan.at(i, 0);
      for (int j = 0; j < x.val.cols; ++j) n.tan.at(i, j) = x.tan.at(i, j) - ci;
    }
  }
  return push(std::move(n));
}

Tensor Tape::div_bcast_col(Tensor tx, Tensor tc) {
  const Node& x = at(tx);
  const Node& c = at(tc);
  check_col_vec("div_bcast_col", x.val, c.val);
  Node n;
  n.op = kDivBcastCol;
  n.a = tx.id;
  n.b = tc.id;
  n.needs_grad = x.needs_grad || c.needs_grad;
  n.val = Mat(x.val.rows, x.val.cols);
  for (int i = 0; i < x.val.rows; ++i) {
    const double ci = c.val.at(i, 0);
    for (int j = 0; j < x.val.cols; ++j) n.val.at(i, j) = x.val.at(i, j) / ci;
  }
  if (!n.val.all_finite()) throw NumericError("div_bcast_col: non-finite result");
  if (tangent_) {
    n.tan = Mat(x.val.rows, x.val.cols);
    for (int i = 0; i < x.val.rows; ++i) {
      const double ci = c.val.at(i, 0);
      const double cti = c.tan.at(i, 0);
      for (int j = 0; j < x.val.cols; ++j) {
        n.tan.at(i, j) = (x.tan.at(i, j) - n.val.at(i, j) * cti) / ci;
      }
    }
  }
  return push(std::move(n));
}

Tensor Tape::mul_bcast_col(Tensor tx, Tensor tc) {
  const Node& x = at(tx);
  const Node& c = at(tc);
  check_col_vec("mul_bcast_col", x.val, c.val);
  Node n;
  n.op = kMulBcastCol;
  n.a = tx.id;
  n.b = tc.id;
  n.needs_grad = x.needs_grad || c.needs_grad;
  n.val = Mat(x.val.rows, x.val.cols);
  for (int i = 0; i < x.val.rows; ++i) {
    const double ci = c.val.at(i, 0);
    for (int j = 0; j < x.val.cols; ++j) n.val.at(i, j) = x.val.at(i, j) * ci;
  }
  if (tangent_) {
    n.tan = Mat(x.val.rows, x.val.cols);
    for (int i = 0; i < x.val.rows; ++i) {
      const double ci = c.val.at(i, 0);
      const double cti = c.tan.at(i, 0);
      for (int j = 0; j < x.val.cols; ++j) {
        n.tan.at(i, j) = x.tan.at(i, j) * ci + x.val.at(i, j) * cti;
      }
    }
  }
  return push(std::move(n));
}

Tensor Tape::concat_rows(Tensor ta, Tensor tb) {
  const Node& a = at(ta);
  const Node& b = at(tb);
  if (a.val.cols != b.val.cols) {
    throw ConfigError("concat_rows: shape mismatch " + shape_str(a.val) + " vs " +
                      shape_str(b.val));
  }
  Node n;
  n.op = kConcatRows;
  n.a = ta.id;
  n.b = tb.id;
  n.aux = a.val.rows;
  n.needs_grad = a.needs_grad || b.needs_grad;
  auto stack = [&](const Mat& top, const Mat& bot) {
    Mat out(top.rows + bot.rows, top.cols);
    for (int i = 0; i < top.rows; ++i) {
      for (int j = 0; j < top.cols; ++j) out.at(i, j) = top.at(i, j);
    }
    for (int i = 0; i < bot.rows; ++i) {
      for (int j = 0; j < top.cols; ++j) out.at(top.rows + i, j) = bot.at(i, j);
    }
    return out;
  };
  n.val = stack(a.val, b.val);
  if (tangent_) n.tan = stack(a.tan, b.tan);
  return push(std::move(n));
}

Tensor Tape::gather_rows(Tensor tx, std::vector<int> idx) {
  const Node& x = at(tx);
  for (int r : idx) {
    if (r < 0 || r >= x.val.rows) throw InternalError("gather_rows: index out of range");
  }
  Node n;
  n.op = kGatherRows;
  n.a = tx.id;
  n.needs_grad = x.needs_grad;
  auto pick = [&](const Mat& src) {
    Mat out(static_cast<int>(idx.size()), src.cols);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double* si = src.row(idx[j]);
      double* oi = out.row(static_cast<int>(j));
      for (int k = 0; k < src.cols; ++k) oi[k] = si[k];
    }
    return out;
  };
  n.val = pick(x.val);
  if (tangent_) n.tan = pick(x.tan);
  n.idx = std::move(idx);
  return push(std::move(n));
}

Tensor Tape::scatter_rows(Tensor tx, std::vector<int> idx, int out_rows) {
  const Node& x = at(tx);
  if (static_cast<int>(idx.size()) != x.val.rows) {
    throw InternalError("scatter_rows: index count mismatch");
  }
  for (int r : idx) {
    if (r < 0 || r >= out_rows) throw InternalError("scatter_rows: index out of range");
  }
  Node n;
  n.op = kScatterRows;
  n.a = tx.id;
  n.aux = out_rows;
  n.needs_grad = x.needs_grad;
  auto place = [&](const Mat& src) {
    Mat out(out_rows, src.cols);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double* si = src.row(static_cast<int>(j));
      double* oi = out.row(idx[j]);
      for (int k = 0; k < src.cols; ++k) oi[k] += si[k];
    }
    return out;
  };
  n.val = place(x.val);
  if (tangent_) n.tan = place(x.tan);
  n.idx = std::move(idx);
  return push(std::move(n));
}

Tensor Tape::gather_cols(Tensor tx, std::vector<int> idx, int k) {
  const Node& x = at(tx);
  if (k <= 0 || static_cast<std::size_t>(x.val.rows) * k != idx.size()) {
    throw InternalError("gather_cols: index count mismatch");
  }
  for (int c : idx) {
    if (c < 0 || c >= x.val.cols) throw InternalError("gather_cols: index out of range");
  }
  Node n;
  n.op = kGatherCols;
  n.a = tx.id;
  n.aux = k;
  n.needs_grad = x.needs_grad;
  auto pick = [&](const Mat& src) {
    Mat out(src.rows, k);
    for (int i = 0; i < src.rows; ++i) {
      for (int j = 0; j < k; ++j) {
        out.at(i, j) = src.at(i, idx[static_cast<std::size_t>(i) * k + j]);
      }
    }
    return out;
  };
  n.val = pick(x.val);
  if (tangent_) n.tan = pick(x.tan);
  n.idx = std::move(idx);
  return push(std::move(n));
}

Tensor Tape::scatter_cols(Tensor tx, std::vector<int> idx, int out_cols) {
  const Node& x = at(tx);
  const int k = x.val.cols;
  if (static_cast<std::size_t>(x.val.rows) * k != idx.size()) {
    throw InternalError("scatter_cols: index count mismatch");
  }
  for (int c : idx) {
    if (c < 0 || c >= out_cols) throw InternalError("scatter_cols: index out of range");
  }
  Node n;
  n.op = kScatterCols;
  n.a = tx.id;
  n.aux = out_cols;
  n.needs_grad = x.needs_grad;
  auto place = [&](const Mat& src) {
    Mat out(src.rows, out_cols);
    for (int i = 0; i < src.rows; ++i) {
      for (int j = 0; j < k; ++j) {
        out.at(i, idx[static_cast<std::size_t>(i) * k + j]) += src.at(i, j);
      }
    }
    return out;
  };
  n.val = place(x.val);
  if (tangent_) n.tan = place(x.tan);
  n.idx = std::move(idx);
  return push(std::move(n));
}

Tensor Tape::gather_pairs(Tensor tx, std::vector<int> rows, std::vector<int> cols) {
  const Node& x = at(tx);
  if (rows.size() != cols.size()) throw InternalError("gather_pairs: length mismatch");
  for (std::size_t l = 0; l < rows.size(); ++l) {
    if (rows[l] < 0 || rows[l] >= x.val.rows || cols[l] < 0 || cols[l] >= x.val.cols) {
      throw InternalError("gather_pairs: index out of range");
    }
  }
  Node n;
  n.op = kGatherPairs;
  n.a = tx.id;
  n.aux = static_cast<int>(rows.size());
  n.needs_grad = x.needs_grad;
  auto pick = [&](const Mat& src) {
    Mat out(static_cast<int>(rows.size()), 1);
    for (std::size_t l = 0; l < rows.size(); ++l) {
      out.at(static_cast<int>(l), 0) = src.at(rows[l], cols[l]);
    }
    return out;
  };
  n.val = pick(x.val);
  if (tangent_) n.tan = pick(x.tan);
  n.idx = std::move(rows);
  n.idx.insert(n.idx.end(), cols.begin(), cols.end());
  return push(std::move(n));
}

Tensor Tape::cross_entropy_mean(Tensor tz, std::vector<int> labels) {
  const Node& z = at(tz);
  const int bsz = z.val.rows, c = z.val.cols;
  if (static_cast<int>(labels.size()) != bsz) {
    throw ConfigError("cross_entropy: label count " + std::to_string(labels.size()) +
                      " vs batch " + std::to_string(bsz));
  }
  for (int y : labels) {
    if (y < 0 || y >= c) throw ConfigError("cross_entropy: label out of range");
  }
  if (!z.val.all_finite()) throw NumericError("cross_entropy: non-finite input");
  Node n;
  n.op = kCrossEntropyMean;
  n.a = tz.id;
  n.needs_grad = z.needs_grad;
  n.saved = kern::softmax_rows(z.val);
  n.val = Mat(1, 1);
  double loss = 0.0;
  for (int i = 0; i < bsz; ++i) {
    const double* zi = z.val.row(i);
    double mx = zi[0];
    for (int j = 1; j < c; ++j) mx = zi[j] > mx ? zi[j] : mx;
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(zi[j] - mx);
    loss += mx + std::log(sum) - zi[labels[static_cast<std::size_t>(i)]];
  }
  n.val.d[0] = loss / bsz;
  if (tangent_) {
    n.tan = Mat(1, 1);
    n.saved_tan = Mat(bsz, c);
    double lt = 0.0;
    for (int i = 0; i < bsz; ++i) {
      const double* s = n.saved.row(i);
      const double* zt = z.tan.row(i);
      double q = 0.0;
      for (int j = 0; j < c; ++j) q += s[j] * zt[j];
      for (int j = 0; j < c; ++j) n.saved_tan.at(i, j) = s[j] * (zt[j] - q);
      lt += q - zt[labels[static_cast<std::size_t>(i)]];
    }
    n.tan.d[0] = lt / bsz;
  }
  n.idx = std::move(labels);
  return push(std::move(n));
}

void Tape::backward(Tensor loss) {
  Node& top = at(loss);
  if (top.val.rows != 1 || top.val.cols != 1) {
    throw UsageError("backward: loss must be scalar, got " + shape_str(top.val));
  }
  const bool ht = tangent_;
  for (int id = 0; id <= loss.id; ++id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) continue;
    n.grad = Mat(n.val.rows, n.val.cols);
    if (ht) n.gtan = Mat(n.val.rows, n.val.cols);
  }
  if (!top.needs_grad) return;  // loss independent of all leaves
  top.grad.d[0] = 1.0;          // seed is constant, so its tangent stays 0

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) continue;
    Node* pa = n.a >= 0 ? &nodes_[static_cast<std::size_t>(n.a)] : nullptr;
    Node* pb = n.b >= 0 ? &nodes_[static_cast<std::size_t>(n.b)] : nullptr;
    const bool ga = pa && pa->needs_grad;
    const bool gb = pb && pb->needs_grad;
    const Mat& og = n.grad;
    const Mat& ot = n.gtan;

    switch (n.op) {
      case kLeaf:
      case kConst:
        break;

      case kMatmul: {
        if (ga) {
          kern::mm_nt(pa->grad, og, pb->val);
          if (ht) {
            kern::mm_nt(pa->gtan, ot, pb->val);
            kern::mm_nt(pa->gtan, og, pb->tan);
          }
        }
        if (gb) {
          kern::mm_tn(pb->grad, pa->val, og);
          if (ht) {
            kern::mm_tn(pb->gtan, pa->tan, og);
            kern::mm_tn(pb->gtan, pa->val, ot);
          }
        }
        break;
      }

      case kAddBias: {
        if (ga) {
          for (std::size_t i = 0; i < og.size(); ++i) pa->grad.d[i] += og.d[i];
          if (ht) {
            for (std::size_t i = 0; i < og.size(); ++i) pa->gtan.d[i] += ot.d[i];
          }
        }
        if (gb) {
          for (int i = 0; i < og.rows; ++i) {
            const double* gi = og.row(i);
            for (int j = 0; j < og.cols; ++j) pb->grad.d[j] += gi[j];
          }
          if (ht) {
            for (int i = 0; i < og.rows; ++i) {
              const double* gi = ot.row(i);
              for (int j = 0; j < og.cols; ++j) pb->gtan.d[j] += gi[j];
            }
          }
        }
        break;
      }

      case kAdd: {
        if (ga) {
          for (std::size_t i = 0; i < og.size(); ++i) pa->grad.d[i] += og.d[i];
          if (ht) for (std::size_t i = 0; i < og.size(); ++i) pa->gtan.d[i] += ot.d[i];
        }
        if (gb) {
          for (std::size_t i = 0; i < og.size(); ++i) pb->grad.d[i] += og.d[i];
          if (ht) for (std::size_t i = 0; i < og.size(); ++i) pb->gtan.d[i] += ot.d[i];
        }
        break;
      }

      case kSub: {
        if (ga) {
          for (std::size_t i = 0; i < og.size(); ++i) pa->grad.d[i] += og.d[i];
          if (ht) for (std::size_t i = 0; i < og.size(); ++i) pa->gtan.d[i] += ot.d[i];
        }
        if (gb) {
          for (std::size_t i = 0; i < og.size(); ++i) pb->grad.d[i] -= og.d[i];
          if (ht) for (std::size_t i = 0; i < og.size(); ++i) pb->gtan.d[i] -= ot.d[i];
        }
        break;
      }

      case kMul: {
        if (ga) {
          for (std::size_t i = 0; i < og.size(); ++i) pa->grad.d[i] += og.d[i] * pb->val.d[i];
          if (ht) {
            for (std::size_t i = 0; i < og.size(); ++i) {
              pa->gtan.d[i] += ot.d[i] * pb->val.d[i] + og.d[i] * pb->tan.d[i];
            }
          }
        }
        if (gb) {
          for (std::size_t i = 0; i < og.size(); ++i) pb->grad.d[i] += og.d[i] * pa->val.d[i];
          if (ht) {
            for (std::size_t i = 0; i < og.size(); ++i) {
              pb->gtan.d[i] += ot.d[i] * pa->val.d[i] + og.d[i] * pa->tan.d[i];
            }
          }
        }
        break;
      }

      case kDiv: {
        for (std::size_t i = 0; i < og.size(); ++i) {
          const double b = pb->val.d[i];
          const double a = pa->val.d[i];
          const double inv = 1.0 / b;
          const double ab2 = a * inv * inv;
          if (ga) {
            pa->grad.d[i] += og.d[i] * inv;
            if (ht) {
              pa->gtan.d[i] += ot.d[i] * inv - og.d[i] * pb->tan.d[i] * inv * inv;
            }
          }
          if (gb) {
            pb->grad.d[i] -= og.d[i] * ab2;
            if (ht) {
              pb->gtan.d[i] -= ot.d[i] * ab2 + og.d[i] * pa->tan.d[i] * inv * inv -
                               2.0 * og.d[i] * ab2 * inv * pb->tan.d[i];
            }
          }
        }
        break;
      }

      case kScale: {
        if (ga) {
          for (std::size_t i = 0; i < og.size(); ++i) pa->grad.d[i] += n.c0 * og.d[i];
          if (ht) for (std::size_t i = 0; i < og.size(); ++i) pa->gtan.d[i] += n.c0 * ot.d[i];
        }
        break;
      }

      case kAddScalar: {
        if (ga) {
          for (std::size_t i = 0; i < og.size(); ++i) pa->grad.d[i] += og.d[i];
          if (ht) for (std::size_t i = 0; i < og.size(); ++i) pa->gtan.d[i] += ot.d[i];
        }
        break;
      }

      case kRelu:
      case kSoftplus:
      case kSqrt:
      case kXlogx:
      case kNormalCdf: {
        if (!ga) break;
        for (std::size_t i = 0; i < og.size(); ++i) {
          const double x = pa->val.d[i];
          double d1 = 0.0, d2 = 0.0;
          switch (n.op) {
            case kRelu:
              d1 = x > 0.0 ? 1.0 : 0.0;
              break;
            case kSoftplus: {
              const double s = kern::sigmoid_s(x);
              d1 = s;
              d2 = s * (1.0 - s);
              break;
            }
            case kSqrt:
              if (x > 0.0) {
                const double r = std::sqrt(x);
                d1 = 0.5 / r;
                d2 = -0.25 / (x * r);
              }
              break;
            case kXlogx:
              if (x > 0.0) {
                d1 = std::log(x) + 1.0;
                d2 = 1.0 / x;
              }
              break;
            case kNormalCdf: {
              const double p = phi_pdf(x);
              d1 = p;
              d2 = -x * p;
              break;
            }
          }
          pa->grad.d[i] += d1 * og.d[i];
          if (ht) pa->gtan.d[i] += d2 * pa->tan.d[i] * og.d[i] + d1 * ot.d[i];
        }
        break;
      }

      case kSoftmaxRows: {
        if (!ga) break;
        // z_i' adjoint: s_i (g_i - D), D = sum_j g_j s_j.
        for (int i = 0; i < n.val.rows; ++i) {
          const double* s = n.val.row(i);
          const double* g = og.row(i);
          double dsum = 0.0;
          for (int j = 0; j < n.val.cols; ++j) dsum += g[j] * s[j];
          double* zg = pa->grad.row(i);
          for (int j = 0; j < n.val.cols; ++j) zg[j] += s[j] * (g[j] - dsum);
          if (ht) {
            const double* st = n.tan.row(i);
            const double* gt = ot.row(i);
            double dsum_t = 0.0;
            for (int j = 0; j < n.val.cols; ++j) dsum_t += gt[j] * s[j] + g[j] * st[j];
            double* zt = pa->gtan.row(i);
            for (int j = 0; j < n.val.cols; ++j) {
              zt[j] += st[j] * (g[j] - dsum) + s[j] * (gt[j] - dsum_t);
            }
          }
        }
        break;
      }

      case kLogSoftmaxRows: {
        if (!ga) break;
        for (int i = 0; i < n.val.rows; ++i) {
          const double* s = n.saved.row(i);
          const double* g = og.row(i);
          double tsum = 0.0;
          for (int j = 0; j < n.val.cols; ++j) tsum += g[j];
          double* zg = pa->grad.row(i);
          for (int j = 0; j < n.val.cols; ++j) zg[j] += g[j] - s[j] * tsum;
          if (ht) {
            const double* st = n.saved_tan.row(i);
            const double* gt = ot.row(i);
            double tsum_t = 0.0;
            for (int j = 0; j < n.val.cols; ++j) tsum_t += gt[j];
            double* zt = pa->gtan.row(i);
            for (int j = 0; j < n.val.cols; ++j) {
              zt[j] += gt[j] - st[j] * tsum - s[j] * tsum_t;
            }
          }
        }
        break;
      }

      case kRowMean: {
        if (!ga) break;
        const int cols = pa->val.cols;
        for (int i = 0; i < pa->val.rows; ++i) {
          const double g = og.at(i, 0) / cols;
          double* xg = pa->grad.row(i);
          for (int j = 0; j < cols; ++j) xg[j] += g;
        }
        if (ht) {
          for (int i = 0; i < pa->val.rows; ++i) {
            const double g = ot.at(i, 0) / cols;
            double* xg = pa->gtan.row(i);
            for (int j = 0; j < cols; ++j) xg[j] += g;
          }
        }
        break;
      }

      case kColMean:
      case kColSum: {
        if (!ga) break;
        const double denom = n.op == kColMean ? pa->val.rows : 1.0;
        for (int i = 0; i < pa->val.rows; ++i) {
          double* xg = pa->grad.row(i);
          for (int j = 0; j < pa->val.cols; ++j) xg[j] += og.d[j] / denom;
        }
        if (ht) {
          for (int i = 0; i < pa->val.rows; ++i) {
            double* xg = pa->gtan.row(i);
            for (int j = 0; j < pa->val.cols; ++j) xg[j] += ot.d[j] / denom;
          }
        }
        break;
      }

      case kReduceSum:
      case kReduceMean: {
        if (!ga) break;
        const double denom = n.op == kReduceMean ? static_cast<double>(pa->val.size()) : 1.0;
        const double g = og.d[0] / denom;
        for (std::size_t i = 0; i < pa->val.size(); ++i) pa->grad.d[i] += g;
        if (ht) {
          const double gt = ot.d[0] / denom;
          for (std::size_t i = 0; i < pa->val.size(); ++i) pa->gtan.d[i] += gt;
        }
        break;
      }

      case kSubBcastCol: {
        if (ga) {
          for (std::size_t i = 0; i < og.size(); ++i) pa->grad.d[i] += og.d[i];
          if (ht) for (std::size_t i = 0; i < og.size(); ++i) pa->gtan.d[i] += ot.d[i];
        }
        if (gb) {
          for (int i = 0; i < og.rows; ++i) {
            const double* g = og.row(i);
            double s = 0.0;
            for (int j = 0; j < og.cols; ++j) s += g[j];
            pb->grad.at(i, 0) -= s;
          }
          if (ht) {
            for (int i = 0; i < og.rows; ++i) {
              const double* g = ot.row(i);
              double s = 0.0;
              for (int j = 0; j < og.cols; ++j) s += g[j];
              pb->gtan.at(i, 0) -= s;
            }
          }
        }
        break;
      }

      case kDivBcastCol: {
        for (int i = 0; i < og.rows; ++i) {
          const double c = pb->val.at(i, 0);
          const double inv = 1.0 / c;
          const double ct = ht ? pb->tan.at(i, 0) : 0.0;
          double csum = 0.0, csum_t = 0.0;
          for (int j = 0; j < og.cols; ++j) {
            const double g = og.at(i, j);
            const double x = pa->val.at(i, j);
            if (ga) {
              pa->grad.at(i, j) += g * inv;
              if (ht) {
                pa->gtan.at(i, j) += ot.at(i, j) * inv - g * ct * inv * inv;
              }
            }
            if (gb) {
              csum += g * x;
              if (ht) csum_t += ot.at(i, j) * x + g * pa->tan.at(i, j);
            }
          }
          if (gb) {
            // c adjoint: -sum_j g_j x_j / c^2
            pb->grad.at(i, 0) -= csum * inv * inv;
            if (ht) {
              pb->gtan.at(i, 0) +=
                  -csum_t * inv * inv + 2.0 * csum * inv * inv * inv * ct;
            }
          }
        }
        break;
      }

      case kMulBcastCol: {
        for (int i = 0; i < og.rows; ++i) {
          const double c = pb->val.at(i, 0);
          const double ct = ht ? pb->tan.at(i, 0) : 0.0;
          double csum = 0.0, csum_t = 0.0;
          for (int j = 0; j < og.cols; ++j) {
            const double g = og.at(i, j);
            if (ga) {
              pa->grad.at(i, j) += g * c;
              if (ht) pa->gtan.at(i, j) += ot.at(i, j) * c + g * ct;
            }
            if (gb) {
              csum += g * pa->val.at(i, j);
              if (ht) csum_t += ot.at(i, j) * pa->val.at(i, j) + g * pa->tan.at(i, j);
            }
          }
          if (gb) {
            pb->grad.at(i, 0) += csum;
            if (ht) pb->gtan.at(i, 0) += csum_t;
          }
        }
        break;
      }

      case kConcatRows: {
        const int split = n.aux;
        if (ga) {
          for (int i = 0; i < split; ++i) {
            for (int j = 0; j < og.cols; ++j) pa->grad.at(i, j) += og.at(i, j);
          }
          if (ht) {
            for (int i = 0; i < split; ++i) {
              for (int j = 0; j < og.cols; ++j) pa->gtan.at(i, j) += ot.at(i, j);
            }
          }
        }
        if (gb) {
          for (int i = split; i < og.rows; ++i) {
            for (int j = 0; j < og.cols; ++j) pb->grad.at(i - split, j) += og.at(i, j);
          }
          if (ht) {
            for (int i = split; i < og.rows; ++i) {
              for (int j = 0; j < og.cols; ++j) pb->gtan.at(i - split, j) += ot.at(i, j);
            }
          }
        }
        break;
      }

      case kGatherRows: {
        if (!ga) break;
        for (std::size_t j = 0; j < n.idx.size(); ++j) {
          double* xg = pa->grad.row(n.idx[j]);
          const double* g = og.row(static_cast<int>(j));
          for (int kq = 0; kq < og.cols; ++kq) xg[kq] += g[kq];
        }
        if (ht) {
          for (std::size_t j = 0; j < n.idx.size(); ++j) {
            double* xg = pa->gtan.row(n.idx[j]);
            const double* g = ot.row(static_cast<int>(j));
            for (int kq = 0; kq < og.cols; ++kq) xg[kq] += g[kq];
          }
        }
        break;
      }

      case kScatterRows: {
        if (!ga) break;
        for (std::size_t j = 0; j < n.idx.size(); ++j) {
          double* xg = pa->grad.row(static_cast<int>(j));
          const double* g = og.row(n.idx[j]);
          for (int kq = 0; kq < og.cols; ++kq) xg[kq] += g[kq];
        }
        if (ht) {
          for (std::size_t j = 0; j < n.idx.size(); ++j) {
            double* xg = pa->gtan.row(static_cast<int>(j));
            const double* g = ot.row(n.idx[j]);
            for (int kq = 0; kq < og.cols; ++kq) xg[kq] += g[kq];
          }
        }
        break;
      }

      case kGatherCols: {
        if (!ga) break;
        const int k = n.aux;
        for (int i = 0; i < og.rows; ++i) {
          for (int j = 0; j < k; ++j) {
            const int c = n.idx[static_cast<std::size_t>(i) * k + j];
            pa->grad.at(i, c) += og.at(i, j);
            if (ht) pa->gtan.at(i, c) += ot.at(i, j);
          }
        }
        break;
      }

      case kScatterCols: {
        if (!ga) break;
        const int k = pa->val.cols;
        for (int i = 0; i < og.rows; ++i) {
          for (int j = 0; j < k; ++j) {
            const int c = n.idx[static_cast<std::size_t>(i) * k + j];
            pa->grad.at(i, j) += og.at(i, c);
            if (ht) pa->gtan.at(i, j) += ot.at(i, c);
          }
        }
        break;
      }

      case kGatherPairs: {
        if (!ga) break;
        const int len = n.aux;
        for (int l = 0; l < len; ++l) {
          const int r = n.idx[static_cast<std::size_t>(l)];
          const int c = n.idx[static_cast<std::size_t>(len + l)];
          pa->grad.at(r, c) += og.at(l, 0);
          if (ht) pa->gtan.at(r, c) += ot.at(l, 0);
        }
        break;
      }

      case kCrossEntropyMean: {
        if (!ga) break;
        const double g = og.d[0];
        const double gt = ht ? ot.d[0] : 0.0;
        const int bsz = pa->val.rows;
        const double invb = 1.0 / bsz;
        for (int i = 0; i < bsz; ++i) {
          const int y = n.idx[static_cast<std::size_t>(i)];
          const double* s = n.saved.row(i);
          double* zg = pa->grad.row(i);
          for (int j = 0; j < pa->val.cols; ++j) {
            const double base = (s[j] - (j == y ? 1.0 : 0.0)) * invb;
            zg[j] += g * base;
            if (ht) {
              pa->gtan.at(i, j) += gt * base + g * n.saved_tan.at(i, j) * invb;
            }
          }
        }
        break;
      }

      default:
        throw InternalError("tape: unknown op in backward");
    }
  }
}

Tensor randn(Tape& tape, Rng& rng, int rows, int cols) {
  Mat m(rows, cols);
  rng.fill_normal(std::span<double>(m.d.data(), m.d.size()));
  return tape.constant(std::move(m));
}

}  // namespace moelab
