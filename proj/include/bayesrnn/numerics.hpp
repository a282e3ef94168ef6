// Copyright 2026 The bayesrnn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major matrices, elementwise nonlinearities and a seedable RNG.
//
// Every recurrent quantity in this library is a Tensor2D. Column vectors are
// n x 1 tensors; a minibatch of B column vectors is an n x B tensor, so the
// product W x of a hidden x input weight with a batch of inputs is a plain
// matmul.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bayesrnn {

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value leaves the finite domain or a parameter is out of range.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Tensor2D: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  /// Builds a tensor from nested row lists; all rows must have equal length.
  static Tensor2D from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Tensor2D::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor2D(r, c, std::move(data));
  }

  /// n x 1 column vector.
  static Tensor2D column(std::initializer_list<double> values) {
    return Tensor2D(values.size(), 1, std::vector<double>(values));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor2D& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool operator==(const Tensor2D&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline ConstMap view(const Tensor2D& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MutMap view(Tensor2D& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

template <class F>
Tensor2D map(const Tensor2D& x, F f) {
  Tensor2D out(x.rows(), x.cols());
  const double* src = x.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products. The accumulate forms add into an existing output so that
// gradient sums over time steps do not allocate.

/// out += a * b
inline void matmul_add(Tensor2D& out, const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows() || out.rows() != a.rows() || out.cols() != b.cols()) {
    throw ShapeError("matmul: " + a.shape_string() + " * " + b.shape_string() + " -> " +
                     out.shape_string());
  }
  detail::view(out).noalias() += detail::view(a) * detail::view(b);
}

/// out += a^T * b
inline void matmul_tn_add(Tensor2D& out, const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw ShapeError("matmul_tn: " + a.shape_string() + "^T * " + b.shape_string() + " -> " +
                     out.shape_string());
  }
  detail::view(out).noalias() += detail::view(a).transpose() * detail::view(b);
}

/// out += a * b^T
inline void matmul_nt_add(Tensor2D& out, const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.cols() || out.rows() != a.rows() || out.cols() != b.rows()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " * " + b.shape_string() + "^T -> " +
                     out.shape_string());
  }
  detail::view(out).noalias() += detail::view(a) * detail::view(b).transpose();
}

inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Tensor2D out(a.rows(), b.cols());
  matmul_add(out, a, b);
  return out;
}

inline Tensor2D matmul_tn(const Tensor2D& a, const Tensor2D& b) {
  Tensor2D out(a.cols(), b.cols());
  matmul_tn_add(out, a, b);
  return out;
}

inline Tensor2D matmul_nt(const Tensor2D& a, const Tensor2D& b) {
  Tensor2D out(a.rows(), b.rows());
  matmul_nt_add(out, a, b);
  return out;
}

inline Tensor2D transpose(const Tensor2D& a) {
  Tensor2D out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise operations.

inline double sigmoid(double x) {
  // Split by sign so exp never overflows.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor2D sigmoid(const Tensor2D& x) {
  return detail::map(x, [](double v) { return sigmoid(v); });
}

inline Tensor2D tanh(const Tensor2D& x) {
  return detail::map(x, [](double v) { return std::tanh(v); });
}

inline Tensor2D hadamard(const Tensor2D& a, const Tensor2D& b) {
  detail::require_same_shape(a, b, "hadamard");
  Tensor2D out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
  detail::require_same_shape(a, b, "add");
  Tensor2D out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor2D subtract(const Tensor2D& a, const Tensor2D& b) {
  detail::require_same_shape(a, b, "subtract");
  Tensor2D out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor2D scale(const Tensor2D& a, double s) {
  return detail::map(a, [s](double v) { return v * s; });
}

/// a += b
inline void add_inplace(Tensor2D& a, const Tensor2D& b) {
  detail::require_same_shape(a, b, "add_inplace");
  double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

/// Adds an n x 1 column to every column of an n x B tensor.
inline void add_column_broadcast(Tensor2D& a, const Tensor2D& column) {
  if (column.cols() != 1 || column.rows() != a.rows()) {
    throw ShapeError("add_column_broadcast: " + column.shape_string() + " onto " +
                     a.shape_string());
  }
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double v = column[r];
    for (double& x : a.row(r)) x += v;
  }
}

/// out(r, 0) += sum_c a(r, c)
inline void add_row_sums(Tensor2D& out, const Tensor2D& a) {
  if (out.cols() != 1 || out.rows() != a.rows()) {
    throw ShapeError("add_row_sums: " + a.shape_string() + " into " + out.shape_string());
  }
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    for (double x : a.row(r)) s += x;
    out[r] += s;
  }
}

/// Row-wise softmax with per-row max subtraction.
inline Tensor2D softmax_rows(const Tensor2D& x) {
  Tensor2D out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    auto dst = out.row(r);
    if (in.empty()) continue;
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      dst[c] = std::exp(in[c] - mx);
      sum += dst[c];
    }
    for (double& v : dst) v /= sum;
  }
  return out;
}

/// Column-wise softmax; the natural form for vocab x batch logits.
inline Tensor2D softmax_cols(const Tensor2D& x) {
  Tensor2D out(x.rows(), x.cols());
  const std::size_t n = x.rows();
  const std::size_t m = x.cols();
  if (n == 0) return out;
  std::vector<double> mx(x.row(0).begin(), x.row(0).end());
  for (std::size_t r = 1; r < n; ++r) {
    const auto in = x.row(r);
    for (std::size_t c = 0; c < m; ++c) mx[c] = std::max(mx[c], in[c]);
  }
  std::vector<double> sum(m, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto in = x.row(r);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < m; ++c) {
      dst[c] = std::exp(in[c] - mx[c]);
      sum[c] += dst[c];
    }
  }
  for (std::size_t r = 0; r < n; ++r) {
    auto dst = out.row(r);
    for (std::size_t c = 0; c < m; ++c) dst[c] /= sum[c];
  }
  return out;
}

inline bool all_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Random numbers.
//
// Generator: xoshiro256** (Blackman & Vigna), state seeded by four successive
// splitmix64 outputs of the user seed. Uniform doubles take the top 53 bits.
// Normal variates use the Marsaglia polar method; the second variate of each
// accepted pair is cached and returned by the next call, so the normal stream
// is a pure function of the seed and call sequence. The integer stream is
// identical on every platform; normal variates additionally depend on
// std::log being reproducible, which holds for a fixed libm.

struct RngState {
  std::array<std::uint64_t, 4> s{};
  bool has_spare = false;
  double spare = 0.0;
  bool operator==(const RngState&) const = default;
};

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& word : state_.s) word = splitmix64(x);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    auto& s = state_.s;
    const std::uint64_t result = std::rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = std::rotl(s[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by rejection, n > 0.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw NumericError("SeededRng::below: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  double normal() {
    if (state_.has_spare) {
      state_.has_spare = false;
      return state_.spare;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    state_.spare = v * f;
    state_.has_spare = true;
    return u * f;
  }

  const RngState& state() const { return state_; }
  void set_state(const RngState& st) { state_ = st; }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_ = 0;
  RngState state_;
};

/// Fisher-Yates shuffle driven by SeededRng.
template <class T>
void shuffle(std::vector<T>& items, SeededRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

inline Tensor2D gaussian(SeededRng& rng, std::size_t rows, std::size_t cols, double mean,
                         double std_dev) {
  if (!(std_dev >= 0.0)) throw NumericError("gaussian: negative std");
  Tensor2D out(rows, cols, mean);
  if (std_dev == 0.0) return out;
  for (double& v : out.values()) v = mean + std_dev * rng.normal();
  return out;
}

inline Tensor2D uniform(SeededRng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  Tensor2D out(rows, cols);
  for (double& v : out.values()) v = lo + (hi - lo) * rng.uniform();
  return out;
}

/// Entries are 1 with probability keep_prob and 0 otherwise.
inline Tensor2D bernoulli_mask(SeededRng& rng, std::size_t rows, std::size_t cols,
                               double keep_prob) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw NumericError("bernoulli_mask: keep_prob must lie in (0, 1]");
  }
  Tensor2D out(rows, cols, 1.0);
  if (keep_prob == 1.0) return out;
  for (double& v : out.values()) v = rng.uniform() < keep_prob ? 1.0 : 0.0;
  return out;
}

}  // namespace bayesrnn
