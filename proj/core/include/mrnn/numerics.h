#pragma once

// Dense linear algebra, activations and the deterministic RNG used by every
// other part of the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mrnn {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vector = std::vector<double>;

/// Row-major dense matrix. `data().size() == rows() * cols()` always holds.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix payload has " + std::to_string(data_.size()) +
                           " entries, expected " + std::to_string(rows_ * cols_));
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  const std::vector<T>& data() const { return data_; }

  void set_zero() { std::fill(data_.begin(), data_.end(), T{0}); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool operator==(const BasicMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

// ---------------------------------------------------------------------------
// Products. The `_add` forms accumulate into `out` and never allocate; they are
// what the forward/backward passes use.

/// out += m * v
void matvec_add(const Matrix& m, std::span<const double> v, std::span<double> out);
/// out += mᵀ * v
void matvec_transposed_add(const Matrix& m, std::span<const double> v, std::span<double> out);
/// m += a ⊗ b  (rank-1 update, a has m.rows() entries, b has m.cols())
void outer_add(std::span<const double> a, std::span<const double> b, Matrix& m);

Vector matvec(const Matrix& m, std::span<const double> v);
Vector matvec_transposed(const Matrix& m, std::span<const double> v);

// ---------------------------------------------------------------------------
// Activations

inline constexpr double kScaledTanhAmplitude = 1.7159;
inline constexpr double kScaledTanhSlope = 2.0 / 3.0;

Vector relu(std::span<const double> v);
/// 1.7159 * tanh(2x/3), elementwise.
Vector scaled_tanh(std::span<const double> v);
Vector sigmoid(std::span<const double> v);
/// Max-subtracted softmax.
Vector softmax(std::span<const double> logits);

void relu_inplace(std::span<double> v);
void scaled_tanh_inplace(std::span<double> v);
void sigmoid_inplace(std::span<double> v);
void softmax_inplace(std::span<double> v);

/// Derivative of scaled_tanh expressed through its output value y = g(x).
inline double scaled_tanh_grad_from_output(double y) {
  return kScaledTanhSlope * (kScaledTanhAmplitude - y * y / kScaledTanhAmplitude);
}

// ---------------------------------------------------------------------------
// Small helpers

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> v);
double squared_distance(std::span<const double> a, std::span<const double> b);
/// a += scale * b
void axpy(double scale, std::span<const double> b, std::span<double> a);
bool all_finite(std::span<const double> v);
/// Throws NonFiniteError naming `what` if any entry is NaN/Inf.
void require_finite(std::span<const double> v, std::string_view what);

/// log2(sum_i 2^x_i), stable for large magnitudes. Empty input is an error.
double log2_sum_exp2(std::span<const double> x);

// ---------------------------------------------------------------------------
// RNG

/// SplitMix64. Bit-reproducible across platforms; all sampling helpers below
/// are defined in terms of next_u64() only (no std:: distributions).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  /// Index drawn from a discrete distribution given by non-negative weights.
  std::size_t categorical(std::span<const double> weights);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Initialization

enum class InitKind { kZeros, kUniform, kXavier };

struct InitScheme {
  InitKind kind = InitKind::kXavier;
  /// Half-width for kUniform. Ignored otherwise.
  double scale = 0.0;

  static InitScheme zeros() { return {InitKind::kZeros, 0.0}; }
  static InitScheme uniform(double a) { return {InitKind::kUniform, a}; }
  static InitScheme xavier() { return {InitKind::kXavier, 0.0}; }
};

/// Parses "zeros", "xavier" or "uniform:<a>". Unknown names throw std::invalid_argument.
InitScheme parse_init_scheme(std::string_view name);
std::string to_string(const InitScheme& scheme);

/// Xavier draws from U(-a, a) with a = sqrt(6 / (rows + cols)).
Matrix init_matrix(std::size_t rows, std::size_t cols, const InitScheme& scheme, Rng& rng);

}  // namespace mrnn
