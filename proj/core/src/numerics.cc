#include "mrnn/numerics.h"

#include <limits>
#include <numbers>

namespace mrnn {
namespace {

void check_dims(bool ok, const char* op, std::size_t got, std::size_t want) {
  if (!ok) {
    throw DimensionError(std::string(op) + ": dimension mismatch (" + std::to_string(got) +
                         " vs " + std::to_string(want) + ")");
  }
}

}  // namespace

void matvec_add(const Matrix& m, std::span<const double> v, std::span<double> out) {
  check_dims(m.cols() == v.size(), "matvec", v.size(), m.cols());
  check_dims(m.rows() == out.size(), "matvec", out.size(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto row = m.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) acc += row[j] * v[j];
    out[i] += acc;
  }
}

void matvec_transposed_add(const Matrix& m, std::span<const double> v, std::span<double> out) {
  check_dims(m.rows() == v.size(), "matvec_transposed", v.size(), m.rows());
  check_dims(m.cols() == out.size(), "matvec_transposed", out.size(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    const auto row = m.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) out[j] += row[j] * vi;
  }
}

void outer_add(std::span<const double> a, std::span<const double> b, Matrix& m) {
  check_dims(m.rows() == a.size(), "outer", a.size(), m.rows());
  check_dims(m.cols() == b.size(), "outer", b.size(), m.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ai = a[i];
    if (ai == 0.0) continue;
    auto row = m.row(i);
    for (std::size_t j = 0; j < b.size(); ++j) row[j] += ai * b[j];
  }
}

Vector matvec(const Matrix& m, std::span<const double> v) {
  Vector out(m.rows(), 0.0);
  matvec_add(m, v, out);
  return out;
}

Vector matvec_transposed(const Matrix& m, std::span<const double> v) {
  Vector out(m.cols(), 0.0);
  matvec_transposed_add(m, v, out);
  return out;
}

void relu_inplace(std::span<double> v) {
  for (double& x : v) x = x > 0.0 ? x : 0.0;
}

void scaled_tanh_inplace(std::span<double> v) {
  for (double& x : v) x = kScaledTanhAmplitude * std::tanh(kScaledTanhSlope * x);
}

void sigmoid_inplace(std::span<double> v) {
  for (double& x : v) {
    // Split on sign so exp never overflows.
    if (x >= 0.0) {
      x = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      x = e / (1.0 + e);
    }
  }
}

void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  const double max = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - max);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

Vector relu(std::span<const double> v) {
  Vector out(v.begin(), v.end());
  relu_inplace(out);
  return out;
}

Vector scaled_tanh(std::span<const double> v) {
  Vector out(v.begin(), v.end());
  scaled_tanh_inplace(out);
  return out;
}

Vector sigmoid(std::span<const double> v) {
  Vector out(v.begin(), v.end());
  sigmoid_inplace(out);
  return out;
}

Vector softmax(std::span<const double> logits) {
  Vector out(logits.begin(), logits.end());
  softmax_inplace(out);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  check_dims(a.size() == b.size(), "dot", a.size(), b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double squared_norm(std::span<const double> v) { return dot(v, v); }

double squared_distance(std::span<const double> a, std::span<const double> b) {
  check_dims(a.size() == b.size(), "distance", a.size(), b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

void axpy(double scale, std::span<const double> b, std::span<double> a) {
  check_dims(a.size() == b.size(), "axpy", b.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
}

bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void require_finite(std::span<const double> v, std::string_view what) {
  if (!all_finite(v)) throw NonFiniteError("non-finite value in " + std::string(what));
}

double log2_sum_exp2(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("log2_sum_exp2: empty input");
  const double max = *std::max_element(x.begin(), x.end());
  if (max == -std::numeric_limits<double>::infinity()) return max;
  double sum = 0.0;
  for (double v : x) sum += std::exp2(v - max);
  return max + std::log2(sum);
}

std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (weights.empty() || !(total > 0.0)) {
    throw std::invalid_argument("Rng::categorical: weights must have positive mass");
  }
  const double target = uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (target < acc) return i;
  }
  // Rounding can leave target == total; return the last index with mass.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return weights.size() - 1;
}

InitScheme parse_init_scheme(std::string_view name) {
  if (name == "zeros") return InitScheme::zeros();
  if (name == "xavier") return InitScheme::xavier();
  constexpr std::string_view kUniformPrefix = "uniform:";
  if (name.starts_with(kUniformPrefix)) {
    const std::string arg(name.substr(kUniformPrefix.size()));
    std::size_t used = 0;
    double a = 0.0;
    try {
      a = std::stod(arg, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == arg.size() && used > 0 && a >= 0.0) return InitScheme::uniform(a);
  }
  throw std::invalid_argument("unknown init scheme '" + std::string(name) + "'");
}

std::string to_string(const InitScheme& scheme) {
  switch (scheme.kind) {
    case InitKind::kZeros:
      return "zeros";
    case InitKind::kXavier:
      return "xavier";
    case InitKind::kUniform:
      return "uniform:" + std::to_string(scheme.scale);
  }
  return "unknown";
}

Matrix init_matrix(std::size_t rows, std::size_t cols, const InitScheme& scheme, Rng& rng) {
  if (rows == 0 || cols == 0) throw DimensionError("init_matrix: dimensions must be positive");
  Matrix m(rows, cols);
  double half_width = 0.0;
  switch (scheme.kind) {
    case InitKind::kZeros:
      return m;
    case InitKind::kUniform:
      half_width = scheme.scale;
      break;
    case InitKind::kXavier:
      half_width = std::sqrt(6.0 / static_cast<double>(rows + cols));
      break;
  }
  for (double& x : m.flat()) x = rng.uniform(-half_width, half_width);
  return m;
}

}  // namespace mrnn
