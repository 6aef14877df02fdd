#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "fambav/tensor.hpp"

namespace fambav {

enum class Elementwise { Add, Sub, Mul, Div, Exp, Log, Neg, Sigmoid, Silu, Softplus, Expm1 };

bool is_binary(Elementwise kind) noexcept;

/// Trailing-axis broadcast of two shapes; throws DimensionError naming both.
Shape broadcast_shapes(const Shape& a, const Shape& b);

template <typename T>
Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b = {});

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::Add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::Sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::Mul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::Div, a, b); }
template <typename T> Tensor<T> exp(const Tensor<T>& a) { return elementwise(Elementwise::Exp, a); }
template <typename T> Tensor<T> log(const Tensor<T>& a) { return elementwise(Elementwise::Log, a); }
template <typename T> Tensor<T> neg(const Tensor<T>& a) { return elementwise(Elementwise::Neg, a); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a) { return elementwise(Elementwise::Sigmoid, a); }
template <typename T> Tensor<T> silu(const Tensor<T>& a) { return elementwise(Elementwise::Silu, a); }
template <typename T> Tensor<T> softplus(const Tensor<T>& a) { return elementwise(Elementwise::Softplus, a); }
template <typename T> Tensor<T> expm1(const Tensor<T>& a) { return elementwise(Elementwise::Expm1, a); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return mul(a, Tensor<T>::scalar(factor));
}

/// phi1(z) = (e^z - 1) / z, with phi1(0) = 1.
template <typename T>
Tensor<T> phi1(const Tensor<T>& z);

/// [.., m, k] x [.., k, n] -> [.., m, n]; batch extents broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Normalizes over the last axis, then applies gain and bias.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim = false);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis);
/// Half-open range [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::ptrdiff_t axis, std::size_t begin, std::size_t end);
/// Rows of the leading axis, in `index` order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& index);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::ptrdiff_t axis0 = -2, std::ptrdiff_t axis1 = -1);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> reverse(const Tensor<T>& x, std::ptrdiff_t axis);
template <typename T>
Tensor<T> softmax_lastaxis(const Tensor<T>& x);
template <typename T>
Tensor<T> log_softmax_lastaxis(const Tensor<T>& x);

/// One output row of `mix_rows`: weighted sources from the same batch item.
struct RowSource {
  std::size_t index;
  double weight;
};
using RowMix = std::vector<std::vector<RowSource>>;

/// x[B, L, D] -> y[B, L', D] with y[b, i] = sum_j w_j * x[b, src_j]; `mix[b]` has L' rows.
template <typename T>
Tensor<T> mix_rows(const Tensor<T>& x, const std::vector<RowMix>& mix);

/// Throws NumericalError naming `what` at the first non-finite element.
template <typename T>
void check_finite(const Tensor<T>& x, const char* what);

namespace scalar {

template <typename T>
T sigmoid(T x) {
  const T e = std::exp(-std::abs(x));
  return (x >= T(0) ? T(1) : e) / (T(1) + e);
}

template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

inline constexpr double kPhi1SeriesBound = 1e-4;

template <typename T>
T phi1(T z) {
  if (std::abs(z) < T(kPhi1SeriesBound)) return T(1) + z * (T(0.5) + z * (T(1) / T(6) + z / T(24)));
  return std::expm1(z) / z;
}

/// Same as phi1 but reuses a precomputed expm1(z).
template <typename T>
T phi1_from_expm1(T z, T em1) {
  if (std::abs(z) < T(kPhi1SeriesBound)) return T(1) + z * (T(0.5) + z * (T(1) / T(6) + z / T(24)));
  return em1 / z;
}

/// d phi1 / dz = (z e^z - e^z + 1) / z^2.
template <typename T>
T phi1_grad_from_expm1(T z, T em1) {
  if (std::abs(z) < T(1e-2)) {
    return T(0.5) + z * (T(1) / T(3) + z * (T(1) / T(8) + z * (T(1) / T(30) + z * (T(1) / T(144) + z / T(840)))));
  }
  return (z * em1 + z - em1) / (z * z);
}

template <typename T>
T phi1_grad(T z) {
  return phi1_grad_from_expm1(z, std::expm1(z));
}

}  // namespace scalar

}  // namespace fambav
