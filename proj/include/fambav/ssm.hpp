#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "fambav/params.hpp"
#include "fambav/rng.hpp"
#include "fambav/tensor.hpp"

namespace fambav {

/// Backward scans the reversed sequence and re-reverses its output.
enum class ScanDirection { Forward, Backward };

struct SsmConfig {
  std::size_t dim = 64;      // D, token width
  std::size_t inner = 128;   // E, expanded width
  std::size_t state = 8;     // N
  std::size_t conv_kernel = 4;
  std::size_t dt_rank = 0;   // 0 = ceil(D / 16)
  bool skip = true;
  bool zero_out_proj = false;
  double dt_min = 1e-3;
  double dt_max = 1e-1;

  std::size_t resolved_dt_rank() const { return dt_rank ? dt_rank : (dim + 15) / 16; }
};

/// Selective state-space parameters for one scan direction. A = -exp(a_log) is
/// a strictly negative diagonal per channel.
template <typename T>
struct SsmParams {
  Tensor<T> a_log;        // [E, N]
  Tensor<T> conv_kernel;  // [E, K]
  Tensor<T> conv_bias;    // [E]
  Tensor<T> dt_down;      // [E, R]
  Tensor<T> dt_up;        // [R, E]
  Tensor<T> dt_bias;      // [E]
  Tensor<T> b_proj;       // [E, N]
  Tensor<T> c_proj;       // [E, N]
  Tensor<T> skip_d;       // [E]

  Tensor<T> a_diag() const;
  void collect(ParameterList<T>& out, const std::string& prefix) const;
  static SsmParams init(const SsmConfig& cfg, Rng& rng);
};

template <typename T>
struct Selectivity {
  Tensor<T> delta;  // [B, L, E], strictly positive
  Tensor<T> bmat;   // [B, L, N]
  Tensor<T> cmat;   // [B, L, N]
};

/// Input-dependent step sizes and input/output maps for the tokens `u` [B, L, E].
template <typename T>
Selectivity<T> parameterize(const SsmParams<T>& params, const Tensor<T>& u);

template <typename T>
struct Discretized {
  Tensor<T> abar;  // [B, L, E, N]
  Tensor<T> bbar;  // [B, L, E, N]
};

/// Zero-order hold for diagonal A: abar = exp(delta a), bbar = phi1(delta a) delta b.
template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a_diag, const Tensor<T>& bmat);

/// h_t = abar_t h_{t-1} + bbar_t x_t, y_t = C_t h_t (+ skip_d x_t), h_0 = 0, computed per
/// (batch, channel) lane. `skip_d` may be undefined to disable the pass-through.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& bmat,
                         const Tensor<T>& cmat, const Tensor<T>& a_diag, const Tensor<T>& skip_d,
                         ScanDirection dir);

/// Depthwise conv over the sequence axis of x [B, L, E] with kernel [E, K]; causal for
/// Forward (zero left padding), anti-causal for Backward.
template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                        ScanDirection dir);

/// Bidirectional Mamba mixer: norm, expansion to (x, z), per-direction conv + SiLU +
/// selective scan, SiLU(z) gating, direction sum, projection back to D.
template <typename T>
struct MambaBlock {
  Tensor<T> norm_gain;  // [D]
  Tensor<T> norm_bias;  // [D]
  Tensor<T> in_x;       // [D, E]
  Tensor<T> in_z;       // [D, E]
  Tensor<T> out_proj;   // [E, D]
  std::array<SsmParams<T>, 2> directions;  // Forward, Backward
  bool skip = true;

  /// tokens [B, L, D] -> [B, L, D]; residual is the caller's.
  Tensor<T> forward(const Tensor<T>& tokens) const;
  void collect(ParameterList<T>& out, const std::string& prefix) const;
  static MambaBlock init(const SsmConfig& cfg, Rng& rng);
};

}  // namespace fambav
