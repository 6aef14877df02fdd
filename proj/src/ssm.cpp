#include "fambav/ssm.hpp"

#include <cmath>

#include "fambav/errors.hpp"
#include "fambav/ops.hpp"
#include "simd_math.hpp"

namespace fambav {

using detail::Node;

template <typename T>
Tensor<T> SsmParams<T>::a_diag() const {
  return neg(exp(a_log));
}

template <typename T>
void SsmParams<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + "a_log", a_log, false});
  out.push_back({prefix + "conv_kernel", conv_kernel, true});
  out.push_back({prefix + "conv_bias", conv_bias, false});
  out.push_back({prefix + "dt_down", dt_down, true});
  out.push_back({prefix + "dt_up", dt_up, true});
  out.push_back({prefix + "dt_bias", dt_bias, false});
  out.push_back({prefix + "b_proj", b_proj, true});
  out.push_back({prefix + "c_proj", c_proj, true});
  out.push_back({prefix + "skip_d", skip_d, false});
}

template <typename T>
SsmParams<T> SsmParams<T>::init(const SsmConfig& cfg, Rng& rng) {
  const std::size_t e = cfg.inner, n = cfg.state, k = cfg.conv_kernel, r = cfg.resolved_dt_rank();
  if (n == 0 || e == 0 || k == 0) throw ConfigError("ssm: inner, state and conv_kernel must be >= 1");
  SsmParams p;
  p.a_log = Tensor<T>::zeros({e, n});
  {
    auto a = p.a_log.mutable_data();
    for (std::size_t i = 0; i < e; ++i) {
      for (std::size_t j = 0; j < n; ++j) a[i * n + j] = static_cast<T>(std::log(double(j + 1)));
    }
  }
  p.a_log.set_requires_grad();
  const double conv_bound = 1.0 / std::sqrt(double(k));
  p.conv_kernel = uniform_param<T>({e, k}, conv_bound, rng);
  p.conv_bias = uniform_param<T>({e}, conv_bound, rng);
  p.dt_down = uniform_param<T>({e, r}, 1.0 / std::sqrt(double(e)), rng);
  p.dt_up = uniform_param<T>({r, e}, 1.0 / std::sqrt(double(r)), rng);
  // softplus(dt_bias) log-uniform in [dt_min, dt_max].
  p.dt_bias = Tensor<T>::zeros({e});
  for (T& v : p.dt_bias.mutable_data()) {
    const double dt = std::exp(rng.uniform(std::log(cfg.dt_min), std::log(cfg.dt_max)));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  p.dt_bias.set_requires_grad();
  p.b_proj = uniform_param<T>({e, n}, 1.0 / std::sqrt(double(e)), rng);
  p.c_proj = uniform_param<T>({e, n}, 1.0 / std::sqrt(double(e)), rng);
  p.skip_d = constant_param<T>({e}, T(1));
  return p;
}

template <typename T>
Selectivity<T> parameterize(const SsmParams<T>& params, const Tensor<T>& u) {
  Selectivity<T> s;
  s.delta = softplus(add(matmul(matmul(u, params.dt_down), params.dt_up), params.dt_bias));
  s.bmat = matmul(u, params.b_proj);
  s.cmat = matmul(u, params.c_proj);
  return s;
}

namespace {


inline float lane_expm1(float z) { return ::expm1f(z); }
inline double lane_expm1(double z) { return ::expm1(z); }

// abar = e^z, phi = phi1(z) and optionally dphi = phi1'(z) for z = dt a over one state row.
template <typename T, bool WithGrad>
inline void zoh_row(const T* __restrict a, T dt, std::size_t n, T* __restrict abar, T* __restrict phi,
                    T* __restrict dphi) {
#pragma omp simd
  for (std::size_t k = 0; k < n; ++k) {
    const T z = dt * a[k];
    const T em1 = lane_expm1(z);
    const T az = std::abs(z);
    // Both branches are evaluated so the select stays vectorizable.
    const T series = T(1) + z * (T(0.5) + z * (T(1) / T(6) + z / T(24)));
    const T ratio = em1 / z;
    abar[k] = em1 + T(1);
    phi[k] = az < T(scalar::kPhi1SeriesBound) ? series : ratio;
    if constexpr (WithGrad) {
      const T gseries =
          T(0.5) + z * (T(1) / T(3) + z * (T(1) / T(8) + z * (T(1) / T(30) + z * (T(1) / T(144) + z / T(840)))));
      const T gratio = (z * em1 + z - em1) / (z * z);
      dphi[k] = az < T(1e-2) ? gseries : gratio;
    }
  }
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw ContractError(std::string(what) + ": non-finite input");
  }
}

template <typename T>
void require_positive(const Tensor<T>& t, const char* what) {
  for (T v : t.data()) {
    if (!(v > T(0))) throw ContractError(std::string(what) + ": step size must be > 0");
  }
}

}  // namespace

template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a_diag, const Tensor<T>& bmat) {
  if (delta.dim() != 3 || a_diag.dim() != 2 || bmat.dim() != 3 || a_diag.size(0) != delta.size(2) ||
      bmat.size(0) != delta.size(0) || bmat.size(1) != delta.size(1) || bmat.size(2) != a_diag.size(1)) {
    throw DimensionError("discretize: delta " + shape_str(delta.shape()) + ", A " + shape_str(a_diag.shape()) +
                         ", B " + shape_str(bmat.shape()) + " inconsistent");
  }
  require_finite(delta, "discretize");
  require_finite(a_diag, "discretize");
  require_finite(bmat, "discretize");
  require_positive(delta, "discretize");
  const std::size_t b = delta.size(0), l = delta.size(1), e = delta.size(2), n = a_diag.size(1);
  const Tensor<T> dt = reshape(delta, {b, l, e, 1});
  const Tensor<T> dA = mul(dt, a_diag);
  Discretized<T> out;
  out.abar = exp(dA);
  out.bbar = mul(mul(phi1(dA), dt), reshape(bmat, {b, l, 1, n}));
  return out;
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& bmat,
                         const Tensor<T>& cmat, const Tensor<T>& a_diag, const Tensor<T>& skip_d,
                         ScanDirection dir) {
  if (x.dim() != 3 || delta.shape() != x.shape() || bmat.dim() != 3 || cmat.shape() != bmat.shape() ||
      bmat.size(0) != x.size(0) || bmat.size(1) != x.size(1) || a_diag.dim() != 2 ||
      a_diag.size(0) != x.size(2) || a_diag.size(1) != bmat.size(2)) {
    throw DimensionError("selective_scan: x " + shape_str(x.shape()) + ", delta " + shape_str(delta.shape()) +
                         ", B " + shape_str(bmat.shape()) + ", C " + shape_str(cmat.shape()) + ", A " +
                         shape_str(a_diag.shape()) + " inconsistent");
  }
  const bool use_skip = skip_d.defined();
  if (use_skip && skip_d.numel() != x.size(2)) {
    throw DimensionError("selective_scan: skip_d " + shape_str(skip_d.shape()) + " does not match channels");
  }
  require_positive(delta, "selective_scan");
  const std::size_t B = x.size(0), L = x.size(1), E = x.size(2), N = a_diag.size(1);
  const bool recording = detail::should_record<T>({&x, &delta, &bmat, &cmat, &a_diag, use_skip ? &skip_d : nullptr});

  Tensor<T> out = Tensor<T>::zeros({B, L, E});
  const T* px = x.data().data();
  const T* pdt = delta.data().data();
  const T* pb = bmat.data().data();
  const T* pc = cmat.data().data();
  const T* pa = a_diag.data().data();
  const T* pd = use_skip ? skip_d.data().data() : nullptr;
  T* py = out.mutable_data().data();

  // Hidden states are kept for the backward pass: [B, L, E, N].
  const std::size_t EN = E * N;
  Buffer<T> states(recording ? B * L * EN : 0);
  std::vector<T> h(EN), abar(N), phi(N);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t s = 0; s < L; ++s) {
      const std::size_t t = dir == ScanDirection::Forward ? s : L - 1 - s;
      const std::size_t bt = b * L + t;
      const T* bv = pb + bt * N;
      const T* cv = pc + bt * N;
      for (std::size_t e = 0; e < E; ++e) {
        const T dt = pdt[bt * E + e];
        const T xv = px[bt * E + e];
        T* hp = h.data() + e * N;
        zoh_row<T, false>(pa + e * N, dt, N, abar.data(), phi.data(), nullptr);
        const T* ab = abar.data();
        const T* ph = phi.data();
        T y = 0;
#pragma omp simd reduction(+ : y)
        for (std::size_t k = 0; k < N; ++k) {
          hp[k] = ab[k] * hp[k] + ph[k] * dt * bv[k] * xv;
          y += cv[k] * hp[k];
        }
        if (use_skip) y += pd[e] * xv;
        py[bt * E + e] = y;
      }
      if (recording) std::copy(h.begin(), h.end(), states.begin() + static_cast<std::ptrdiff_t>(bt * EN));
    }
  }
  if (!recording) return out;

  std::vector<detail::NodePtr<T>> inputs{x.node(), delta.node(), bmat.node(), cmat.node(), a_diag.node()};
  Node<T>* dn = use_skip ? skip_d.node().get() : nullptr;
  if (use_skip) inputs.push_back(skip_d.node());
  Node<T>* xn = x.node().get();
  Node<T>* tn = delta.node().get();
  Node<T>* bn = bmat.node().get();
  Node<T>* cn = cmat.node().get();
  Node<T>* an = a_diag.node().get();
  Node<T>* on = out.node().get();
  active_tape<T>()->record(
      "selective_scan", std::move(inputs), out.node(),
      [=, states = std::move(states)] {
        const T* g = on->grad.data();
        const T* px = xn->value.data();
        const T* pdt = tn->value.data();
        const T* pb = bn->value.data();
        const T* pc = cn->value.data();
        const T* pa = an->value.data();
        const T* pd = dn ? dn->value.data() : nullptr;
        std::vector<T> gx(B * L * E, T(0)), gdt(B * L * E, T(0));
        std::vector<T> gB(B * L * N, T(0)), gC(B * L * N, T(0)), gA(E * N, T(0)), gD(E, T(0));
        const std::size_t EN = E * N;
        std::vector<T> gh(EN), abar(N), phi(N), dphi(N);
        const std::vector<T> zeros(EN, T(0));
        for (std::size_t b = 0; b < B; ++b) {
          std::fill(gh.begin(), gh.end(), T(0));
          for (std::size_t s = L; s-- > 0;) {
            const std::size_t t = dir == ScanDirection::Forward ? s : L - 1 - s;
            const std::size_t bt = b * L + t;
            const T* hcur_t = states.data() + bt * EN;
            const T* hprev_t = zeros.data();
            if (s > 0) {
              const std::size_t tp = dir == ScanDirection::Forward ? s - 1 : L - s;
              hprev_t = states.data() + (b * L + tp) * EN;
            }
            const T* bv = pb + bt * N;
            const T* cv = pc + bt * N;
            T* gBt = gB.data() + bt * N;
            T* gCt = gC.data() + bt * N;
            for (std::size_t e = 0; e < E; ++e) {
              const T* a = pa + e * N;
              const T* hcur = hcur_t + e * N;
              const T* hprev = hprev_t + e * N;
              T* gAe = gA.data() + e * N;
              T* ghp = gh.data() + e * N;
              const T gy = g[bt * E + e];
              const T dt = pdt[bt * E + e];
              const T xv = px[bt * E + e];
              zoh_row<T, true>(a, dt, N, abar.data(), phi.data(), dphi.data());
              const T* ab = abar.data();
              const T* ph = phi.data();
              const T* dph = dphi.data();
              T gxv = 0, gdtv = 0;
              if (pd) {
                gD[e] += gy * xv;
                gxv += gy * pd[e];
              }
#pragma omp simd reduction(+ : gxv, gdtv)
              for (std::size_t k = 0; k < N; ++k) {
                gCt[k] += gy * hcur[k];
                ghp[k] += gy * cv[k];
                const T g_bbar = ghp[k] * xv;
                const T g_z = ghp[k] * hprev[k] * ab[k] + g_bbar * dph[k] * dt * bv[k];
                gxv += ghp[k] * ph[k] * dt * bv[k];
                gdtv += g_bbar * ph[k] * bv[k] + g_z * a[k];
                gBt[k] += g_bbar * ph[k] * dt;
                gAe[k] += g_z * dt;
                ghp[k] *= ab[k];
              }
              gx[bt * E + e] += gxv;
              gdt[bt * E + e] += gdtv;
            }
          }
        }
        auto accumulate = [](Node<T>* node, const std::vector<T>& src) {
          if (!node || !node->requires_grad) return;
          auto& dst = node->ensure_grad();
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        };
        accumulate(xn, gx);
        accumulate(tn, gdt);
        accumulate(bn, gB);
        accumulate(cn, gC);
        accumulate(an, gA);
        accumulate(dn, gD);
      });
  return out;
}

template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, ScanDirection dir) {
  if (x.dim() != 3 || kernel.dim() != 2 || kernel.size(0) != x.size(2) || bias.numel() != x.size(2)) {
    throw DimensionError("causal_conv1d: x " + shape_str(x.shape()) + ", kernel " + shape_str(kernel.shape()) +
                         ", bias " + shape_str(bias.shape()) + " inconsistent");
  }
  const std::size_t B = x.size(0), L = x.size(1), E = x.size(2), K = kernel.size(1);
  Tensor<T> out = Tensor<T>::zeros({B, L, E});
  const T* px = x.data().data();
  const T* pw = kernel.data().data();
  const T* pbias = bias.data().data();
  T* py = out.mutable_data().data();
  // Source position for tap j at output t, or -1 when it falls in the padding.
  auto source = [=](std::size_t t, std::size_t j) -> std::ptrdiff_t {
    const auto off = static_cast<std::ptrdiff_t>(K - 1 - j);
    const auto pos = dir == ScanDirection::Forward ? static_cast<std::ptrdiff_t>(t) - off
                                                   : static_cast<std::ptrdiff_t>(t) + off;
    return (pos < 0 || pos >= static_cast<std::ptrdiff_t>(L)) ? -1 : pos;
  };
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      T* dst = py + (b * L + t) * E;
      for (std::size_t e = 0; e < E; ++e) dst[e] = pbias[e];
      for (std::size_t j = 0; j < K; ++j) {
        const std::ptrdiff_t pos = source(t, j);
        if (pos < 0) continue;
        const T* src = px + (b * L + static_cast<std::size_t>(pos)) * E;
        for (std::size_t e = 0; e < E; ++e) dst[e] += pw[e * K + j] * src[e];
      }
    }
  }
  if (!detail::should_record<T>({&x, &kernel, &bias})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* wn = kernel.node().get();
  Node<T>* bn = bias.node().get();
  Node<T>* on = out.node().get();
  active_tape<T>()->record("causal_conv1d", {x.node(), kernel.node(), bias.node()}, out.node(),
                           [=] {
                             const T* g = on->grad.data();
                             const T* px = xn->value.data();
                             const T* pw = wn->value.data();
                             T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
                             T* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
                             T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                             for (std::size_t b = 0; b < B; ++b) {
                               for (std::size_t t = 0; t < L; ++t) {
                                 const T* gr = g + (b * L + t) * E;
                                 if (gb) for (std::size_t e = 0; e < E; ++e) gb[e] += gr[e];
                                 for (std::size_t j = 0; j < K; ++j) {
                                   const std::ptrdiff_t pos = source(t, j);
                                   if (pos < 0) continue;
                                   const std::size_t off = (b * L + static_cast<std::size_t>(pos)) * E;
                                   for (std::size_t e = 0; e < E; ++e) {
                                     if (gx) gx[off + e] += pw[e * K + j] * gr[e];
                                     if (gw) gw[e * K + j] += px[off + e] * gr[e];
                                   }
                                 }
                               }
                             }
                           });
  return out;
}

template <typename T>
Tensor<T> MambaBlock<T>::forward(const Tensor<T>& tokens) const {
  if (tokens.dim() != 3 || tokens.size(1) == 0) {
    throw DimensionError("mamba_block: expected [B, L>=1, D], got " + shape_str(tokens.shape()));
  }
  const Tensor<T> normed = layernorm(tokens, norm_gain, norm_bias);
  const Tensor<T> x = matmul(normed, in_x);
  const Tensor<T> gate = silu(matmul(normed, in_z));
  Tensor<T> mixed;
  for (std::size_t d = 0; d < 2; ++d) {
    const auto dir = d == 0 ? ScanDirection::Forward : ScanDirection::Backward;
    const SsmParams<T>& p = directions[d];
    const Tensor<T> u = silu(causal_conv1d(x, p.conv_kernel, p.conv_bias, dir));
    const Selectivity<T> sel = parameterize(p, u);
    const Tensor<T> y = selective_scan(u, sel.delta, sel.bmat, sel.cmat, p.a_diag(),
                                       skip ? p.skip_d : Tensor<T>{}, dir);
    const Tensor<T> gated = mul(y, gate);
    mixed = mixed.defined() ? add(mixed, gated) : gated;
  }
  return matmul(mixed, out_proj);
}

template <typename T>
void MambaBlock<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + "norm.gain", norm_gain, false});
  out.push_back({prefix + "norm.bias", norm_bias, false});
  out.push_back({prefix + "in_x", in_x, true});
  out.push_back({prefix + "in_z", in_z, true});
  directions[0].collect(out, prefix + "fwd.");
  directions[1].collect(out, prefix + "bwd.");
  out.push_back({prefix + "out_proj", out_proj, true});
}

template <typename T>
MambaBlock<T> MambaBlock<T>::init(const SsmConfig& cfg, Rng& rng) {
  if (cfg.dim == 0) throw ConfigError("mamba_block: dim must be >= 1");
  MambaBlock blk;
  blk.skip = cfg.skip;
  blk.norm_gain = constant_param<T>({cfg.dim}, T(1));
  blk.norm_bias = constant_param<T>({cfg.dim}, T(0));
  const double in_bound = 1.0 / std::sqrt(double(cfg.dim));
  blk.in_x = uniform_param<T>({cfg.dim, cfg.inner}, in_bound, rng);
  blk.in_z = uniform_param<T>({cfg.dim, cfg.inner}, in_bound, rng);
  blk.directions[0] = SsmParams<T>::init(cfg, rng);
  blk.directions[1] = SsmParams<T>::init(cfg, rng);
  blk.out_proj = cfg.zero_out_proj ? constant_param<T>({cfg.inner, cfg.dim}, T(0))
                                   : uniform_param<T>({cfg.inner, cfg.dim}, 1.0 / std::sqrt(double(cfg.inner)), rng);
  return blk;
}

#define FAMBAV_INSTANTIATE(T)                                                                              \
  template struct SsmParams<T>;                                                                            \
  template struct MambaBlock<T>;                                                                           \
  template Selectivity<T> parameterize<T>(const SsmParams<T>&, const Tensor<T>&);                          \
  template Discretized<T> discretize<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> selective_scan<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                       const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ScanDirection); \
  template Tensor<T> causal_conv1d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ScanDirection);

FAMBAV_INSTANTIATE(float)
FAMBAV_INSTANTIATE(double)

#undef FAMBAV_INSTANTIATE

}  // namespace fambav
