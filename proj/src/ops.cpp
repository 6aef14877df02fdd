#include "fambav/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "fambav/errors.hpp"
#include "simd_math.hpp"

namespace fambav {

using detail::Node;

bool is_binary(Elementwise kind) noexcept {
  switch (kind) {
    case Elementwise::Add:
    case Elementwise::Sub:
    case Elementwise::Mul:
    case Elementwise::Div:
      return true;
    default:
      return false;
  }
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

namespace {

using Strides = std::vector<std::size_t>;

Strides contiguous_strides(const Shape& s) {
  Strides st(s.size());
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Strides of `in` viewed in the coordinates of `out` (0 on broadcast axes).
Strides broadcast_strides(const Shape& in, const Shape& out) {
  Strides base = contiguous_strides(in);
  Strides st(out.size(), 0);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    st[offset + i] = in[i] == 1 ? 0 : base[i];
  }
  return st;
}

// Visits every output element in row-major order with the matching offsets
// into two strided inputs.
template <typename F>
void for_each_pair(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::size_t n = shape_numel(out);
  if (n == 0) return;
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_inner = sa[rank - 1];
  const std::size_t ib_inner = sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    std::size_t pa = ia, pb = ib;
    for (std::size_t j = 0; j < inner; ++j) {
      f(o + j, pa, pb);
      pa += ia_inner;
      pb += ib_inner;
    }
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename T>
void record(const char* op, std::vector<detail::NodePtr<T>> inputs, const Tensor<T>& out,
            std::function<void()> fn) {
  active_tape<T>()->record(op, std::move(inputs), out.node(), std::move(fn));
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
Tensor<T> binary(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b) {
  if (!b.defined()) throw ContractError("elementwise: binary op needs two operands");
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const Strides sa = broadcast_strides(a.shape(), out_shape);
  const Strides sb = broadcast_strides(b.shape(), out_shape);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.mutable_data().data();
  const bool same = a.shape() == b.shape();
  const std::size_t n = out.numel();
  switch (kind) {
    case Elementwise::Add:
      if (same) for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
      else for_each_pair(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] + pb[j]; });
      break;
    case Elementwise::Sub:
      if (same) for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
      else for_each_pair(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] - pb[j]; });
      break;
    case Elementwise::Mul:
      if (same) for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
      else for_each_pair(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] * pb[j]; });
      break;
    case Elementwise::Div:
      if (same) for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
      else for_each_pair(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] / pb[j]; });
      break;
    default:
      throw ContractError("elementwise: not a binary kind");
  }
  if (!detail::should_record<T>({&a, &b})) return out;

  Node<T>* an = a.node().get();
  Node<T>* bn = b.node().get();
  Node<T>* on = out.node().get();
  record<T>("elementwise", {a.node(), b.node()}, out,
            [kind, an, bn, on, out_shape, sa, sb, same] {
              const T* g = on->grad.data();
              const T* va = an->value.data();
              const T* vb = bn->value.data();
              T* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
              T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
              auto visit = [&](auto&& f) {
                if (same) {
                  for (std::size_t i = 0; i < on->value.size(); ++i) f(i, i, i);
                } else {
                  for_each_pair(out_shape, sa, sb, f);
                }
              };
              switch (kind) {
                case Elementwise::Add:
                  visit([&](std::size_t o, std::size_t i, std::size_t j) {
                    if (ga) ga[i] += g[o];
                    if (gb) gb[j] += g[o];
                  });
                  break;
                case Elementwise::Sub:
                  visit([&](std::size_t o, std::size_t i, std::size_t j) {
                    if (ga) ga[i] += g[o];
                    if (gb) gb[j] -= g[o];
                  });
                  break;
                case Elementwise::Mul:
                  visit([&](std::size_t o, std::size_t i, std::size_t j) {
                    if (ga) ga[i] += g[o] * vb[j];
                    if (gb) gb[j] += g[o] * va[i];
                  });
                  break;
                case Elementwise::Div:
                  visit([&](std::size_t o, std::size_t i, std::size_t j) {
                    if (ga) ga[i] += g[o] / vb[j];
                    if (gb) gb[j] -= g[o] * va[i] / (vb[j] * vb[j]);
                  });
                  break;
                default:
                  break;
              }
            });
  return out;
}

template <typename T>
Tensor<T> unary(Elementwise kind, const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* x = a.data().data();
  T* y = out.mutable_data().data();
  const std::size_t n = a.numel();
  switch (kind) {
    case Elementwise::Exp:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
      break;
    case Elementwise::Log:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::log(x[i]);
      break;
    case Elementwise::Neg:
      for (std::size_t i = 0; i < n; ++i) y[i] = -x[i];
      break;
    case Elementwise::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = scalar::sigmoid(x[i]);
      break;
    case Elementwise::Silu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * scalar::sigmoid(x[i]);
      break;
    case Elementwise::Softplus:
      for (std::size_t i = 0; i < n; ++i) y[i] = scalar::softplus(x[i]);
      break;
    case Elementwise::Expm1:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::expm1(x[i]);
      break;
    default:
      throw ContractError("elementwise: not a unary kind");
  }
  if (!detail::should_record<T>({&a})) return out;

  Node<T>* an = a.node().get();
  Node<T>* on = out.node().get();
  record<T>("elementwise", {a.node()}, out, [kind, an, on] {
    const T* g = on->grad.data();
    const T* x = an->value.data();
    const T* y = on->value.data();
    T* gx = an->ensure_grad().data();
    const std::size_t n = an->value.size();
    switch (kind) {
      case Elementwise::Exp:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i];
        break;
      case Elementwise::Log:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / x[i];
        break;
      case Elementwise::Neg:
        for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
        break;
      case Elementwise::Sigmoid:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
        break;
      case Elementwise::Silu:
        for (std::size_t i = 0; i < n; ++i) {
          const T s = scalar::sigmoid(x[i]);
          gx[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
        }
        break;
      case Elementwise::Softplus:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * scalar::sigmoid(x[i]);
        break;
      case Elementwise::Expm1:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (y[i] + T(1));
        break;
      default:
        break;
    }
  });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b) {
  if (is_binary(kind)) return binary(kind, a, b);
  return unary(kind, a);
}

template <typename T>
Tensor<T> phi1(const Tensor<T>& z) {
  Tensor<T> out = Tensor<T>::zeros(z.shape());
  const T* x = z.data().data();
  T* y = out.mutable_data().data();
  for (std::size_t i = 0; i < z.numel(); ++i) y[i] = scalar::phi1(x[i]);
  if (!detail::should_record<T>({&z})) return out;
  Node<T>* zn = z.node().get();
  Node<T>* on = out.node().get();
  record<T>("phi1", {z.node()}, out, [zn, on] {
    const T* g = on->grad.data();
    const T* x = zn->value.data();
    T* gz = zn->ensure_grad().data();
    for (std::size_t i = 0; i < zn->value.size(); ++i) gz[i] += g[i] * scalar::phi1_grad(x[i]);
  });
  return out;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

struct MatmulLayout {
  std::size_t m, k, n;
  Shape batch;            // broadcast batch shape
  std::vector<std::size_t> a_index, b_index;  // matrix index per batch element
  bool flat_a = false;    // b is a single matrix: fold a's batch into rows
};

MatmulLayout matmul_layout(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2 || as[as.size() - 1] != bs[bs.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  MatmulLayout l;
  l.m = as[as.size() - 2];
  l.k = as[as.size() - 1];
  l.n = bs[bs.size() - 1];
  const Shape ab(as.begin(), as.end() - 2);
  const Shape bb(bs.begin(), bs.end() - 2);
  try {
    l.batch = broadcast_shapes(ab, bb);
  } catch (const DimensionError&) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  l.flat_a = bb.empty() || shape_numel(bb) == 1;
  if (!l.flat_a) {
    const Strides sa = broadcast_strides(ab, l.batch);
    const Strides sb = broadcast_strides(bb, l.batch);
    for_each_pair(l.batch, sa, sb, [&](std::size_t, std::size_t i, std::size_t j) {
      l.a_index.push_back(i);
      l.b_index.push_back(j);
    });
  }
  return l;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const MatmulLayout l = matmul_layout(a.shape(), b.shape());
  Shape out_shape = l.batch;
  out_shape.push_back(l.m);
  out_shape.push_back(l.n);
  if (l.flat_a) {
    // a's own batch extents survive even when b carries size-1 batch axes.
    Shape s(a.shape().begin(), a.shape().end() - 2);
    if (s.size() < l.batch.size()) s.insert(s.begin(), l.batch.size() - s.size(), 1);
    out_shape = s;
    out_shape.push_back(l.m);
    out_shape.push_back(l.n);
  }
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.mutable_data().data();
  if (l.flat_a) {
    const auto rows = static_cast<Eigen::Index>(a.numel() / l.k);
    if (rows > 0 && l.n > 0) {
      MMap<T>(po, rows, l.n).noalias() = CMap<T>(pa, rows, l.k) * CMap<T>(pb, l.k, l.n);
    }
  } else {
    for (std::size_t i = 0; i < l.a_index.size(); ++i) {
      MMap<T>(po + i * l.m * l.n, l.m, l.n).noalias() =
          CMap<T>(pa + l.a_index[i] * l.m * l.k, l.m, l.k) * CMap<T>(pb + l.b_index[i] * l.k * l.n, l.k, l.n);
    }
  }
  if (!detail::should_record<T>({&a, &b})) return out;

  Node<T>* an = a.node().get();
  Node<T>* bn = b.node().get();
  Node<T>* on = out.node().get();
  record<T>("matmul", {a.node(), b.node()}, out, [l, an, bn, on] {
    const T* g = on->grad.data();
    const T* va = an->value.data();
    const T* vb = bn->value.data();
    if (l.flat_a) {
      const auto rows = static_cast<Eigen::Index>(an->value.size() / l.k);
      if (rows == 0) return;
      if (an->requires_grad) {
        MMap<T>(an->ensure_grad().data(), rows, l.k).noalias() +=
            CMap<T>(g, rows, l.n) * CMap<T>(vb, l.k, l.n).transpose();
      }
      if (bn->requires_grad) {
        MMap<T>(bn->ensure_grad().data(), l.k, l.n).noalias() +=
            CMap<T>(va, rows, l.k).transpose() * CMap<T>(g, rows, l.n);
      }
      return;
    }
    T* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
    T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < l.a_index.size(); ++i) {
      const T* gi = g + i * l.m * l.n;
      if (ga) {
        MMap<T>(ga + l.a_index[i] * l.m * l.k, l.m, l.k).noalias() +=
            CMap<T>(gi, l.m, l.n) * CMap<T>(vb + l.b_index[i] * l.k * l.n, l.k, l.n).transpose();
      }
      if (gb) {
        MMap<T>(gb + l.b_index[i] * l.k * l.n, l.k, l.n).noalias() +=
            CMap<T>(va + l.a_index[i] * l.m * l.k, l.m, l.k).transpose() * CMap<T>(gi, l.m, l.n);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.dim() == 0 || x.size(-1) == 0) throw DimensionError("layernorm: last axis must be non-empty, got " + shape_str(x.shape()));
  const std::size_t d = x.size(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layernorm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
  }
  if (!(eps > T(0))) throw ContractError("layernorm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  Buffer<T> mean_buf(rows), rstd_buf(rows);
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  T* py = out.mutable_data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    mean_buf[r] = mu;
    rstd_buf[r] = rstd;
    for (std::size_t j = 0; j < d; ++j) py[r * d + j] = (row[j] - mu) * rstd * pg[j] + pb[j];
  }
  if (!detail::should_record<T>({&x, &gain, &bias})) return out;

  Node<T>* xn = x.node().get();
  Node<T>* gn = gain.node().get();
  Node<T>* bn = bias.node().get();
  Node<T>* on = out.node().get();
  record<T>("layernorm", {x.node(), gain.node(), bias.node()}, out,
            [xn, gn, bn, on, d, rows, mean_buf = std::move(mean_buf), rstd_buf = std::move(rstd_buf)] {
              const T* g = on->grad.data();
              const T* px = xn->value.data();
              const T* pg = gn->value.data();
              T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
              T* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
              T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
              for (std::size_t r = 0; r < rows; ++r) {
                const T mu = mean_buf[r];
                const T rstd = rstd_buf[r];
                const T* row = px + r * d;
                const T* grow = g + r * d;
                T sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (std::size_t j = 0; j < d; ++j) {
                  const T xhat = (row[j] - mu) * rstd;
                  const T dxhat = grow[j] * pg[j];
                  sum_dxhat += dxhat;
                  sum_dxhat_xhat += dxhat * xhat;
                  if (gg) gg[j] += grow[j] * xhat;
                  if (gb) gb[j] += grow[j];
                }
                if (!gx) continue;
                const T inv_d = T(1) / T(d);
                for (std::size_t j = 0; j < d; ++j) {
                  const T xhat = (row[j] - mu) * rstd;
                  const T dxhat = grow[j] * pg[j];
                  gx[r * d + j] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>("sum", {x.node()}, out, [xn, on] {
    const T g = on->grad[0];
    for (T& v : xn->ensure_grad()) v += g;
  });
  return out;
}

namespace {

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim, bool average) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T factor = average ? (s.extent ? T(1) / T(s.extent) : T(0)) : T(1);
  const T* px = x.data().data();
  T* py = out.mutable_data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      const T* src = px + (o * s.extent + e) * s.inner;
      T* dst = py + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  if (average) {
    for (T& v : out.mutable_data()) v *= factor;
  }
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>(average ? "mean" : "sum", {x.node()}, out, [xn, on, s, factor] {
    const T* g = on->grad.data();
    T* gx = xn->ensure_grad().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        T* dst = gx + (o * s.extent + e) * s.inner;
        const T* src = g + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i] * factor;
      }
    }
  });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim) {
  return reduce_axis(x, axis, keepdim, false);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim) {
  return reduce_axis(x, axis, keepdim, true);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[ax] += s[ax];
  }
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const AxisSplit so = split_at(out_shape, ax);
  T* py = out.mutable_data().data();
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.shape()[ax];
    const T* src = p.data().data();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(src + o * ext * so.inner, ext * so.inner, py + (o * so.extent + offset) * so.inner);
    }
    offset += ext;
  }
  bool any = false;
  for (const auto& p : parts) any = any || detail::should_record<T>({&p});
  if (!any) return out;
  std::vector<detail::NodePtr<T>> inputs;
  for (const auto& p : parts) inputs.push_back(p.node());
  Node<T>* on = out.node().get();
  record<T>("concat", inputs, out, [inputs, on, so, offsets, ax] {
    const T* g = on->grad.data();
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      Node<T>* in = inputs[k].get();
      if (!in->requires_grad) continue;
      const std::size_t ext = in->shape[ax];
      T* gi = in->ensure_grad().data();
      for (std::size_t o = 0; o < so.outer; ++o) {
        const T* src = g + (o * so.extent + offsets[k]) * so.inner;
        T* dst = gi + o * ext * so.inner;
        for (std::size_t i = 0; i < ext * so.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::ptrdiff_t axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const AxisSplit s = split_at(x.shape(), ax);
  if (begin > end || end > s.extent) {
    throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for extent " + std::to_string(s.extent));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const std::size_t len = end - begin;
  const T* px = x.data().data();
  T* py = out.mutable_data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(px + (o * s.extent + begin) * s.inner, len * s.inner, py + o * len * s.inner);
  }
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>("slice", {x.node()}, out, [xn, on, s, begin, len] {
    const T* g = on->grad.data();
    T* gx = xn->ensure_grad().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = gx + (o * s.extent + begin) * s.inner;
      const T* src = g + o * len * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& index) {
  if (x.dim() == 0) throw DimensionError("gather_rows: needs rank >= 1");
  const std::size_t rows = x.size(0);
  const std::size_t width = rows ? x.numel() / rows : 0;
  for (std::size_t i : index) {
    if (i >= rows) throw IndexError("gather_rows: index " + std::to_string(i) + " out of range for " + std::to_string(rows) + " rows");
  }
  Shape out_shape = x.shape();
  out_shape[0] = index.size();
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* px = x.data().data();
  T* py = out.mutable_data().data();
  for (std::size_t r = 0; r < index.size(); ++r) std::copy_n(px + index[r] * width, width, py + r * width);
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>("gather_rows", {x.node()}, out, [xn, on, index, width] {
    const T* g = on->grad.data();
    T* gx = xn->ensure_grad().data();
    for (std::size_t r = 0; r < index.size(); ++r) {
      for (std::size_t j = 0; j < width; ++j) gx[index[r] * width + j] += g[r * width + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::ptrdiff_t axis0, std::ptrdiff_t axis1) {
  const std::size_t a0 = normalize_axis(axis0, x.dim());
  const std::size_t a1 = normalize_axis(axis1, x.dim());
  Shape out_shape = x.shape();
  std::swap(out_shape[a0], out_shape[a1]);
  Strides in_strides = contiguous_strides(x.shape());
  std::swap(in_strides[a0], in_strides[a1]);
  const Strides out_strides = contiguous_strides(out_shape);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* px = x.data().data();
  T* py = out.mutable_data().data();
  for_each_pair(out_shape, in_strides, out_strides,
                [&](std::size_t o, std::size_t i, std::size_t) { py[o] = px[i]; });
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>("transpose", {x.node()}, out, [xn, on, out_shape, in_strides, out_strides] {
    const T* g = on->grad.data();
    T* gx = xn->ensure_grad().data();
    for_each_pair(out_shape, in_strides, out_strides,
                  [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += g[o]; });
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out = Tensor<T>::from_buffer(std::move(shape), Buffer<T>(x.data().begin(), x.data().end()));
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>("reshape", {x.node()}, out, [xn, on] {
    T* gx = xn->ensure_grad().data();
    for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> reverse(const Tensor<T>& x, std::ptrdiff_t axis) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const AxisSplit s = split_at(x.shape(), ax);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* py = out.mutable_data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      std::copy_n(px + (o * s.extent + e) * s.inner, s.inner, py + (o * s.extent + (s.extent - 1 - e)) * s.inner);
    }
  }
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>("reverse", {x.node()}, out, [xn, on, s] {
    const T* g = on->grad.data();
    T* gx = xn->ensure_grad().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T* src = g + (o * s.extent + (s.extent - 1 - e)) * s.inner;
        T* dst = gx + (o * s.extent + e) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

namespace {

template <typename T>
Tensor<T> softmax_impl(const Tensor<T>& x, bool log_space) {
  if (x.dim() == 0 || x.size(-1) == 0) throw DimensionError("softmax: last axis must be non-empty");
  const std::size_t d = x.size(-1);
  const std::size_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* py = out.mutable_data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T* dst = py + r * d;
    const T mx = *std::max_element(row, row + d);
    T z = 0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) dst[j] = log_space ? row[j] - lse : std::exp(row[j] - lse);
  }
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>(log_space ? "log_softmax" : "softmax", {x.node()}, out, [xn, on, d, rows, log_space] {
    const T* g = on->grad.data();
    const T* y = on->value.data();
    T* gx = xn->ensure_grad().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g + r * d;
      const T* yr = y + r * d;
      T acc = 0;
      if (log_space) {
        for (std::size_t j = 0; j < d; ++j) acc += gr[j];
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += gr[j] - std::exp(yr[j]) * acc;
      } else {
        for (std::size_t j = 0; j < d; ++j) acc += gr[j] * yr[j];
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += yr[j] * (gr[j] - acc);
      }
    }
  });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> softmax_lastaxis(const Tensor<T>& x) {
  return softmax_impl(x, false);
}

template <typename T>
Tensor<T> log_softmax_lastaxis(const Tensor<T>& x) {
  return softmax_impl(x, true);
}

template <typename T>
Tensor<T> mix_rows(const Tensor<T>& x, const std::vector<RowMix>& mix) {
  if (x.dim() != 3) throw DimensionError("mix_rows: expected [B, L, D], got " + shape_str(x.shape()));
  const std::size_t batch = x.size(0), len = x.size(1), width = x.size(2);
  if (mix.size() != batch) throw DimensionError("mix_rows: " + std::to_string(mix.size()) + " mixes for batch of " + std::to_string(batch));
  const std::size_t out_len = batch ? mix.front().size() : 0;
  for (const RowMix& m : mix) {
    if (m.size() != out_len) throw DimensionError("mix_rows: ragged output lengths");
    for (const auto& row : m) {
      if (row.empty()) throw ContractError("mix_rows: output row without sources");
      for (const RowSource& src : row) {
        if (src.index >= len) throw IndexError("mix_rows: source index " + std::to_string(src.index) + " out of range for length " + std::to_string(len));
      }
    }
  }
  Tensor<T> out = Tensor<T>::zeros({batch, out_len, width});
  const T* px = x.data().data();
  T* py = out.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < out_len; ++i) {
      T* dst = py + (b * out_len + i) * width;
      const auto& row = mix[b][i];
      // First term assigned (not accumulated onto 0) so single-source rows copy bit-exactly.
      const T w0 = static_cast<T>(row[0].weight);
      const T* s0 = px + (b * len + row[0].index) * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] = w0 * s0[j];
      for (std::size_t k = 1; k < row.size(); ++k) {
        const T w = static_cast<T>(row[k].weight);
        const T* src = px + (b * len + row[k].index) * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += w * src[j];
      }
    }
  }
  if (!detail::should_record<T>({&x})) return out;
  Node<T>* xn = x.node().get();
  Node<T>* on = out.node().get();
  record<T>("mix_rows", {x.node()}, out, [xn, on, mix, len, out_len, width] {
    const T* g = on->grad.data();
    T* gx = xn->ensure_grad().data();
    for (std::size_t b = 0; b < mix.size(); ++b) {
      for (std::size_t i = 0; i < out_len; ++i) {
        const T* src = g + (b * out_len + i) * width;
        for (const RowSource& s : mix[b][i]) {
          const T w = static_cast<T>(s.weight);
          T* dst = gx + (b * len + s.index) * width;
          for (std::size_t j = 0; j < width; ++j) dst[j] += w * src[j];
        }
      }
    }
  });
  return out;
}

template <typename T>
void check_finite(const Tensor<T>& x, const char* what) {
  const auto d = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NumericalError(std::string(what) + ": non-finite value at element " + std::to_string(i));
    }
  }
}

#define FAMBAV_INSTANTIATE(T)                                                                      \
  template Tensor<T> elementwise<T>(Elementwise, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> phi1<T>(const Tensor<T>&);                                                    \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> layernorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                     \
  template Tensor<T> sum<T>(const Tensor<T>&, std::ptrdiff_t, bool);                               \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                    \
  template Tensor<T> mean<T>(const Tensor<T>&, std::ptrdiff_t, bool);                              \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::ptrdiff_t);                     \
  template Tensor<T> slice<T>(const Tensor<T>&, std::ptrdiff_t, std::size_t, std::size_t);         \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, const std::vector<std::size_t>&);            \
  template Tensor<T> transpose<T>(const Tensor<T>&, std::ptrdiff_t, std::ptrdiff_t);               \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                          \
  template Tensor<T> reverse<T>(const Tensor<T>&, std::ptrdiff_t);                                 \
  template Tensor<T> softmax_lastaxis<T>(const Tensor<T>&);                                        \
  template Tensor<T> log_softmax_lastaxis<T>(const Tensor<T>&);                                    \
  template Tensor<T> mix_rows<T>(const Tensor<T>&, const std::vector<RowMix>&);                    \
  template void check_finite<T>(const Tensor<T>&, const char*);

FAMBAV_INSTANTIATE(float)
FAMBAV_INSTANTIATE(double)

#undef FAMBAV_INSTANTIATE

}  // namespace fambav
