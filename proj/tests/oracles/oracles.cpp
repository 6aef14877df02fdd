#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oracle {

std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m, std::size_t k,
                           std::size_t n) {
  std::vector<double> c(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      long double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<long double>(a[i * k + p]) * b[p * n + j];
      c[i * n + j] = static_cast<double>(acc);
    }
  }
  return c;
}

double rk4_linear(double a, double b, double h0, double u, double dt, std::size_t steps) {
  const double step = dt / static_cast<double>(steps);
  auto f = [&](double h) { return a * h + b * u; };
  double h = h0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double k1 = f(h);
    const double k2 = f(h + 0.5 * step * k1);
    const double k3 = f(h + 0.5 * step * k2);
    const double k4 = f(h + step * k3);
    h += step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return h;
}

std::vector<double> scan(const std::vector<double>& x, const std::vector<double>& delta,
                         const std::vector<double>& bmat, const std::vector<double>& cmat,
                         const std::vector<double>& a, const std::vector<double>& d, std::size_t B, std::size_t L,
                         std::size_t E, std::size_t N, bool reverse) {
  std::vector<double> y(B * L * E, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::size_t> order(L);
    std::iota(order.begin(), order.end(), 0);
    if (reverse) std::reverse(order.begin(), order.end());
    std::vector<double> h(E * N, 0.0);
    for (std::size_t t : order) {
      for (std::size_t e = 0; e < E; ++e) {
        const double dt = delta[(b * L + t) * E + e];
        const double xv = x[(b * L + t) * E + e];
        double out = d.empty() ? 0.0 : d[e] * xv;
        for (std::size_t n = 0; n < N; ++n) {
          const double an = a[e * N + n];
          const double abar = std::exp(dt * an);
          // Closed form of the zero-order-hold input weight, (e^{dt a} - 1) / a.
          const double bbar = (abar - 1.0) / an * bmat[(b * L + t) * N + n];
          double& hv = h[e * N + n];
          hv = abar * hv + bbar * xv;
          out += cmat[(b * L + t) * N + n] * hv;
        }
        y[(b * L + t) * E + e] = out;
      }
    }
  }
  return y;
}

GradReport gradcheck(const std::function<fambav::Tensor<double>()>& loss, std::vector<fambav::Tensor<double>> params,
                     double eps, double floor) {
  for (auto& p : params) p.zero_grad();
  {
    fambav::Tape<double> tape;
    fambav::GradScope<double> scope(tape);
    tape.backward(loss());
  }
  GradReport rep;
  fambav::NoGradScope<double> no_grad;
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double up = loss().item();
      w[i] = orig - eps;
      const double down = loss().item();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double diff = std::abs(analytic[i] - numeric);
      rep.max_abs = std::max(rep.max_abs, diff);
      rep.max_rel = std::max(rep.max_rel, diff / std::max({std::abs(analytic[i]), std::abs(numeric), floor}));
      ++rep.checked;
    }
  }
  return rep;
}

double cosine(const double* u, const double* v, std::size_t width) {
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < width; ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) return 0.0;
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

std::vector<fambav::MergePair> brute_force_match(const std::vector<double>& tokens, std::size_t length,
                                                 std::size_t width, std::size_t r) {
  std::vector<fambav::MergePair> proposals;
  for (std::size_t ia = 1; ia < length; ia += 2) {
    fambav::MergePair best{ia, 0, -2.0};
    for (std::size_t ib = 2; ib < length; ib += 2) {
      const double s = cosine(&tokens[ia * width], &tokens[ib * width], width);
      if (s > best.similarity) best = {ia, ib, s};
    }
    proposals.push_back(best);
  }
  const std::size_t na = proposals.size();
  std::vector<std::size_t> chosen;
  std::vector<double> chosen_sims;
  bool have = false;
  // Every r-subset of the proposals, encoded as a bitmask.
  for (std::size_t mask = 0; mask < (std::size_t{1} << na); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcountll(mask)) != r) continue;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < na; ++i) {
      if (mask >> i & 1) idx.push_back(i);
    }
    std::vector<double> sims;
    for (std::size_t i : idx) sims.push_back(proposals[i].similarity);
    std::sort(sims.rbegin(), sims.rend());
    if (!have || sims > chosen_sims || (sims == chosen_sims && idx < chosen)) {
      chosen = idx;
      chosen_sims = sims;
      have = true;
    }
  }
  std::vector<fambav::MergePair> out;
  for (std::size_t i : chosen) out.push_back(proposals[i]);
  std::stable_sort(out.begin(), out.end(), [](const fambav::MergePair& x, const fambav::MergePair& y) {
    return x.similarity > y.similarity;
  });
  return out;
}

std::size_t token_steps(const std::vector<std::size_t>& r, std::size_t seq_len) {
  std::size_t total = 0, removed = 0;
  for (std::size_t v : r) {
    removed += v;
    total += seq_len - removed;
  }
  return total;
}

bool in_top_k(const std::vector<double>& logits, std::size_t label, std::size_t k) {
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return logits[i] > logits[j]; });
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
    if (order[i] == label) return true;
  }
  return false;
}

double nearest_centroid_accuracy(const fambav::Dataset& train, const fambav::Dataset& test, std::size_t n_classes) {
  const std::size_t dim = train.front().pixels.size();
  std::vector<std::vector<double>> centroid(n_classes, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> count(n_classes, 0);
  for (const auto& img : train) {
    for (std::size_t i = 0; i < dim; ++i) centroid[img.fine_label][i] += img.pixels[i];
    ++count[img.fine_label];
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (double& v : centroid[c]) v /= static_cast<double>(std::max<std::size_t>(1, count[c]));
  }
  std::size_t correct = 0;
  for (const auto& img : test) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < n_classes; ++c) {
      double d = 0;
      for (std::size_t i = 0; i < dim; ++i) d += (img.pixels[i] - centroid[c][i]) * (img.pixels[i] - centroid[c][i]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == img.fine_label;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace oracle
