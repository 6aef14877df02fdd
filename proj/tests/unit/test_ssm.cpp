#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "fambav/errors.hpp"
#include "fambav/ops.hpp"
#include "fambav/ssm.hpp"
#include "oracles.hpp"

using namespace fambav;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  T64 t = T64::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> values(const T64& t) { return {t.data().begin(), t.data().end()}; }

struct ScanInputs {
  std::size_t B, L, E, N;
  T64 x, delta, bmat, cmat, a, d;
};

ScanInputs random_scan(std::size_t B, std::size_t L, std::size_t E, std::size_t N, Rng& rng) {
  ScanInputs s{B, L, E, N, {}, {}, {}, {}, {}, {}};
  s.x = random_tensor({B, L, E}, rng, -1, 1);
  s.delta = random_tensor({B, L, E}, rng, 1e-3, 1.0);
  s.bmat = random_tensor({B, L, N}, rng, -1, 1);
  s.cmat = random_tensor({B, L, N}, rng, -1, 1);
  s.a = random_tensor({E, N}, rng, -4.0, -0.05);
  s.d = random_tensor({E}, rng, -1, 1);
  return s;
}

std::vector<double> oracle_scan(const ScanInputs& s, bool skip, bool reverse) {
  return oracle::scan(values(s.x), values(s.delta), values(s.bmat), values(s.cmat), values(s.a),
                      skip ? values(s.d) : std::vector<double>{}, s.B, s.L, s.E, s.N, reverse);
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("parameterize with constant input yields softplus of the bias") {
  SsmConfig cfg;
  cfg.dim = 4;
  cfg.inner = 6;
  cfg.state = 3;
  Rng rng(1);
  SsmParams<double> p = SsmParams<double>::init(cfg, rng);
  for (double& v : p.dt_bias.mutable_data()) v = 0.3;
  Selectivity<double> sel = parameterize(p, T64::zeros({2, 5, 6}));
  for (double v : sel.delta.data()) CHECK(v == doctest::Approx(scalar::softplus(0.3)).epsilon(1e-15));
  for (double v : sel.bmat.data()) CHECK(v == 0.0);
}

TEST_CASE("parameterize keeps delta positive and batches independent") {
  SsmConfig cfg;
  cfg.dim = 8;
  cfg.inner = 8;
  cfg.state = 4;
  Rng rng(2);
  SsmParams<double> p = SsmParams<double>::init(cfg, rng);
  T64 u = random_tensor({50, 200, 8}, rng, -5, 5);
  Selectivity<double> sel = parameterize(p, u);
  for (double v : sel.delta.data()) REQUIRE(v > 0.0);

  T64 two = random_tensor({2, 3, 8}, rng, -1, 1);
  const std::vector<double> flat = values(two);
  std::vector<double> swapped(flat.begin() + 24, flat.end());
  swapped.insert(swapped.end(), flat.begin(), flat.begin() + 24);
  Selectivity<double> s1 = parameterize(p, two);
  Selectivity<double> s2 = parameterize(p, T64::from_vector({2, 3, 8}, swapped));
  for (std::size_t i = 0; i < 24; ++i) {
    CHECK(s1.delta.data()[i] == s2.delta.data()[24 + i]);
    CHECK(s1.delta.data()[24 + i] == s2.delta.data()[i]);
  }
  for (std::size_t i = 0; i < 12; ++i) CHECK(s1.bmat.data()[i] == s2.bmat.data()[12 + i]);
}

TEST_CASE("discretize scalar example") {
  Discretized<double> d = discretize(T64::from_vector({1, 1, 1}, {0.5}), T64::from_vector({1, 1}, {-1.0}),
                                     T64::from_vector({1, 1, 1}, {2.0}));
  CHECK(std::abs(d.abar.item() - std::exp(-0.5)) < 1e-15);
  CHECK(std::abs(d.abar.item() - 0.606531) < 1e-6);
  CHECK(std::abs(d.bbar.item() - (1.0 - std::exp(-0.5)) / 0.5 * 0.5 * 2.0) < 1e-15);
  CHECK(std::abs(d.bbar.item() - 0.786939) < 1e-6);
}

TEST_CASE("discretize approaches the zero-step limit") {
  for (double dt : {1e-3, 1e-6, 1e-9}) {
    Discretized<double> d = discretize(T64::from_vector({1, 1, 1}, {dt}), T64::from_vector({1, 1}, {-2.0}),
                                       T64::from_vector({1, 1, 1}, {3.0}));
    CHECK(std::abs(d.abar.item() - 1.0) < 3 * dt);
    CHECK(std::abs(d.bbar.item() - dt * 3.0) < 10 * dt * dt);
  }
}

TEST_CASE("discretize matches RK4 integration of the ODE") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = -rng.uniform(0.01, 5.0), dt = rng.uniform(1e-3, 1.0), b = rng.uniform(-2, 2);
    Discretized<double> d = discretize(T64::from_vector({1, 1, 1}, {dt}), T64::from_vector({1, 1}, {a}),
                                       T64::from_vector({1, 1, 1}, {b}));
    const double h0 = rng.uniform(-1, 1), x = rng.uniform(-1, 1);
    const double zoh = d.abar.item() * h0 + d.bbar.item() * x;
    const double ode = oracle::rk4_linear(a, b, h0, x, dt, 1024);
    CHECK(std::abs(zoh - ode) <= 1e-8 * std::max(std::abs(ode), 1e-300));
  }
}

TEST_CASE("discretize output bounds and errors") {
  Rng rng(4);
  T64 delta = random_tensor({2, 3, 4}, rng, 1e-3, 1.0);
  T64 a = random_tensor({4, 5}, rng, -5, -0.1);
  Discretized<double> d = discretize(delta, a, random_tensor({2, 3, 5}, rng, -1, 1));
  for (double v : d.abar.data()) CHECK((v > 0.0 && v < 1.0));
  for (double v : d.bbar.data()) CHECK(std::isfinite(v));
  T64 bad = delta.detach();
  bad.mutable_data()[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(discretize(bad, a, random_tensor({2, 3, 5}, rng, -1, 1)), ContractError);
  CHECK_THROWS_AS(discretize(delta, a, random_tensor({2, 3, 4}, rng, -1, 1)), DimensionError);
}

TEST_CASE("selective scan matches the naive recurrence") {
  Rng rng(5);
  ScanInputs s = random_scan(2, 7, 3, 4, rng);
  for (bool skip : {false, true}) {
    for (ScanDirection dir : {ScanDirection::Forward, ScanDirection::Backward}) {
      T64 y = selective_scan(s.x, s.delta, s.bmat, s.cmat, s.a, skip ? s.d : T64{}, dir);
      CHECK(max_diff(values(y), oracle_scan(s, skip, dir == ScanDirection::Backward)) < 1e-10);
    }
  }
}

TEST_CASE("memoryless scan when abar vanishes") {
  Rng rng(6);
  ScanInputs s = random_scan(1, 5, 2, 3, rng);
  s.a = T64::full({2, 3}, -1e6);
  s.delta = random_tensor({1, 5, 2}, rng, 0.5, 1.0);
  T64 y = selective_scan(s.x, s.delta, s.bmat, s.cmat, s.a, s.d, ScanDirection::Forward);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t e = 0; e < 2; ++e) {
      const double dt = s.delta.at({0, t, e}), xv = s.x.at({0, t, e});
      double want = s.d.at({e}) * xv;
      for (std::size_t n = 0; n < 3; ++n) {
        const double bbar = scalar::phi1(dt * -1e6) * dt * s.bmat.at({0, t, n});
        want += s.cmat.at({0, t, n}) * bbar * xv;
      }
      CHECK(std::abs(y.at({0, t, e}) - want) < 1e-12);
    }
  }
}

TEST_CASE("single step scan is direction independent") {
  Rng rng(7);
  ScanInputs s = random_scan(3, 1, 4, 2, rng);
  T64 f = selective_scan(s.x, s.delta, s.bmat, s.cmat, s.a, s.d, ScanDirection::Forward);
  T64 b = selective_scan(s.x, s.delta, s.bmat, s.cmat, s.a, s.d, ScanDirection::Backward);
  CHECK(values(f) == values(b));
}

TEST_CASE("backward scan is the reversed forward scan") {
  Rng rng(8);
  ScanInputs s = random_scan(2, 9, 3, 4, rng);
  T64 back = selective_scan(s.x, s.delta, s.bmat, s.cmat, s.a, s.d, ScanDirection::Backward);
  T64 fwd = selective_scan(reverse(s.x, 1), reverse(s.delta, 1), reverse(s.bmat, 1), reverse(s.cmat, 1), s.a, s.d,
                           ScanDirection::Forward);
  CHECK(values(reverse(fwd, 1)) == values(back));
}

TEST_CASE("scan is linear in x without skip") {
  Rng rng(9);
  ScanInputs s = random_scan(2, 6, 3, 3, rng);
  T64 x2 = random_tensor({2, 6, 3}, rng, -1, 1);
  const double alpha = 0.7, beta = -1.3;
  auto run = [&](const T64& x) {
    return values(selective_scan(x, s.delta, s.bmat, s.cmat, s.a, T64{}, ScanDirection::Forward));
  };
  T64 combo = add(scale(s.x, alpha), scale(x2, beta));
  std::vector<double> lhs = run(combo), y1 = run(s.x), y2 = run(x2);
  for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - (alpha * y1[i] + beta * y2[i])) < 1e-10);
}

TEST_CASE("no state blowup over a long sequence") {
  Rng rng(10);
  const std::size_t L = 512, E = 2, N = 3;
  ScanInputs s = random_scan(1, L, E, N, rng);
  T64 y = selective_scan(s.x, s.delta, s.bmat, s.cmat, s.a, T64{}, ScanDirection::Forward);
  double amax = 0, bbar_max = 0;
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t n = 0; n < N; ++n) {
        const double z = s.delta.at({0, t, e}) * s.a.at({e, n});
        amax = std::max(amax, std::exp(z));
        bbar_max = std::max(bbar_max, std::abs(scalar::phi1(z) * s.delta.at({0, t, e}) * s.bmat.at({0, t, n})));
      }
    }
  }
  const double hbound = bbar_max * 1.0 / (1.0 - amax);
  for (double v : y.data()) CHECK(std::abs(v) <= double(N) * hbound + 1e-12);
}

TEST_CASE("zoh recurrence agrees with the ODE at every sample") {
  Rng rng(11);
  const std::size_t L = 32;
  const double a = -0.8, b = 1.1;
  std::vector<double> dts(L), xs(L);
  for (std::size_t t = 0; t < L; ++t) {
    dts[t] = rng.uniform(0.05, 0.5);
    xs[t] = rng.uniform(-1, 1);
  }
  T64 x = T64::from_vector({1, L, 1}, xs), delta = T64::from_vector({1, L, 1}, dts);
  T64 y = selective_scan(x, delta, T64::full({1, L, 1}, b), T64::full({1, L, 1}, 1.0), T64::from_vector({1, 1}, {a}),
                         T64{}, ScanDirection::Forward);
  double h = 0;
  for (std::size_t t = 0; t < L; ++t) {
    h = oracle::rk4_linear(a, b, h, xs[t], dts[t], 1024);
    CHECK(std::abs(y.data()[t] - h) <= 1e-6 * std::max(std::abs(h), 1e-12));
  }
}

TEST_CASE("scan gradients match finite differences") {
  Rng rng(12);
  ScanInputs s = random_scan(2, 5, 3, 2, rng);
  for (T64* t : {&s.x, &s.delta, &s.bmat, &s.cmat, &s.a, &s.d}) t->set_requires_grad();
  T64 w = random_tensor({2, 5, 3}, rng, -1, 1);
  for (ScanDirection dir : {ScanDirection::Forward, ScanDirection::Backward}) {
    auto loss = [&] { return sum(mul(w, selective_scan(s.x, s.delta, s.bmat, s.cmat, s.a, s.d, dir))); };
    CHECK(oracle::gradcheck(loss, {s.x, s.delta, s.bmat, s.cmat, s.a, s.d}, 1e-5).max_rel < 1e-4);
  }
}

TEST_CASE("causal conv uses only past inputs") {
  T64 x = T64::from_vector({1, 4, 1}, {1, 2, 3, 4});
  T64 k = T64::from_vector({1, 2}, {0.5, 1.0});
  T64 bias = T64::zeros({1});
  std::vector<double> fwd = values(causal_conv1d(x, k, bias, ScanDirection::Forward));
  std::vector<double> bwd = values(causal_conv1d(x, k, bias, ScanDirection::Backward));
  CHECK(fwd == std::vector<double>{1.0, 2.5, 4.0, 5.5});
  CHECK(bwd == std::vector<double>{2.0, 3.5, 5.0, 4.0});
}

namespace {

MambaBlock<double> small_block(std::uint64_t seed, bool zero_out = false) {
  SsmConfig cfg;
  cfg.dim = 4;
  cfg.inner = 6;
  cfg.state = 3;
  cfg.conv_kernel = 3;
  cfg.zero_out_proj = zero_out;
  Rng rng(seed);
  return MambaBlock<double>::init(cfg, rng);
}

}  // namespace

TEST_CASE("zero out_proj makes the block output zero") {
  MambaBlock<double> blk = small_block(13, true);
  Rng rng(14);
  T64 y = blk.forward(random_tensor({2, 5, 4}, rng, -1, 1));
  CHECK(y.shape() == Shape{2, 5, 4});
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("block gradients match finite differences") {
  MambaBlock<double> blk = small_block(15);
  Rng rng(16);
  T64 tokens = random_tensor({2, 4, 4}, rng, -1, 1);
  tokens.set_requires_grad();
  T64 w = random_tensor({2, 4, 4}, rng, -1, 1);
  ParameterList<double> params;
  blk.collect(params, "");
  std::vector<T64> leaves{tokens};
  for (auto& p : params) leaves.push_back(p.tensor);
  oracle::GradReport rep = oracle::gradcheck([&] { return sum(mul(w, blk.forward(tokens))); }, leaves, 1e-5);
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("reversing the sequence mirrors the two directions") {
  MambaBlock<double> blk = small_block(17);
  Rng rng(18);
  T64 tokens = random_tensor({2, 5, 4}, rng, -1, 1);
  MambaBlock<double> swapped = blk;
  std::swap(swapped.directions[0], swapped.directions[1]);
  std::vector<double> lhs = values(reverse(blk.forward(reverse(tokens, 1)), 1));
  std::vector<double> rhs = values(swapped.forward(tokens));
  CHECK(max_diff(lhs, rhs) < 1e-12);
}
