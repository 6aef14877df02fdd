#include <cmath>
#include <vector>

#include "doctest.h"
#include "fambav/errors.hpp"
#include "fambav/memory.hpp"
#include "fambav/ops.hpp"
#include "fambav/rng.hpp"
#include "oracles.hpp"

using namespace fambav;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  T64 t = T64::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> values(const T64& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("tensor construction and access") {
  T64 t = T64::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim() == 2);
  CHECK(t.size(-1) == 3);
  CHECK(t.at({1, 2}) == 6);
  CHECK(T64::scalar(4.5).item() == 4.5);
  CHECK_THROWS_AS(T64::from_vector({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK_THROWS_AS(t.at({2, 0}), IndexError);
}

TEST_CASE("matmul hand cases") {
  T64 eye = T64::from_vector({2, 2}, {1, 0, 0, 1});
  T64 b = T64::from_vector({2, 2}, {3, 4, 5, 6});
  CHECK(values(matmul(eye, b)) == std::vector<double>{3, 4, 5, 6});

  T64 row = T64::from_vector({1, 2}, {1, 2});
  T64 col = T64::from_vector({2, 1}, {3, 4});
  T64 p = matmul(row, col);
  CHECK(p.shape() == Shape{1, 1});
  CHECK(p.item() == 11);
}

TEST_CASE("matmul agrees with the triple loop") {
  Rng rng(11);
  for (std::size_t m = 1; m <= 8; ++m) {
    for (std::size_t k = 1; k <= 8; k += 3) {
      for (std::size_t n = 1; n <= 8; n += 2) {
        T64 a = random_tensor({m, k}, rng);
        T64 b = random_tensor({k, n}, rng);
        std::vector<double> want = oracle::matmul(values(a), values(b), m, k, n);
        std::vector<double> got = values(matmul(a, b));
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
      }
    }
  }
}

TEST_CASE("matmul broadcasts batch extents") {
  Rng rng(3);
  T64 a = random_tensor({2, 3, 4}, rng);
  T64 w = random_tensor({4, 5}, rng);
  T64 c = matmul(a, w);
  CHECK(c.shape() == Shape{2, 3, 5});
  const std::vector<double> flat = values(a);
  std::vector<double> second(flat.begin() + 12, flat.end());
  std::vector<double> want = oracle::matmul(second, values(w), 3, 4, 5);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(c.data()[15 + i] - want[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  T64 a = T64::zeros({2, 3});
  T64 b = T64::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("elementwise scalar values") {
  T64 zero = T64::from_vector({1}, {0.0});
  CHECK(exp(zero).item() == 1.0);
  CHECK(std::abs(softplus(zero).item() - 0.69314718055994531) < 1e-15);
  CHECK(silu(zero).item() == 0.0);
  CHECK(sigmoid(zero).item() == 0.5);
  CHECK(expm1(zero).item() == 0.0);
  CHECK(neg(T64::from_vector({1}, {2.0})).item() == -2.0);
  CHECK(std::abs(log(T64::from_vector({1}, {std::exp(1.5)})).item() - 1.5) < 1e-15);
}

TEST_CASE("division by zero propagates infinity") {
  T64 q = div(T64::from_vector({2}, {1.0, 1.0}), T64::from_vector({2}, {0.0, 2.0}));
  CHECK(std::isinf(q.data()[0]));
  CHECK(q.data()[1] == 0.5);
  CHECK_THROWS_AS(check_finite(q, "q"), NumericalError);
}

TEST_CASE("broadcasting follows trailing axes") {
  CHECK(broadcast_shapes({2, 3}, {3}) == Shape{2, 3});
  CHECK(broadcast_shapes({4, 1, 3}, {2, 1}) == Shape{4, 2, 3});
  CHECK_THROWS_AS(broadcast_shapes({2, 3}, {2}), DimensionError);
  T64 s = add(T64::from_vector({2, 2}, {1, 2, 3, 4}), T64::from_vector({2}, {10, 20}));
  CHECK(values(s) == std::vector<double>{11, 22, 13, 24});
}

TEST_CASE("phi1 values and continuity") {
  CHECK(scalar::phi1(0.0) == 1.0);
  CHECK(std::abs(scalar::phi1(-0.5) - (std::exp(-0.5) - 1.0) / -0.5) < 1e-15);
  CHECK(std::abs(scalar::phi1(-0.5) - 0.786938680574733) < 1e-12);
  CHECK(std::abs(scalar::phi1(1e-6) - (1.0 + 5e-7)) < 1e-12);
  const double bound = scalar::kPhi1SeriesBound;
  for (double eps : {1e-12, 1e-14}) {
    CHECK(std::abs(scalar::phi1(bound + eps) - scalar::phi1(bound - eps)) < 1e-10);
    CHECK(std::abs(scalar::phi1(-bound + eps) - scalar::phi1(-bound - eps)) < 1e-10);
  }
  T64 z = T64::from_vector({3}, {0.0, -0.5, 1e-6});
  std::vector<double> got = values(phi1(z));
  CHECK(got[0] == 1.0);
  CHECK(got[1] == scalar::phi1(-0.5));
  CHECK(got[2] == scalar::phi1(1e-6));
}

TEST_CASE("phi1 derivative matches the closed form on both sides of its series switch") {
  for (double z : {-3.0, -0.5, -0.011, -0.009, -1e-3, 1e-5, 0.2}) {
    const double want = (z * std::exp(z) - std::expm1(z)) / (z * z);
    CHECK(std::abs(scalar::phi1_grad(z) - want) < 1e-9 * std::max(1.0, std::abs(want)));
  }
  CHECK(std::abs(scalar::phi1_grad(0.0) - 0.5) < 1e-15);
}

TEST_CASE("layernorm") {
  T64 gain = T64::full({3}, 1.0), bias = T64::zeros({3});
  std::vector<double> flat = values(layernorm(T64::from_vector({1, 3}, {5, 5, 5}), gain, bias));
  for (double v : flat) CHECK(v == 0.0);

  T64 g2 = T64::full({2}, 1.0), b2 = T64::zeros({2});
  std::vector<double> two = values(layernorm(T64::from_vector({1, 2}, {1, 3}), g2, b2));
  CHECK(std::abs(two[0] + 1.0) < 1e-4);
  CHECK(std::abs(two[1] - 1.0) < 1e-4);
  CHECK(std::abs(two[1] - 1.0 / std::sqrt(1.0 + 1e-5)) < 1e-12);

  CHECK_THROWS_AS(layernorm(T64::zeros({2, 0}), T64::zeros({0}), T64::zeros({0})), DimensionError);
}

TEST_CASE("reduce and reshape family") {
  T64 m = T64::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(sum(m).item() == 21);
  CHECK(mean(m).item() == 3.5);
  CHECK(values(sum(m, 0)) == std::vector<double>{5, 7, 9});
  CHECK(values(mean(m, -1)) == std::vector<double>{2, 5});
  CHECK(sum(m, 1, true).shape() == Shape{2, 1});

  T64 col = T64::from_vector({3, 1}, {1, 2, 3});
  T64 g = gather_rows(col, {2, 0});
  CHECK(g.shape() == Shape{2, 1});
  CHECK(values(g) == std::vector<double>{3, 1});
  CHECK_THROWS_AS(gather_rows(col, {3}), IndexError);

  T64 c = concat<double>({T64::from_vector({1, 1}, {1}), T64::from_vector({1, 1}, {2})}, 0);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(values(c) == std::vector<double>{1, 2});
  CHECK(values(concat<double>({m, m}, 1)) == std::vector<double>{1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6});

  CHECK(values(slice(m, 1, 1, 3)) == std::vector<double>{2, 3, 5, 6});
  CHECK_THROWS_AS(slice(m, 1, 2, 4), IndexError);
  T64 t = transpose(m);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(values(t) == std::vector<double>{1, 4, 2, 5, 3, 6});
  CHECK(values(reverse(m, 1)) == std::vector<double>{3, 2, 1, 6, 5, 4});
  CHECK(reshape(m, {3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(reshape(m, {4, 2}), DimensionError);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  T64 x = random_tensor({6, 9}, rng, -30.0, 30.0);
  T64 s = softmax_lastaxis(x);
  for (std::size_t i = 0; i < 6; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < 9; ++j) acc += s.at({i, j});
    CHECK(std::abs(acc - 1.0) < 1e-6);
  }
  T64 ls = log_softmax_lastaxis(x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(std::exp(ls.data()[i]) - s.data()[i]) < 1e-12);
}

TEST_CASE("mix_rows forms weighted row combinations") {
  T64 x = T64::from_vector({1, 3, 2}, {2, 0, 0, 2, 4, 4});
  std::vector<RowMix> mix{{{{0, 0.5}, {1, 0.5}}, {{2, 1.0}}}};
  T64 y = mix_rows(x, mix);
  CHECK(y.shape() == Shape{1, 2, 2});
  CHECK(values(y) == std::vector<double>{1, 1, 4, 4});
}

TEST_CASE("memory probe tracks the running peak") {
  memory::reset_peak();
  const std::size_t base = memory::live_bytes();
  {
    Buffer<char> big(1 << 20);
  }
  {
    Buffer<char> half(1 << 19);
    CHECK(memory::live_bytes() == base + (1 << 19));
  }
  CHECK(memory_probe() == base + (1 << 20));
  CHECK(memory::live_bytes() == base);
}
