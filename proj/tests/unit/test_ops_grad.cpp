#include <cmath>
#include <vector>

#include "doctest.h"
#include "fambav/errors.hpp"
#include "fambav/ops.hpp"
#include "fambav/rng.hpp"
#include "oracles.hpp"

using namespace fambav;
using T64 = Tensor<double>;

namespace {

T64 leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  T64 t = T64::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  t.set_requires_grad();
  return t;
}

T64 fixed(Shape shape, Rng& rng) {
  T64 t = T64::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

constexpr double kStep = 1e-5;

}  // namespace

TEST_CASE("backward of sum gives ones") {
  T64 x = T64::from_vector({3}, {0.5, -1, 2});
  x.set_requires_grad();
  Tape<double> tape;
  GradScope<double> scope(tape);
  tape.backward(sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});
  CHECK(tape.size() == 0);
}

TEST_CASE("backward of sum of squares gives 2x") {
  T64 x = T64::from_vector({2}, {1, 2});
  x.set_requires_grad();
  Tape<double> tape;
  GradScope<double> scope(tape);
  tape.backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 2);
  CHECK(x.grad()[1] == 4);
}

TEST_CASE("non-scalar loss is a contract error") {
  T64 x = T64::from_vector({2}, {1, 2});
  x.set_requires_grad();
  Tape<double> tape;
  GradScope<double> scope(tape);
  T64 y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("backward without an active tape is a contract error") {
  CHECK_THROWS_AS(backward(T64::scalar(1.0)), ContractError);
}

TEST_CASE("tape records in topological order") {
  Rng rng(1);
  T64 x = leaf({2, 2}, rng);
  Tape<double> tape;
  GradScope<double> scope(tape);
  T64 y = sum(exp(matmul(x, x)));
  REQUIRE(tape.size() == 3);
  const auto& entries = tape.entries();
  for (std::size_t i = 1; i < entries.size(); ++i) {
    bool fed = false;
    for (const auto& in : entries[i].inputs) fed = fed || in == entries[i - 1].output;
    CHECK(fed);
  }
}

TEST_CASE("no-grad scope suppresses recording") {
  Rng rng(2);
  T64 x = leaf({3}, rng);
  Tape<double> tape;
  GradScope<double> scope(tape);
  {
    NoGradScope<double> off;
    T64 y = exp(x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
}

TEST_CASE("pointwise gradients") {
  Rng rng(7);
  const Elementwise unary[] = {Elementwise::Exp, Elementwise::Neg, Elementwise::Sigmoid,
                               Elementwise::Silu, Elementwise::Softplus, Elementwise::Expm1};
  for (Elementwise kind : unary) {
    T64 x = leaf({2, 5}, rng, -3.0, 3.0);
    T64 w = fixed({2, 5}, rng);
    auto loss = [&] { return sum(mul(w, elementwise(kind, x))); };
    oracle::GradReport rep = oracle::gradcheck(loss, {x}, kStep);
    CAPTURE(static_cast<int>(kind));
    CHECK(rep.max_rel < 1e-6);
  }
  {
    T64 x = leaf({7}, rng, 0.2, 3.0);
    T64 w = fixed({7}, rng);
    CHECK(oracle::gradcheck([&] { return sum(mul(w, log(x))); }, {x}, kStep).max_rel < 1e-6);
  }
  {
    T64 z = T64::from_vector({8}, {-2.0, -0.5, -0.02, -5e-3, -5e-5, 3e-5, 4e-3, 0.7});
    z.set_requires_grad();
    T64 w = fixed({8}, rng);
    CHECK(oracle::gradcheck([&] { return sum(mul(w, phi1(z))); }, {z}, kStep).max_rel < 1e-6);
  }
  for (Elementwise kind : {Elementwise::Add, Elementwise::Sub, Elementwise::Mul, Elementwise::Div}) {
    T64 a = leaf({3, 4}, rng);
    T64 b = leaf({4}, rng, 0.5, 2.0);
    T64 w = fixed({3, 4}, rng);
    CAPTURE(static_cast<int>(kind));
    CHECK(oracle::gradcheck([&] { return sum(mul(w, elementwise(kind, a, b))); }, {a, b}, kStep).max_rel < 1e-6);
  }
}

TEST_CASE("structural op gradients") {
  Rng rng(9);
  T64 a = leaf({2, 3, 4}, rng);
  T64 b = leaf({4, 5}, rng);
  T64 w5 = fixed({2, 3, 5}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(w5, matmul(a, b))); }, {a, b}, kStep).max_rel < 1e-4);

  T64 gain = leaf({4}, rng, 0.5, 1.5);
  T64 bias = leaf({4}, rng);
  T64 w4 = fixed({2, 3, 4}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(w4, layernorm(a, gain, bias))); }, {a, gain, bias}, kStep).max_rel <
        1e-6);

  T64 w3 = fixed({3, 4}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(w3, mean(a, 0))); }, {a}, kStep).max_rel < 1e-6);
  CHECK(oracle::gradcheck([&] { T64 s = sum(a, -1, true); return sum(mul(s, s)); }, {a}, kStep).max_rel < 1e-6);
  CHECK(oracle::gradcheck([&] { return mul(mean(a), mean(a)); }, {a}, kStep).max_rel < 1e-6);

  T64 c = leaf({2, 2, 4}, rng);
  T64 wc = fixed({2, 5, 4}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(wc, concat<double>({a, c}, 1))); }, {a, c}, kStep).max_rel < 1e-6);

  T64 ws = fixed({2, 3, 2}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(ws, slice(a, 2, 1, 3))); }, {a}, kStep).max_rel < 1e-6);

  T64 wg = fixed({3, 3, 4}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(wg, gather_rows(a, {1, 0, 1}))); }, {a}, kStep).max_rel < 1e-6);

  T64 wt = fixed({2, 4, 3}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(wt, transpose(a))); }, {a}, kStep).max_rel < 1e-6);
  CHECK(oracle::gradcheck([&] { return sum(mul(wt, reshape(a, {2, 4, 3}))); }, {a}, kStep).max_rel < 1e-6);
  CHECK(oracle::gradcheck([&] { return sum(mul(w4, reverse(a, 1))); }, {a}, kStep).max_rel < 1e-6);
  CHECK(oracle::gradcheck([&] { return sum(mul(w4, softmax_lastaxis(a))); }, {a}, kStep).max_rel < 1e-6);
  CHECK(oracle::gradcheck([&] { return sum(mul(w4, log_softmax_lastaxis(a))); }, {a}, kStep).max_rel < 1e-6);

  std::vector<RowMix> mix{{{{0, 0.5}, {2, 0.5}}, {{1, 1.0}}}, {{{2, 1.0}}, {{0, 0.25}, {1, 0.75}}}};
  T64 wm = fixed({2, 2, 4}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(wm, mix_rows(a, mix))); }, {a}, kStep).max_rel < 1e-6);
}

TEST_CASE("two-layer network gradients match finite differences") {
  Rng rng(21);
  T64 x = fixed({5, 3}, rng);
  T64 w1 = leaf({3, 6}, rng), b1 = leaf({6}, rng), w2 = leaf({6, 2}, rng), b2 = leaf({2}, rng);
  auto loss = [&] {
    T64 h = silu(add(matmul(x, w1), b1));
    T64 out = add(matmul(h, w2), b2);
    return mean(mul(out, out));
  };
  CHECK(oracle::gradcheck(loss, {w1, b1, w2, b2}, kStep).max_rel < 1e-4);
}

TEST_CASE("backward is bit-deterministic") {
  auto run = [] {
    Rng rng(33);
    T64 x = leaf({4, 4}, rng);
    T64 w = leaf({4, 4}, rng);
    Tape<double> tape;
    GradScope<double> scope(tape);
    tape.backward(sum(softplus(matmul(layernorm(x, T64::full({4}, 1.0), T64::zeros({4})), w))));
    std::vector<double> g(w.grad().begin(), w.grad().end());
    g.insert(g.end(), x.grad().begin(), x.grad().end());
    return g;
  };
  CHECK(run() == run());
}

TEST_CASE("leaf gradients accumulate across passes") {
  T64 x = T64::from_vector({1}, {3});
  x.set_requires_grad();
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    GradScope<double> scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  CHECK(x.grad()[0] == 12);
  x.zero_grad();
  CHECK((!x.has_grad() || x.grad()[0] == 0));
}
