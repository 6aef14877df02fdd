#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "fambav/errors.hpp"
#include "fambav/memory.hpp"
#include "fambav/train.hpp"
#include "oracles.hpp"

using namespace fambav;
using T64 = Tensor<double>;

namespace {

ParameterList<double> scalar_param(double value, double grad, bool decay = true) {
  T64 t = T64::from_vector({1}, {value});
  t.set_requires_grad();
  t.mutable_grad()[0] = grad;
  return {{"w", t, decay}};
}

VimConfig toy_model(std::size_t classes) {
  VimConfig c;
  c.image_h = c.image_w = 8;
  c.patch = 2;
  c.dim = 8;
  c.inner = 8;
  c.state = 2;
  c.layers = 2;
  c.n_classes = classes;
  c.init_seed = 3;
  return c;
}

std::vector<float> flat_params(const VimModel<float>& m) {
  std::vector<float> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST_CASE("adamw zero gradient without decay leaves parameters") {
  ParameterList<double> ps = scalar_param(0.75, 0.0);
  AdamW<double> opt(ps, {0.9, 0.999, 1e-8, 0.0});
  opt.step(1e-3);
  CHECK(ps[0].tensor.data()[0] == 0.75);
  CHECK(opt.steps() == 1);
}

TEST_CASE("adamw first step closed form") {
  ParameterList<double> ps = scalar_param(0.5, 1.0);
  AdamW<double> opt(ps, {0.9, 0.999, 1e-8, 0.0});
  const double lr = 1e-3;
  opt.step(lr);
  CHECK(std::abs(ps[0].tensor.data()[0] - (0.5 - lr / (1.0 + 1e-8))) < 1e-15);
  CHECK(std::abs(opt.first_moment()[0][0] - 0.1) < 1e-15);
  CHECK(std::abs(opt.second_moment()[0][0] - 0.001) < 1e-15);
}

TEST_CASE("adamw decoupled decay is a pure shrink") {
  ParameterList<double> ps = scalar_param(2.0, 0.0);
  AdamW<double> opt(ps, {0.9, 0.999, 1e-8, 0.1});
  opt.step(0.01);
  CHECK(std::abs(ps[0].tensor.data()[0] - 2.0 * (1.0 - 0.01 * 0.1)) < 1e-15);
  ParameterList<double> nodecay = scalar_param(2.0, 0.0, false);
  AdamW<double> opt2(nodecay, {0.9, 0.999, 1e-8, 0.1});
  opt2.step(0.01);
  CHECK(nodecay[0].tensor.data()[0] == 2.0);
}

TEST_CASE("adamw refuses non-finite gradients") {
  ParameterList<double> ps = scalar_param(1.0, std::numeric_limits<double>::infinity());
  ps[0].name = "layers.0.in_x";
  AdamW<double> opt(ps);
  try {
    opt.step(1e-3);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("layers.0.in_x") != std::string::npos);
  }
  CHECK(ps[0].tensor.data()[0] == 1.0);
  CHECK(opt.steps() == 0);
}

TEST_CASE("cosine schedule") {
  const double base = 1e-3, floor = 1e-5;
  CHECK(cosine_lr(5, 20, base, 5) == base);
  CHECK(cosine_lr(0, 20, base, 5) < cosine_lr(4, 20, base, 5));
  CHECK(std::abs(cosine_lr(19, 20, base, 5) - floor) < 1e-12);
  CHECK(std::abs(cosine_lr(5, 11, base, 0) - (base + floor) / 2) < 1e-12);
  for (std::size_t e = 6; e < 20; ++e) CHECK(cosine_lr(e, 20, base, 5) <= cosine_lr(e - 1, 20, base, 5));
}

TEST_CASE("top-k counts agree with an argsort") {
  Rng rng(1);
  const std::size_t n = 100, k = 12;
  T64 logits = T64::zeros({n, k});
  for (double& v : logits.mutable_data()) v = std::round(rng.uniform(-3, 3) * 4) / 4;  // plenty of ties
  std::vector<std::size_t> labels(n);
  for (auto& y : labels) y = rng.index(k);
  TopK got = topk_counts(logits, labels);
  std::size_t t1 = 0, t5 = 0;
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> row(logits.data().begin() + b * k, logits.data().begin() + (b + 1) * k);
    t1 += oracle::in_top_k(row, labels[b], 1);
    t5 += oracle::in_top_k(row, labels[b], 5);
  }
  CHECK(got.top1 == t1);
  CHECK(got.top5 == t5);
  CHECK(got.total == n);

  T64 constant = T64::zeros({4, 6});
  TopK c = topk_counts(constant, {0, 0, 3, 5});
  CHECK(c.top1 == 2);
  CHECK(c.top5 == 3);
}

TEST_CASE("evaluate reports degenerate top-5") {
  VimModel<float> m(toy_model(3));
  Dataset d = synthetic_dataset(12, 3, 1, 0.1, 8, 8);
  EvalResult r = evaluate(m, build_plan(Strategy::none(), 2, 0, 17), d, 5);
  CHECK(r.top5 == 1.0);
  CHECK_FALSE(r.warning.empty());
  CHECK((r.top1 >= 0.0 && r.top1 <= 1.0));
}

TEST_CASE("zero learning rate keeps the initial parameters") {
  VimModel<float> m(toy_model(3));
  const std::vector<float> before = flat_params(m);
  Dataset d = synthetic_dataset(20, 3, 2, 0.1, 8, 8);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.base_lr = 0.0;
  cfg.min_lr = 0.0;
  cfg.warmup_epochs = 0;
  cfg.optim.weight_decay = 0.0;
  std::vector<EpochMetrics> h = train(m, build_plan(Strategy::all(), 2, 2, 17), d, d, cfg);
  CHECK(h.size() == 2);
  CHECK(flat_params(m) == before);
}

TEST_CASE("training records metrics and is deterministic") {
  Dataset d = synthetic_dataset(40, 4, 3, 0.1, 8, 8);
  FusionPlan plan = build_plan(Strategy::upper(2), 2, 3, 17);
  auto run = [&] {
    VimModel<float> m(toy_model(4));
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.warmup_epochs = 1;
    cfg.seed = 9;
    cfg.augment_cfg.crop_pad = 1;
    std::vector<EpochMetrics> h = train(m, plan, d, d, cfg);
    return std::make_pair(h, flat_params(m));
  };
  auto [h1, p1] = run();
  auto [h2, p2] = run();
  REQUIRE(h1.size() == 3);
  CHECK(p1 == p2);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(h1[e].epoch == e);
    CHECK(h1[e].train_loss == h2[e].train_loss);
    CHECK(h1[e].top1 == h2[e].top1);
    CHECK(h1[e].token_steps_measured == h1[e].token_steps_predicted);
    CHECK(h1[e].token_steps_predicted == 17 + 14);
    CHECK(h1[e].peak_live_bytes > 0);
    if (e) CHECK(h1[e].peak_live_bytes >= h1[e - 1].peak_live_bytes);
  }
}

TEST_CASE("fusion lowers peak live bytes") {
  Dataset d = synthetic_dataset(32, 4, 4, 0.1, 8, 8);
  auto peak = [&](const FusionPlan& plan) {
    VimModel<float> m(toy_model(4));
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 32;
    return train(m, plan, d, {}, cfg).back().peak_live_bytes;
  };
  const std::size_t none = peak(build_plan(Strategy::none(), 2, 0, 17));
  const std::size_t lower = peak(build_plan(Strategy::lower(1), 2, 6, 17));
  const std::size_t more = peak(build_plan(Strategy::all(), 2, 5, 17));
  CHECK(lower < none);
  CHECK(more <= lower);
}
