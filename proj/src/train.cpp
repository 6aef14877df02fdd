#include "fambav/train.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <numbers>

#include "fambav/errors.hpp"
#include "fambav/memory.hpp"
#include "fambav/ops.hpp"

namespace fambav {

template <typename T>
AdamW<T>::AdamW(ParameterList<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }
  ++step_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T> t = params_[i].tensor;
    auto w = t.mutable_data();
    const double shrink = params_[i].decay ? 1.0 - lr * cfg_.weight_decay : 1.0;
    const bool has_grad = t.has_grad();
    const T* g = has_grad ? t.grad().data() : nullptr;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g ? static_cast<double>(g[k]) : 0.0;
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
      w[k] = static_cast<T>(static_cast<double>(w[k]) * shrink - lr * update);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr, std::size_t warmup_epochs,
                 double min_lr) {
  if (epoch < warmup_epochs) {
    return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs + 1);
  }
  if (total_epochs <= warmup_epochs + 1) return base_lr;
  const double span = static_cast<double>(total_epochs - 1 - warmup_epochs);
  const double progress = std::min(1.0, static_cast<double>(epoch - warmup_epochs) / span);
  return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
TopK topk_counts(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.dim() != 2 || logits.size(0) != labels.size()) {
    throw DimensionError("topk_counts: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t n = logits.size(1);
  const T* p = logits.data().data();
  TopK out;
  out.total = labels.size();
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const std::size_t y = labels[b];
    if (y >= n) throw IndexError("topk_counts: label " + std::to_string(y) + " out of range");
    const T* row = p + b * n;
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (row[j] > row[y] || (row[j] == row[y] && j < y)) ++rank;
    }
    out.top1 += rank < 1;
    out.top5 += rank < 5;
  }
  return out;
}

template <typename T>
EvalResult evaluate(const VimModel<T>& model, const FusionPlan& plan, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw ConfigError("evaluate: dataset is empty");
  NoGradScope<T> no_grad;
  TopK acc;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const Batch b = stack(data, begin, begin + batch_size);
    Tensor<T> images;
    if constexpr (std::is_same_v<T, float>) {
      images = b.images;
    } else {
      images = Tensor<T>::zeros(b.images.shape());
      auto d = images.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(b.images.data()[i]);
    }
    const TopK k = topk_counts(model.forward(images, plan).logits, b.labels);
    acc.top1 += k.top1;
    acc.top5 += k.top5;
    acc.total += k.total;
  }
  EvalResult r;
  r.top1 = static_cast<double>(acc.top1) / static_cast<double>(acc.total);
  r.top5 = static_cast<double>(acc.top5) / static_cast<double>(acc.total);
  if (model.config().n_classes < 5) {
    r.top5 = 1.0;
    r.warning = "top5 is trivially 1.0 with only " + std::to_string(model.config().n_classes) + " classes";
  }
  return r;
}

std::vector<EpochMetrics> train(VimModel<float>& model, const FusionPlan& plan, const Dataset& train_set,
                                const Dataset& test_set, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (cfg.epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (train_set.empty()) throw ConfigError("train: training set is empty");
  validate_plan(plan);
  const std::vector<std::size_t> predicted = plan.lengths();
  const std::size_t predicted_steps = token_steps(plan).total;
  memory::retain_freed_pages();
  memory::reset_peak();
  AdamW<float> opt(model.parameters(), cfg.optim);
  AugmentConfig aug = cfg.augment_cfg;
  aug.seed = mix_seed(cfg.seed, 0xA06);
  std::vector<EpochMetrics> history;
  bool warned = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.warmup_epochs, cfg.min_lr);
    m.token_steps_predicted = predicted_steps;
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t seen = 0;
    const auto chunks = batch_indices(train_set.size(), cfg.batch_size, cfg.seed, epoch);
    for (std::size_t bi = 0; bi < chunks.size(); ++bi) {
      const Batch batch = make_batch(train_set, chunks[bi], epoch, cfg.augment ? &aug : nullptr);
      Tape<float> tape;
      GradScope<float> scope(tape);
      const ForwardResult<float> fwd = model.forward(batch.images, plan);
      if (fwd.lengths != predicted) {
        throw ContractError("train: measured layer lengths diverge from the plan at epoch " + std::to_string(epoch) +
                            " batch " + std::to_string(bi));
      }
      m.token_steps_measured = 0;
      for (std::size_t len : fwd.lengths) m.token_steps_measured += len;
      Tensor<float> loss = classify_loss(fwd.logits, batch.labels, cfg.label_smoothing);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(bi));
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step(m.lr);
      loss_sum += lv * static_cast<double>(batch.labels.size());
      seen += batch.labels.size();
    }
    m.epoch_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    m.train_loss = loss_sum / static_cast<double>(seen);
    if (!test_set.empty()) {
      const EvalResult ev = evaluate(model, plan, test_set);
      m.top1 = ev.top1;
      m.top5 = ev.top5;
      if (!ev.warning.empty() && !warned) {
        std::cerr << "warning: " << ev.warning << '\n';
        warned = true;
      }
    }
    m.peak_live_bytes = memory::peak_live_bytes();
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
  return history;
}

template class AdamW<float>;
template class AdamW<double>;
template TopK topk_counts<float>(const Tensor<float>&, const std::vector<std::size_t>&);
template TopK topk_counts<double>(const Tensor<double>&, const std::vector<std::size_t>&);
template EvalResult evaluate<float>(const VimModel<float>&, const FusionPlan&, const Dataset&, std::size_t);
template EvalResult evaluate<double>(const VimModel<double>&, const FusionPlan&, const Dataset&, std::size_t);

}  // namespace fambav
