#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fambav/data.hpp"
#include "fambav/params.hpp"
#include "fambav/scheduler.hpp"
#include "fambav/vim.hpp"

namespace fambav {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Decoupled weight decay (only on parameters flagged `decay`) plus bias-corrected moments.
template <typename T>
class AdamW {
 public:
  AdamW(ParameterList<T> params, AdamWConfig cfg = {});

  /// Throws NumericalError naming the first parameter with a non-finite gradient; no
  /// parameter is touched in that case.
  void step(double lr);
  void zero_grad();

  std::size_t steps() const noexcept { return step_; }
  const ParameterList<T>& params() const noexcept { return params_; }
  const std::vector<std::vector<double>>& first_moment() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moment() const noexcept { return v_; }

 private:
  ParameterList<T> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

/// Linear warmup to base_lr at epoch == warmup, then cosine decay reaching min_lr at the
/// final epoch.
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr, std::size_t warmup_epochs,
                 double min_lr = 1e-5);

struct TopK {
  std::size_t top1 = 0;
  std::size_t top5 = 0;
  std::size_t total = 0;
};

/// Rank of the true class counts classes with a larger logit, or an equal logit and a
/// lower index.
template <typename T>
TopK topk_counts(const Tensor<T>& logits, const std::vector<std::size_t>& labels);

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  std::string warning;  // set when top5 is degenerate
};

template <typename T>
EvalResult evaluate(const VimModel<T>& model, const FusionPlan& plan, const Dataset& data,
                    std::size_t batch_size = 200);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  std::size_t warmup_epochs = 5;
  double label_smoothing = 0.1;
  AdamWConfig optim;
  bool augment = true;
  AugmentConfig augment_cfg;
  std::uint64_t seed = 0;
  std::string checkpoint_path;  // empty = no checkpoint
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 0-based
  double lr = 0.0;
  double train_loss = 0.0;
  double epoch_seconds = 0.0;
  std::size_t peak_live_bytes = 0;  // running maximum since the start of the run
  std::size_t token_steps_predicted = 0;
  std::size_t token_steps_measured = 0;
  double top1 = 0.0;
  double top5 = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs the full optimization loop. Every forward pass checks its per-layer lengths
/// against the plan. A non-finite loss throws NumericalError with the epoch and batch.
std::vector<EpochMetrics> train(VimModel<float>& model, const FusionPlan& plan, const Dataset& train_set,
                                const Dataset& test_set, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace fambav
