#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fambav/data.hpp"
#include "fambav/scheduler.hpp"
#include "fambav/train.hpp"
#include "fambav/vim.hpp"

namespace fambav {

/// Flat key=value experiment description. Keys use underscores; command-line flags
/// are the same names with dashes.
struct ExperimentConfig {
  VimConfig model;
  std::string strategy = "none";
  std::size_t r = 0;
  std::size_t start = 0;  // upper: first fused layer; lower: last fused layer; 0 = default
  std::size_t budget = 0;
  std::string data_dir;   // holds train.bin / test.bin
  std::string synthetic = "2000,4,7";
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 0.1;
  double label_smoothing = 0.1;
  std::size_t warmup = 5;
  std::string augment = "auto";  // auto = on for CIFAR, off for synthetic data
  std::string out = "runs";
  bool dry_run = false;

  /// Throws ConfigError on an unknown key or unparsable value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Lines of key=value; '#' starts a comment; blank lines are skipped.
  void load_file(const std::string& path);

  /// key=value;... echo of every key except the output directory.
  std::string echo() const;
};

Strategy resolve_strategy(const ExperimentConfig& cfg);

/// Plan from the config's strategy/r/start; throws PlanError or ConfigError.
FusionPlan plan_for(const ExperimentConfig& cfg);

/// First fused layer (0 when none) and last fused layer of a plan.
std::size_t first_fused_layer(const FusionPlan& plan);
std::size_t last_fused_layer(const FusionPlan& plan);

struct Datasets {
  Dataset train;
  Dataset test;
  std::size_t n_classes = 0;
  bool synthetic = false;
};

Datasets load_datasets(const ExperimentConfig& cfg);

/// A single summary row of compare and the sweeps.
struct SummaryRow {
  FusionPlan plan;
  std::size_t budget = 0;
  bool trained = false;
  std::size_t peak_live_bytes = 0;
  double epoch_seconds = 0.0;  // mean over epochs
  double top1 = 0.0;
  double top5 = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,strategy,r,start_layer,budget,token_steps,peak_live_bytes,epoch_seconds,top1,top5";
inline constexpr const char* kSummaryHeader =
    "strategy,r,start_layer,k_last,layers,seq_len,budget,total_reduced,token_steps,epochs,seed,peak_live_bytes,"
    "epoch_seconds,top1,top5,config";

std::string metrics_row(const EpochMetrics& m, const FusionPlan& plan, std::size_t budget);
std::string summary_row(const SummaryRow& row, const ExperimentConfig& cfg);

struct RunOutcome {
  std::vector<EpochMetrics> epochs;
  SummaryRow summary;
};

/// Trains one configuration. Writes metrics.csv (row per epoch, appended as it goes),
/// config.txt and model.ckpt into `dir`.
RunOutcome train_configuration(const ExperimentConfig& cfg, const FusionPlan& plan, const Datasets& data,
                               const std::string& dir, std::size_t budget);

/// Worker count for sweeps: FAMBAV_THREADS when set, otherwise the hardware concurrency.
std::size_t sweep_workers();

/// Commands return the process exit code: 0 success, 2 config or plan errors, 3
/// numerical aborts. Diagnostics go to `err`, human-readable progress to `out`.
int cmd_run(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_compare(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_sweep_start(const ExperimentConfig& cfg, const std::vector<std::size_t>& starts, std::ostream& out,
                    std::ostream& err);
int cmd_sweep_r(const ExperimentConfig& cfg, const std::vector<std::size_t>& rs, std::ostream& out,
                std::ostream& err);
/// One SVG per CSV (top-1 against token steps, one series per strategy), written next
/// to the input unless `out_dir` is set.
int cmd_plot(const std::vector<std::string>& csv_paths, const std::string& out_dir, std::ostream& out,
             std::ostream& err);

/// Maps exceptions to the exit-code contract.
int guarded(const std::function<int()>& body, std::ostream& err);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;  // throws FormatError when missing
};

/// Comma-separated, no quoting. Throws FormatError on ragged rows or an empty file.
CsvTable read_csv(const std::string& path);

/// Deterministic SVG scatter of top-1 against token steps.
std::string render_tradeoff_svg(const CsvTable& table, const std::string& title);

}  // namespace fambav
