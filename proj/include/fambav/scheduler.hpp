#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fambav {

/// Cross-layer fusion placement. Layer indices are 1-based.
struct Strategy {
  enum class Kind { NoFusion, AllLayer, Interleaved, LowerLayer, UpperLayer };

  Kind kind = Kind::NoFusion;
  /// LowerLayer: last fused layer k. UpperLayer: first fused layer s. Unused otherwise.
  std::size_t boundary = 0;

  static Strategy none() { return {Kind::NoFusion, 0}; }
  static Strategy all() { return {Kind::AllLayer, 0}; }
  static Strategy interleaved() { return {Kind::Interleaved, 0}; }
  static Strategy lower(std::size_t k_last) { return {Kind::LowerLayer, k_last}; }
  static Strategy upper(std::size_t start) { return {Kind::UpperLayer, start}; }

  bool fuses(std::size_t layer) const;
  std::size_t fused_layer_count(std::size_t layers) const;

  bool operator==(const Strategy&) const = default;
};

/// "none", "all", "interleaved", "lower", "upper".
std::string strategy_name(Strategy::Kind kind);
Strategy::Kind parse_strategy_kind(const std::string& name);

/// round(0.8 L) fused layers; lower fuses 1..k, upper fuses s..L with s = L - k + 1.
std::size_t default_fused_layers(std::size_t layers);
std::size_t default_lower_k(std::size_t layers);
std::size_t default_upper_start(std::size_t layers);

struct FusionPlan {
  Strategy strategy;
  std::size_t r_per_layer = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> r;  // pairs fused before each layer

  std::size_t layers() const { return r.size(); }
  std::size_t total_reduced() const;
  /// Length entering each layer's block (after that layer's fusion).
  std::vector<std::size_t> lengths() const;
  std::size_t final_length() const;

  /// strategy=..;r=..;start=..;layers=..;seq_len=..
  std::string to_record() const;
  static FusionPlan from_record(const std::string& record);
};

/// Throws PlanError naming the first layer whose r exceeds floor((len_in - 1) / 2).
void validate_plan(const FusionPlan& plan);
bool plan_feasible(const FusionPlan& plan);

FusionPlan build_plan(Strategy strategy, std::size_t layers, std::size_t r_per_layer, std::size_t seq_len);

/// A plan with explicit per-layer counts (tests and traces).
FusionPlan custom_plan(std::vector<std::size_t> r, std::size_t seq_len);

struct ParityEntry {
  Strategy strategy;
  std::size_t r_per_layer = 0;
  std::size_t fused_layers = 0;
  std::size_t total = 0;
};

/// r = round(budget / fused_layers) for one strategy.
ParityEntry parity_for(Strategy strategy, std::size_t layers, std::size_t budget);

/// Budget-matched configurations for {none, all, interleaved, lower, upper} with
/// the default lower/upper boundaries.
std::vector<ParityEntry> parity_configs(std::size_t layers, std::size_t budget);

struct TokenSteps {
  std::size_t total = 0;
  std::vector<std::size_t> per_layer;
};

TokenSteps token_steps(const FusionPlan& plan);

}  // namespace fambav
