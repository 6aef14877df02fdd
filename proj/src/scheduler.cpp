#include "fambav/scheduler.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "fambav/errors.hpp"

namespace fambav {

bool Strategy::fuses(std::size_t layer) const {
  switch (kind) {
    case Kind::NoFusion:
      return false;
    case Kind::AllLayer:
      return true;
    case Kind::Interleaved:
      return layer % 2 == 0;
    case Kind::LowerLayer:
      return layer <= boundary;
    case Kind::UpperLayer:
      return layer >= boundary;
  }
  return false;
}

std::size_t Strategy::fused_layer_count(std::size_t layers) const {
  std::size_t n = 0;
  for (std::size_t l = 1; l <= layers; ++l) n += fuses(l) ? 1 : 0;
  return n;
}

std::string strategy_name(Strategy::Kind kind) {
  switch (kind) {
    case Strategy::Kind::NoFusion:
      return "none";
    case Strategy::Kind::AllLayer:
      return "all";
    case Strategy::Kind::Interleaved:
      return "interleaved";
    case Strategy::Kind::LowerLayer:
      return "lower";
    case Strategy::Kind::UpperLayer:
      return "upper";
  }
  return "none";
}

Strategy::Kind parse_strategy_kind(const std::string& name) {
  static const std::map<std::string, Strategy::Kind> names{
      {"none", Strategy::Kind::NoFusion},       {"all", Strategy::Kind::AllLayer},
      {"interleaved", Strategy::Kind::Interleaved}, {"lower", Strategy::Kind::LowerLayer},
      {"upper", Strategy::Kind::UpperLayer}};
  auto it = names.find(name);
  if (it == names.end()) {
    throw ConfigError("unknown strategy '" + name + "' (expected none|all|interleaved|lower|upper)");
  }
  return it->second;
}

std::size_t default_fused_layers(std::size_t layers) {
  return static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(layers)));
}

std::size_t default_lower_k(std::size_t layers) {
  return std::max<std::size_t>(1, default_fused_layers(layers));
}

std::size_t default_upper_start(std::size_t layers) {
  return layers + 1 - default_lower_k(layers);
}

std::size_t FusionPlan::total_reduced() const {
  std::size_t t = 0;
  for (std::size_t v : r) t += v;
  return t;
}

std::vector<std::size_t> FusionPlan::lengths() const {
  std::vector<std::size_t> out;
  out.reserve(r.size());
  std::size_t len = seq_len;
  for (std::size_t v : r) {
    len = v <= len ? len - v : 0;
    out.push_back(len);
  }
  return out;
}

std::size_t FusionPlan::final_length() const {
  const auto l = lengths();
  return l.empty() ? seq_len : l.back();
}

std::string FusionPlan::to_record() const {
  std::ostringstream os;
  os << "strategy=" << strategy_name(strategy.kind) << ";r=" << r_per_layer << ";start=" << strategy.boundary
     << ";layers=" << r.size() << ";seq_len=" << seq_len;
  return os.str();
}

FusionPlan FusionPlan::from_record(const std::string& record) {
  std::map<std::string, std::string> kv;
  std::istringstream is(record);
  std::string item;
  while (std::getline(is, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("plan record: malformed field '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  for (const char* key : {"strategy", "r", "start", "layers", "seq_len"}) {
    if (!kv.count(key)) throw ConfigError(std::string("plan record: missing '") + key + "'");
  }
  try {
    Strategy s{parse_strategy_kind(kv["strategy"]), std::stoul(kv["start"])};
    return build_plan(s, std::stoul(kv["layers"]), std::stoul(kv["r"]), std::stoul(kv["seq_len"]));
  } catch (const std::invalid_argument&) {
    throw ConfigError("plan record: non-numeric field in '" + record + "'");
  }
}

void validate_plan(const FusionPlan& plan) {
  std::size_t len = plan.seq_len;
  for (std::size_t i = 0; i < plan.r.size(); ++i) {
    const std::size_t r = plan.r[i];
    const std::size_t capacity = len >= 1 ? (len - 1) / 2 : 0;
    if (r > capacity || (r > 0 && len < 3)) {
      throw PlanError("infeasible plan at layer " + std::to_string(i + 1) + ": r=" + std::to_string(r) +
                      " exceeds capacity " + std::to_string(capacity) + " for length " + std::to_string(len));
    }
    len -= r;
  }
}

bool plan_feasible(const FusionPlan& plan) {
  try {
    validate_plan(plan);
    return true;
  } catch (const PlanError&) {
    return false;
  }
}

FusionPlan build_plan(Strategy strategy, std::size_t layers, std::size_t r_per_layer, std::size_t seq_len) {
  if (layers == 0) throw ConfigError("build_plan: at least one layer required");
  if (seq_len < 3) throw ConfigError("build_plan: seq_len must be >= 3, got " + std::to_string(seq_len));
  if ((strategy.kind == Strategy::Kind::LowerLayer || strategy.kind == Strategy::Kind::UpperLayer) &&
      (strategy.boundary < 1 || strategy.boundary > layers)) {
    throw PlanError("infeasible plan: boundary layer " + std::to_string(strategy.boundary) + " outside [1, " +
                    std::to_string(layers) + "]");
  }
  FusionPlan plan;
  plan.strategy = strategy;
  plan.r_per_layer = strategy.kind == Strategy::Kind::NoFusion ? 0 : r_per_layer;
  plan.seq_len = seq_len;
  plan.r.assign(layers, 0);
  for (std::size_t l = 1; l <= layers; ++l) {
    if (strategy.fuses(l)) plan.r[l - 1] = plan.r_per_layer;
  }
  validate_plan(plan);
  return plan;
}

FusionPlan custom_plan(std::vector<std::size_t> r, std::size_t seq_len) {
  FusionPlan plan;
  plan.seq_len = seq_len;
  plan.r = std::move(r);
  plan.strategy = Strategy::none();
  for (std::size_t v : plan.r) {
    if (v) plan.strategy = Strategy::all();
  }
  validate_plan(plan);
  return plan;
}

ParityEntry parity_for(Strategy strategy, std::size_t layers, std::size_t budget) {
  ParityEntry e;
  e.strategy = strategy;
  e.fused_layers = strategy.fused_layer_count(layers);
  if (e.fused_layers > 0 && budget > 0) {
    e.r_per_layer = static_cast<std::size_t>(
        std::lround(static_cast<double>(budget) / static_cast<double>(e.fused_layers)));
  }
  e.total = e.r_per_layer * e.fused_layers;
  return e;
}

std::vector<ParityEntry> parity_configs(std::size_t layers, std::size_t budget) {
  std::vector<ParityEntry> out;
  for (Strategy s : {Strategy::none(), Strategy::all(), Strategy::interleaved(), Strategy::lower(default_lower_k(layers)),
                     Strategy::upper(default_upper_start(layers))}) {
    out.push_back(s.kind == Strategy::Kind::NoFusion ? ParityEntry{s, 0, 0, 0} : parity_for(s, layers, budget));
  }
  return out;
}

TokenSteps token_steps(const FusionPlan& plan) {
  TokenSteps ts;
  ts.per_layer = plan.lengths();
  for (std::size_t v : ts.per_layer) ts.total += v;
  return ts;
}

}  // namespace fambav
