#include "fambav/bench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "fambav/errors.hpp"

namespace fambav {

namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto res = std::from_chars(first, last, out);
  if (value.empty() || res.ec != std::errc() || res.ptr != last) {
    throw ConfigError("config: bad value for " + key + ": '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad value for " + key + ": '" + value + "'");
  }
}

bool parse_flag(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "off" || value == "no") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename N>
Field count_field(N ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return std::to_string(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = parse_number<N>("value", v); }};
}

template <typename N>
Field model_count(N VimConfig::*member) {
  return {[member](const ExperimentConfig& c) { return std::to_string(c.model.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.model.*member = parse_number<N>("value", v); }};
}

Field model_flag(bool VimConfig::*member) {
  return {[member](const ExperimentConfig& c) { return std::string(c.model.*member ? "1" : "0"); },
          [member](ExperimentConfig& c, const std::string& v) { c.model.*member = parse_flag("value", v); }};
}

Field real_field(double ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return fmt_double(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = parse_real("value", v); }};
}

Field text_field(std::string ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return c.*member; },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = v; }};
}

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table{
      {"image_h", model_count(&VimConfig::image_h)},
      {"image_w", model_count(&VimConfig::image_w)},
      {"patch", model_count(&VimConfig::patch)},
      {"dim", model_count(&VimConfig::dim)},
      {"inner", model_count(&VimConfig::inner)},
      {"state", model_count(&VimConfig::state)},
      {"layers", model_count(&VimConfig::layers)},
      {"conv_kernel", model_count(&VimConfig::conv_kernel)},
      {"dt_rank", model_count(&VimConfig::dt_rank)},
      {"head_hidden", model_count(&VimConfig::head_hidden)},
      {"ssm_skip", model_flag(&VimConfig::ssm_skip)},
      {"fusion_weighted", model_flag(&VimConfig::fusion_weighted)},
      {"strategy", text_field(&ExperimentConfig::strategy)},
      {"r", count_field(&ExperimentConfig::r)},
      {"start", count_field(&ExperimentConfig::start)},
      {"budget", count_field(&ExperimentConfig::budget)},
      {"data_dir", text_field(&ExperimentConfig::data_dir)},
      {"synthetic", text_field(&ExperimentConfig::synthetic)},
      {"epochs", count_field(&ExperimentConfig::epochs)},
      {"batch_size", count_field(&ExperimentConfig::batch_size)},
      {"seed", count_field(&ExperimentConfig::seed)},
      {"lr", real_field(&ExperimentConfig::lr)},
      {"min_lr", real_field(&ExperimentConfig::min_lr)},
      {"weight_decay", real_field(&ExperimentConfig::weight_decay)},
      {"label_smoothing", real_field(&ExperimentConfig::label_smoothing)},
      {"warmup", count_field(&ExperimentConfig::warmup)},
      {"augment", text_field(&ExperimentConfig::augment)},
      {"out", text_field(&ExperimentConfig::out)},
      {"dry_run", {[](const ExperimentConfig& c) { return std::string(c.dry_run ? "1" : "0"); },
                   [](ExperimentConfig& c, const std::string& v) { c.dry_run = parse_flag("dry_run", v); }}},
  };
  return table;
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const std::string k = key == "k" ? "start" : key;
  const auto& table = field_table();
  auto it = table.find(k);
  if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
  try {
    it->second.set(*this, trim(value));
  } catch (const ConfigError&) {
    throw ConfigError("config: bad value for " + key + ": '" + value + "'");
  }
}

std::string ExperimentConfig::get(const std::string& key) const {
  auto it = field_table().find(key);
  if (it == field_table().end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second.get(*this);
}

const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, _] : field_table()) out.push_back(name);
    return out;
  }();
  return k;
}

void ExperimentConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config " + path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

std::string ExperimentConfig::echo() const {
  std::string s;
  for (const auto& [name, field] : field_table()) {
    if (name == "out") continue;
    if (!s.empty()) s += ';';
    s += name + "=" + field.get(*this);
  }
  std::replace(s.begin(), s.end(), ',', ':');
  return s;
}

Strategy resolve_strategy(const ExperimentConfig& cfg) {
  const std::size_t layers = cfg.model.layers;
  switch (parse_strategy_kind(cfg.strategy)) {
    case Strategy::Kind::NoFusion:
      return Strategy::none();
    case Strategy::Kind::AllLayer:
      return Strategy::all();
    case Strategy::Kind::Interleaved:
      return Strategy::interleaved();
    case Strategy::Kind::LowerLayer:
      return Strategy::lower(cfg.start ? cfg.start : default_lower_k(layers));
    case Strategy::Kind::UpperLayer:
      return Strategy::upper(cfg.start ? cfg.start : default_upper_start(layers));
  }
  return Strategy::none();
}

FusionPlan plan_for(const ExperimentConfig& cfg) {
  cfg.model.validate();
  return build_plan(resolve_strategy(cfg), cfg.model.layers, cfg.r, cfg.model.seq_len());
}

std::size_t first_fused_layer(const FusionPlan& plan) {
  for (std::size_t i = 0; i < plan.r.size(); ++i) {
    if (plan.r[i]) return i + 1;
  }
  return 0;
}

std::size_t last_fused_layer(const FusionPlan& plan) {
  for (std::size_t i = plan.r.size(); i-- > 0;) {
    if (plan.r[i]) return i + 1;
  }
  return 0;
}

Datasets load_datasets(const ExperimentConfig& cfg) {
  Datasets d;
  if (!cfg.data_dir.empty()) {
    const fs::path dir(cfg.data_dir);
    d.train = load_cifar100_binary((dir / "train.bin").string());
    d.test = load_cifar100_binary((dir / "test.bin").string());
    d.n_classes = kCifarFineClasses;
    return d;
  }
  std::vector<std::uint64_t> parts;
  std::stringstream ss(cfg.synthetic);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(parse_number<std::uint64_t>("synthetic", trim(item)));
  if (parts.size() != 3) throw ConfigError("config: synthetic expects n,classes,seed, got '" + cfg.synthetic + "'");
  if (parts[0] == 0) throw ConfigError("config: synthetic dataset must have at least one sample");
  d.synthetic = true;
  d.n_classes = parts[1];
  d.train = synthetic_dataset(parts[0], parts[1], parts[2], 0.1, cfg.model.image_h, cfg.model.image_w);
  d.test = synthetic_dataset(std::max<std::uint64_t>(1, parts[0] / 5), parts[1], mix_seed(parts[2], 1), 0.1,
                             cfg.model.image_h, cfg.model.image_w);
  return d;
}

std::string metrics_row(const EpochMetrics& m, const FusionPlan& plan, std::size_t budget) {
  std::ostringstream os;
  os << m.epoch + 1 << ',' << strategy_name(plan.strategy.kind) << ',' << plan.r_per_layer << ','
     << first_fused_layer(plan) << ',' << budget << ',' << m.token_steps_measured << ',' << m.peak_live_bytes << ','
     << fmt_fixed(m.epoch_seconds, 3) << ',' << fmt_double(m.top1) << ',' << fmt_double(m.top5);
  return os.str();
}

std::string summary_row(const SummaryRow& row, const ExperimentConfig& cfg) {
  const FusionPlan& p = row.plan;
  std::ostringstream os;
  os << strategy_name(p.strategy.kind) << ',' << p.r_per_layer << ',' << first_fused_layer(p) << ','
     << last_fused_layer(p) << ',' << p.layers() << ',' << p.seq_len << ',' << row.budget << ',' << p.total_reduced()
     << ',' << token_steps(p).total << ',';
  if (row.trained) {
    os << cfg.epochs << ',' << cfg.seed << ',' << row.peak_live_bytes << ',' << fmt_fixed(row.epoch_seconds, 3)
       << ',' << fmt_double(row.top1) << ',' << fmt_double(row.top5);
  } else {
    os << ",,,,,";
  }
  os << ',' << cfg.echo();
  return os.str();
}

RunOutcome train_configuration(const ExperimentConfig& cfg, const FusionPlan& plan, const Datasets& data,
                               const std::string& dir, std::size_t budget) {
  VimConfig mc = cfg.model;
  mc.n_classes = data.n_classes;
  mc.init_seed = cfg.seed;
  VimModel<float> model(mc);

  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.base_lr = cfg.lr;
  tc.min_lr = cfg.min_lr;
  tc.warmup_epochs = cfg.warmup;
  tc.label_smoothing = cfg.label_smoothing;
  tc.optim.weight_decay = cfg.weight_decay;
  if (cfg.augment == "auto") {
    tc.augment = !data.synthetic;
  } else {
    tc.augment = parse_flag("augment", cfg.augment);
  }
  tc.seed = cfg.seed;
  fs::create_directories(dir);
  tc.checkpoint_path = (fs::path(dir) / "model.ckpt").string();
  {
    std::ofstream os(fs::path(dir) / "config.txt", std::ios::trunc);
    for (const std::string& key : ExperimentConfig::keys()) os << key << '=' << cfg.get(key) << '\n';
    os << "# plan " << plan.to_record() << '\n';
  }
  const fs::path metrics = fs::path(dir) / "metrics.csv";
  {
    std::ofstream os(metrics, std::ios::trunc);
    if (!os) throw ConfigError("cannot write " + metrics.string());
    os << kMetricsHeader << '\n';
  }
  RunOutcome outcome;
  outcome.epochs = train(model, plan, data.train, data.test, tc, [&](const EpochMetrics& m) {
    std::ofstream os(metrics, std::ios::app);
    os << metrics_row(m, plan, budget) << '\n';
    os.flush();
  });
  SummaryRow& s = outcome.summary;
  s.plan = plan;
  s.budget = budget;
  s.trained = true;
  for (const EpochMetrics& m : outcome.epochs) {
    s.epoch_seconds += m.epoch_seconds;
    s.peak_live_bytes = std::max(s.peak_live_bytes, m.peak_live_bytes);
  }
  s.epoch_seconds /= static_cast<double>(outcome.epochs.size());
  s.top1 = outcome.epochs.back().top1;
  s.top5 = outcome.epochs.back().top5;
  return outcome;
}

std::size_t sweep_workers() {
  if (const char* env = std::getenv("FAMBAV_THREADS")) {
    const std::size_t n = parse_number<std::size_t>("FAMBAV_THREADS", env);
    if (n == 0) throw ConfigError("FAMBAV_THREADS must be >= 1");
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

struct SweepJob {
  std::string name;
  FusionPlan plan;
  std::size_t budget = 0;
};

// Runs every job (training unless dry) on up to sweep_workers() threads. Rows are
// appended to `csv` as they finish and the file is rewritten in job order at the end.
std::vector<SummaryRow> run_sweep(const ExperimentConfig& cfg, const std::vector<SweepJob>& jobs,
                                  const std::string& csv_name, std::ostream& out) {
  fs::create_directories(cfg.out);
  const fs::path csv = fs::path(cfg.out) / csv_name;
  {
    std::ofstream os(csv, std::ios::trunc);
    if (!os) throw ConfigError("cannot write " + csv.string());
    os << kSummaryHeader << '\n';
  }
  std::vector<SummaryRow> rows(jobs.size());
  if (cfg.dry_run) {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      rows[i].plan = jobs[i].plan;
      rows[i].budget = jobs[i].budget;
    }
  } else {
    const Datasets data = load_datasets(cfg);
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    auto worker = [&] {
      for (std::size_t i = next++; i < jobs.size(); i = next++) {
        try {
          const std::string dir = (fs::path(cfg.out) / csv.stem() / jobs[i].name).string();
          RunOutcome r = train_configuration(cfg, jobs[i].plan, data, dir, jobs[i].budget);
          std::lock_guard<std::mutex> lock(mu);
          rows[i] = r.summary;
          std::ofstream(csv, std::ios::app) << summary_row(rows[i], cfg) << '\n';
          out << "finished " << jobs[i].name << ": top1 " << fmt_fixed(rows[i].top1, 4) << ", "
              << fmt_fixed(rows[i].epoch_seconds, 2) << " s/epoch\n";
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
          next = jobs.size();
        }
      }
    };
    const std::size_t n = std::min(sweep_workers(), jobs.size());
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < n; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  std::ofstream os(csv, std::ios::trunc);
  os << kSummaryHeader << '\n';
  for (const SummaryRow& row : rows) os << summary_row(row, cfg) << '\n';
  out << "wrote " << csv.string() << '\n';
  return rows;
}

void print_rows(const std::vector<SummaryRow>& rows, std::ostream& out) {
  out << std::left << std::setw(12) << "strategy" << std::right << std::setw(6) << "r" << std::setw(8) << "start"
      << std::setw(8) << "total" << std::setw(13) << "token_steps" << std::setw(10) << "top1" << '\n';
  for (const SummaryRow& row : rows) {
    out << std::left << std::setw(12) << strategy_name(row.plan.strategy.kind) << std::right << std::setw(6)
        << row.plan.r_per_layer << std::setw(8) << first_fused_layer(row.plan) << std::setw(8)
        << row.plan.total_reduced() << std::setw(13) << token_steps(row.plan).total << std::setw(10)
        << (row.trained ? fmt_fixed(row.top1, 4) : std::string("-")) << '\n';
  }
}

}  // namespace

int cmd_run(const ExperimentConfig& cfg, std::ostream& out, std::ostream&) {
  const FusionPlan plan = plan_for(cfg);
  const TokenSteps steps = token_steps(plan);
  out << "plan " << plan.to_record() << " total_reduced=" << plan.total_reduced() << " token_steps=" << steps.total
      << '\n';
  if (cfg.dry_run) return 0;
  const Datasets data = load_datasets(cfg);
  const RunOutcome r = train_configuration(cfg, plan, data, cfg.out, plan.total_reduced());
  for (const EpochMetrics& m : r.epochs) {
    out << "epoch " << m.epoch + 1 << " loss " << fmt_fixed(m.train_loss, 4) << " top1 " << fmt_fixed(m.top1, 4)
        << " top5 " << fmt_fixed(m.top5, 4) << " " << fmt_fixed(m.epoch_seconds, 2) << " s\n";
  }
  out << "wrote " << (fs::path(cfg.out) / "metrics.csv").string() << " and "
      << (fs::path(cfg.out) / "model.ckpt").string() << '\n';
  return 0;
}

int cmd_compare(const ExperimentConfig& cfg, std::ostream& out, std::ostream&) {
  cfg.model.validate();
  const std::size_t layers = cfg.model.layers, seq = cfg.model.seq_len();
  std::vector<SweepJob> jobs;
  for (const ParityEntry& e : parity_configs(layers, cfg.budget)) {
    jobs.push_back({strategy_name(e.strategy.kind), build_plan(e.strategy, layers, e.r_per_layer, seq), cfg.budget});
  }
  print_rows(run_sweep(cfg, jobs, "compare.csv", out), out);
  return 0;
}

int cmd_sweep_start(const ExperimentConfig& cfg, const std::vector<std::size_t>& starts, std::ostream& out,
                    std::ostream&) {
  cfg.model.validate();
  const std::size_t layers = cfg.model.layers, seq = cfg.model.seq_len();
  std::vector<SweepJob> jobs;
  for (std::size_t s : starts) {
    const Strategy st = Strategy::upper(s);
    if (s < 1 || s > layers) {
      throw PlanError("infeasible plan: starting layer " + std::to_string(s) + " outside [1, " +
                      std::to_string(layers) + "]");
    }
    const ParityEntry e = parity_for(st, layers, cfg.budget);
    jobs.push_back({"start" + std::to_string(s), build_plan(st, layers, e.r_per_layer, seq), cfg.budget});
  }
  print_rows(run_sweep(cfg, jobs, "sweep_start.csv", out), out);
  return 0;
}

int cmd_sweep_r(const ExperimentConfig& cfg, const std::vector<std::size_t>& rs, std::ostream& out, std::ostream&) {
  cfg.model.validate();
  const std::size_t layers = cfg.model.layers, seq = cfg.model.seq_len();
  const std::size_t start = cfg.start ? cfg.start : default_upper_start(layers);
  std::vector<SweepJob> jobs;
  for (std::size_t r : rs) {
    const Strategy st = r == 0 ? Strategy::none() : Strategy::upper(start);
    FusionPlan plan = build_plan(st, layers, r, seq);
    jobs.push_back({"r" + std::to_string(r), plan, plan.total_reduced()});
  }
  print_rows(run_sweep(cfg, jobs, "sweep_r.csv", out), out);
  return 0;
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw FormatError("csv: missing column '" + name + "'");
}

CsvTable read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("csv: cannot open " + path);
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  CsvTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.header.empty()) {
      t.header = split(line);
      continue;
    }
    auto row = split(line);
    if (row.size() != t.header.size()) {
      throw FormatError("csv " + path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " fields, got " + std::to_string(row.size()));
    }
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw FormatError("csv " + path + ": empty file");
  return t;
}

std::string render_tradeoff_svg(const CsvTable& table, const std::string& title) {
  const std::size_t cs = table.column("strategy"), ct = table.column("token_steps"), ca = table.column("top1");
  struct Point {
    double x, y;
  };
  std::vector<std::string> names;
  std::map<std::string, std::vector<Point>> series;
  for (const auto& row : table.rows) {
    if (row[ca].empty()) continue;
    const Point p{parse_real("token_steps", row[ct]), parse_real("top1", row[ca])};
    if (!series.count(row[cs])) names.push_back(row[cs]);
    series[row[cs]].push_back(p);
  }
  if (names.empty()) throw FormatError("csv: no rows with accuracy values to plot");
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& [_, pts] : series) {
    for (const Point& p : pts) {
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
    }
  }
  if (x1 - x0 < 1e-9) {
    x0 -= 1;
    x1 += 1;
  }
  if (y1 - y0 < 1e-9) {
    y0 -= 0.01;
    y1 += 0.01;
  }
  const double W = 640, H = 420, left = 70, right = 160, top = 40, bottom = 50;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto sy = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
     << W << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
     << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << fmt_fixed(sx(xv), 1) << "\" y=\"" << H - bottom + 18
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << fmt_fixed(xv, 0)
       << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << fmt_fixed(sy(yv) + 3, 1)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << fmt_fixed(yv, 3) << "</text>\n";
  }
  os << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">token steps</text>\n";
  os << "<text x=\"16\" y=\"" << (top + H - bottom) / 2 << "\" transform=\"rotate(-90 16 " << (top + H - bottom) / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">top-1</text>\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    const char* color = palette[i % (sizeof palette / sizeof *palette)];
    std::vector<Point> pts = series[names[i]];
    std::stable_sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x; });
    os << "<g class=\"series\" data-name=\"" << names[i] << "\">\n";
    if (pts.size() > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
      for (const Point& p : pts) os << fmt_fixed(sx(p.x), 1) << ',' << fmt_fixed(sy(p.y), 1) << ' ';
      os << "\"/>\n";
    }
    for (const Point& p : pts) {
      os << "<circle cx=\"" << fmt_fixed(sx(p.x), 1) << "\" cy=\"" << fmt_fixed(sy(p.y), 1) << "\" r=\"4\" fill=\""
         << color << "\"/>\n";
    }
    const double ly = top + 18.0 * static_cast<double>(i);
    os << "<circle cx=\"" << W - right + 16 << "\" cy=\"" << ly << "\" r=\"4\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << W - right + 26 << "\" y=\"" << ly + 4
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << names[i] << "</text>\n";
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

int cmd_plot(const std::vector<std::string>& csv_paths, const std::string& out_dir, std::ostream& out,
             std::ostream&) {
  if (csv_paths.empty()) throw ConfigError("plot: no CSV files given");
  for (const std::string& path : csv_paths) {
    const CsvTable table = read_csv(path);
    if (table.rows.empty()) throw FormatError("csv " + path + ": no data rows");
    const std::string svg = render_tradeoff_svg(table, fs::path(path).stem().string() + ": top-1 vs token steps");
    fs::path target = fs::path(path).replace_extension(".svg");
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      target = fs::path(out_dir) / target.filename();
    }
    std::ofstream os(target, std::ios::trunc | std::ios::binary);
    if (!os) throw ConfigError("plot: cannot write " + target.string());
    os << svg;
    out << "wrote " << target.string() << '\n';
  }
  return 0;
}

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace fambav
