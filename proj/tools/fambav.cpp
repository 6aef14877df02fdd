#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "criteria.hpp"
#include "fambav/bench.hpp"
#include "fambav/errors.hpp"

namespace {

using fambav::ExperimentConfig;

std::string flag_name(std::string key) {
  for (char& c : key) {
    if (c == '_') c = '-';
  }
  return "--" + key;
}

// Every config key becomes a --flag on the subcommand; a --config file is applied
// first and explicit flags override it.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  bool dry_run = false;
  bool fusion_weighted = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key=value experiment file");
    for (const std::string& key : ExperimentConfig::keys()) {
      if (key == "dry_run" || key == "fusion_weighted") continue;
      app->add_option(flag_name(key), values[key], "config key " + key);
    }
    app->add_option("--k", values["k"], "alias of --start for the lower-layer strategy");
    app->add_flag("--dry-run", dry_run, "scheduler analytics only; no model is built");
    app->add_flag("--fusion-weighted", fusion_weighted, "size-weighted token means");
  }

  ExperimentConfig resolve(CLI::App* app) const {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& [key, value] : values) {
      const std::string flag = key == "k" ? "--k" : flag_name(key);
      if (app->count(flag) > 0) cfg.set(key, value);
    }
    if (dry_run) cfg.dry_run = true;
    if (fusion_weighted) cfg.model.fusion_weighted = true;
    return cfg;
  }
};

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::string item;
  std::stringstream ss(text);
  while (std::getline(ss, item, ',')) {
    const auto dash = item.find('-');
    try {
      if (dash != std::string::npos) {
        const std::size_t lo = std::stoul(item.substr(0, dash)), hi = std::stoul(item.substr(dash + 1));
        for (std::size_t v = lo; v <= hi; ++v) out.push_back(v);
      } else {
        out.push_back(std::stoul(item));
      }
    } catch (const std::exception&) {
      throw fambav::ConfigError("bad list item '" + item + "' in '" + text + "'");
    }
  }
  if (out.empty()) throw fambav::ConfigError("empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-layer token fusion for bidirectional selective state-space image classifiers"};
  app.require_subcommand(1);

  ConfigFlags run_flags, compare_flags, start_flags, r_flags;
  auto* run = app.add_subcommand("run", "train one configuration");
  run_flags.attach(run);
  auto* compare = app.add_subcommand("compare", "budget-matched comparison of the five strategies");
  compare_flags.attach(compare);
  auto* sweep_start = app.add_subcommand("sweep-start", "upper-layer strategy over starting layers");
  start_flags.attach(sweep_start);
  std::string starts = "2-15";
  sweep_start->add_option("--starts", starts, "comma list or ranges, e.g. 2-15");
  auto* sweep_r = app.add_subcommand("sweep-r", "upper-layer strategy over reduced tokens per layer");
  r_flags.attach(sweep_r);
  std::string rs = "1-9";
  sweep_r->add_option("--rs", rs, "comma list or ranges, e.g. 1-9");
  auto* plot = app.add_subcommand("plot", "render top-1 vs token-step charts from CSV files");
  std::vector<std::string> csvs;
  std::string plot_out;
  plot->add_option("csv", csvs, "CSV files")->required();
  plot->add_option("--out-dir", plot_out, "directory for the SVG files");
  auto* selftest = app.add_subcommand("selftest", "run the acceptance suite");
  bool full = false;
  selftest->add_flag("--full", full, "include the training criteria (several minutes)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  return fambav::guarded(
      [&]() -> int {
        if (*run) return fambav::cmd_run(run_flags.resolve(run), std::cout, std::cerr);
        if (*compare) return fambav::cmd_compare(compare_flags.resolve(compare), std::cout, std::cerr);
        if (*sweep_start) {
          return fambav::cmd_sweep_start(start_flags.resolve(sweep_start), parse_list(starts), std::cout, std::cerr);
        }
        if (*sweep_r) return fambav::cmd_sweep_r(r_flags.resolve(sweep_r), parse_list(rs), std::cout, std::cerr);
        if (*plot) return fambav::cmd_plot(csvs, plot_out, std::cout, std::cerr);
        if (*selftest) return fambav::acceptance::run_all(std::cout, full) ? 0 : 1;
        return 2;
      },
      std::cerr);
}
