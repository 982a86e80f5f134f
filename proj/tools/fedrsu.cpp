// fedrsu: generate datasets, run federated scene-flow experiments, tabulate results.
//
//   fedrsu generate --config exp.cfg [--out DIR] [--seed N]
//   fedrsu run      --config exp.cfg [--out DIR] [--seed N] [--threads N]
//   fedrsu report   --out DIR
//
// Exit status: 0 success, 2 configuration error, 1 anything else.

#include "fedrsu/experiment.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

fedrsu::ExperimentConfig resolve(const std::string& path, const std::optional<std::uint64_t>& seed,
                                 const std::optional<int>& threads) {
  auto entries = fedrsu::parse_config_text([&] {
    std::ifstream in(path);
    if (!in) throw fedrsu::ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }());
  // Command-line values replace the config file's; presets depend on the seed, so apply before parsing.
  auto set = [&](const std::string& key, const std::string& value) {
    std::erase_if(entries, [&](const auto& kv) { return kv.first == key; });
    entries.emplace_back(key, value);
  };
  if (seed) set("seed", std::to_string(*seed));
  if (threads) set("threads", std::to_string(*threads));
  return fedrsu::parse_experiment(entries);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated scene-flow simulator for roadside units"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;

  auto* gen = app.add_subcommand("generate", "Generate client datasets");
  auto* run = app.add_subcommand("run", "Run baselines and federated methods");
  auto* report = app.add_subcommand("report", "Write CSV tables from run logs");
  for (auto* sub : {gen, run}) {
    sub->add_option("--config", config, "Experiment config file")->required();
    sub->add_option("--out", out, "Output directory (default: output_dir from the config)");
    sub->add_option("--seed", seed, "Override the config seed");
  }
  run->add_option("--threads", threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  report->add_option("--out", out, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*report) {
      fedrsu::cmd_report(out);
      return 0;
    }
    const auto cfg = resolve(config, seed, threads);
    const std::filesystem::path dest = out.empty() ? cfg.output_dir : std::filesystem::path(out);
    if (*gen) {
      fedrsu::cmd_generate(cfg, dest);
    } else {
      fedrsu::cmd_run(cfg, dest);
    }
    return 0;
  } catch (const fedrsu::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
