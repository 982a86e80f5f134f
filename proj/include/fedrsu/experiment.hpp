#pragma once

#include "fedrsu/fedpers.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedrsu {

/// Invalid or unknown configuration entry. The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` entries in file order. '#' starts a comment.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

struct ExperimentConfig {
  std::uint64_t seed = 0;  // drives data generation and fl.seed
  std::filesystem::path output_dir = "runs/default";
  std::optional<std::filesystem::path> data_dir;  // previously generated dataset
  int model_points = 128;                         // points per frame fed to the model
  TargetSampling target_sampling = TargetSampling::kShared;

  std::vector<ClientProfile> federation;  // seen and unseen profiles, in declaration order
  std::vector<std::string> unseen;        // eval-only client ids

  ModelConfig model;
  LossConfig loss;
  FLConfig fl;
  std::vector<PersonalMethod> personal_methods;
  PersonalConfig personal;

  int eval_interval = 0;
  std::vector<std::string> baselines = {"local", "fl"};  // subset of central, local, fl
  int threads = 1;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

ExperimentConfig parse_experiment(const std::vector<std::pair<std::string, std::string>>& entries);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Full-resolution datasets for every configured client.
std::vector<ClientDataset> generate_datasets(const ExperimentConfig& cfg);

/// Datasets from cfg.data_dir when set, otherwise generated in memory; then downsampled to model_points.
std::vector<ClientDataset> prepare_datasets(const ExperimentConfig& cfg);

/// Writes <out>/data/<client id>/ in the export format.
void cmd_generate(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// Runs the configured baselines and personalization methods.
/// Writes <out>/logs/<method>.jsonl and <out>/checkpoints/<method>/.
void cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// Reads <run>/logs/*.jsonl and writes <run>/tables/generalized.csv and personalization.csv.
void cmd_report(const std::filesystem::path& run_dir);

inline constexpr const char* kGeneralizedHeader = "method,participation,split,epe3d,accs,accr";
inline constexpr const char* kPersonalizationHeader = "method,metric,mean,std,imp";

}  // namespace fedrsu
