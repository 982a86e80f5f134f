#pragma once

#include "fedrsu/fedcore.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fedrsu {

enum class PersonalMethod { kFineTune, kDitto, kFedPer, kFedRep };

std::string to_string(PersonalMethod m);
PersonalMethod parse_personal_method(const std::string& name);

struct PersonalConfig {
  PersonalMethod method = PersonalMethod::kFineTune;
  int finetune_epochs = 1;
  double ditto_lambda = 0.1;
  int ditto_epochs = 0;  // personal-track epochs per round; 0 follows fl.local_epochs
  int fedrep_head_epochs = 1;
  int fedrep_body_epochs = 1;
  /// Segments kept private by FedPer/FedRep. Default: the local update unit.
  std::vector<std::string> head_segments = {"update.w1", "update.b1", "update.w2", "update.b2"};

  void validate() const;
};

/// client id -> personalized model v_k
using PersonalModels = std::map<std::string, ParamVector>;

/// Parameters restricted to the segments of one part, with a compact layout of
/// just those segments. Used for what FedPer/FedRep clients upload.
ParamVector restrict_part(const ParamVector& params, Part which);

/// Layout for FedPer/FedRep. Throws when a head name is not a model segment.
ParamLayout personal_layout(const ModelConfig& model_cfg, const PersonalConfig& cfg);

/// finetune_epochs of plain local training from `global` on the client's own data.
ParamVector fine_tune(const ParamVector& global, ClientState& client, const PersonalConfig& cfg,
                      const FLConfig& fl_cfg, const ModelConfig& model_cfg, const LossConfig& loss_cfg);

struct PersonalRun {
  FederationResult federation;  // the shared-model track
  PersonalModels personal;      // one entry per trainable client
};

/// Runs the configured method for fl_cfg.rounds rounds.
/// finetune: run_federation with fl_cfg.algorithm, then fine_tune per client.
/// ditto: FedAvg global track plus a private proximal track per client.
/// fedper/fedrep: only base segments are uploaded and aggregated.
PersonalRun run_personalized(std::vector<ClientState>& clients, const PersonalConfig& cfg, const FLConfig& fl_cfg,
                             const ModelConfig& model_cfg, const LossConfig& loss_cfg, const EvalSpec& eval = {},
                             const RoundCallback& on_round = {});

struct PersonalEvaluation {
  std::map<std::string, MetricReport> per_client;
  PersonalizationSummary epe3d;
  PersonalizationSummary accs;
  PersonalizationSummary accr;
};

/// Each model on its own client's test split, summarized against the baseline models.
PersonalEvaluation evaluate_personalized(const PersonalModels& models, const std::vector<ClientState>& clients,
                                         const PersonalModels& baseline, const ModelConfig& model_cfg,
                                         int threads = 1);

/// Summary statistics from per-client reports (no model evaluation).
PersonalEvaluation summarize_reports(const std::map<std::string, MetricReport>& per_client,
                                     const std::map<std::string, MetricReport>& baseline);

// Checkpoint: <dir>/manifest.json plus <dir>/<client id>.f64 / .layout.json per client.
void save_personal_models(const PersonalModels& models, const std::filesystem::path& dir);
PersonalModels load_personal_models(const std::filesystem::path& dir);

}  // namespace fedrsu
