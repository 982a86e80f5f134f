#pragma once

#include "fedrsu/flowmodel.hpp"
#include "fedrsu/metrics.hpp"
#include "fedrsu/scenegen.hpp"
#include "fedrsu/ssloss.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fedrsu {

enum class Algorithm { kFedAvg, kFedProx, kScaffold, kFedAvgM, kFedNova, kFedAdam };
enum class ClientOptimizer { kSgd, kAdam };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& name);

struct FLConfig {
  int rounds = 50;
  int local_epochs = 1;
  int batch_size = 32;
  double client_lr = 4e-4;
  ClientOptimizer client_optimizer = ClientOptimizer::kAdam;
  double participation = 1.0;  // C, fraction of trainable clients sampled per round
  Algorithm algorithm = Algorithm::kFedAvg;
  double mu = 0.01;              // FedProx proximal coefficient
  double server_momentum = 0.9;  // FedAvgM
  double server_lr = 1e-2;       // FedAdam
  double server_beta1 = 0.9;
  double server_beta2 = 0.99;
  double server_eps = 1e-3;
  double adam_beta1 = 0.9;  // client Adam
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int threads = 1;  // worker threads for client training; never changes results

  void validate() const;
};

struct ClientState {
  std::string id;
  std::shared_ptr<const ClientDataset> data;
  bool eval_only = false;    // held-out ("unseen") client: never scheduled
  Eigen::VectorXd control;   // SCAFFOLD c_k; empty means zero
  int last_steps = 0;        // tau_k of the most recent round

  std::size_t num_samples() const { return data ? data->train.size() : 0; }
};

std::vector<ClientState> make_clients(const std::vector<ClientDataset>& datasets,
                                      const std::vector<std::string>& eval_only_ids = {});

struct ServerState {
  ParamVector global;
  int round = 0;
  Eigen::VectorXd momentum;  // FedAvgM
  Eigen::VectorXd adam_m;    // FedAdam
  Eigen::VectorXd adam_v;
  Eigen::VectorXd control;   // SCAFFOLD c
};

ServerState init_server(const ModelConfig& model_cfg, std::uint64_t seed);

/// Uniformly samples ceil(C * K) distinct ids, deterministic in (seed, round). Result sorted.
std::vector<std::string> schedule_round(const std::vector<std::string>& client_ids, double participation,
                                        std::uint64_t seed, int round);

/// Per-call adjustments used by the personalization layer.
struct LocalTrainOptions {
  int epochs = 0;                              // 0: use fl_cfg.local_epochs
  const Eigen::VectorXd* grad_mask = nullptr;  // 1 trainable, 0 frozen
  const Eigen::VectorXd* prox_anchor = nullptr;
  double prox_coeff = 0.0;                     // gradient += prox_coeff * (theta - anchor)
  std::uint64_t stream = 0;                    // separates batch orders of independent tracks
  bool update_control = true;                  // SCAFFOLD variate bookkeeping
};

struct LocalResult {
  ParamVector params;
  int steps = 0;
  std::optional<Eigen::VectorXd> control_delta;
  double mean_loss = 0.0;
};

/// Local training from `init` on the client's own train split.
/// SCAFFOLD requires `server_control` and always uses plain SGD.
LocalResult local_train(ClientState& client, const ParamVector& init, const FLConfig& fl_cfg,
                        const ModelConfig& model_cfg, const LossConfig& loss_cfg, int round,
                        const Eigen::VectorXd* server_control = nullptr, const LocalTrainOptions& options = {});

/// What a client uploads. Only parameter-shaped data crosses the boundary.
struct ClientUpdate {
  std::string client_id;
  ParamVector params;
  double num_samples = 0.0;
  int steps = 0;
  std::optional<Eigen::VectorXd> control_delta;
};

/// Sum_k w_k theta_k with w_k = N_k / sum N, reduced in ascending client id
/// order and anchored at the first model, so identical inputs return that model bitwise.
Eigen::VectorXd weighted_average(const std::vector<const ClientUpdate*>& sorted_updates);

/// Server step for the configured algorithm. `total_clients` is K in the SCAFFOLD variate update.
ServerState aggregate(const std::vector<ClientUpdate>& updates, const ServerState& server, const FLConfig& fl_cfg,
                      std::size_t total_clients);

/// Pooled metrics of the final flow estimate over labelled pairs.
MetricReport evaluate_model(const ParamVector& params, const std::vector<const FramePair*>& pairs,
                            const ModelConfig& model_cfg, int threads = 1);

std::vector<const FramePair*> test_pairs(const std::vector<ClientState>& clients, bool eval_only);

struct RoundReport {
  int round = 0;
  std::vector<std::string> participants;
  std::map<std::string, double> client_loss;
  double update_norm = 0.0;
  std::optional<MetricReport> seen;
  std::optional<MetricReport> unseen;
};

struct EvalSpec {
  int interval = 0;  // evaluate every `interval` rounds (0: final round only)
  bool enabled = true;
};

struct FederationResult {
  std::vector<RoundReport> reports;
  ServerState server;
};

/// Called once per round on the orchestrating thread, after aggregation.
using RoundCallback = std::function<void(const RoundReport&, const ServerState&)>;

/// Customization points of the round engine. `train` may run concurrently for
/// different clients; it must touch only its own client and the read-only server.
struct RoundHooks {
  std::function<ClientUpdate(ClientState&, const ServerState& broadcast, int round, double& mean_loss)> train;
  std::function<ServerState(const std::vector<ClientUpdate>&, const ServerState&)> aggregate;
  /// Model evaluated on the seen/unseen test unions (defaults to the global params).
  std::function<ParamVector(const ServerState&)> eval_model;
};

/// Generic round loop: schedule, broadcast, train, upload, aggregate, evaluate.
FederationResult run_rounds(std::vector<ClientState>& clients, ServerState init, const FLConfig& fl_cfg,
                            const ModelConfig& model_cfg, const EvalSpec& eval, const RoundHooks& hooks,
                            const RoundCallback& on_round = {});

/// Broadcast, local training, upload and aggregation for fl_cfg.rounds rounds.
FederationResult run_federation(std::vector<ClientState>& clients, const FLConfig& fl_cfg,
                                const ModelConfig& model_cfg, const LossConfig& loss_cfg, const EvalSpec& eval = {},
                                const RoundCallback& on_round = {});

struct LocalOnlyResult {
  ParamVector params;
  std::vector<double> round_loss;  // mean training loss of each round (epoch block)
};

/// Isolated training from fresh init: run_federation with this client alone under FedAvg.
LocalOnlyResult train_local_only(const ClientState& client, const FLConfig& fl_cfg, const ModelConfig& model_cfg,
                                 const LossConfig& loss_cfg);

}  // namespace fedrsu
