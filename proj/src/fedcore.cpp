#include "fedrsu/fedcore.hpp"

#include "fedrsu/parallel.hpp"
#include "fedrsu/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace fedrsu {

namespace {

constexpr std::uint64_t kBatchOrderTag = 0x6261746368ULL;
constexpr std::uint64_t kScheduleTag = 0x7363686564ULL;

Eigen::VectorXd zeros_like(const Eigen::VectorXd& v, Eigen::Index n) {
  return v.size() == n ? v : Eigen::VectorXd::Zero(n);
}

void check_layout(const ParamVector& p, const ParamLayout& expected, const char* what) {
  if (!(p.layout == expected) || p.size() != expected.size()) {
    throw std::invalid_argument(std::string(what) + ": parameter layout mismatch");
  }
}

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kFedAvg: return "fedavg";
    case Algorithm::kFedProx: return "fedprox";
    case Algorithm::kScaffold: return "scaffold";
    case Algorithm::kFedAvgM: return "fedavgm";
    case Algorithm::kFedNova: return "fednova";
    case Algorithm::kFedAdam: return "fedadam";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  for (Algorithm a : {Algorithm::kFedAvg, Algorithm::kFedProx, Algorithm::kScaffold, Algorithm::kFedAvgM,
                      Algorithm::kFedNova, Algorithm::kFedAdam}) {
    if (to_string(a) == name) return a;
  }
  throw std::invalid_argument("unknown algorithm: " + name);
}

void FLConfig::validate() const {
  if (rounds < 1) throw std::invalid_argument("fl.rounds must be >= 1");
  if (local_epochs < 1) throw std::invalid_argument("fl.local_epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("fl.batch_size must be >= 1");
  if (!(client_lr >= 0.0)) throw std::invalid_argument("fl.client_lr must be nonnegative");
  if (algorithm == Algorithm::kScaffold && !(client_lr > 0.0)) {
    throw std::invalid_argument("fl.client_lr must be positive for scaffold");
  }
  if (!(participation > 0.0 && participation <= 1.0)) throw std::invalid_argument("fl.participation must be in (0, 1]");
  if (mu < 0.0) throw std::invalid_argument("fl.mu must be nonnegative");
  if (server_momentum < 0.0 || server_momentum >= 1.0) throw std::invalid_argument("fl.server_momentum must be in [0, 1)");
  if (!(server_lr > 0.0)) throw std::invalid_argument("fl.server_lr must be positive");
  if (server_beta1 < 0.0 || server_beta1 >= 1.0) throw std::invalid_argument("fl.server_beta1 must be in [0, 1)");
  if (server_beta2 < 0.0 || server_beta2 >= 1.0) throw std::invalid_argument("fl.server_beta2 must be in [0, 1)");
  if (!(server_eps > 0.0)) throw std::invalid_argument("fl.server_eps must be positive");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0) throw std::invalid_argument("fl.adam_beta1 must be in [0, 1)");
  if (adam_beta2 < 0.0 || adam_beta2 >= 1.0) throw std::invalid_argument("fl.adam_beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("fl.adam_eps must be positive");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
}

std::vector<ClientState> make_clients(const std::vector<ClientDataset>& datasets,
                                      const std::vector<std::string>& eval_only_ids) {
  std::set<std::string> seen;
  std::vector<ClientState> out;
  for (const auto& d : datasets) {
    if (!seen.insert(d.profile.client_id).second) throw std::invalid_argument("duplicate client id: " + d.profile.client_id);
    ClientState c;
    c.id = d.profile.client_id;
    c.data = std::make_shared<const ClientDataset>(d);
    c.eval_only = std::find(eval_only_ids.begin(), eval_only_ids.end(), d.profile.client_id) != eval_only_ids.end();
    out.push_back(std::move(c));
  }
  for (const auto& id : eval_only_ids) {
    if (!seen.count(id)) throw std::invalid_argument("unknown client id: " + id);
  }
  return out;
}

ServerState init_server(const ModelConfig& model_cfg, std::uint64_t seed) {
  ServerState s;
  s.global = init_params(model_cfg, seed);
  return s;
}

std::vector<std::string> schedule_round(const std::vector<std::string>& client_ids, double participation,
                                        std::uint64_t seed, int round) {
  if (client_ids.empty()) throw std::invalid_argument("schedule_round: no clients");
  if (!(participation > 0.0 && participation <= 1.0)) {
    throw std::invalid_argument("schedule_round: participation must be in (0, 1]");
  }
  std::vector<std::string> ids = client_ids;
  std::sort(ids.begin(), ids.end());
  const auto k = ids.size();
  // Guard against 0.5 * 14 landing a hair above 7 in floating point.
  const double exact = participation * static_cast<double>(k);
  auto m = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  m = std::clamp<std::size_t>(m, 1, k);
  if (m == k) return ids;
  Rng rng(derive_seed({seed, kScheduleTag, static_cast<std::uint64_t>(round)}));
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.index(k - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

LocalResult local_train(ClientState& client, const ParamVector& init, const FLConfig& fl_cfg,
                        const ModelConfig& model_cfg, const LossConfig& loss_cfg, int round,
                        const Eigen::VectorXd* server_control, const LocalTrainOptions& options) {
  fl_cfg.validate();
  if (init.size() != model_layout(model_cfg).size() || init.layout.size() != init.size()) {
    throw std::invalid_argument("local_train: parameter layout mismatch");
  }
  if (!client.data || client.data->train.empty()) throw std::invalid_argument("local_train: empty train set");
  const auto& train = client.data->train;
  const Eigen::Index dim = init.size();
  const bool scaffold = fl_cfg.algorithm == Algorithm::kScaffold;
  if (scaffold && (!server_control || server_control->size() != dim)) {
    throw std::invalid_argument("local_train: scaffold needs a server control variate");
  }
  if (options.grad_mask && options.grad_mask->size() != dim) throw std::invalid_argument("local_train: mask size");
  if (options.prox_anchor && options.prox_anchor->size() != dim) throw std::invalid_argument("local_train: anchor size");

  const bool adam = fl_cfg.client_optimizer == ClientOptimizer::kAdam && !scaffold;
  const int epochs = options.epochs > 0 ? options.epochs : fl_cfg.local_epochs;
  const double prox_mu = fl_cfg.algorithm == Algorithm::kFedProx ? fl_cfg.mu : 0.0;
  const Eigen::VectorXd client_control = zeros_like(client.control, dim);
  Eigen::VectorXd correction;
  if (scaffold) correction = *server_control - client_control;

  LocalResult out;
  out.params = init;
  Eigen::VectorXd& theta = out.params.values;
  Eigen::VectorXd m = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  double loss_sum = 0.0;
  int batches = 0;

  const auto n = train.size();
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed({fl_cfg.seed, kBatchOrderTag, static_cast<std::uint64_t>(round), hash_string(client.id),
                         static_cast<std::uint64_t>(epoch), options.stream}));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(fl_cfg.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(fl_cfg.batch_size));
      std::vector<const FramePair*> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&train[order[i]]);
      LossValue lv = batch_loss(out.params, batch, model_cfg, loss_cfg);
      loss_sum += lv.value;
      ++batches;
      Eigen::VectorXd g = std::move(lv.gradient);
      if (prox_mu != 0.0) g += prox_mu * (theta - init.values);
      if (options.prox_anchor && options.prox_coeff != 0.0) g += options.prox_coeff * (theta - *options.prox_anchor);
      if (scaffold) g += correction;
      if (options.grad_mask) g = g.cwiseProduct(*options.grad_mask);
      ++out.steps;
      if (adam) {
        m = fl_cfg.adam_beta1 * m + (1.0 - fl_cfg.adam_beta1) * g;
        v = fl_cfg.adam_beta2 * v + (1.0 - fl_cfg.adam_beta2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(fl_cfg.adam_beta1, out.steps);
        const double bc2 = 1.0 - std::pow(fl_cfg.adam_beta2, out.steps);
        Eigen::VectorXd step =
            ((m.array() / bc1) / ((v.array() / bc2).sqrt() + fl_cfg.adam_eps)).matrix() * fl_cfg.client_lr;
        if (options.grad_mask) step = step.cwiseProduct(*options.grad_mask);
        theta -= step;
      } else {
        theta -= fl_cfg.client_lr * g;
      }
    }
  }
  out.mean_loss = batches > 0 ? loss_sum / batches : 0.0;
  client.last_steps = out.steps;

  if (scaffold) {
    const Eigen::VectorXd updated =
        client_control - *server_control + (init.values - theta) / (static_cast<double>(out.steps) * fl_cfg.client_lr);
    out.control_delta = updated - client_control;
    if (options.update_control) client.control = updated;
  }
  return out;
}

Eigen::VectorXd weighted_average(const std::vector<const ClientUpdate*>& sorted_updates) {
  if (sorted_updates.empty()) throw std::invalid_argument("aggregate: no updates");
  double total = 0.0;
  for (const auto* u : sorted_updates) {
    if (u->num_samples < 0.0) throw std::invalid_argument("aggregate: negative sample count");
    total += u->num_samples;
  }
  if (!(total > 0.0)) throw std::invalid_argument("aggregate: total sample count is zero");
  const Eigen::VectorXd& anchor = sorted_updates.front()->params.values;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(anchor.size());
  for (const auto* u : sorted_updates) acc += (u->num_samples / total) * (u->params.values - anchor);
  return anchor + acc;
}

ServerState aggregate(const std::vector<ClientUpdate>& updates, const ServerState& server, const FLConfig& fl_cfg,
                      std::size_t total_clients) {
  if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
  std::vector<const ClientUpdate*> sorted;
  for (const auto& u : updates) {
    check_layout(u.params, server.global.layout, "aggregate");
    sorted.push_back(&u);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->client_id == sorted[i - 1]->client_id) {
      throw std::invalid_argument("aggregate: duplicate update from " + sorted[i]->client_id);
    }
  }

  const Eigen::VectorXd& theta = server.global.values;
  const Eigen::Index dim = theta.size();
  ServerState next = server;
  next.round = server.round + 1;
  const Eigen::VectorXd avg = weighted_average(sorted);

  switch (fl_cfg.algorithm) {
    case Algorithm::kFedAvg:
    case Algorithm::kFedProx:
      next.global.values = avg;
      break;
    case Algorithm::kScaffold: {
      next.global.values = avg;
      Eigen::VectorXd mean_delta = Eigen::VectorXd::Zero(dim);
      for (const auto* u : sorted) {
        if (!u->control_delta || u->control_delta->size() != dim) {
          throw std::invalid_argument("aggregate: scaffold update without control delta");
        }
        mean_delta += *u->control_delta;
      }
      mean_delta /= static_cast<double>(sorted.size());
      const double frac = static_cast<double>(sorted.size()) / static_cast<double>(std::max(total_clients, sorted.size()));
      next.control = zeros_like(server.control, dim) + frac * mean_delta;
      break;
    }
    case Algorithm::kFedAvgM: {
      const Eigen::VectorXd v_prev = zeros_like(server.momentum, dim);
      // theta - (beta v + theta - avg) written so that beta = 0 yields avg exactly.
      next.global.values = avg - fl_cfg.server_momentum * v_prev;
      next.momentum = fl_cfg.server_momentum * v_prev + (theta - avg);
      break;
    }
    case Algorithm::kFedNova: {
      double total = 0.0;
      for (const auto* u : sorted) total += u->num_samples;
      bool equal_tau = true;
      for (const auto* u : sorted) {
        if (u->steps < 1) throw std::invalid_argument("aggregate: fednova needs positive step counts");
        equal_tau = equal_tau && u->steps == sorted.front()->steps;
      }
      if (equal_tau) {
        next.global.values = avg;
        break;
      }
      double tau_eff = 0.0;
      Eigen::VectorXd d = Eigen::VectorXd::Zero(dim);
      for (const auto* u : sorted) {
        const double w = u->num_samples / total;
        tau_eff += w * u->steps;
        d += (w / u->steps) * (theta - u->params.values);
      }
      next.global.values = theta - tau_eff * d;
      break;
    }
    case Algorithm::kFedAdam: {
      const Eigen::VectorXd g = theta - avg;
      next.adam_m = fl_cfg.server_beta1 * zeros_like(server.adam_m, dim) + (1.0 - fl_cfg.server_beta1) * g;
      next.adam_v = fl_cfg.server_beta2 * zeros_like(server.adam_v, dim) + (1.0 - fl_cfg.server_beta2) * g.cwiseProduct(g);
      next.global.values =
          theta - fl_cfg.server_lr * (next.adam_m.array() / (next.adam_v.array().sqrt() + fl_cfg.server_eps)).matrix();
      break;
    }
  }
  return next;
}

MetricReport evaluate_model(const ParamVector& params, const std::vector<const FramePair*>& pairs,
                            const ModelConfig& model_cfg, int threads) {
  std::vector<MetricReport> parts(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const FramePair& p = *pairs[i];
    if (!p.gt_flow) throw std::invalid_argument("evaluate_model: pair without ground truth");
    parts[i] = evaluate_flow(predict(params, p, model_cfg).back(), *p.gt_flow);
  });
  MetricAccumulator acc;
  for (const auto& r : parts) acc.add(r);
  return acc.report();
}

std::vector<const FramePair*> test_pairs(const std::vector<ClientState>& clients, bool eval_only) {
  std::vector<const ClientState*> sorted;
  for (const auto& c : clients) {
    if (c.eval_only == eval_only) sorted.push_back(&c);
  }
  std::sort(sorted.begin(), sorted.end(), [](const ClientState* a, const ClientState* b) { return a->id < b->id; });
  std::vector<const FramePair*> out;
  for (const auto* c : sorted) {
    for (const auto& p : c->data->test) out.push_back(&p);
  }
  return out;
}

FederationResult run_rounds(std::vector<ClientState>& clients, ServerState init, const FLConfig& fl_cfg,
                            const ModelConfig& model_cfg, const EvalSpec& eval, const RoundHooks& hooks,
                            const RoundCallback& on_round) {
  fl_cfg.validate();
  if (clients.empty()) throw std::invalid_argument("run_federation: no clients");
  if (!hooks.train || !hooks.aggregate) throw std::invalid_argument("run_rounds: missing hooks");

  std::map<std::string, ClientState*> by_id;
  std::vector<std::string> trainable;
  for (auto& c : clients) {
    if (!by_id.emplace(c.id, &c).second) throw std::invalid_argument("duplicate client id: " + c.id);
    if (!c.eval_only) trainable.push_back(c.id);
  }
  if (trainable.empty()) throw std::invalid_argument("run_federation: no trainable clients");
  const auto seen_pairs = test_pairs(clients, false);
  const auto unseen_pairs = test_pairs(clients, true);

  FederationResult result;
  result.server = std::move(init);
  for (int t = 0; t < fl_cfg.rounds; ++t) {
    RoundReport report;
    report.round = t + 1;
    report.participants = schedule_round(trainable, fl_cfg.participation, fl_cfg.seed, t);

    // Broadcast: participants read one immutable copy of the server state.
    const ServerState broadcast = result.server;
    std::vector<ClientUpdate> updates(report.participants.size());
    std::vector<double> losses(report.participants.size(), 0.0);
    parallel_for(report.participants.size(), fl_cfg.threads, [&](std::size_t i) {
      updates[i] = hooks.train(*by_id.at(report.participants[i]), broadcast, t, losses[i]);
    });
    for (std::size_t i = 0; i < updates.size(); ++i) report.client_loss[report.participants[i]] = losses[i];

    result.server = hooks.aggregate(updates, broadcast);
    report.update_norm = (result.server.global.values - broadcast.global.values).norm();

    const bool last = t + 1 == fl_cfg.rounds;
    const bool due = eval.enabled && (last || (eval.interval > 0 && (t + 1) % eval.interval == 0));
    if (due && (!seen_pairs.empty() || !unseen_pairs.empty())) {
      const ParamVector model = hooks.eval_model ? hooks.eval_model(result.server) : result.server.global;
      if (!seen_pairs.empty()) report.seen = evaluate_model(model, seen_pairs, model_cfg, fl_cfg.threads);
      if (!unseen_pairs.empty()) report.unseen = evaluate_model(model, unseen_pairs, model_cfg, fl_cfg.threads);
    }
    if (on_round) on_round(report, result.server);
    result.reports.push_back(std::move(report));
  }
  return result;
}

FederationResult run_federation(std::vector<ClientState>& clients, const FLConfig& fl_cfg,
                                const ModelConfig& model_cfg, const LossConfig& loss_cfg, const EvalSpec& eval,
                                const RoundCallback& on_round) {
  fl_cfg.validate();
  model_cfg.validate();
  loss_cfg.validate(model_cfg.iterations);

  ServerState init = init_server(model_cfg, fl_cfg.seed);
  const bool scaffold = fl_cfg.algorithm == Algorithm::kScaffold;
  if (scaffold) {
    init.control = Eigen::VectorXd::Zero(init.global.size());
    for (auto& c : clients) c.control = Eigen::VectorXd::Zero(init.global.size());
  }
  std::size_t trainable = 0;
  for (const auto& c : clients) trainable += c.eval_only ? 0 : 1;

  RoundHooks hooks;
  hooks.train = [&](ClientState& c, const ServerState& server, int round, double& loss) {
    LocalResult r = local_train(c, server.global, fl_cfg, model_cfg, loss_cfg, round,
                                scaffold ? &server.control : nullptr);
    loss = r.mean_loss;
    return ClientUpdate{c.id, std::move(r.params), static_cast<double>(c.num_samples()), r.steps,
                        std::move(r.control_delta)};
  };
  hooks.aggregate = [&](const std::vector<ClientUpdate>& updates, const ServerState& server) {
    return aggregate(updates, server, fl_cfg, trainable);
  };
  return run_rounds(clients, std::move(init), fl_cfg, model_cfg, eval, hooks, on_round);
}

LocalOnlyResult train_local_only(const ClientState& client, const FLConfig& fl_cfg, const ModelConfig& model_cfg,
                                 const LossConfig& loss_cfg) {
  std::vector<ClientState> solo{client};
  solo.front().eval_only = false;
  FLConfig cfg = fl_cfg;
  cfg.algorithm = Algorithm::kFedAvg;
  cfg.participation = 1.0;
  EvalSpec no_eval;
  no_eval.enabled = false;
  FederationResult fed = run_federation(solo, cfg, model_cfg, loss_cfg, no_eval);
  LocalOnlyResult out;
  out.params = std::move(fed.server.global);
  for (const auto& r : fed.reports) out.round_loss.push_back(r.client_loss.at(client.id));
  return out;
}

}  // namespace fedrsu
