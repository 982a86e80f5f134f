#include "fedrsu/fedpers.hpp"

#include "fedrsu/parallel.hpp"
#include "fedrsu/rng.hpp"

#include <fstream>
#include <json.hpp>
#include <stdexcept>

namespace fedrsu {

namespace {

Eigen::VectorXd part_mask(const ParamLayout& layout, Part which) {
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(layout.size());
  for (const auto& s : layout.segments()) {
    if (s.part == which) mask.segment(s.offset, s.size()).setOnes();
  }
  return mask;
}

FLConfig plain_fedavg(const FLConfig& fl_cfg) {
  FLConfig cfg = fl_cfg;
  cfg.algorithm = Algorithm::kFedAvg;
  return cfg;
}

std::size_t count_trainable(const std::vector<ClientState>& clients) {
  std::size_t n = 0;
  for (const auto& c : clients) n += c.eval_only ? 0 : 1;
  return n;
}

ParamVector with_parts(const ParamVector& base_source, const ParamVector& head_source, const ParamLayout& layout) {
  return merge_params(layout, split_params(base_source, Part::kBase), split_params(head_source, Part::kHead));
}

PersonalRun run_ditto(std::vector<ClientState>& clients, const PersonalConfig& cfg, const FLConfig& fl_cfg,
                      const ModelConfig& model_cfg, const LossConfig& loss_cfg, const EvalSpec& eval,
                      const RoundCallback& on_round) {
  const FLConfig fl = plain_fedavg(fl_cfg);
  ServerState init = init_server(model_cfg, fl.seed);
  PersonalRun run;
  for (const auto& c : clients) {
    if (!c.eval_only) run.personal[c.id] = init.global;
  }
  const std::size_t trainable = count_trainable(clients);

  RoundHooks hooks;
  hooks.train = [&](ClientState& c, const ServerState& server, int round, double& loss) {
    LocalResult global = local_train(c, server.global, fl, model_cfg, loss_cfg, round);
    LocalTrainOptions opts;
    opts.epochs = cfg.ditto_epochs;
    opts.prox_anchor = &server.global.values;
    opts.prox_coeff = 2.0 * cfg.ditto_lambda;  // d/dv of lambda * ||v - theta||^2
    ParamVector& v = run.personal.at(c.id);
    v = local_train(c, v, fl, model_cfg, loss_cfg, round, nullptr, opts).params;
    c.last_steps = global.steps;
    loss = global.mean_loss;
    return ClientUpdate{c.id, std::move(global.params), static_cast<double>(c.num_samples()), global.steps, {}};
  };
  hooks.aggregate = [&](const std::vector<ClientUpdate>& updates, const ServerState& server) {
    return aggregate(updates, server, fl, trainable);
  };
  run.federation = run_rounds(clients, std::move(init), fl, model_cfg, eval, hooks, on_round);
  return run;
}

PersonalRun run_partial(std::vector<ClientState>& clients, const PersonalConfig& cfg, const FLConfig& fl_cfg,
                        const ModelConfig& model_cfg, const LossConfig& loss_cfg, const EvalSpec& eval,
                        const RoundCallback& on_round) {
  const FLConfig fl = plain_fedavg(fl_cfg);
  const ParamLayout layout = personal_layout(model_cfg, cfg);
  ServerState init = init_server(model_cfg, fl.seed);
  init.global.layout = layout;
  PersonalRun run;
  for (const auto& c : clients) {
    if (!c.eval_only) run.personal[c.id] = init.global;
  }
  const std::size_t trainable = count_trainable(clients);
  const Eigen::VectorXd head_mask = part_mask(layout, Part::kHead);
  const Eigen::VectorXd body_mask = part_mask(layout, Part::kBase);
  const bool fedrep = cfg.method == PersonalMethod::kFedRep;

  RoundHooks hooks;
  hooks.train = [&](ClientState& c, const ServerState& server, int round, double& loss) {
    ParamVector& own = run.personal.at(c.id);
    ParamVector start = with_parts(server.global, own, layout);
    int steps = 0;
    if (fedrep) {
      LocalTrainOptions head_opts;
      head_opts.epochs = cfg.fedrep_head_epochs;
      head_opts.grad_mask = &head_mask;
      head_opts.stream = 1;
      LocalResult head = local_train(c, start, fl, model_cfg, loss_cfg, round, nullptr, head_opts);
      LocalTrainOptions body_opts;
      body_opts.epochs = cfg.fedrep_body_epochs;
      body_opts.grad_mask = &body_mask;
      body_opts.stream = 2;
      LocalResult body = local_train(c, head.params, fl, model_cfg, loss_cfg, round, nullptr, body_opts);
      steps = head.steps + body.steps;
      loss = body.mean_loss;
      own = std::move(body.params);
    } else {
      LocalResult r = local_train(c, start, fl, model_cfg, loss_cfg, round);
      steps = r.steps;
      loss = r.mean_loss;
      own = std::move(r.params);
    }
    c.last_steps = steps;
    return ClientUpdate{c.id, restrict_part(own, Part::kBase), static_cast<double>(c.num_samples()), steps, {}};
  };
  hooks.aggregate = [&](const std::vector<ClientUpdate>& updates, const ServerState& server) {
    ServerState base;
    base.global = restrict_part(server.global, Part::kBase);
    base.round = server.round;
    const ServerState agg = aggregate(updates, base, fl, trainable);
    ServerState next = server;
    next.round = agg.round;
    next.global = merge_params(layout, agg.global.values, split_params(server.global, Part::kHead));
    return next;
  };
  run.federation = run_rounds(clients, std::move(init), fl, model_cfg, eval, hooks, on_round);
  for (auto& [id, v] : run.personal) v = with_parts(run.federation.server.global, v, layout);
  return run;
}

}  // namespace

std::string to_string(PersonalMethod m) {
  switch (m) {
    case PersonalMethod::kFineTune: return "finetune";
    case PersonalMethod::kDitto: return "ditto";
    case PersonalMethod::kFedPer: return "fedper";
    case PersonalMethod::kFedRep: return "fedrep";
  }
  return "unknown";
}

PersonalMethod parse_personal_method(const std::string& name) {
  for (PersonalMethod m :
       {PersonalMethod::kFineTune, PersonalMethod::kDitto, PersonalMethod::kFedPer, PersonalMethod::kFedRep}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown personalization method: " + name);
}

void PersonalConfig::validate() const {
  if (finetune_epochs < 1) throw std::invalid_argument("personal.finetune_epochs must be >= 1");
  if (!(ditto_lambda >= 0.0)) throw std::invalid_argument("personal.ditto_lambda must be nonnegative");
  if (ditto_epochs < 0) throw std::invalid_argument("personal.ditto_epochs must be >= 0");
  if (fedrep_head_epochs < 1) throw std::invalid_argument("personal.fedrep_head_epochs must be >= 1");
  if (fedrep_body_epochs < 1) throw std::invalid_argument("personal.fedrep_body_epochs must be >= 1");
}

ParamVector restrict_part(const ParamVector& params, Part which) {
  ParamVector out;
  for (const auto& s : params.layout.segments()) {
    if (s.part == which) out.layout.add(s.name, s.rows, s.cols, s.part, s.is_bias);
  }
  out.values = split_params(params, which);
  return out;
}

ParamLayout personal_layout(const ModelConfig& model_cfg, const PersonalConfig& cfg) {
  const ParamLayout base = model_layout(model_cfg);
  for (const auto& name : cfg.head_segments) {
    bool found = false;
    for (const auto& s : base.segments()) found = found || s.name == name;
    if (!found) throw std::invalid_argument("personal.head_segments: no model segment named " + name);
  }
  return base.with_head(cfg.head_segments);
}

ParamVector fine_tune(const ParamVector& global, ClientState& client, const PersonalConfig& cfg,
                      const FLConfig& fl_cfg, const ModelConfig& model_cfg, const LossConfig& loss_cfg) {
  cfg.validate();
  const FLConfig fl = plain_fedavg(fl_cfg);
  LocalTrainOptions opts;
  opts.epochs = cfg.finetune_epochs;
  opts.stream = hash_string("finetune");
  return local_train(client, global, fl, model_cfg, loss_cfg, fl.rounds, nullptr, opts).params;
}

PersonalRun run_personalized(std::vector<ClientState>& clients, const PersonalConfig& cfg, const FLConfig& fl_cfg,
                             const ModelConfig& model_cfg, const LossConfig& loss_cfg, const EvalSpec& eval,
                             const RoundCallback& on_round) {
  cfg.validate();
  fl_cfg.validate();
  model_cfg.validate();
  loss_cfg.validate(model_cfg.iterations);
  switch (cfg.method) {
    case PersonalMethod::kFineTune: {
      PersonalRun run;
      run.federation = run_federation(clients, fl_cfg, model_cfg, loss_cfg, eval, on_round);
      for (auto& c : clients) {
        if (!c.eval_only) run.personal[c.id] = ParamVector{};
      }
      std::vector<ClientState*> targets;
      for (auto& c : clients) {
        if (!c.eval_only) targets.push_back(&c);
      }
      parallel_for(targets.size(), fl_cfg.threads, [&](std::size_t i) {
        run.personal.at(targets[i]->id) =
            fine_tune(run.federation.server.global, *targets[i], cfg, fl_cfg, model_cfg, loss_cfg);
      });
      return run;
    }
    case PersonalMethod::kDitto:
      return run_ditto(clients, cfg, fl_cfg, model_cfg, loss_cfg, eval, on_round);
    case PersonalMethod::kFedPer:
    case PersonalMethod::kFedRep:
      return run_partial(clients, cfg, fl_cfg, model_cfg, loss_cfg, eval, on_round);
  }
  throw std::logic_error("unhandled personalization method");
}

PersonalEvaluation summarize_reports(const std::map<std::string, MetricReport>& per_client,
                                     const std::map<std::string, MetricReport>& baseline) {
  std::map<std::string, double> epe, accs, accr, b_epe, b_accs, b_accr;
  for (const auto& [id, r] : per_client) {
    epe[id] = r.epe3d;
    accs[id] = r.accs;
    accr[id] = r.accr;
  }
  for (const auto& [id, r] : baseline) {
    b_epe[id] = r.epe3d;
    b_accs[id] = r.accs;
    b_accr[id] = r.accr;
  }
  PersonalEvaluation out;
  out.per_client = per_client;
  out.epe3d = summarize_personalization(epe, b_epe, Direction::kLowerBetter);
  out.accs = summarize_personalization(accs, b_accs, Direction::kHigherBetter);
  out.accr = summarize_personalization(accr, b_accr, Direction::kHigherBetter);
  return out;
}

PersonalEvaluation evaluate_personalized(const PersonalModels& models, const std::vector<ClientState>& clients,
                                         const PersonalModels& baseline, const ModelConfig& model_cfg, int threads) {
  std::map<std::string, MetricReport> mine, base;
  for (const auto& c : clients) {
    if (c.eval_only) continue;
    if (!c.data || c.data->test.empty()) throw std::invalid_argument("evaluate_personalized: empty test split for " + c.id);
    const auto m = models.find(c.id);
    if (m == models.end()) throw std::invalid_argument("evaluate_personalized: missing model for " + c.id);
    const auto b = baseline.find(c.id);
    if (b == baseline.end()) throw std::invalid_argument("evaluate_personalized: missing baseline for " + c.id);
    std::vector<const FramePair*> pairs;
    for (const auto& p : c.data->test) pairs.push_back(&p);
    mine[c.id] = evaluate_model(m->second, pairs, model_cfg, threads);
    base[c.id] = evaluate_model(b->second, pairs, model_cfg, threads);
  }
  return summarize_reports(mine, base);
}

void save_personal_models(const PersonalModels& models, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "fedrsu-personal";
  manifest["version"] = 1;
  manifest["clients"] = nlohmann::json::array();
  for (const auto& [id, params] : models) {
    manifest["clients"].push_back(id);
    save_params(params, dir / id);
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

PersonalModels load_personal_models(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing personal model manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "fedrsu-personal") throw std::runtime_error("not a personal model directory");
  PersonalModels out;
  for (const auto& id : manifest.at("clients")) out[id.get<std::string>()] = load_params(dir / id.get<std::string>());
  return out;
}

}  // namespace fedrsu
