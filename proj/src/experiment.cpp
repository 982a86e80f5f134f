#include "fedrsu/experiment.hpp"

#include "fedrsu/parallel.hpp"
#include "fedrsu/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <set>
#include <sstream>

namespace fedrsu {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool contains(const std::vector<std::string>& v, const std::string& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

// Typed access to the flat entries; every key read is marked as used so leftovers can be reported.
class Entries {
 public:
  explicit Entries(const std::vector<std::pair<std::string, std::string>>& entries) {
    for (const auto& [k, v] : entries) {
      if (!values_.emplace(k, v).second) throw ConfigError("duplicate key: " + k);
    }
  }

  std::optional<std::string> take(const std::string& key) {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    used_.insert(key);
    return it->second;
  }

  std::vector<std::string> keys_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    }
    return out;
  }

  void read(const std::string& key, int& out) {
    if (auto v = take(key)) out = to_int(key, *v);
  }
  void read(const std::string& key, double& out) {
    if (auto v = take(key)) out = to_double(key, *v);
  }
  void read(const std::string& key, bool& out) {
    if (auto v = take(key)) out = to_bool(key, *v);
  }
  void read(const std::string& key, std::string& out) {
    if (auto v = take(key)) out = *v;
  }
  void read(const std::string& key, std::vector<std::string>& out) {
    if (auto v = take(key)) out = to_list(key, *v);
  }

  void check_all_used() const {
    for (const auto& [k, v] : values_) {
      if (!used_.count(k)) throw ConfigError("unknown key: " + k);
    }
  }

  static int to_int(const std::string& key, const std::string& v) {
    int out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
  }
  static std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    }
    return out;
  }
  static double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
  }
  static bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }
  static std::vector<std::string> to_list(const std::string& key, const std::string& v) {
    std::vector<std::string> out;
    if (trim(v).empty() || trim(v) == "none") return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) throw ConfigError(key + ": empty list item");
      out.push_back(item);
    }
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

void read_profile_field(Entries& e, const std::string& key, const std::string& field, ClientProfile& p) {
  const std::string v = *e.take(key);
  static const std::map<std::string, std::function<void(ClientProfile&, const std::string&, const std::string&)>>
      setters = {
          {"num_train", [](ClientProfile& q, const auto& k, const auto& s) { q.num_train = Entries::to_int(k, s); }},
          {"num_val", [](ClientProfile& q, const auto& k, const auto& s) { q.num_val = Entries::to_int(k, s); }},
          {"num_test", [](ClientProfile& q, const auto& k, const auto& s) { q.num_test = Entries::to_int(k, s); }},
          {"points_per_frame",
           [](ClientProfile& q, const auto& k, const auto& s) { q.points_per_frame = Entries::to_int(k, s); }},
          {"perception_range",
           [](ClientProfile& q, const auto& k, const auto& s) { q.perception_range = Entries::to_double(k, s); }},
          {"num_objects", [](ClientProfile& q, const auto& k, const auto& s) { q.num_objects = Entries::to_int(k, s); }},
          {"min_speed", [](ClientProfile& q, const auto& k, const auto& s) { q.min_speed = Entries::to_double(k, s); }},
          {"max_speed", [](ClientProfile& q, const auto& k, const auto& s) { q.max_speed = Entries::to_double(k, s); }},
          {"dynamic_point_ratio",
           [](ClientProfile& q, const auto& k, const auto& s) { q.dynamic_point_ratio = Entries::to_double(k, s); }},
          {"has_camera", [](ClientProfile& q, const auto& k, const auto& s) { q.has_camera = Entries::to_bool(k, s); }},
          {"position_noise_sigma",
           [](ClientProfile& q, const auto& k, const auto& s) { q.position_noise_sigma = Entries::to_double(k, s); }},
          {"ego_motion_sigma",
           [](ClientProfile& q, const auto& k, const auto& s) { q.ego_motion_sigma = Entries::to_double(k, s); }},
          {"pixel_noise_sigma",
           [](ClientProfile& q, const auto& k, const auto& s) { q.pixel_noise_sigma = Entries::to_double(k, s); }},
          {"max_yaw_rate_deg",
           [](ClientProfile& q, const auto& k, const auto& s) { q.max_yaw_rate_deg = Entries::to_double(k, s); }},
          {"ground_threshold",
           [](ClientProfile& q, const auto& k, const auto& s) { q.ground_threshold = Entries::to_double(k, s); }},
          {"seed", [](ClientProfile& q, const auto& k, const auto& s) { q.seed = Entries::to_u64(k, s); }},
      };
  const auto it = setters.find(field);
  if (it == setters.end()) throw ConfigError("unknown key: " + key);
  it->second(p, key, v);
}

ClientProfile new_profile(const std::string& id, std::uint64_t seed) {
  ClientProfile p;
  p.client_id = id;
  p.seed = derive_seed({seed, hash_string(id)});
  return p;
}

json metric_json(const MetricReport& r) {
  return json{{"epe3d", r.epe3d}, {"accs", r.accs}, {"accr", r.accr}, {"num_points", r.num_points}};
}

json summary_json(const PersonalizationSummary& s) {
  return json{{"mean", s.mean}, {"std", s.std}, {"imp", s.improvement}};
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

json round_json(const std::string& method, const RoundReport& r) {
  json j{{"type", "round"},
         {"method", method},
         {"round", r.round},
         {"participants", r.participants},
         {"client_loss", r.client_loss},
         {"update_norm", r.update_norm}};
  if (r.seen) j["seen"] = metric_json(*r.seen);
  if (r.unseen) j["unseen"] = metric_json(*r.unseen);
  return j;
}

struct RunContext {
  const ExperimentConfig& cfg;
  fs::path out;
  FLConfig fl;
  EvalSpec eval;
  std::vector<ClientState> clients;  // pristine states; each method works on a copy
  std::vector<const FramePair*> seen;
  std::vector<const FramePair*> unseen;
};

json final_json(const std::string& method, double participation, const std::optional<MetricReport>& seen,
                const std::optional<MetricReport>& unseen) {
  json j{{"type", "final"}, {"method", method}, {"participation", participation}};
  if (seen) j["seen"] = metric_json(*seen);
  if (unseen) j["unseen"] = metric_json(*unseen);
  return j;
}

std::optional<MetricReport> eval_union(const ParamVector& p, const std::vector<const FramePair*>& pairs,
                                       const ModelConfig& mc, int threads) {
  if (pairs.empty()) return std::nullopt;
  return evaluate_model(p, pairs, mc, threads);
}

PersonalModels run_local(RunContext& ctx, bool log) {
  std::vector<const ClientState*> trainable;
  for (const auto& c : ctx.clients) {
    if (!c.eval_only) trainable.push_back(&c);
  }
  FLConfig inner = ctx.fl;
  inner.threads = 1;
  std::vector<LocalOnlyResult> results(trainable.size());
  parallel_for(trainable.size(), ctx.fl.threads, [&](std::size_t i) {
    results[i] = train_local_only(*trainable[i], inner, ctx.cfg.model, ctx.cfg.loss);
  });
  PersonalModels models;
  for (std::size_t i = 0; i < trainable.size(); ++i) models[trainable[i]->id] = results[i].params;
  save_personal_models(models, ctx.out / "checkpoints" / "local");
  if (!log) return models;

  JsonlWriter w(ctx.out / "logs" / "local.jsonl");
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    w.write(json{{"type", "client"}, {"method", "local"}, {"client", trainable[i]->id},
                 {"round_loss", results[i].round_loss}});
  }
  // Local learning has one model per client: average each model's score on the pooled test sets.
  auto averaged = [&](const std::vector<const FramePair*>& pairs) -> std::optional<MetricReport> {
    if (pairs.empty()) return std::nullopt;
    std::vector<MetricReport> per_model;
    for (const auto& [id, p] : models) per_model.push_back(evaluate_model(p, pairs, ctx.cfg.model, ctx.fl.threads));
    return mean_report(per_model);
  };
  w.write(final_json("local", 1.0, averaged(ctx.seen), averaged(ctx.unseen)));
  return models;
}

void run_central(RunContext& ctx) {
  auto pooled = std::make_shared<ClientDataset>();
  std::vector<std::string> ids;
  for (const auto& c : ctx.clients) {
    if (c.eval_only) continue;
    ids.push_back(c.id);
    pooled->train.insert(pooled->train.end(), c.data->train.begin(), c.data->train.end());
  }
  std::string pooled_id;
  for (const auto& id : ids) pooled_id += (pooled_id.empty() ? "" : "+") + id;
  pooled->profile.client_id = pooled_id;
  ClientState central;
  central.id = pooled_id;
  central.data = pooled;

  const LocalOnlyResult r = train_local_only(central, ctx.fl, ctx.cfg.model, ctx.cfg.loss);
  save_params(r.params, ctx.out / "checkpoints" / "central" / "global");
  JsonlWriter w(ctx.out / "logs" / "central.jsonl");
  for (std::size_t t = 0; t < r.round_loss.size(); ++t) {
    w.write(json{{"type", "round"}, {"method", "central"}, {"round", t + 1}, {"loss", r.round_loss[t]}});
  }
  w.write(final_json("central", 1.0, eval_union(r.params, ctx.seen, ctx.cfg.model, ctx.fl.threads),
                     eval_union(r.params, ctx.unseen, ctx.cfg.model, ctx.fl.threads)));
}

RoundCallback logging_callback(JsonlWriter& w, const std::string& method, const fs::path& ckpt_dir, int interval) {
  return [&w, method, ckpt_dir, interval](const RoundReport& r, const ServerState& s) {
    w.write(round_json(method, r));
    if (interval > 0 && r.round % interval == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "round_%04d", r.round);
      save_params(s.global, ckpt_dir / name);
    }
  };
}

void run_fl(RunContext& ctx) {
  const std::string method = to_string(ctx.fl.algorithm);
  const fs::path ckpt = ctx.out / "checkpoints" / method;
  fs::create_directories(ckpt);
  JsonlWriter w(ctx.out / "logs" / (method + ".jsonl"));
  std::vector<ClientState> clients = ctx.clients;
  const FederationResult fed = run_federation(clients, ctx.fl, ctx.cfg.model, ctx.cfg.loss, ctx.eval,
                                              logging_callback(w, method, ckpt, ctx.cfg.eval_interval));
  save_params(fed.server.global, ckpt / "global");
  const RoundReport& last = fed.reports.back();
  w.write(final_json(method, ctx.fl.participation, last.seen, last.unseen));
}

void run_personal(RunContext& ctx, PersonalMethod m, const PersonalModels& local) {
  const std::string method =
      m == PersonalMethod::kFineTune ? to_string(ctx.fl.algorithm) + "+ft" : to_string(m);
  const fs::path ckpt = ctx.out / "checkpoints" / method;
  fs::create_directories(ckpt);
  JsonlWriter w(ctx.out / "logs" / (method + ".jsonl"));
  PersonalConfig pc = ctx.cfg.personal;
  pc.method = m;
  std::vector<ClientState> clients = ctx.clients;
  const PersonalRun run = run_personalized(clients, pc, ctx.fl, ctx.cfg.model, ctx.cfg.loss, ctx.eval,
                                           logging_callback(w, method, ckpt, ctx.cfg.eval_interval));
  save_personal_models(run.personal, ckpt / "personal");
  const PersonalEvaluation ev = evaluate_personalized(run.personal, clients, local, ctx.cfg.model, ctx.fl.threads);
  json per_client = json::object();
  for (const auto& [id, r] : ev.per_client) per_client[id] = metric_json(r);
  w.write(json{{"type", "personal"},
               {"method", method},
               {"baseline", "local"},
               {"per_client", per_client},
               {"summary",
                {{"epe3d", summary_json(ev.epe3d)}, {"accs", summary_json(ev.accs)}, {"accr", summary_json(ev.accr)}}}});
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": missing key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

ExperimentConfig parse_experiment(const std::vector<std::pair<std::string, std::string>>& entries) {
  Entries e(entries);
  ExperimentConfig cfg;
  if (auto v = e.take("seed")) cfg.seed = Entries::to_u64("seed", *v);
  if (auto v = e.take("output_dir")) cfg.output_dir = *v;
  if (auto v = e.take("data.dir")) cfg.data_dir = fs::path(*v);
  e.read("data.model_points", cfg.model_points);
  if (auto v = e.take("data.target_sampling")) {
    if (*v == "shared") {
      cfg.target_sampling = TargetSampling::kShared;
    } else if (*v == "independent") {
      cfg.target_sampling = TargetSampling::kIndependent;
    } else {
      throw ConfigError("data.target_sampling: expected shared or independent, got '" + *v + "'");
    }
  }
  e.read("threads", cfg.threads);

  // Federation membership.
  std::string preset = "default";
  e.read("federation.preset", preset);
  std::vector<ClientProfile> seen;
  if (preset == "default") {
    seen = default_federation(cfg.seed);
  } else if (preset != "none") {
    throw ConfigError("federation.preset: expected default or none, got '" + preset + "'");
  }
  std::vector<std::string> listed;
  if (auto v = e.take("federation.clients")) {
    listed = Entries::to_list("federation.clients", *v);
    std::vector<ClientProfile> chosen;
    std::set<std::string> ids;
    for (const auto& id : listed) {
      if (!ids.insert(id).second) throw ConfigError("duplicate client id: " + id);
      auto it = std::find_if(seen.begin(), seen.end(), [&](const ClientProfile& p) { return p.client_id == id; });
      chosen.push_back(it != seen.end() ? *it : new_profile(id, cfg.seed));
    }
    seen = std::move(chosen);
  }
  std::vector<ClientProfile> unseen_preset = preset == "default" ? default_unseen_profiles(cfg.seed)
                                                                 : std::vector<ClientProfile>{};
  for (const auto& p : unseen_preset) cfg.unseen.push_back(p.client_id);
  e.read("federation.unseen", cfg.unseen);
  std::vector<ClientProfile> held_out;
  for (const auto& id : cfg.unseen) {
    auto in_seen = std::find_if(seen.begin(), seen.end(), [&](const ClientProfile& p) { return p.client_id == id; });
    auto in_preset = std::find_if(unseen_preset.begin(), unseen_preset.end(),
                                  [&](const ClientProfile& p) { return p.client_id == id; });
    if (in_seen != seen.end()) {
      held_out.push_back(*in_seen);
      seen.erase(in_seen);
    } else if (in_preset != unseen_preset.end()) {
      held_out.push_back(*in_preset);
    } else {
      held_out.push_back(new_profile(id, cfg.seed));
    }
  }
  cfg.federation = seen;
  cfg.federation.insert(cfg.federation.end(), held_out.begin(), held_out.end());
  {
    std::set<std::string> ids;
    for (const auto& p : cfg.federation) {
      if (!ids.insert(p.client_id).second) throw ConfigError("duplicate client id: " + p.client_id);
    }
  }

  // clients.<field> applies to every client; client.<id>.<field> to one.
  for (const auto& key : e.keys_with_prefix("clients.")) {
    const std::string value = *e.take(key);
    for (auto& p : cfg.federation) {
      Entries single({{key, value}});
      read_profile_field(single, key, key.substr(8), p);
    }
  }
  for (const auto& key : e.keys_with_prefix("client.")) {
    const auto dot = key.find('.', 7);
    if (dot == std::string::npos) throw ConfigError("unknown key: " + key);
    const std::string id = key.substr(7, dot - 7);
    auto it = std::find_if(cfg.federation.begin(), cfg.federation.end(),
                           [&](const ClientProfile& p) { return p.client_id == id; });
    if (it == cfg.federation.end()) throw ConfigError(key + ": unknown client id " + id);
    read_profile_field(e, key, key.substr(dot + 1), *it);
  }
  if (auto v = e.take("federation.multimodal_clients")) {
    const int m = Entries::to_int("federation.multimodal_clients", *v);
    std::vector<ClientProfile*> trainable;
    for (auto& p : cfg.federation) {
      if (!contains(cfg.unseen, p.client_id)) trainable.push_back(&p);
    }
    if (m < 0 || m > static_cast<int>(trainable.size())) {
      throw ConfigError("federation.multimodal_clients must be in [0, " + std::to_string(trainable.size()) + "]");
    }
    std::sort(trainable.begin(), trainable.end(),
              [](const ClientProfile* a, const ClientProfile* b) { return a->client_id < b->client_id; });
    for (int i = 0; i < static_cast<int>(trainable.size()); ++i) trainable[i]->has_camera = i < m;
  }

  e.read("model.feature_dim", cfg.model.feature_dim);
  e.read("model.hidden_dim", cfg.model.hidden_dim);
  e.read("model.iterations", cfg.model.iterations);
  e.read("model.correlation_temperature", cfg.model.correlation_temperature);
  e.read("model.knn_k_local", cfg.model.knn_k_local);
  e.read("model.input_scale", cfg.model.input_scale);

  e.read("loss.beta_ch", cfg.loss.beta_ch);
  e.read("loss.beta_reg", cfg.loss.beta_reg);
  e.read("loss.alpha", cfg.loss.alpha);
  e.read("loss.knn_k_smooth", cfg.loss.knn_k_smooth);
  e.read("loss.bidirectional_chamfer", cfg.loss.bidirectional_chamfer);
  e.read("loss.chamfer_mean", cfg.loss.chamfer_mean);
  e.read("loss.use_optical", cfg.loss.use_optical);
  if (auto v = e.take("loss.per_step_weights")) {
    cfg.loss.per_step_weights.clear();
    for (const auto& s : Entries::to_list("loss.per_step_weights", *v)) {
      cfg.loss.per_step_weights.push_back(Entries::to_double("loss.per_step_weights", s));
    }
  }

  e.read("fl.rounds", cfg.fl.rounds);
  e.read("fl.local_epochs", cfg.fl.local_epochs);
  e.read("fl.batch_size", cfg.fl.batch_size);
  e.read("fl.client_lr", cfg.fl.client_lr);
  if (auto v = e.take("fl.client_optimizer")) {
    if (*v == "adam") {
      cfg.fl.client_optimizer = ClientOptimizer::kAdam;
    } else if (*v == "sgd") {
      cfg.fl.client_optimizer = ClientOptimizer::kSgd;
    } else {
      throw ConfigError("fl.client_optimizer: expected sgd or adam, got '" + *v + "'");
    }
  }
  e.read("fl.participation", cfg.fl.participation);
  if (auto v = e.take("fl.algorithm")) {
    try {
      cfg.fl.algorithm = parse_algorithm(*v);
    } catch (const std::invalid_argument& ex) {
      throw ConfigError(std::string("fl.algorithm: ") + ex.what());
    }
  }
  e.read("fl.mu", cfg.fl.mu);
  e.read("fl.server_momentum", cfg.fl.server_momentum);
  e.read("fl.server_lr", cfg.fl.server_lr);
  e.read("fl.server_beta1", cfg.fl.server_beta1);
  e.read("fl.server_beta2", cfg.fl.server_beta2);
  e.read("fl.server_eps", cfg.fl.server_eps);
  e.read("fl.adam_beta1", cfg.fl.adam_beta1);
  e.read("fl.adam_beta2", cfg.fl.adam_beta2);
  e.read("fl.adam_eps", cfg.fl.adam_eps);

  e.read("eval.interval", cfg.eval_interval);
  e.read("eval.baselines", cfg.baselines);

  if (auto v = e.take("personal.methods")) {
    for (const auto& name : Entries::to_list("personal.methods", *v)) {
      try {
        cfg.personal_methods.push_back(parse_personal_method(name));
      } catch (const std::invalid_argument& ex) {
        throw ConfigError(std::string("personal.methods: ") + ex.what());
      }
    }
  }
  e.read("personal.finetune_epochs", cfg.personal.finetune_epochs);
  e.read("personal.ditto_lambda", cfg.personal.ditto_lambda);
  e.read("personal.ditto_epochs", cfg.personal.ditto_epochs);
  e.read("personal.fedrep_head_epochs", cfg.personal.fedrep_head_epochs);
  e.read("personal.fedrep_body_epochs", cfg.personal.fedrep_body_epochs);
  e.read("personal.head_segments", cfg.personal.head_segments);

  e.check_all_used();
  cfg.fl.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

void ExperimentConfig::validate() const {
  auto wrap = [](const std::string& prefix, const auto& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& ex) {
      throw ConfigError(prefix + ex.what());
    }
  };
  if (model_points < 2) throw ConfigError("data.model_points must be >= 2");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (eval_interval < 0) throw ConfigError("eval.interval must be >= 0");
  std::set<std::string> ids;
  int trainable = 0;
  for (const auto& p : federation) {
    if (!ids.insert(p.client_id).second) throw ConfigError("duplicate client id: " + p.client_id);
    wrap("client." + p.client_id + ": ", [&] { p.validate(); });
    if (!contains(unseen, p.client_id)) ++trainable;
  }
  for (const auto& id : unseen) {
    if (!ids.count(id)) throw ConfigError("federation.unseen: unknown client id " + id);
  }
  if (trainable == 0) throw ConfigError("federation: no trainable clients");
  for (const auto& b : baselines) {
    if (b != "central" && b != "local" && b != "fl") {
      throw ConfigError("eval.baselines: expected central, local or fl, got '" + b + "'");
    }
  }
  wrap("", [&] { model.validate(); });
  wrap("", [&] { loss.validate(model.iterations); });
  wrap("", [&] { fl.validate(); });
  wrap("", [&] { personal.validate(); });
  wrap("", [&] { personal_layout(model, personal); });
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment(parse_config_text(ss.str()));
}

std::vector<ClientDataset> generate_datasets(const ExperimentConfig& cfg) {
  try {
    return build_federation(cfg.federation);
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
}

std::vector<ClientDataset> prepare_datasets(const ExperimentConfig& cfg) {
  std::vector<ClientDataset> full;
  if (cfg.data_dir) {
    for (const auto& p : cfg.federation) {
      const fs::path dir = *cfg.data_dir / p.client_id;
      if (!fs::exists(dir / "manifest.json")) {
        throw std::runtime_error("missing dataset for client " + p.client_id + " in " + cfg.data_dir->string());
      }
      full.push_back(import_dataset(dir));
    }
  } else {
    full = generate_datasets(cfg);
  }
  std::vector<ClientDataset> out;
  for (const auto& d : full) {
    out.push_back(downsample_dataset(
        d, cfg.model_points, derive_seed({cfg.seed, hash_string("downsample"), hash_string(d.profile.client_id)}),
        cfg.target_sampling));
  }
  return out;
}

void cmd_generate(const ExperimentConfig& cfg, const fs::path& out) {
  for (const auto& d : generate_datasets(cfg)) export_dataset(d, out / "data" / d.profile.client_id);
}

void cmd_run(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out / "logs");
  fs::create_directories(out / "checkpoints");
  RunContext ctx{cfg, out, cfg.fl, EvalSpec{cfg.eval_interval, true}, {}, {}, {}};
  ctx.fl.seed = cfg.seed;
  ctx.fl.threads = cfg.threads;
  ctx.clients = make_clients(prepare_datasets(cfg), cfg.unseen);
  ctx.seen = test_pairs(ctx.clients, false);
  ctx.unseen = test_pairs(ctx.clients, true);

  const bool want_local = contains(cfg.baselines, "local");
  PersonalModels local;
  if (want_local || !cfg.personal_methods.empty()) local = run_local(ctx, want_local);
  if (contains(cfg.baselines, "central")) run_central(ctx);
  if (contains(cfg.baselines, "fl")) run_fl(ctx);
  for (PersonalMethod m : cfg.personal_methods) run_personal(ctx, m, local);
}

void cmd_report(const fs::path& run_dir) {
  const fs::path logs = run_dir / "logs";
  if (!fs::is_directory(logs)) throw std::runtime_error("no logs directory in " + run_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(logs)) {
    if (entry.path().extension() == ".jsonl") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no logs in " + logs.string());

  std::vector<std::string> general, personal;
  for (const auto& file : files) {
    std::ifstream in(file);
    std::string line;
    int records = 0;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      ++records;
      const json j = json::parse(line);
      const std::string type = j.at("type");
      const std::string method = j.at("method");
      if (type == "final") {
        for (const char* split : {"seen", "unseen"}) {
          if (!j.contains(split)) continue;
          const json& m = j.at(split);
          general.push_back(method + "," + fmt(j.at("participation").get<double>()) + "," + split + "," +
                            fmt(100.0 * m.at("epe3d").get<double>()) + "," + fmt(100.0 * m.at("accs").get<double>()) +
                            "," + fmt(100.0 * m.at("accr").get<double>()));
        }
      } else if (type == "personal") {
        for (const char* metric : {"epe3d", "accs", "accr"}) {
          const json& s = j.at("summary").at(metric);
          personal.push_back(method + "," + metric + "," + fmt(100.0 * s.at("mean").get<double>()) + "," +
                             fmt(100.0 * s.at("std").get<double>()) + "," + fmt(100.0 * s.at("imp").get<double>()));
        }
      }
    }
    if (records == 0) throw std::runtime_error("empty log: " + file.string());
  }

  fs::create_directories(run_dir / "tables");
  auto write = [](const fs::path& path, const char* header, const std::vector<std::string>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << header << '\n';
    for (const auto& r : rows) out << r << '\n';
  };
  write(run_dir / "tables" / "generalized.csv", kGeneralizedHeader, general);
  write(run_dir / "tables" / "personalization.csv", kPersonalizationHeader, personal);
}

}  // namespace fedrsu
