#include "fedrsu/fedcore.hpp"

#include "support.hpp"

#include <doctest.h>

#include <set>

using namespace fedrsu;
using namespace fedrsu::testing;

namespace {

FLConfig sgd_config(double lr, int rounds = 1) {
  FLConfig fl;
  fl.rounds = rounds;
  fl.batch_size = 2;
  fl.client_lr = lr;
  fl.client_optimizer = ClientOptimizer::kSgd;
  fl.seed = 5;
  return fl;
}

ClientUpdate update(const std::string& id, const ParamVector& p, double n, int steps = 1) {
  return ClientUpdate{id, p, n, steps, std::nullopt};
}

ParamVector shifted(const ParamVector& p, double by) {
  ParamVector q = p;
  q.values.array() += by;
  return q;
}

bool same_reports(const std::vector<RoundReport>& a, const std::vector<RoundReport>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].participants != b[i].participants || a[i].client_loss != b[i].client_loss ||
        a[i].update_norm != b[i].update_norm || a[i].seen.has_value() != b[i].seen.has_value()) {
      return false;
    }
    if (a[i].seen && (a[i].seen->epe3d != b[i].seen->epe3d || a[i].seen->accs != b[i].seen->accs)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("algorithm names round trip") {
  for (Algorithm a : {Algorithm::kFedAvg, Algorithm::kFedProx, Algorithm::kScaffold, Algorithm::kFedAvgM,
                      Algorithm::kFedNova, Algorithm::kFedAdam}) {
    CHECK(parse_algorithm(to_string(a)) == a);
  }
  CHECK_THROWS(parse_algorithm("fedsgd"));
}

TEST_CASE("config validation") {
  FLConfig fl;
  CHECK_NOTHROW(fl.validate());
  fl.rounds = 0;
  CHECK_THROWS(fl.validate());
  fl = FLConfig{};
  fl.participation = 0.0;
  CHECK_THROWS(fl.validate());
  fl = FLConfig{};
  fl.algorithm = Algorithm::kScaffold;
  fl.client_lr = 0.0;
  CHECK_THROWS(fl.validate());
}

TEST_CASE("make_clients") {
  const auto fed = build_federation({tiny_profile("a", 1), tiny_profile("b", 2)});
  const auto clients = make_clients(fed, {"b"});
  CHECK(clients[0].id == "a");
  CHECK_FALSE(clients[0].eval_only);
  CHECK(clients[1].eval_only);
  CHECK(clients[0].num_samples() == 2);
  CHECK_THROWS_WITH(make_clients({fed[0], fed[0]}), "duplicate client id: a");
  CHECK_THROWS(make_clients(fed, {"zzz"}));
}

TEST_CASE("schedule_round") {
  std::vector<std::string> ids;
  for (int i = 0; i < 14; ++i) ids.push_back("c" + std::to_string(100 + i));
  auto all = schedule_round(ids, 1.0, 3, 0);
  CHECK(all == ids);
  CHECK(schedule_round(ids, 1.0, 99, 7) == ids);

  const auto half = schedule_round(ids, 0.5, 3, 4);
  CHECK(half.size() == 7);
  CHECK(std::set<std::string>(half.begin(), half.end()).size() == 7);
  for (const auto& h : half) CHECK(std::find(ids.begin(), ids.end(), h) != ids.end());
  CHECK(schedule_round(ids, 0.5, 3, 4) == half);

  std::set<std::vector<std::string>> distinct;
  for (int t = 0; t < 10; ++t) distinct.insert(schedule_round(ids, 0.5, 3, t));
  CHECK(distinct.size() > 1);
  CHECK(schedule_round(ids, 0.01, 3, 0).size() == 1);
}

TEST_CASE("local_train with zero learning rate returns init") {
  auto clients = tiny_clients(1, 32, 5);
  const ModelConfig m = tiny_model();
  const auto init = init_params(m, 1);
  for (auto opt : {ClientOptimizer::kSgd, ClientOptimizer::kAdam}) {
    FLConfig fl = sgd_config(0.0);
    fl.client_optimizer = opt;
    fl.local_epochs = 2;
    const auto r = local_train(clients[0], init, fl, m, LossConfig{}, 0);
    CHECK(bitwise_equal(r.params.values, init.values));
    CHECK(r.steps == 6);
    CHECK(r.mean_loss > 0.0);
  }
}

TEST_CASE("one sgd step equals a manual gradient step") {
  auto clients = tiny_clients(1, 32, 1);
  const ModelConfig m = tiny_model();
  const LossConfig l;
  const auto init = init_params(m, 2);
  const FLConfig fl = sgd_config(0.01);
  const auto r = local_train(clients[0], init, fl, m, l, 0);
  const auto g = total_loss(init, clients[0].data->train[0], m, l, true).gradient;
  CHECK(r.steps == 1);
  CHECK((r.params.values - (init.values - 0.01 * g)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("fedprox with mu = 0 reproduces fedavg bitwise") {
  auto clients = tiny_clients(1, 32, 4);
  const ModelConfig m = tiny_model();
  const auto init = init_params(m, 3);
  for (auto opt : {ClientOptimizer::kSgd, ClientOptimizer::kAdam}) {
    FLConfig avg = sgd_config(0.01);
    avg.client_optimizer = opt;
    FLConfig prox = avg;
    prox.algorithm = Algorithm::kFedProx;
    prox.mu = 0.0;
    const auto a = local_train(clients[0], init, avg, m, LossConfig{}, 2);
    const auto b = local_train(clients[0], init, prox, m, LossConfig{}, 2);
    CHECK(bitwise_equal(a.params.values, b.params.values));
    prox.mu = 1.0;
    CHECK_FALSE(bitwise_equal(a.params.values, local_train(clients[0], init, prox, m, LossConfig{}, 2).params.values));
  }
}

TEST_CASE("local_train rejects mismatched layouts") {
  auto clients = tiny_clients(1);
  ModelConfig other = tiny_model();
  other.hidden_dim = 5;
  CHECK_THROWS(local_train(clients[0], init_params(other, 1), sgd_config(0.01), tiny_model(), LossConfig{}, 0));
}

TEST_CASE("fedavg aggregation") {
  const ModelConfig m = tiny_model();
  ServerState server = init_server(m, 1);
  const FLConfig fl;
  const auto u = init_params(m, 2);
  const auto v = init_params(m, 3);

  auto one = aggregate({update("a", u, 4)}, server, fl, 1);
  CHECK(bitwise_equal(one.global.values, u.values));
  CHECK(one.round == 1);

  auto two = aggregate({update("b", v, 3), update("a", u, 1)}, server, fl, 2);
  const Eigen::VectorXd expect = 0.25 * u.values + 0.75 * v.values;
  CHECK((two.global.values - expect).cwiseAbs().maxCoeff() < 1e-12);

  auto same = aggregate({update("a", u, 1), update("b", u, 5), update("c", u, 2)}, server, fl, 3);
  CHECK(bitwise_equal(same.global.values, u.values));

  CHECK_THROWS(aggregate({}, server, fl, 1));
  CHECK_THROWS(aggregate({update("a", u, 1), update("a", v, 1)}, server, fl, 2));
  CHECK_THROWS(aggregate({update("a", init_params(ModelConfig{}, 1), 1)}, server, fl, 1));
}

TEST_CASE("weights form a convex combination") {
  const ModelConfig m = tiny_model();
  const auto base = init_params(m, 4);
  // e_k-style probes: update k differs from the anchor by 1 in every coordinate.
  std::vector<ClientUpdate> ups{update("a", base, 2), update("b", shifted(base, 1.0), 5), update("c", base, 3)};
  std::vector<const ClientUpdate*> ptrs{&ups[0], &ups[1], &ups[2]};
  const Eigen::VectorXd avg = weighted_average(ptrs);
  CHECK(((avg - base.values).array() - 0.5).abs().maxCoeff() < 1e-12);

  ups[1] = update("b", base, 5);
  ups[2] = update("c", shifted(base, 1.0), 3);
  CHECK(((weighted_average(ptrs) - base.values).array() - 0.3).abs().maxCoeff() < 1e-12);
}

TEST_CASE("server variants reduce to fedavg") {
  const ModelConfig m = tiny_model();
  ServerState server = init_server(m, 1);
  const auto u = init_params(m, 2);
  const auto v = init_params(m, 3);
  const std::vector<ClientUpdate> ups{ClientUpdate{"a", u, 2, 4, std::nullopt}, ClientUpdate{"b", v, 6, 4, std::nullopt}};
  const auto avg = aggregate(ups, server, FLConfig{}, 2);

  FLConfig nova;
  nova.algorithm = Algorithm::kFedNova;
  CHECK((aggregate(ups, server, nova, 2).global.values - avg.global.values).cwiseAbs().maxCoeff() <= 1e-12);

  FLConfig mom;
  mom.algorithm = Algorithm::kFedAvgM;
  mom.server_momentum = 0.0;
  ServerState s = server;
  s.momentum = Eigen::VectorXd::Ones(u.size());
  CHECK(bitwise_equal(aggregate(ups, s, mom, 2).global.values, avg.global.values));
}

TEST_CASE("fednova normalizes unequal local steps") {
  const ModelConfig m = tiny_model();
  ServerState server = init_server(m, 1);
  const auto& theta = server.global.values;
  const auto u = shifted(server.global, -0.4);
  const auto v = shifted(server.global, -0.1);
  FLConfig nova;
  nova.algorithm = Algorithm::kFedNova;
  const auto next = aggregate({ClientUpdate{"a", u, 1, 4, std::nullopt}, ClientUpdate{"b", v, 1, 1, std::nullopt}},
                              server, nova, 2);
  // d = 0.5 * 0.4 / 4 + 0.5 * 0.1 / 1 = 0.1, tau_eff = 2.5
  CHECK(((next.global.values - theta).array() + 0.25).abs().maxCoeff() < 1e-12);
}

TEST_CASE("fedavgm accumulates momentum") {
  const ModelConfig m = tiny_model();
  ServerState server = init_server(m, 1);
  FLConfig fl;
  fl.algorithm = Algorithm::kFedAvgM;
  fl.server_momentum = 0.5;
  const auto s1 = aggregate({update("a", shifted(server.global, -1.0), 1)}, server, fl, 1);
  CHECK(((s1.global.values - server.global.values).array() + 1.0).abs().maxCoeff() < 1e-12);
  const auto s2 = aggregate({update("a", shifted(s1.global, -1.0), 1)}, s1, fl, 1);
  CHECK(((s2.global.values - s1.global.values).array() + 1.5).abs().maxCoeff() < 1e-12);
}

TEST_CASE("fedadam takes a sign-like first step") {
  const ModelConfig m = tiny_model();
  ServerState server = init_server(m, 1);
  FLConfig fl;
  fl.algorithm = Algorithm::kFedAdam;
  fl.server_eps = 1e-12;
  const auto next = aggregate({update("a", shifted(server.global, 2.0), 1)}, server, fl, 1);
  // m = 0.1 * (-2), v = 0.01 * 4: step = -lr * (-0.2 / 0.2)
  CHECK(((next.global.values - server.global.values).array() - fl.server_lr).abs().maxCoeff() < 1e-9);
}

TEST_CASE("scaffold server variate is the mean of client variates") {
  auto clients = tiny_clients(4, 32, 2);
  const ModelConfig m = tiny_model();
  FLConfig fl = sgd_config(0.01, 3);
  fl.algorithm = Algorithm::kScaffold;
  fl.participation = 0.5;
  EvalSpec off;
  off.enabled = false;
  const auto result = run_federation(clients, fl, m, LossConfig{}, off);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(result.server.global.size());
  for (const auto& c : clients) mean += c.control;
  mean /= static_cast<double>(clients.size());
  CHECK((result.server.control - mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(result.server.control.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("scaffold with zero variates takes plain sgd steps") {
  auto clients = tiny_clients(1, 32, 2);
  const ModelConfig m = tiny_model();
  FLConfig fl = sgd_config(0.01);
  fl.algorithm = Algorithm::kScaffold;
  const auto init = init_params(m, 1);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(init.size());
  clients[0].control = zero;
  const auto s = local_train(clients[0], init, fl, m, LossConfig{}, 0, &zero);
  auto plain = clients;
  const auto p = local_train(plain[0], init, sgd_config(0.01), m, LossConfig{}, 0);
  CHECK(bitwise_equal(s.params.values, p.params.values));
  REQUIRE(s.control_delta);
  CHECK((*s.control_delta - (init.values - s.params.values) / 0.01).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("run_federation degenerate cases") {
  auto clients = tiny_clients(1, 32, 3);
  const ModelConfig m = tiny_model();
  FLConfig fl = sgd_config(0.01, 0);
  CHECK_THROWS(run_federation(clients, fl, m, LossConfig{}));

  fl.rounds = 1;
  const auto fed = run_federation(clients, fl, m, LossConfig{});
  auto copy = clients;
  const auto local = local_train(copy[0], init_params(m, fl.seed), fl, m, LossConfig{}, 0);
  CHECK(bitwise_equal(fed.server.global.values, local.params.values));
  REQUIRE(fed.reports.size() == 1);
  CHECK(fed.reports[0].seen.has_value());
  CHECK_FALSE(fed.reports[0].unseen.has_value());
}

TEST_CASE("identical clients with one sgd step match a centralized step") {
  auto base = tiny_clients(1, 32, 3);
  std::vector<ClientState> clients;
  for (int i = 0; i < 3; ++i) {
    ClientState c = base[0];
    c.id = "k" + std::to_string(i);
    clients.push_back(c);
  }
  const ModelConfig m = tiny_model();
  FLConfig fl = sgd_config(0.05);
  fl.batch_size = 3;
  const auto fed = run_federation(clients, fl, m, LossConfig{});
  const auto init = init_params(m, fl.seed);
  std::vector<const FramePair*> all;
  for (const auto& p : base[0].data->train) all.push_back(&p);
  const auto g = batch_loss(init, all, m, LossConfig{}).gradient;
  CHECK((fed.server.global.values - (init.values - 0.05 * g)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("federation runs are deterministic at any thread count") {
  const ModelConfig m = tiny_model();
  auto run = [&](int threads, Algorithm algo) {
    auto clients = tiny_clients(4, 32, 2);
    FLConfig fl = sgd_config(0.01, 3);
    fl.client_optimizer = ClientOptimizer::kAdam;
    fl.participation = 0.75;
    fl.algorithm = algo;
    fl.threads = threads;
    return run_federation(clients, fl, m, LossConfig{}, EvalSpec{1, true});
  };
  for (Algorithm a : {Algorithm::kFedAvg, Algorithm::kScaffold, Algorithm::kFedAdam}) {
    const auto a1 = run(1, a);
    const auto a2 = run(1, a);
    const auto a4 = run(4, a);
    CHECK(same_reports(a1.reports, a2.reports));
    CHECK(same_reports(a1.reports, a4.reports));
    CHECK(bitwise_equal(a1.server.global.values, a4.server.global.values));
  }
}

TEST_CASE("evaluation schedule and held-out clients") {
  auto clients = make_clients(build_federation({tiny_profile("a", 1), tiny_profile("b", 2), tiny_profile("u", 3)}), {"u"});
  FLConfig fl = sgd_config(0.01, 4);
  const auto fed = run_federation(clients, fl, tiny_model(), LossConfig{}, EvalSpec{2, true});
  REQUIRE(fed.reports.size() == 4);
  CHECK_FALSE(fed.reports[0].seen);
  CHECK(fed.reports[1].seen);
  CHECK(fed.reports[3].unseen);
  for (const auto& r : fed.reports) CHECK(r.participants == std::vector<std::string>{"a", "b"});
}

TEST_CASE("train_local_only") {
  auto clients = tiny_clients(2, 32, 2);
  const ModelConfig m = tiny_model();
  FLConfig fl = sgd_config(0.01, 3);
  fl.client_optimizer = ClientOptimizer::kAdam;
  const auto solo = train_local_only(clients[0], fl, m, LossConfig{});
  std::vector<ClientState> one{clients[0]};
  EvalSpec off;
  off.enabled = false;
  const auto fed = run_federation(one, fl, m, LossConfig{}, off);
  CHECK(bitwise_equal(solo.params.values, fed.server.global.values));
  CHECK(solo.round_loss.size() == 3);

  const auto other = train_local_only(clients[1], fl, m, LossConfig{});
  CHECK_FALSE(bitwise_equal(solo.params.values, other.params.values));
}

TEST_CASE("local loss decreases on a static noise-free scene") {
  auto prof = tiny_profile("s", 40, 32, 2);
  prof.num_objects = 0;
  auto clients = make_clients(build_federation({prof}));
  FLConfig fl = sgd_config(1e-4, 10);
  fl.local_epochs = 1;
  const auto r = train_local_only(clients[0], fl, tiny_model(), LossConfig{});
  for (std::size_t i = 1; i < r.round_loss.size(); ++i) CHECK(r.round_loss[i] <= r.round_loss[i - 1]);
  CHECK(r.round_loss.back() < r.round_loss.front());
}
