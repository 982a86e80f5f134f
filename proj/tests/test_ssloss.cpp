#include "fedrsu/ssloss.hpp"

#include "model_oracle.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace fedrsu;
using namespace fedrsu::testing;

namespace {

double total_loss_oracle(const ParamVector& p, const FramePair& pair, const ModelConfig& m, const LossConfig& l) {
  const auto flows = predict_oracle(p, pair.source, pair.target, m);
  const Eigen::VectorXd s = pair_static_weights(pair, l);
  double total = 0.0;
  for (const auto& f : flows) {
    const PointCloud warped = pair.source + f;
    total += l.beta_ch * brute_chamfer(warped, pair.target, s) + l.beta_reg * brute_smoothness(pair.source, f, l.knn_k_smooth);
  }
  return total / static_cast<double>(flows.size());
}

FramePair small_pair(std::uint64_t seed, int points = 32) {
  auto prof = tiny_profile("l", seed, points);
  prof.position_noise_sigma = 0.01;
  return generate_frame_pair(prof, 1);
}

}  // namespace

TEST_CASE("static_weights") {
  OpticalFlow of(3, 2);
  of << 0, 0, 2, 0, 3, 4;
  const auto s = static_weights(of, 1.0);
  CHECK(s[0] == 1.0);
  CHECK(std::abs(s[1] - 0.1353352832366127) < 1e-12);
  CHECK(std::abs(s[2] - std::exp(-5.0)) < 1e-15);
  CHECK((static_weights(of, 0.0).array() == 1.0).all());

  FramePair single;
  single.source = PointCloud::Zero(3, 3);
  single.target = single.source;
  CHECK((pair_static_weights(single, LossConfig{}).array() == 1.0).all());
  single.optical = of;
  CHECK(pair_static_weights(single, LossConfig{})[1] < 1.0);
  LossConfig off;
  off.use_optical = false;
  CHECK((pair_static_weights(single, off).array() == 1.0).all());
}

TEST_CASE("chamfer_loss") {
  Rng rng(20);
  const PointCloud t = random_cloud(rng, 30);
  const Eigen::VectorXd any = Eigen::VectorXd::Random(30).cwiseAbs();
  CHECK(chamfer_loss(t, t, any) == 0.0);
  CHECK(chamfer_loss(random_cloud(rng, 30), t, Eigen::VectorXd::Constant(30, 1e-300)) < 1e-290);

  PointCloud w = PointCloud::Zero(1, 3);
  PointCloud tt(2, 3);
  tt << 1, 0, 0, 3, 0, 0;
  CHECK(chamfer_loss(w, tt, Eigen::VectorXd::Ones(1)) == 1.0);
  CHECK(chamfer_loss(w, tt, Eigen::VectorXd::Ones(1), true) == 1.0 + (1.0 + 9.0));

  CHECK_THROWS(chamfer_loss(PointCloud(0, 3), tt, Eigen::VectorXd(0)));
  CHECK_THROWS(chamfer_loss(w, tt, Eigen::VectorXd::Ones(2)));
}

TEST_CASE("smoothness_loss") {
  Rng rng(21);
  const PointCloud src = random_cloud(rng, 40);
  FlowField uniform(40, 3);
  uniform.rowwise() = Eigen::RowVector3d(0.3, -0.2, 0.1);
  CHECK(smoothness_loss(src, uniform, 8) == 0.0);
  CHECK(smoothness_loss(src, FlowField::Zero(40, 3), 8) == 0.0);

  PointCloud two(2, 3);
  two << 0, 0, 0, 1, 0, 0;
  FlowField f(2, 3);
  f << 0, 0, 0, 1, 0, 0;
  CHECK(smoothness_loss(two, f, 1) == 2.0);
  CHECK(smoothness_loss(two.topRows(1), f.topRows(1), 4) == 0.0);
}

TEST_CASE("value losses match brute force") {
  Rng rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + rng.index(300));
    const auto m = static_cast<Eigen::Index>(1 + rng.index(300));
    const PointCloud w = random_cloud(rng, n);
    const PointCloud t = random_cloud(rng, m);
    Eigen::VectorXd s(n);
    for (Eigen::Index i = 0; i < n; ++i) s[i] = rng.uniform();
    CHECK(std::abs(chamfer_loss(w, t, s) - brute_chamfer(w, t, s)) <= 1e-10);
    const FlowField f = random_flow(rng, n);
    CHECK(std::abs(smoothness_loss(w, f, 8) - brute_smoothness(w, f, 8)) <= 1e-10);
  }
}

TEST_CASE("differentiable losses agree with value losses") {
  Rng rng(23);
  const PointCloud src = random_cloud(rng, 25);
  const PointCloud tgt = random_cloud(rng, 20);
  const FlowField flow = random_flow(rng, 25);
  Eigen::VectorXd s(25);
  for (Eigen::Index i = 0; i < 25; ++i) s[i] = rng.uniform();
  for (bool bidir : {false, true}) {
    LossConfig cfg;
    cfg.bidirectional_chamfer = bidir;
    diff::Tape tape;
    const auto v = step_loss(tape, src, tgt, tape.parameter(flow), s, cfg);
    const double expect = cfg.beta_ch * chamfer_loss(src + flow, tgt, s, bidir) + cfg.beta_reg * smoothness_loss(src, flow, 8);
    CHECK(std::abs(tape.scalar(v) - expect) < 1e-10);
  }
}

TEST_CASE("total_loss on a static noise-free scene is zero at zero flow") {
  auto prof = tiny_profile("z", 24, 48);
  prof.num_objects = 0;
  const auto pair = generate_frame_pair(prof, 1);
  const FlowField zero = FlowField::Zero(pair.source.rows(), 3);
  const Eigen::VectorXd s = pair_static_weights(pair, LossConfig{});
  CHECK(chamfer_loss(pair.source + zero, pair.target, s) == 0.0);
  CHECK(smoothness_loss(pair.source, zero, 8) == 0.0);
  diff::Tape tape;
  CHECK(tape.scalar(step_loss(tape, pair.source, pair.target, tape.parameter(zero), s, LossConfig{})) == 0.0);
}

TEST_CASE("total_loss matches a tape-free recomputation and its gradient") {
  const ModelConfig m = tiny_model();
  LossConfig l;
  const auto pair = small_pair(25);
  const auto p = random_params(m, 7);
  const auto v = total_loss(p, pair, m, l, true);
  CHECK(std::abs(v.value - total_loss_oracle(p, pair, m, l)) < 1e-10);
  REQUIRE(v.gradient.size() == p.size());

  const diff::Objective obj = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    const ParamVector q{p.layout, x};
    const auto r = total_loss(q, pair, m, l, g != nullptr);
    if (g) *g = r.gradient;
    return r.value;
  };
  CHECK(diff::grad_check(obj, p.values, 1e-6, 64, 3).max_relative_error < 1e-4);
}

TEST_CASE("per-step weights and chamfer normalization") {
  ModelConfig m = tiny_model();
  const auto pair = small_pair(26);
  const auto p = init_params(m, 8);
  LossConfig last;
  last.per_step_weights = {0.0, 0.0, 1.0};
  const auto flows = predict(p, pair, m);
  const Eigen::VectorXd s = pair_static_weights(pair, last);
  const double expect = last.beta_ch * chamfer_loss(pair.source + flows[2], pair.target, s) +
                        last.beta_reg * smoothness_loss(pair.source, flows[2], 8);
  CHECK(std::abs(total_loss(p, pair, m, last, false).value - expect) < 1e-10);

  LossConfig mean;
  mean.chamfer_mean = true;
  mean.beta_reg = 0.0;
  mean.per_step_weights = {1.0, 0.0, 0.0};
  CHECK(std::abs(total_loss(p, pair, m, mean, false).value -
                 mean.beta_ch * chamfer_loss(pair.source + flows[0], pair.target, s) / 32.0) < 1e-10);

  LossConfig bad;
  bad.per_step_weights = {1.0, 1.0};
  CHECK_THROWS(bad.validate(3));
  bad.per_step_weights = {0.0, 0.0, 0.0};
  CHECK_THROWS(bad.validate(3));
}

TEST_CASE("batch_loss is the mean over samples") {
  const ModelConfig m = tiny_model();
  const LossConfig l;
  const auto a = small_pair(27);
  const auto b = small_pair(28);
  const auto p = init_params(m, 9);
  const auto la = total_loss(p, a, m, l, true);
  const auto lb = total_loss(p, b, m, l, true);
  const auto batch = batch_loss(p, {&a, &b}, m, l);
  CHECK(std::abs(batch.value - 0.5 * (la.value + lb.value)) < 1e-12);
  CHECK((batch.gradient - 0.5 * (la.gradient + lb.gradient)).cwiseAbs().maxCoeff() < 1e-12);
}
