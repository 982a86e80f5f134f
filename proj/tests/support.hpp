#pragma once
// Shared fixtures and brute-force oracles for the unit and acceptance tests.

#include "fedrsu/fedcore.hpp"
#include "fedrsu/geometry.hpp"
#include "fedrsu/rng.hpp"
#include "fedrsu/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace fedrsu::testing {

inline PointCloud random_cloud(Rng& rng, Eigen::Index n, double half = 5.0) {
  PointCloud c(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int d = 0; d < 3; ++d) c(i, d) = rng.uniform(-half, half);
  }
  return c;
}

inline FlowField random_flow(Rng& rng, Eigen::Index n, double half = 0.5) { return random_cloud(rng, n, half); }

/// O(n*m) scan: indices of the k nearest references, ties by smaller index.
inline std::vector<std::pair<double, int>> brute_knn(const PointCloud& ref, const Eigen::RowVector3d& q, int k) {
  std::vector<std::pair<double, int>> all;
  for (Eigen::Index j = 0; j < ref.rows(); ++j) {
    double d2 = 0.0;
    for (int d = 0; d < 3; ++d) d2 += (ref(j, d) - q(d)) * (ref(j, d) - q(d));
    all.emplace_back(d2, static_cast<int>(j));
  }
  std::sort(all.begin(), all.end());
  all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(k)));
  return all;
}

inline double brute_chamfer(const PointCloud& w, const PointCloud& t, const Eigen::VectorXd& s) {
  double total = 0.0;
  for (Eigen::Index a = 0; a < w.rows(); ++a) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index b = 0; b < t.rows(); ++b) best = std::min(best, (w.row(a) - t.row(b)).squaredNorm());
    total += s[a] * best;
  }
  return total;
}

/// Neighbourhoods exclude the point itself.
inline double brute_smoothness(const PointCloud& src, const FlowField& f, int k) {
  double total = 0.0;
  for (Eigen::Index a = 0; a < src.rows(); ++a) {
    std::vector<std::pair<double, int>> others;
    for (Eigen::Index b = 0; b < src.rows(); ++b) {
      if (b != a) others.emplace_back((src.row(a) - src.row(b)).squaredNorm(), static_cast<int>(b));
    }
    std::sort(others.begin(), others.end());
    const auto kk = std::min<std::size_t>(others.size(), static_cast<std::size_t>(k));
    if (kk == 0) continue;
    double sum = 0.0;
    for (std::size_t j = 0; j < kk; ++j) sum += (f.row(a) - f.row(others[j].second)).squaredNorm();
    total += sum / static_cast<double>(kk);
  }
  return total;
}

inline double brute_epe(const FlowField& p, const FlowField& g) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double d2 = 0.0;
    for (int d = 0; d < 3; ++d) d2 += (p(i, d) - g(i, d)) * (p(i, d) - g(i, d));
    s += std::sqrt(d2);
  }
  return s / static_cast<double>(p.rows());
}

inline double brute_acc(const FlowField& p, const FlowField& g, double abs_thr, double rel_thr) {
  int hits = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double err = (p.row(i) - g.row(i)).norm();
    const double gn = g.row(i).norm();
    if (err < abs_thr || (gn > 0.0 && err / gn < rel_thr)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(p.rows());
}

/// A small client whose frames have `points` points.
inline ClientProfile tiny_profile(const std::string& id, std::uint64_t seed, int points = 32, int train = 2) {
  ClientProfile p;
  p.client_id = id;
  p.num_train = train;
  p.num_val = 1;
  p.num_test = 2;
  p.points_per_frame = points;
  p.perception_range = 8.0;
  p.num_objects = 1;
  p.seed = seed;
  return p;
}

inline ModelConfig tiny_model() {
  ModelConfig m;
  m.feature_dim = 8;
  m.hidden_dim = 8;
  m.iterations = 3;
  m.knn_k_local = 4;
  return m;
}

/// Initial weights plus a uniform jitter on every coordinate, biases included.
/// Zero biases can leave a point with an exactly zero feature row, where the
/// cosine guard makes the loss non-differentiable.
inline ParamVector random_params(const ModelConfig& m, std::uint64_t seed, double jitter = 0.1) {
  auto p = init_params(m, seed);
  Rng rng(derive_seed({seed, 0x6a17u}));
  for (Eigen::Index i = 0; i < p.values.size(); ++i) p.values[i] += jitter * (2.0 * rng.uniform() - 1.0);
  return p;
}

inline std::vector<ClientState> tiny_clients(int count, int points = 32, int train = 2) {
  std::vector<ClientProfile> profiles;
  for (int i = 0; i < count; ++i) profiles.push_back(tiny_profile("c" + std::to_string(i), 100 + i, points, train));
  return make_clients(build_federation(profiles));
}

/// Copy of `client` whose train split is replaced by `train`.
inline ClientState with_train(const ClientState& client, std::vector<FramePair> train) {
  auto data = std::make_shared<ClientDataset>(*client.data);
  data->train = std::move(train);
  ClientState out = client;
  out.data = std::move(data);
  return out;
}

inline bool bitwise_equal(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() == b.size() && std::equal(a.data(), a.data() + a.size(), b.data());
}

}  // namespace fedrsu::testing
