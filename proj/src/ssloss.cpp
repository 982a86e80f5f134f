#include "fedrsu/ssloss.hpp"

#include <stdexcept>

namespace fedrsu {

using diff::Matrix;
using diff::Tape;
using diff::Var;

namespace {

// Neighbour pairs (a, k) with k in N(a): the k nearest other points of the cloud.
struct SmoothPairs {
  std::vector<int> center;
  std::vector<int> neighbor;
  Eigen::VectorXd weight;  // 1 / |N(center)| per pair
};

SmoothPairs smoothness_pairs(const PointCloud& source, int k) {
  if (k < 1) throw std::invalid_argument("smoothness: k must be >= 1");
  SmoothPairs out;
  const Eigen::Index n = source.rows();
  if (n <= 1) {
    out.weight.resize(0);
    return out;
  }
  const NeighborIndex nn = knn(source, source, k + 1);
  const Eigen::Index keep = std::min<Eigen::Index>(k, n - 1);
  std::vector<double> w;
  for (Eigen::Index a = 0; a < n; ++a) {
    Eigen::Index taken = 0;
    for (Eigen::Index j = 0; j < nn.k && taken < keep; ++j) {
      const int b = nn.index(a, j);
      if (b == a) continue;
      out.center.push_back(static_cast<int>(a));
      out.neighbor.push_back(b);
      ++taken;
    }
    for (Eigen::Index j = 0; j < taken; ++j) w.push_back(1.0 / static_cast<double>(taken));
  }
  out.weight = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  return out;
}

std::vector<int> nearest_indices(const PointCloud& reference, const PointCloud& queries) {
  const NeighborIndex nn = knn(reference, queries, 1);
  return nn.indices;
}

void require_nonempty(const PointCloud& a, const PointCloud& b) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("chamfer_loss: empty cloud");
}

}  // namespace

void LossConfig::validate(int iterations) const {
  if (beta_ch < 0.0 || beta_reg < 0.0) throw std::invalid_argument("loss weights must be nonnegative");
  if (alpha < 0.0) throw std::invalid_argument("loss.alpha must be nonnegative");
  if (knn_k_smooth < 1) throw std::invalid_argument("loss.knn_k_smooth must be >= 1");
  if (!per_step_weights.empty()) {
    if (static_cast<int>(per_step_weights.size()) != iterations) {
      throw std::invalid_argument("loss.per_step_weights must have one entry per iteration");
    }
    double total = 0.0;
    for (double w : per_step_weights) {
      if (w < 0.0) throw std::invalid_argument("loss.per_step_weights must be nonnegative");
      total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("loss.per_step_weights must not all be zero");
  }
}

Eigen::VectorXd static_weights(const OpticalFlow& optical, double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("static_weights: alpha must be nonnegative");
  return (-alpha * optical.rowwise().norm().array()).exp().matrix();
}

Eigen::VectorXd pair_static_weights(const FramePair& pair, const LossConfig& cfg) {
  if (cfg.use_optical && pair.optical) return static_weights(*pair.optical, cfg.alpha);
  return Eigen::VectorXd::Ones(pair.source.rows());
}

double chamfer_loss(const PointCloud& warped, const PointCloud& target, const Eigen::VectorXd& s,
                    bool bidirectional) {
  require_nonempty(warped, target);
  if (s.size() != warped.rows()) throw std::invalid_argument("chamfer_loss: weight length mismatch");
  const NeighborIndex fwd = knn(target, warped, 1);
  double loss = 0.0;
  for (Eigen::Index a = 0; a < warped.rows(); ++a) loss += s[a] * fwd.sq_distance(a, 0);
  if (bidirectional) {
    const NeighborIndex bwd = knn(warped, target, 1);
    for (Eigen::Index b = 0; b < target.rows(); ++b) loss += bwd.sq_distance(b, 0);
  }
  return loss;
}

double smoothness_loss(const PointCloud& source, const FlowField& flow, int k) {
  if (flow.rows() != source.rows()) throw std::invalid_argument("smoothness_loss: flow length mismatch");
  const SmoothPairs pairs = smoothness_pairs(source, k);
  double loss = 0.0;
  for (std::size_t i = 0; i < pairs.center.size(); ++i) {
    loss += pairs.weight[static_cast<Eigen::Index>(i)] *
            (flow.row(pairs.center[i]) - flow.row(pairs.neighbor[i])).squaredNorm();
  }
  return loss;
}

Var chamfer_loss(Tape& tape, Var warped, const PointCloud& target, const Eigen::VectorXd& s, const LossConfig& cfg) {
  const PointCloud w = tape.value(warped);
  require_nonempty(w, target);
  if (s.size() != w.rows()) throw std::invalid_argument("chamfer_loss: weight length mismatch");

  const PointCloud matched = select_rows(target, nearest_indices(target, w));
  const Var residual = tape.sub(warped, tape.constant(matched));
  Var loss = tape.sum(tape.mul(tape.row_squared_norm(residual), tape.constant(s)));
  if (cfg.chamfer_mean) loss = tape.scale(loss, 1.0 / static_cast<double>(w.rows()));
  if (cfg.bidirectional_chamfer) {
    const Var picked = tape.gather_rows(warped, nearest_indices(w, target));
    Var reverse = tape.sum(tape.row_squared_norm(tape.sub(picked, tape.constant(target))));
    if (cfg.chamfer_mean) reverse = tape.scale(reverse, 1.0 / static_cast<double>(target.rows()));
    loss = tape.add(loss, reverse);
  }
  return loss;
}

Var smoothness_loss(Tape& tape, const PointCloud& source, Var flow, int k) {
  if (tape.value(flow).rows() != source.rows()) throw std::invalid_argument("smoothness_loss: flow length mismatch");
  SmoothPairs pairs = smoothness_pairs(source, k);
  if (pairs.center.empty()) return tape.constant(Matrix::Zero(1, 1));
  const Var diff = tape.sub(tape.gather_rows(flow, std::move(pairs.center)),
                            tape.gather_rows(flow, std::move(pairs.neighbor)));
  return tape.sum(tape.mul(tape.row_squared_norm(diff), tape.constant(pairs.weight)));
}

Var step_loss(Tape& tape, const PointCloud& source, const PointCloud& target, Var flow, const Eigen::VectorXd& s,
              const LossConfig& cfg) {
  const Var warped = tape.add(tape.constant(source), flow);
  const Var ch = chamfer_loss(tape, warped, target, s, cfg);
  const Var reg = smoothness_loss(tape, source, flow, cfg.knn_k_smooth);
  return tape.add(tape.scale(ch, cfg.beta_ch), tape.scale(reg, cfg.beta_reg));
}

Var total_loss(Tape& tape, const BoundParams& params, const FramePair& pair, const ModelConfig& model_cfg,
               const LossConfig& loss_cfg) {
  loss_cfg.validate(model_cfg.iterations);
  const std::vector<Var> flows = predict(tape, params, pair.source, pair.target, model_cfg);
  const Eigen::VectorXd s = pair_static_weights(pair, loss_cfg);
  std::vector<double> w = loss_cfg.per_step_weights;
  if (w.empty()) w.assign(flows.size(), 1.0);
  double w_total = 0.0;
  for (double x : w) w_total += x;

  Var total;
  for (std::size_t k = 0; k < flows.size(); ++k) {
    if (w[k] == 0.0) continue;
    const Var term = tape.scale(step_loss(tape, pair.source, pair.target, flows[k], s, loss_cfg), w[k] / w_total);
    total = total.valid() ? tape.add(total, term) : term;
  }
  return total;
}

LossValue total_loss(const ParamVector& params, const FramePair& pair, const ModelConfig& model_cfg,
                     const LossConfig& loss_cfg, bool with_gradient) {
  Tape tape;
  const BoundParams bound = bind_params(tape, params);
  const Var loss = total_loss(tape, bound, pair, model_cfg, loss_cfg);
  LossValue out;
  out.value = tape.scalar(loss);
  if (with_gradient) out.gradient = collect_gradient(tape.backward(loss), bound, params.layout);
  return out;
}

LossValue batch_loss(const ParamVector& params, const std::vector<const FramePair*>& batch,
                     const ModelConfig& model_cfg, const LossConfig& loss_cfg) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  LossValue out;
  out.gradient = Eigen::VectorXd::Zero(params.size());
  for (const FramePair* pair : batch) {
    const LossValue one = total_loss(params, *pair, model_cfg, loss_cfg, true);
    out.value += one.value;
    out.gradient += one.gradient;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.value *= inv;
  out.gradient *= inv;
  return out;
}

}  // namespace fedrsu
