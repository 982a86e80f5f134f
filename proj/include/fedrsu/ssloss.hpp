#pragma once

#include "fedrsu/diff.hpp"
#include "fedrsu/flowmodel.hpp"
#include "fedrsu/geometry.hpp"
#include "fedrsu/scenegen.hpp"

#include <vector>

namespace fedrsu {

struct LossConfig {
  double beta_ch = 0.75;
  double beta_reg = 0.25;
  double alpha = 1.0;  // static-probability decay per pixel of optical flow
  int knn_k_smooth = 8;
  bool bidirectional_chamfer = false;
  bool chamfer_mean = false;  // divide the Chamfer sum by the number of warped points
  bool use_optical = true;    // false forces s_a = 1 (single-modal) even when optical flow exists
  std::vector<double> per_step_weights;  // empty = equal weights over all K steps

  void validate(int iterations) const;
};

/// s_a = exp(-alpha * ||optical_a||), one entry per point.
Eigen::VectorXd static_weights(const OpticalFlow& optical, double alpha);

/// Weights for a pair: static_weights of its optical flow, or all ones when
/// the pair is single-modal or the config disables optical guidance.
Eigen::VectorXd pair_static_weights(const FramePair& pair, const LossConfig& cfg);

// --- Value-level losses -----------------------------------------------------

/// sum_a s_a * min_b ||warped_a - target_b||^2 (+ unweighted reverse term when bidirectional).
double chamfer_loss(const PointCloud& warped, const PointCloud& target, const Eigen::VectorXd& s,
                    bool bidirectional = false);

/// sum_a 1/|N(a)| sum_{k in N(a)} ||f_a - f_k||^2 over the k nearest other source points.
double smoothness_loss(const PointCloud& source, const FlowField& flow, int k);

// --- Differentiable forms ---------------------------------------------------

diff::Var chamfer_loss(diff::Tape& tape, diff::Var warped, const PointCloud& target, const Eigen::VectorXd& s,
                       const LossConfig& cfg);

diff::Var smoothness_loss(diff::Tape& tape, const PointCloud& source, diff::Var flow, int k);

/// beta_ch * Chamfer(source + flow) + beta_reg * smoothness(flow).
diff::Var step_loss(diff::Tape& tape, const PointCloud& source, const PointCloud& target, diff::Var flow,
                    const Eigen::VectorXd& s, const LossConfig& cfg);

/// Weighted mean of step_loss over the model's K flow estimates.
diff::Var total_loss(diff::Tape& tape, const BoundParams& params, const FramePair& pair, const ModelConfig& model_cfg,
                     const LossConfig& loss_cfg);

struct LossValue {
  double value = 0.0;
  Eigen::VectorXd gradient;  // empty unless requested
};

LossValue total_loss(const ParamVector& params, const FramePair& pair, const ModelConfig& model_cfg,
                     const LossConfig& loss_cfg, bool with_gradient);

/// Mean loss and mean gradient over a batch, reduced in index order.
LossValue batch_loss(const ParamVector& params, const std::vector<const FramePair*>& batch,
                     const ModelConfig& model_cfg, const LossConfig& loss_cfg);

}  // namespace fedrsu
