#pragma once

#include "fedrsu/diff.hpp"
#include "fedrsu/geometry.hpp"
#include "fedrsu/scenegen.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fedrsu {

struct ModelConfig {
  int feature_dim = 32;
  int hidden_dim = 64;
  int iterations = 4;  // K: number of flow estimates F_1..F_K
  double correlation_temperature = 0.07;
  int knn_k_local = 8;
  double input_scale = 0.05;  // multiplies absolute coordinates fed to the networks

  void validate() const;
};

/// Which side of the personalization split a segment belongs to.
enum class Part { kBase, kHead };

struct Segment {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Part part = Part::kBase;
  bool is_bias = false;

  Eigen::Index size() const { return rows * cols; }
  bool operator==(const Segment&) const = default;
};

/// Named segments tiling a flat parameter vector.
class ParamLayout {
 public:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols, Part part, bool is_bias);

  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& find(const std::string& name) const;
  Eigen::Index size() const { return size_; }
  Eigen::Index part_size(Part part) const;

  /// Copy with every segment reassigned: names in `head_names` become head, the rest base.
  ParamLayout with_head(const std::vector<std::string>& head_names) const;

  /// Throws std::logic_error unless offsets tile [0, size()) in order.
  void check_tiling() const;

  bool operator==(const ParamLayout&) const = default;

 private:
  std::vector<Segment> segments_;
  Eigen::Index size_ = 0;
};

/// Flat float64 parameters plus their layout; the unit exchanged between clients and server.
struct ParamVector {
  ParamLayout layout;
  Eigen::VectorXd values;

  Eigen::Index size() const { return values.size(); }
  Eigen::Map<const Eigen::MatrixXd> block(const std::string& name) const;
};

ParamLayout model_layout(const ModelConfig& cfg);

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Contiguous copy of the base or head coordinates, in segment order.
Eigen::VectorXd split_params(const ParamVector& params, Part which);
/// Inverse of split_params for the given layout.
ParamVector merge_params(const ParamLayout& layout, const Eigen::VectorXd& base, const Eigen::VectorXd& head);

// Wire format: <stem>.f64 (little-endian float64) and <stem>.layout.json.
void save_params(const ParamVector& params, const std::filesystem::path& stem);
ParamVector load_params(const std::filesystem::path& stem);

/// Parameter leaves bound onto a tape, keyed by segment name.
struct BoundParams {
  std::map<std::string, diff::Var> vars;
  diff::Var operator[](const std::string& name) const { return vars.at(name); }
};

BoundParams bind_params(diff::Tape& tape, const ParamVector& params);
/// Flattens leaf gradients back into the parameter layout.
Eigen::VectorXd collect_gradient(const diff::Gradients& grads, const BoundParams& bound, const ParamLayout& layout);

// --- Model units (differentiable) -----------------------------------------

/// Per-point features (n x feature_dim) from coordinates and the mean offset
/// to the knn_k_local nearest points of the same cloud.
diff::Var encode(diff::Tape& tape, const BoundParams& p, const PointCloud& cloud, const ModelConfig& cfg);

/// Coarse flow from softmax-weighted soft correspondences over cosine similarity.
diff::Var global_correlation(diff::Tape& tape, diff::Var feat_src, diff::Var feat_tgt, const PointCloud& src,
                             const PointCloud& tgt, double temperature);

/// Residual update from the warped cloud's target neighbourhood and the previous flow.
diff::Var local_update(diff::Tape& tape, const BoundParams& p, diff::Var warped, const PointCloud& tgt,
                       diff::Var prev_flow, const ModelConfig& cfg);

/// Flow sequence F_1..F_K as tape variables (each n_src x 3).
std::vector<diff::Var> predict(diff::Tape& tape, const BoundParams& p, const PointCloud& src, const PointCloud& tgt,
                               const ModelConfig& cfg);

/// Value-only convenience wrapper.
std::vector<FlowField> predict(const ParamVector& params, const FramePair& pair, const ModelConfig& cfg);

}  // namespace fedrsu
