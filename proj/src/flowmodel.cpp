#include "fedrsu/flowmodel.hpp"

#include "fedrsu/binary_io.hpp"
#include "fedrsu/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fedrsu {

using diff::Matrix;
using diff::Tape;
using diff::Var;

namespace {

constexpr double kCosineFloor = 1e-12;
constexpr int kEncoderInputs = 6;  // scaled xyz, mean neighbour offset
constexpr int kUpdateInputs = 9;   // scaled warped xyz, mean target offset, previous flow

/// Mean over the k nearest reference points of (neighbour - query), per query row.
PointCloud mean_neighbor_offset(const PointCloud& reference, const PointCloud& queries, int k) {
  const NeighborIndex nn = knn(reference, queries, k);
  PointCloud out = PointCloud::Zero(queries.rows(), 3);
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    for (Eigen::Index j = 0; j < nn.k; ++j) out.row(q) += reference.row(nn.index(q, j));
    out.row(q) /= static_cast<double>(nn.k);
    out.row(q) -= queries.row(q);
  }
  return out;
}

Var dense(Tape& tape, Var x, Var w, Var b) { return tape.add_row(tape.matmul(x, w), b); }

}  // namespace

void ModelConfig::validate() const {
  if (feature_dim <= 0) throw std::invalid_argument("model.feature_dim must be positive");
  if (hidden_dim <= 0) throw std::invalid_argument("model.hidden_dim must be positive");
  if (iterations < 1) throw std::invalid_argument("model.iterations must be >= 1");
  if (!(correlation_temperature > 0.0)) throw std::invalid_argument("model.correlation_temperature must be positive");
  if (knn_k_local < 1) throw std::invalid_argument("model.knn_k_local must be >= 1");
  if (!(input_scale > 0.0)) throw std::invalid_argument("model.input_scale must be positive");
}

void ParamLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols, Part part, bool is_bias) {
  segments_.push_back(Segment{std::move(name), size_, rows, cols, part, is_bias});
  size_ += rows * cols;
}

const Segment& ParamLayout::find(const std::string& name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return s;
  }
  throw std::out_of_range("no parameter segment named " + name);
}

Eigen::Index ParamLayout::part_size(Part part) const {
  Eigen::Index n = 0;
  for (const auto& s : segments_) {
    if (s.part == part) n += s.size();
  }
  return n;
}

ParamLayout ParamLayout::with_head(const std::vector<std::string>& head_names) const {
  for (const auto& name : head_names) find(name);
  ParamLayout out = *this;
  for (auto& s : out.segments_) {
    s.part = std::find(head_names.begin(), head_names.end(), s.name) != head_names.end() ? Part::kHead : Part::kBase;
  }
  return out;
}

void ParamLayout::check_tiling() const {
  Eigen::Index expected = 0;
  for (const auto& s : segments_) {
    if (s.offset != expected || s.size() < 0) throw std::logic_error("parameter layout has a gap or overlap at " + s.name);
    expected += s.size();
  }
  if (expected != size_) throw std::logic_error("parameter layout size mismatch");
}

Eigen::Map<const Eigen::MatrixXd> ParamVector::block(const std::string& name) const {
  const Segment& s = layout.find(name);
  return Eigen::Map<const Eigen::MatrixXd>(values.data() + s.offset, s.rows, s.cols);
}

ParamLayout model_layout(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout layout;
  layout.add("encoder.w1", kEncoderInputs, cfg.hidden_dim, Part::kBase, false);
  layout.add("encoder.b1", 1, cfg.hidden_dim, Part::kBase, true);
  layout.add("encoder.w2", cfg.hidden_dim, cfg.feature_dim, Part::kBase, false);
  layout.add("encoder.b2", 1, cfg.feature_dim, Part::kBase, true);
  layout.add("update.w1", kUpdateInputs, cfg.hidden_dim, Part::kHead, false);
  layout.add("update.b1", 1, cfg.hidden_dim, Part::kHead, true);
  layout.add("update.w2", cfg.hidden_dim, 3, Part::kHead, false);
  layout.add("update.b2", 1, 3, Part::kHead, true);
  return layout;
}

ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamVector p;
  p.layout = model_layout(cfg);
  p.values = Eigen::VectorXd::Zero(p.layout.size());
  Rng rng(derive_seed({seed, hash_string("init_params")}));
  for (const auto& s : p.layout.segments()) {
    if (s.is_bias) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.rows));
    for (Eigen::Index i = 0; i < s.size(); ++i) p.values[s.offset + i] = rng.uniform(-bound, bound);
  }
  return p;
}

Eigen::VectorXd split_params(const ParamVector& params, Part which) {
  if (params.values.size() != params.layout.size()) throw std::invalid_argument("split_params: layout mismatch");
  Eigen::VectorXd out(params.layout.part_size(which));
  Eigen::Index pos = 0;
  for (const auto& s : params.layout.segments()) {
    if (s.part != which) continue;
    out.segment(pos, s.size()) = params.values.segment(s.offset, s.size());
    pos += s.size();
  }
  return out;
}

ParamVector merge_params(const ParamLayout& layout, const Eigen::VectorXd& base, const Eigen::VectorXd& head) {
  if (base.size() != layout.part_size(Part::kBase) || head.size() != layout.part_size(Part::kHead)) {
    throw std::invalid_argument("merge_params: layout mismatch");
  }
  ParamVector out{layout, Eigen::VectorXd(layout.size())};
  Eigen::Index pb = 0, ph = 0;
  for (const auto& s : layout.segments()) {
    if (s.part == Part::kBase) {
      out.values.segment(s.offset, s.size()) = base.segment(pb, s.size());
      pb += s.size();
    } else {
      out.values.segment(s.offset, s.size()) = head.segment(ph, s.size());
      ph += s.size();
    }
  }
  return out;
}

void save_params(const ParamVector& params, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  write_f64(stem.string() + ".f64", params.values);
  nlohmann::json j;
  j["format"] = "fedrsu-params";
  j["dtype"] = "float64-le";
  j["size"] = params.layout.size();
  for (const auto& s : params.layout.segments()) {
    j["segments"].push_back({{"name", s.name},
                             {"offset", s.offset},
                             {"rows", s.rows},
                             {"cols", s.cols},
                             {"order", "column-major"},
                             {"part", s.part == Part::kBase ? "base" : "head"},
                             {"bias", s.is_bias}});
  }
  std::ofstream out(stem.string() + ".layout.json");
  if (!out) throw std::runtime_error("cannot write " + stem.string() + ".layout.json");
  out << j.dump(2) << '\n';
}

ParamVector load_params(const std::filesystem::path& stem) {
  std::ifstream in(stem.string() + ".layout.json");
  if (!in) throw std::runtime_error("missing parameter layout " + stem.string() + ".layout.json");
  const auto j = nlohmann::json::parse(in);
  ParamVector p;
  for (const auto& s : j.at("segments")) {
    p.layout.add(s.at("name").get<std::string>(), s.at("rows").get<Eigen::Index>(), s.at("cols").get<Eigen::Index>(),
                 s.at("part").get<std::string>() == "head" ? Part::kHead : Part::kBase, s.at("bias").get<bool>());
  }
  if (p.layout.size() != j.at("size").get<Eigen::Index>()) throw std::runtime_error("parameter layout size mismatch");
  p.values = read_f64(stem.string() + ".f64", p.layout.size());
  return p;
}

BoundParams bind_params(Tape& tape, const ParamVector& params) {
  if (params.values.size() != params.layout.size()) throw std::invalid_argument("bind_params: layout mismatch");
  BoundParams bound;
  for (const auto& s : params.layout.segments()) {
    bound.vars.emplace(s.name, tape.parameter(params.block(s.name)));
  }
  return bound;
}

Eigen::VectorXd collect_gradient(const diff::Gradients& grads, const BoundParams& bound, const ParamLayout& layout) {
  Eigen::VectorXd g(layout.size());
  for (const auto& s : layout.segments()) {
    const Matrix m = grads.of(bound[s.name]);
    g.segment(s.offset, s.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), s.size());
  }
  return g;
}

Var encode(Tape& tape, const BoundParams& p, const PointCloud& cloud, const ModelConfig& cfg) {
  if (cloud.rows() == 0) throw std::invalid_argument("encode: empty cloud");
  Matrix input(cloud.rows(), kEncoderInputs);
  input.leftCols(3) = cloud * cfg.input_scale;
  input.rightCols(3) = mean_neighbor_offset(cloud, cloud, cfg.knn_k_local);
  const Var x = tape.constant(std::move(input));
  const Var h = tape.relu(dense(tape, x, p["encoder.w1"], p["encoder.b1"]));
  return dense(tape, h, p["encoder.w2"], p["encoder.b2"]);
}

Var global_correlation(Tape& tape, Var feat_src, Var feat_tgt, const PointCloud& src, const PointCloud& tgt,
                       double temperature) {
  if (tape.value(feat_src).rows() == 0 || tape.value(feat_tgt).rows() == 0) {
    throw std::invalid_argument("global_correlation: empty features");
  }
  if (tape.value(feat_src).cols() != tape.value(feat_tgt).cols()) {
    throw std::invalid_argument("global_correlation: feature dimensions differ");
  }
  const Var a = tape.row_normalize(feat_src, kCosineFloor);
  const Var b = tape.row_normalize(feat_tgt, kCosineFloor);
  const Var logits = tape.scale(tape.matmul(a, tape.transpose(b)), 1.0 / temperature);
  const Var weights = tape.row_softmax(logits);
  return tape.sub(tape.matmul(weights, tape.constant(tgt)), tape.constant(src));
}

Var local_update(Tape& tape, const BoundParams& p, Var warped, const PointCloud& tgt, Var prev_flow,
                 const ModelConfig& cfg) {
  if (tgt.rows() == 0) throw std::invalid_argument("local_update: empty target cloud");
  const PointCloud& w = tape.value(warped);
  const NeighborIndex nn = knn(tgt, w, cfg.knn_k_local);
  Matrix mean_nbr = Matrix::Zero(w.rows(), 3);
  for (Eigen::Index q = 0; q < w.rows(); ++q) {
    for (Eigen::Index j = 0; j < nn.k; ++j) mean_nbr.row(q) += tgt.row(nn.index(q, j));
  }
  mean_nbr /= static_cast<double>(nn.k);
  const Var offset = tape.sub(tape.constant(std::move(mean_nbr)), warped);
  const Var x = tape.concat_cols({tape.scale(warped, cfg.input_scale), offset, prev_flow});
  const Var h = tape.relu(dense(tape, x, p["update.w1"], p["update.b1"]));
  return dense(tape, h, p["update.w2"], p["update.b2"]);
}

std::vector<Var> predict(Tape& tape, const BoundParams& p, const PointCloud& src, const PointCloud& tgt,
                         const ModelConfig& cfg) {
  if (src.rows() == 0 || tgt.rows() == 0) throw std::invalid_argument("predict: empty point cloud");
  const Var feat_src = encode(tape, p, src, cfg);
  const Var feat_tgt = encode(tape, p, tgt, cfg);
  std::vector<Var> flows;
  flows.push_back(global_correlation(tape, feat_src, feat_tgt, src, tgt, cfg.correlation_temperature));
  const Var source = tape.constant(src);
  for (int k = 1; k < cfg.iterations; ++k) {
    const Var prev = flows.back();
    const Var warped = tape.add(source, prev);
    flows.push_back(tape.add(prev, local_update(tape, p, warped, tgt, prev, cfg)));
  }
  return flows;
}

std::vector<FlowField> predict(const ParamVector& params, const FramePair& pair, const ModelConfig& cfg) {
  Tape tape;
  const BoundParams bound = bind_params(tape, params);
  std::vector<FlowField> out;
  for (Var f : predict(tape, bound, pair.source, pair.target, cfg)) out.emplace_back(tape.value(f));
  return out;
}

}  // namespace fedrsu
