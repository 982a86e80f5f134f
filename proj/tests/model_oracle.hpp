#pragma once
// Straight-line (tape-free) forward pass of the flow model, for comparison against the tape.

#include "fedrsu/flowmodel.hpp"

#include "support.hpp"

#include <vector>

namespace fedrsu::testing {

using diff::Matrix;

inline Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }

inline Matrix block(const ParamVector& p, const std::string& name) { return p.block(name); }

/// Plain-Eigen mean of the k nearest reference rows minus the query.
inline Matrix mean_offset(const PointCloud& ref, const PointCloud& q, int k) {
  Matrix out(q.rows(), 3);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const auto nn = brute_knn(ref, q.row(i), k);
    Eigen::RowVector3d m = Eigen::RowVector3d::Zero();
    for (const auto& [d2, j] : nn) m += ref.row(j);
    out.row(i) = m / static_cast<double>(nn.size()) - q.row(i);
  }
  return out;
}

inline Matrix encode_oracle(const ParamVector& p, const PointCloud& c, const ModelConfig& cfg) {
  Matrix x(c.rows(), 6);
  x.leftCols(3) = c * cfg.input_scale;
  x.rightCols(3) = mean_offset(c, c, cfg.knn_k_local);
  Matrix h = relu((x * block(p, "encoder.w1")).rowwise() + block(p, "encoder.b1").row(0));
  return (h * block(p, "encoder.w2")).rowwise() + block(p, "encoder.b2").row(0);
}

inline Matrix correlation_oracle(const Matrix& fs, const Matrix& ft, const PointCloud& s, const PointCloud& t, double temp) {
  Matrix w(fs.rows(), ft.rows());
  for (Eigen::Index a = 0; a < fs.rows(); ++a) {
    for (Eigen::Index b = 0; b < ft.rows(); ++b) {
      const double cs = fs.row(a).dot(ft.row(b)) / (std::max(fs.row(a).norm(), 1e-12) * std::max(ft.row(b).norm(), 1e-12));
      w(a, b) = cs / temp;
    }
    const double mx = w.row(a).maxCoeff();
    w.row(a) = (w.row(a).array() - mx).exp().matrix();
    w.row(a) /= w.row(a).sum();
  }
  return w * t - Matrix(s);
}

inline Matrix update_oracle(const ParamVector& p, const PointCloud& warped, const PointCloud& t, const Matrix& prev,
                     const ModelConfig& cfg) {
  Matrix x(warped.rows(), 9);
  x.leftCols(3) = warped * cfg.input_scale;
  x.middleCols(3, 3) = mean_offset(t, warped, cfg.knn_k_local);
  x.rightCols(3) = prev;
  Matrix h = relu((x * block(p, "update.w1")).rowwise() + block(p, "update.b1").row(0));
  return (h * block(p, "update.w2")).rowwise() + block(p, "update.b2").row(0);
}

inline std::vector<Matrix> predict_oracle(const ParamVector& p, const PointCloud& src, const PointCloud& tgt,
                                          const ModelConfig& cfg) {
  std::vector<Matrix> flows;
  flows.push_back(correlation_oracle(encode_oracle(p, src, cfg), encode_oracle(p, tgt, cfg), src, tgt,
                                     cfg.correlation_temperature));
  for (int k = 1; k < cfg.iterations; ++k) {
    const Matrix prev = flows.back();
    flows.push_back(prev + update_oracle(p, src + prev, tgt, prev, cfg));
  }
  return flows;
}

}  // namespace fedrsu::testing
