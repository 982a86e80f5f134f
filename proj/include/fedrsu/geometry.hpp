#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <limits>
#include <vector>

namespace fedrsu {

// Point clouds are n x 3 row-major matrices, one point per row (meters).
template <typename Scalar>
using Cloud = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;

using PointCloud = Cloud<double>;
/// Per-source-point 3D motion vectors; same shape as the source cloud.
using FlowField = Cloud<double>;
using Point3 = Eigen::Vector3d;

template <typename Scalar>
struct Rigid {
  using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Rigid identity() { return {}; }

  static Rigid yaw(Scalar angle, const Vec3& t = Vec3::Zero()) {
    Rigid r;
    r.rotation = Eigen::AngleAxis<Scalar>(angle, Vec3::UnitZ()).toRotationMatrix();
    r.translation = t;
    return r;
  }

  /// Rotation by `angle` about the vertical axis through `center`, then shift by `t`.
  static Rigid yaw_about(Scalar angle, const Vec3& center, const Vec3& t) {
    Rigid r = yaw(angle);
    r.translation = center + t - r.rotation * center;
    return r;
  }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

  Rigid operator*(const Rigid& other) const {
    Rigid r;
    r.rotation = rotation * other.rotation;
    r.translation = rotation * other.translation + translation;
    return r;
  }

  bool is_valid(Scalar tol = Scalar(1e-9)) const {
    const Mat3 should_be_identity = rotation * rotation.transpose();
    return (should_be_identity - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - Scalar(1)) <= tol && translation.allFinite();
  }
};

using RigidTransform = Rigid<double>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Row i of the result is R * p_i + t.
template <typename Derived>
Cloud<typename Derived::Scalar> apply_rigid(const Rigid<typename Derived::Scalar>& t,
                                            const Eigen::MatrixBase<Derived>& cloud) {
  Cloud<typename Derived::Scalar> out(cloud.rows(), 3);
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    out.row(i) = (t.rotation * cloud.row(i).transpose() + t.translation).transpose();
  }
  return out;
}

/// Flow f_i = T(p_i) - p_i. Each component is adjusted by at most a few ulps so
/// that p_i + f_i reproduces T(p_i) bit-for-bit whenever such an f exists.
template <typename Derived>
Cloud<typename Derived::Scalar> flow_from_rigid(const Rigid<typename Derived::Scalar>& t,
                                                const Eigen::MatrixBase<Derived>& cloud) {
  using Scalar = typename Derived::Scalar;
  const Cloud<Scalar> moved = apply_rigid(t, cloud);
  Cloud<Scalar> flow(cloud.rows(), 3);
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    for (int d = 0; d < 3; ++d) {
      const Scalar p = cloud(i, d);
      const Scalar target = moved(i, d);
      Scalar f = target - p;
      for (int attempt = 0; attempt < 4 && p + f != target; ++attempt) {
        const Scalar dir = (p + f < target) ? std::numeric_limits<Scalar>::infinity()
                                            : -std::numeric_limits<Scalar>::infinity();
        f = std::nextafter(f, dir);
      }
      flow(i, d) = f;
    }
  }
  return flow;
}

/// Keeps points with z strictly above the threshold, preserving order.
template <typename Derived>
Cloud<typename Derived::Scalar> remove_ground(const Eigen::MatrixBase<Derived>& cloud,
                                              typename Derived::Scalar z_threshold) {
  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(cloud.rows()));
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    if (cloud(i, 2) > z_threshold) keep.push_back(i);
  }
  Cloud<typename Derived::Scalar> out(static_cast<Eigen::Index>(keep.size()), 3);
  for (std::size_t j = 0; j < keep.size(); ++j) out.row(static_cast<Eigen::Index>(j)) = cloud.row(keep[j]);
  return out;
}

/// Rows of `cloud` selected by `indices` (repeats allowed).
template <typename Derived, typename IndexRange>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Derived::ColsAtCompileTime, Eigen::RowMajor>
select_rows(const Eigen::MatrixBase<Derived>& m, const IndexRange& indices) {
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Derived::ColsAtCompileTime, Eigen::RowMajor> out(
      static_cast<Eigen::Index>(indices.size()), m.cols());
  Eigen::Index r = 0;
  for (auto i : indices) out.row(r++) = m.row(static_cast<Eigen::Index>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Exact k-nearest-neighbour search.

/// For each query, k_eff = min(k, n_reference) neighbour indices sorted by
/// ascending squared distance; ties are broken by the smaller reference index.
struct NeighborIndex {
  Eigen::Index num_queries = 0;
  Eigen::Index k = 0;
  std::vector<int> indices;        // num_queries x k, row-major
  std::vector<double> sq_distances;  // same layout

  int index(Eigen::Index query, Eigen::Index j) const { return indices[static_cast<std::size_t>(query * k + j)]; }
  double sq_distance(Eigen::Index query, Eigen::Index j) const {
    return sq_distances[static_cast<std::size_t>(query * k + j)];
  }
};

inline double squared_distance(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Static k-d tree over a copy of the reference points.
class KdTree {
 public:
  explicit KdTree(const PointCloud& reference);

  Eigen::Index size() const { return points_.rows(); }
  const PointCloud& points() const { return points_; }

  /// Exact search; `out_idx`/`out_d2` receive min(k, size()) entries.
  void query(const double* q, Eigen::Index k, int* out_idx, double* out_d2) const;

  NeighborIndex query(const PointCloud& queries, Eigen::Index k) const;

 private:
  struct Node {
    int begin = 0;
    int end = 0;
    int left = -1;
    int right = -1;
    int axis = -1;  // -1 for leaves
    double split = 0.0;
  };

  int build(int begin, int end);

  PointCloud points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

/// Throws std::invalid_argument("empty reference cloud") on an empty reference.
NeighborIndex knn(const PointCloud& reference, const PointCloud& queries, Eigen::Index k);

}  // namespace fedrsu
