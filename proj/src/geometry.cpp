#include "fedrsu/geometry.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace fedrsu {

namespace {

constexpr int kLeafSize = 12;

// Bounded candidate list kept sorted by (distance, index).
struct Candidates {
  Eigen::Index capacity;
  Eigen::Index count = 0;
  int* idx;
  double* d2;

  bool full() const { return count == capacity; }
  double worst() const { return d2[count - 1]; }

  void offer(int i, double d) {
    if (full()) {
      const double w = d2[count - 1];
      if (d > w || (d == w && i > idx[count - 1])) return;
    } else {
      ++count;
    }
    Eigen::Index pos = count - 1;
    while (pos > 0 && (d2[pos - 1] > d || (d2[pos - 1] == d && idx[pos - 1] > i))) {
      d2[pos] = d2[pos - 1];
      idx[pos] = idx[pos - 1];
      --pos;
    }
    d2[pos] = d;
    idx[pos] = i;
  }
};

}  // namespace

KdTree::KdTree(const PointCloud& reference) : points_(reference) {
  order_.resize(static_cast<std::size_t>(points_.rows()));
  std::iota(order_.begin(), order_.end(), 0);
  if (!order_.empty()) {
    nodes_.reserve(2 * order_.size() / kLeafSize + 2);
    build(0, static_cast<int>(order_.size()));
  }
}

int KdTree::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{begin, end, -1, -1, -1, 0.0});
  if (end - begin <= kLeafSize) return id;

  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (int i = begin; i < end; ++i) {
    const auto p = points_.row(order_[static_cast<std::size_t>(i)]).transpose();
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] - lo[axis] <= 0.0) return id;  // all points coincide

  const int mid = begin + (end - begin) / 2;
  auto less = [&](int a, int b) {
    const double va = points_(a, axis);
    const double vb = points_(b, axis);
    return va < vb || (va == vb && a < b);
  };
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, less);
  const double split = points_(order_[static_cast<std::size_t>(mid)], axis);

  nodes_[static_cast<std::size_t>(id)].axis = axis;
  nodes_[static_cast<std::size_t>(id)].split = split;
  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

void KdTree::query(const double* q, Eigen::Index k, int* out_idx, double* out_d2) const {
  Candidates cand{std::min<Eigen::Index>(k, size()), 0, out_idx, out_d2};
  if (cand.capacity == 0) return;

  // Explicit stack of (node, squared lower bound to the node's half-space).
  struct Item {
    int node;
    double bound;
  };
  std::vector<Item> stack;
  stack.reserve(64);
  stack.push_back({0, 0.0});
  while (!stack.empty()) {
    const Item item = stack.back();
    stack.pop_back();
    // Equal bounds are still visited: an equidistant point may carry a smaller index.
    if (cand.full() && item.bound > cand.worst()) continue;
    const Node& node = nodes_[static_cast<std::size_t>(item.node)];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int pi = order_[static_cast<std::size_t>(i)];
        cand.offer(pi, squared_distance(q, points_.row(pi).data()));
      }
      continue;
    }
    const double diff = q[node.axis] - node.split;
    const double plane = diff * diff;
    const int near = diff < 0.0 ? node.left : node.right;
    const int far = diff < 0.0 ? node.right : node.left;
    // Points equal to the split value can sit on either side.
    stack.push_back({far, diff == 0.0 ? 0.0 : std::max(item.bound, plane)});
    stack.push_back({near, item.bound});
  }
}

NeighborIndex KdTree::query(const PointCloud& queries, Eigen::Index k) const {
  NeighborIndex out;
  out.num_queries = queries.rows();
  out.k = std::min<Eigen::Index>(k, size());
  out.indices.resize(static_cast<std::size_t>(out.num_queries * out.k));
  out.sq_distances.resize(out.indices.size());
  for (Eigen::Index qi = 0; qi < queries.rows(); ++qi) {
    query(queries.row(qi).data(), out.k, out.indices.data() + qi * out.k, out.sq_distances.data() + qi * out.k);
  }
  return out;
}

NeighborIndex knn(const PointCloud& reference, const PointCloud& queries, Eigen::Index k) {
  if (reference.rows() == 0) throw std::invalid_argument("empty reference cloud");
  if (k <= 0) throw std::invalid_argument("knn: k must be positive");
  return KdTree(reference).query(queries, k);
}

}  // namespace fedrsu
