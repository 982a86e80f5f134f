#include "fedrsu/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace fedrsu {

namespace {

void check_pair(const FlowField& pred, const FlowField& gt) {
  if (pred.rows() != gt.rows()) throw std::invalid_argument("metric: flow length mismatch");
  if (pred.rows() == 0) throw std::invalid_argument("metric: empty flow");
}

bool within(double err, double gt_norm, double abs_thr, double rel_thr) {
  if (err < abs_thr) return true;
  return gt_norm > 0.0 && err / gt_norm < rel_thr;
}

}  // namespace

double epe3d(const FlowField& pred, const FlowField& gt) {
  check_pair(pred, gt);
  return (pred - gt).rowwise().norm().mean();
}

double accuracy(const FlowField& pred, const FlowField& gt, double abs_thr, double rel_thr) {
  check_pair(pred, gt);
  long hits = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    if (within((pred.row(i) - gt.row(i)).norm(), gt.row(i).norm(), abs_thr, rel_thr)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.rows());
}

double acc_strict(const FlowField& pred, const FlowField& gt) { return accuracy(pred, gt, kStrictAbs, kStrictRel); }

double acc_relaxed(const FlowField& pred, const FlowField& gt) { return accuracy(pred, gt, kRelaxedAbs, kRelaxedRel); }

MetricReport evaluate_flow(const FlowField& pred, const FlowField& gt) {
  MetricAccumulator acc;
  acc.add(pred, gt);
  return acc.report();
}

void MetricAccumulator::add(const FlowField& pred, const FlowField& gt) {
  check_pair(pred, gt);
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    const double err = (pred.row(i) - gt.row(i)).norm();
    const double norm = gt.row(i).norm();
    epe_sum_ += err;
    if (within(err, norm, kStrictAbs, kStrictRel)) strict_ += 1.0;
    if (within(err, norm, kRelaxedAbs, kRelaxedRel)) relaxed_ += 1.0;
  }
  points_ += static_cast<long>(pred.rows());
}

void MetricAccumulator::add(const MetricReport& r) {
  const auto n = static_cast<double>(r.num_points);
  epe_sum_ += r.epe3d * n;
  strict_ += r.accs * n;
  relaxed_ += r.accr * n;
  points_ += r.num_points;
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  r.num_points = points_;
  if (points_ == 0) return r;
  const auto n = static_cast<double>(points_);
  r.epe3d = epe_sum_ / n;
  r.accs = strict_ / n;
  r.accr = relaxed_ / n;
  return r;
}

MetricReport mean_report(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("mean_report: no reports");
  MetricReport out;
  for (const auto& r : reports) {
    out.epe3d += r.epe3d;
    out.accs += r.accs;
    out.accr += r.accr;
    out.num_points += r.num_points;
  }
  const auto n = static_cast<double>(reports.size());
  out.epe3d /= n;
  out.accs /= n;
  out.accr /= n;
  return out;
}

PersonalizationSummary summarize_personalization(const std::map<std::string, double>& per_client,
                                                 const std::map<std::string, double>& baseline, Direction direction) {
  if (per_client.empty()) throw std::invalid_argument("summarize_personalization: empty client set");
  if (per_client.size() != baseline.size()) {
    throw std::invalid_argument("summarize_personalization: client sets differ");
  }
  PersonalizationSummary s;
  double improved = 0.0;
  for (const auto& [id, value] : per_client) {
    const auto it = baseline.find(id);
    if (it == baseline.end()) throw std::invalid_argument("summarize_personalization: no baseline for " + id);
    s.mean += value;
    const bool better = direction == Direction::kLowerBetter ? value < it->second : value > it->second;
    if (better) improved += 1.0;
  }
  const auto n = static_cast<double>(per_client.size());
  s.mean /= n;
  double var = 0.0;
  for (const auto& [id, value] : per_client) var += (value - s.mean) * (value - s.mean);
  s.std = std::sqrt(var / n);
  s.improvement = improved / n;
  return s;
}

}  // namespace fedrsu
