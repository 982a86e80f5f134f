#pragma once

#include "fedrsu/geometry.hpp"

#include <map>
#include <string>
#include <vector>

namespace fedrsu {

struct MetricReport {
  double epe3d = 0.0;  // meters
  double accs = 0.0;   // fraction in [0, 1]
  double accr = 0.0;
  long num_points = 0;
};

inline constexpr double kStrictAbs = 0.05;
inline constexpr double kStrictRel = 0.05;
inline constexpr double kRelaxedAbs = 0.1;
inline constexpr double kRelaxedRel = 0.1;

/// Mean end-point error. Throws on empty input or length mismatch.
double epe3d(const FlowField& pred, const FlowField& gt);

/// Fraction of points with error < abs_thr, or relative error < rel_thr where
/// the ground-truth norm is positive (zero-norm points use the absolute test only).
double accuracy(const FlowField& pred, const FlowField& gt, double abs_thr, double rel_thr);
double acc_strict(const FlowField& pred, const FlowField& gt);
double acc_relaxed(const FlowField& pred, const FlowField& gt);

MetricReport evaluate_flow(const FlowField& pred, const FlowField& gt);

/// Point-weighted pooling of per-sample reports.
class MetricAccumulator {
 public:
  void add(const FlowField& pred, const FlowField& gt);
  void add(const MetricReport& report);
  MetricReport report() const;

 private:
  double epe_sum_ = 0.0;
  double strict_ = 0.0;
  double relaxed_ = 0.0;
  long points_ = 0;
};

/// Unweighted mean of reports (used for averaging across clients or models).
MetricReport mean_report(const std::vector<MetricReport>& reports);

enum class Direction { kLowerBetter, kHigherBetter };

struct PersonalizationSummary {
  double mean = 0.0;
  double std = 0.0;          // population standard deviation
  double improvement = 0.0;  // fraction of clients strictly better than baseline
};

/// Throws std::invalid_argument on an empty client set or mismatched client ids.
PersonalizationSummary summarize_personalization(const std::map<std::string, double>& per_client,
                                                 const std::map<std::string, double>& baseline, Direction direction);

}  // namespace fedrsu
