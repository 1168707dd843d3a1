#pragma once

#include <span>
#include <vector>

namespace dnd {

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

/// Points for every distinct score used as a ">= threshold" cut, from the
/// highest threshold down, preceded by (inf, 0, 0).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
/// Probability a positive outscores a negative, ties counted half.
/// Throws ValidationError unless both classes are present.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

double mean_of(std::span<const double> v);
double median_of(std::vector<double> v);

}  // namespace dnd
