#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "calora/world.hpp"

namespace calora {

struct MmdResult {
  double raw = 0.0;      // unbiased estimate, may be slightly negative
  double value = 0.0;    // max(raw, 0)
  double bandwidth = 0.0;
  std::size_t m = 0, n = 0;
};

/// Median of the pairwise Euclidean distances over the pooled set.
double median_pairwise_distance(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y);

/// Squared MMD with k(a,b) = exp(−‖a−b‖²/(2σ²)). Equal set sizes use the
/// paired U-statistic over canonically sorted sets; unequal sizes the
/// standard unbiased estimator. bandwidth ≤ 0 selects the median heuristic.
MmdResult mmd_alignment(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y,
                        double bandwidth = 0.0);

using ClassIou = std::array<std::optional<double>, kNumClasses>;

/// Pooled confusion over all mask pairs. A class absent from both prediction
/// and target has no IoU.
ClassIou class_iou(const std::vector<std::vector<std::uint8_t>>& pred,
                   const std::vector<std::vector<std::uint8_t>>& target);
ClassIou class_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& target);
double mean_iou(const ClassIou& iou);
double mean_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& target);
double mean_iou(const std::vector<std::vector<std::uint8_t>>& pred,
                const std::vector<std::vector<std::uint8_t>>& target);

struct MemorizationResult {
  double mean = 0.0;
  double p5 = 0.0;
  std::vector<double> distances;  // per generated image
};

/// Nearest-neighbor L2 distance of every generated image to the training set.
MemorizationResult memorization_distance(const std::vector<std::vector<double>>& gen,
                                         const std::vector<std::vector<double>>& train);

double l2_distance(std::span<const double> a, std::span<const double> b);
/// Linear-interpolated percentile, q in [0,100].
double percentile(std::vector<double> values, double q);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
};
MeanStd mean_std(const std::vector<double>& v);

}  // namespace calora
