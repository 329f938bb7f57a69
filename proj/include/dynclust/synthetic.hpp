#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "dynclust/panel.hpp"
#include "dynclust/rng.hpp"

namespace dynclust {

enum class SyntheticKind { Static, Dynamic };

// Benchmark panel: two clusters of univariate series moving along smooth
// mean paths that approach each other mid-window and separate again. The
// dynamic variant appends two series that ride the upper cluster's mean
// until the point of closest approach and the lower cluster's mean after it.
struct SyntheticPanel {
  TimeSeriesPanel panel;
  std::vector<int> labels;        // generating cluster at t = 1 (0 = upper)
  std::vector<int> switch_times;  // 0-based first instant in cluster 2; -1 if none
  int true_k = 2;
  int length = 0;
  int crossing_time = 0;  // 0-based instant of closest approach
};

namespace synthetic_detail {

inline constexpr int kLength = 60;
inline constexpr int kCrossing = 38;  // 0-based; instant 39 in file numbering
inline constexpr int kPerCluster = 10;
inline constexpr double kNoiseSd = 0.15;
inline constexpr double kOffsetSd = 0.08;
inline constexpr double kUpperLevel = 4.2;
inline constexpr double kLowerLevel = 3.6;
inline constexpr double kUpperSlope = 0.055;
inline constexpr double kLowerSlope = 0.045;

inline double upper_mean(int t) { return kUpperLevel + kUpperSlope * std::abs(t - kCrossing); }
inline double lower_mean(int t) { return kLowerLevel - kLowerSlope * std::abs(t - kCrossing); }

}  // namespace synthetic_detail

inline SyntheticPanel generate_synthetic(SyntheticKind kind, std::uint64_t seed) {
  namespace sd = synthetic_detail;
  RngStream rng(seed);
  SyntheticPanel out;
  out.length = sd::kLength;
  out.crossing_time = sd::kCrossing;
  const int n_static = 2 * sd::kPerCluster;
  const int n = kind == SyntheticKind::Static ? n_static : n_static + 2;

  out.panel.value_names = {"y1"};
  char buf[16];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "s%02d", i + 1);
    out.panel.ids.emplace_back(buf);
    Eigen::MatrixXd y(sd::kLength, 1);
    const double offset = rng.normal(0.0, sd::kOffsetSd);
    const bool switcher = i >= n_static;
    const int label = (!switcher && i >= sd::kPerCluster) ? 1 : 0;
    for (int t = 0; t < sd::kLength; ++t) {
      double mean;
      if (switcher) {
        mean = t < sd::kCrossing ? sd::upper_mean(t) : sd::lower_mean(t);
      } else {
        mean = label == 0 ? sd::upper_mean(t) : sd::lower_mean(t);
      }
      y(t, 0) = mean + offset + rng.normal(0.0, sd::kNoiseSd);
    }
    out.panel.series.push_back(std::move(y));
    out.labels.push_back(label);
    out.switch_times.push_back(switcher ? sd::kCrossing : -1);
  }
  return out;
}

}  // namespace dynclust
