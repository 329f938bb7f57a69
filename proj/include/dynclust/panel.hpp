#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "dynclust/errors.hpp"

namespace dynclust {

// A panel of n time series observed on a shared time grid: each series is a
// T x m matrix (rows = time instants, columns = observation dimensions).
struct TimeSeriesPanel {
  std::vector<std::string> ids;               // size n, kept sorted on load
  std::vector<Eigen::MatrixXd> series;        // n matrices, each T x m
  std::vector<std::string> value_names;       // size m

  int n() const { return static_cast<int>(series.size()); }
  int T() const { return series.empty() ? 0 : static_cast<int>(series.front().rows()); }
  int m() const { return series.empty() ? 0 : static_cast<int>(series.front().cols()); }

  void validate() const {
    if (series.empty()) throw InvalidInputError("panel holds no series");
    if (ids.size() != series.size()) {
      throw InvalidInputError("panel ids and series counts differ");
    }
    const auto rows = series.front().rows();
    const auto cols = series.front().cols();
    if (rows < 1 || cols < 1) throw InvalidInputError("panel series must be non-empty");
    for (std::size_t i = 0; i < series.size(); ++i) {
      if (series[i].rows() != rows || series[i].cols() != cols) {
        throw InvalidInputError("panel series '" + ids[i] + "' has mismatched shape");
      }
      if (!series[i].allFinite()) {
        throw InvalidInputError("panel series '" + ids[i] + "' holds non-finite values");
      }
    }
    if (!value_names.empty() && value_names.size() != static_cast<std::size_t>(cols)) {
      throw InvalidInputError("panel value names do not match dimension count");
    }
  }
};

}  // namespace dynclust
