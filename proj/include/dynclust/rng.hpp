#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

#include "dynclust/errors.hpp"

namespace dynclust {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Seeded random stream. Substreams are derived from the base key, not the
// engine state, so draws are reproducible no matter how work is scheduled
// across threads: every (iteration, block, index) gets its own stream.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : key_(seed), engine_(detail::splitmix64(seed)) {}

  RngStream substream(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    std::uint64_t k = detail::splitmix64(key_ ^ detail::splitmix64(a));
    k = detail::splitmix64(k ^ detail::splitmix64(b));
    k = detail::splitmix64(k ^ detail::splitmix64(c));
    return RngStream(k);
  }

  std::uint64_t seed_key() const { return key_; }

  double uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }

  // Uniform over {0, ..., n-1}.
  int uniform_int(int n) {
    return std::uniform_int_distribution<int>(0, n - 1)(engine_);
  }

  double normal(double mean = 0.0, double sd = 1.0) {
    return std::normal_distribution<double>(mean, sd)(engine_);
  }

  // Gamma with shape/rate parameterization. Draws are clamped away from
  // exact zero: near-flat priors (shape ~ 1e-3) underflow about half of
  // their draws otherwise, and callers take reciprocals.
  double gamma(double shape, double rate) {
    if (!(shape > 0.0) || !(rate > 0.0)) {
      throw InvalidInputError("gamma draw requires positive shape and rate");
    }
    double x = std::gamma_distribution<double>(shape, 1.0 / rate)(engine_);
    if (x < 1e-300) x = 1e-300;
    if (x > 1e300) x = 1e300;
    return x;
  }

  double beta(double a, double b) {
    const double x = gamma(a, 1.0);
    const double y = gamma(b, 1.0);
    return x / (x + y);
  }

  Eigen::VectorXd dirichlet(const Eigen::VectorXd& alpha) {
    Eigen::VectorXd draw(alpha.size());
    double total = 0.0;
    for (int j = 0; j < alpha.size(); ++j) {
      if (!(alpha[j] > 0.0)) {
        throw InvalidInputError("dirichlet draw requires positive parameters");
      }
      draw[j] = std::gamma_distribution<double>(alpha[j], 1.0)(engine_);
      total += draw[j];
    }
    if (total <= 0.0) {
      // All components underflowed; the limit distribution is a one-hot
      // categorical with probabilities proportional to alpha.
      draw.setZero();
      draw[categorical(alpha / alpha.sum())] = 1.0;
      return draw;
    }
    return draw / total;
  }

  // Index draw from unnormalized non-negative weights.
  int categorical(const Eigen::VectorXd& weights) {
    const double total = weights.sum();
    if (!(total > 0.0) || !std::isfinite(total)) {
      throw DegeneratePosteriorError("categorical draw from all-zero weights");
    }
    double u = uniform() * total;
    for (int j = 0; j < weights.size(); ++j) {
      u -= weights[j];
      if (u <= 0.0) return j;
    }
    return static_cast<int>(weights.size()) - 1;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t key_;
  std::mt19937_64 engine_;
};

}  // namespace dynclust
