#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "dynclust/dlm.hpp"
#include "dynclust/errors.hpp"
#include "dynclust/panel.hpp"

namespace dynclust {

inline constexpr double kVarianceFloor = 1e-12;
inline constexpr double kObjectiveDecreaseTol = 1e-10;

// Observations entering one cluster's weighted fit: a set of series sharing
// the panel grid plus a weight per (series, time) entry. Entries below eps_w
// are discarded from that estimation step.
struct WeightedObservations {
  std::vector<const Eigen::MatrixXd*> series;  // each T x m
  Eigen::MatrixXd weights;                     // n_series x T
  double eps_w = kDefaultWeightEpsilon;

  int count() const { return static_cast<int>(series.size()); }
  int T() const { return series.empty() ? 0 : static_cast<int>(series.front()->rows()); }
  int m() const { return series.empty() ? 0 : static_cast<int>(series.front()->cols()); }

  // Weights are n x T per-time memberships; an n x 1 column (one static
  // weight per series) is broadcast across the window.
  static WeightedObservations from_panel(const TimeSeriesPanel& panel,
                                         const Eigen::MatrixXd& weights,
                                         double eps_w = kDefaultWeightEpsilon) {
    WeightedObservations out;
    out.series.reserve(panel.series.size());
    for (const auto& s : panel.series) out.series.push_back(&s);
    out.weights = weights.cols() == 1 && panel.T() > 1
                      ? Eigen::MatrixXd(weights.col(0).replicate(1, panel.T()))
                      : weights;
    out.eps_w = eps_w;
    return out;
  }

  void validate() const {
    if (series.empty()) throw InvalidInputError("weighted fit needs at least one series");
    const int rows = T();
    const int cols = m();
    for (const auto* s : series) {
      if (s == nullptr || s->rows() != rows || s->cols() != cols) {
        throw InvalidInputError("weighted observation series shapes disagree");
      }
    }
    if (weights.rows() != count() || weights.cols() != rows || !weights.allFinite()) {
      throw InvalidInputError("weight matrix does not match the observations");
    }
    if (!(eps_w > 0.0)) throw InvalidInputError("weight threshold must be positive");
  }
};

struct WeightedFitResult {
  StatePath path;                        // smoothed mode + marginal covariances
  DiagonalPrecision phi;
  std::vector<double> objective;         // one entry per evaluation, non-decreasing
  std::vector<Eigen::MatrixXd> w_path;   // evolution variances the fit conditioned on
  int iterations = 0;
  bool converged = false;
};

namespace detail {

// Evolution-plus-initial-state part of the MAP objective for a given
// variance path. Degenerate (rank-deficient) variances contribute over
// their positive eigenspace only, so delta = 1 adds a constant zero.
inline double state_prior_logpdf(const DlmSpec& spec, const Eigen::MatrixXd& theta,
                                 const std::vector<Eigen::MatrixXd>& w_path,
                                 const Eigen::VectorXd& m0, const Eigen::MatrixXd& C0) {
  const int T = static_cast<int>(theta.rows());
  const Eigen::MatrixXd& G = spec.evo_matrix;
  Eigen::MatrixXd R1 = G * C0 * G.transpose() + w_path.front();
  symmetrize(R1);
  double out = gaussian_logpdf_psd(theta.row(0).transpose(), G * m0, R1);
  for (int t = 1; t < T; ++t) {
    out += gaussian_logpdf_psd(theta.row(t).transpose(),
                               G * theta.row(t - 1).transpose(),
                               w_path[static_cast<std::size_t>(t)]);
  }
  return out;
}

struct NormalizedWeights {
  Eigen::MatrixXd scaled;               // weights / max(active weights)
  std::vector<std::vector<int>> active; // per time instant, member indices kept
  int active_count = 0;
};

inline NormalizedWeights normalize_weights(const WeightedObservations& wobs) {
  NormalizedWeights out;
  const int T = wobs.T();
  out.active.resize(static_cast<std::size_t>(T));
  double wmax = 0.0;
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < wobs.count(); ++i) {
      if (wobs.weights(i, t) >= wobs.eps_w) {
        out.active[static_cast<std::size_t>(t)].push_back(i);
        wmax = std::max(wmax, wobs.weights(i, t));
        ++out.active_count;
      }
    }
  }
  if (out.active_count == 0) {
    throw EmptyClusterError("all observation weights fell below the threshold");
  }
  out.scaled = wobs.weights / wmax;
  return out;
}

inline std::vector<ObsBlock> weighted_blocks(const DlmSpec& spec,
                                             const WeightedObservations& wobs,
                                             const NormalizedWeights& nw,
                                             const DiagonalPrecision& phi) {
  const int T = wobs.T();
  const int m = wobs.m();
  const Eigen::VectorXd base_var = phi.variances();
  std::vector<ObsBlock> blocks(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const auto& act = nw.active[static_cast<std::size_t>(t)];
    ObsBlock& block = blocks[static_cast<std::size_t>(t)];
    const int rows = static_cast<int>(act.size()) * m;
    block.y.resize(rows);
    block.F.resize(rows, spec.state_dim());
    block.var.resize(rows);
    int row = 0;
    for (int i : act) {
      block.y.segment(row, m) = wobs.series[static_cast<std::size_t>(i)]->row(t).transpose();
      block.F.middleRows(row, m) = spec.obs_matrix;
      block.var.segment(row, m) = base_var / nw.scaled(i, t);
      row += m;
    }
  }
  return blocks;
}

}  // namespace detail

// Weighted observation log-likelihood term of the fit objective, using the
// normalized weights the theta step conditions on.
inline double weighted_obs_loglik(const DlmSpec& spec, const WeightedObservations& wobs,
                                  const detail::NormalizedWeights& nw,
                                  const Eigen::MatrixXd& theta, const DiagonalPrecision& phi) {
  const int T = wobs.T();
  const int m = wobs.m();
  double out = 0.0;
  Eigen::VectorXd log_phi = phi.phi.array().log();
  for (int t = 0; t < T; ++t) {
    const Eigen::VectorXd mean = spec.obs_matrix * theta.row(t).transpose();
    for (int i : nw.active[static_cast<std::size_t>(t)]) {
      const Eigen::VectorXd r =
          wobs.series[static_cast<std::size_t>(i)]->row(t).transpose() - mean;
      double term = 0.0;
      for (int l = 0; l < m; ++l) {
        term += 0.5 * (log_phi[l] - kLog2Pi) - 0.5 * phi.phi[l] * r[l] * r[l];
      }
      out += nw.scaled(i, t) * term;
    }
  }
  return out;
}

// Full objective one coordinate-descent pass ascends: weighted observation
// term + state evolution term + the t=1 state prior, all under a fixed
// evolution-variance path.
inline double weighted_fit_objective(const DlmSpec& spec, const WeightedObservations& wobs,
                                     const Eigen::MatrixXd& theta, const DiagonalPrecision& phi,
                                     const std::vector<Eigen::MatrixXd>& w_path) {
  const auto nw = detail::normalize_weights(wobs);
  return weighted_obs_loglik(spec, wobs, nw, theta, phi) +
         detail::state_prior_logpdf(spec, theta, w_path, default_prior_mean(spec.state_dim()),
                                    default_prior_cov(spec.state_dim()));
}

namespace detail {

inline Eigen::VectorXd weighted_variance_estimate(const DlmSpec& spec,
                                                  const WeightedObservations& wobs,
                                                  const NormalizedWeights& nw,
                                                  const Eigen::MatrixXd& theta) {
  const int m = wobs.m();
  Eigen::VectorXd num = Eigen::VectorXd::Zero(m);
  double denom = 0.0;
  for (int t = 0; t < wobs.T(); ++t) {
    const Eigen::VectorXd mean = spec.obs_matrix * theta.row(t).transpose();
    for (int i : nw.active[static_cast<std::size_t>(t)]) {
      const Eigen::VectorXd r =
          wobs.series[static_cast<std::size_t>(i)]->row(t).transpose() - mean;
      num += nw.scaled(i, t) * r.cwiseProduct(r);
      denom += nw.scaled(i, t);
    }
  }
  return (num / denom).cwiseMax(kVarianceFloor);
}

}  // namespace detail

// Maximum a posteriori fit of a single weighted DLM by coordinate descent:
// theta given V by forward filtering + backward mode on the weighted tiling,
// V given theta by the weighted variance estimator.
//
// The evolution variances follow the discount relation W = W(V); keeping
// that coupling live is what pins the MAP away from the V -> 0 edge, but it
// also means the objective functional changes while V moves. The fit
// therefore warms up with the coupling live (no objective reporting) until
// the precision stabilizes, then freezes the variance path and runs exact
// block ascent on the resulting fixed objective: weighted observation term
// + state evolution term + t=1 state prior. The reported path is
// non-decreasing; an iteration that fails to improve it is rolled back and
// treated as convergence, and a decrease beyond the numerical slack raises
// a ConsistencyError. Callers that need one fixed functional across several
// calls (EM) pass their own variance path via frozen_w, which skips the
// warm-up. theta0 is accepted for interface symmetry; the first theta step
// only needs phi0.
inline WeightedFitResult fit_weighted_dlm(const DlmSpec& spec, const WeightedObservations& wobs,
                                          const Eigen::MatrixXd& theta0,
                                          const DiagonalPrecision& phi0, double tol, int max_iter,
                                          const std::vector<Eigen::MatrixXd>* frozen_w = nullptr) {
  spec.validate();
  wobs.validate();
  if (wobs.m() != spec.obs_dim()) {
    throw InvalidInputError("observation dimension does not match the spec");
  }
  if (!(tol > 0.0)) throw InvalidInputError("tolerance must be positive");
  if (max_iter < 1) throw InvalidInputError("max_iter must be at least 1");
  (void)theta0;

  const int T = wobs.T();
  const int m = wobs.m();
  const int p = spec.state_dim();
  const auto nw = detail::normalize_weights(wobs);
  const Eigen::VectorXd m0 = default_prior_mean(p);
  const Eigen::MatrixXd C0 = default_prior_cov(p);

  DiagonalPrecision phi = phi0.dim() == 0 ? DiagonalPrecision::ones(m) : phi0;
  if (phi.dim() != m) {
    throw InvalidInputError("initial precision dimension does not match the observations");
  }
  phi.validate();

  WeightedFitResult out;
  if (frozen_w) {
    if (static_cast<int>(frozen_w->size()) != T) {
      throw InvalidInputError("frozen evolution variance path has wrong length");
    }
    out.w_path = *frozen_w;
  } else {
    // Warm-up with the discount coupling live until the precision settles.
    for (int iter = 0; iter < 40; ++iter) {
      const auto blocks = detail::weighted_blocks(spec, wobs, nw, phi);
      const FilterOutput filt = forward_filter(spec, blocks, m0, C0);
      const StatePath path = backward_smooth_mode(spec, filt);
      const Eigen::VectorXd variance = detail::weighted_variance_estimate(spec, wobs, nw, path.theta);
      const Eigen::VectorXd next = variance.cwiseInverse();
      const double change = ((next - phi.phi).cwiseQuotient(phi.phi)).cwiseAbs().maxCoeff();
      phi.phi = next;
      if (change < 1e-3) break;
    }
    const auto blocks = detail::weighted_blocks(spec, wobs, nw, phi);
    out.w_path = forward_filter(spec, blocks, m0, C0).W;
  }

  WeightedFitResult best;
  for (int iter = 0; iter < max_iter; ++iter) {
    const auto blocks = detail::weighted_blocks(spec, wobs, nw, phi);
    const FilterOutput filt = forward_filter(spec, blocks, m0, C0, &out.w_path);
    out.path = backward_smooth_mode(spec, filt);
    phi.phi = detail::weighted_variance_estimate(spec, wobs, nw, out.path.theta).cwiseInverse();

    const double objective =
        weighted_obs_loglik(spec, wobs, nw, out.path.theta, phi) +
        detail::state_prior_logpdf(spec, out.path.theta, out.w_path, m0, C0);
    out.iterations = iter + 1;
    if (!out.objective.empty()) {
      const double prev = out.objective.back();
      if (objective <= prev) {
        if (objective < prev - std::max(1e-8, std::abs(prev) * 1e-12)) {
          throw ConsistencyError("weighted fit objective decreased");
        }
        out.path = best.path;  // roll back the non-improving pass
        phi = best.phi;
        out.converged = true;
        break;
      }
    }
    out.objective.push_back(objective);
    best.path = out.path;
    best.phi = phi;
    const std::size_t len = out.objective.size();
    if (len >= 2) {
      const double prev = out.objective[len - 2];
      if (std::abs(objective - prev) <= tol * std::max(1.0, std::abs(prev))) {
        out.converged = true;
        break;
      }
    }
  }
  out.phi = phi;
  return out;
}

}  // namespace dynclust
