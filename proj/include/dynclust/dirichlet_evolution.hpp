#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "dynclust/errors.hpp"
#include "dynclust/rng.hpp"

namespace dynclust {

// Filtered Dirichlet parameters of one series' membership process:
// c_t = delta * c_{t-1} + e_{z_t}.
struct EdpState {
  Eigen::MatrixXd c;   // T x k, strictly positive
  Eigen::VectorXd c0;  // k
  double delta = 1.0;

  int T() const { return static_cast<int>(c.rows()); }
  int k() const { return static_cast<int>(c.cols()); }
};

namespace detail {

inline void check_edp_inputs(const Eigen::VectorXd& c0, double delta,
                             const std::vector<int>& z_path) {
  if (c0.size() < 1) throw InvalidInputError("EDP prior is empty");
  for (int j = 0; j < c0.size(); ++j) {
    if (!(c0[j] > 0.0) || !std::isfinite(c0[j])) {
      throw InvalidInputError("EDP prior entries must be positive and finite");
    }
  }
  if (!(delta > 0.0) || delta > 1.0) {
    throw InvalidInputError("EDP discount must lie in (0, 1]");
  }
  if (z_path.empty()) throw InvalidInputError("EDP needs at least one assignment");
  for (int z : z_path) {
    if (z < 0 || z >= c0.size()) {
      throw InvalidInputError("EDP assignment outside 1..k");
    }
  }
}

// Mode of Dirichlet(alpha) when interior (all alpha > 1); mean otherwise,
// which keeps point estimates strictly inside the simplex.
inline Eigen::VectorXd dirichlet_mode_or_mean(const Eigen::VectorXd& alpha) {
  const double total = alpha.sum();
  if (alpha.minCoeff() > 1.0) {
    return (alpha.array() - 1.0) / (total - static_cast<double>(alpha.size()));
  }
  return alpha / total;
}

inline double beta_mode_or_mean(double a, double b) {
  if (a > 1.0 && b > 1.0) return (a - 1.0) / (a + b - 2.0);
  return a / (a + b);
}

}  // namespace detail

// Conjugate forward filter of Theorem-style Dirichlet evolution: the prior
// at t is Dirichlet(delta * c_{t-1}) and observing z_t adds one count.
inline EdpState edp_forward_filter(const Eigen::VectorXd& c0, double delta,
                                   const std::vector<int>& z_path) {
  detail::check_edp_inputs(c0, delta, z_path);
  const int T = static_cast<int>(z_path.size());
  const int k = static_cast<int>(c0.size());
  EdpState state;
  state.c0 = c0;
  state.delta = delta;
  state.c.resize(T, k);
  Eigen::VectorXd prev = c0;
  for (int t = 0; t < T; ++t) {
    Eigen::VectorXd cur = delta * prev;
    cur[z_path[static_cast<std::size_t>(t)]] += 1.0;
    state.c.row(t) = cur.transpose();
    prev = std::move(cur);
  }
  return state;
}

// One joint draw of the weight path with the backward mixing draws retained:
// eta_{t-1} = S_t eta_t + (1 - S_t) u_t.
struct EdpBackwardDraw {
  Eigen::MatrixXd eta;  // T x k
  Eigen::VectorXd s;    // T, entries 1..T-1 hold S_{t+1} (index t)
  Eigen::MatrixXd u;    // T x k, same alignment
};

inline EdpBackwardDraw edp_backward_sample_detailed(const EdpState& state, RngStream& rng) {
  const int T = state.T();
  const int k = state.k();
  EdpBackwardDraw draw;
  draw.eta.resize(T, k);
  draw.s = Eigen::VectorXd::Ones(T);
  draw.u = Eigen::MatrixXd::Zero(T, k);
  Eigen::VectorXd cur = rng.dirichlet(state.c.row(T - 1).transpose());
  draw.eta.row(T - 1) = cur.transpose();
  for (int t = T - 1; t >= 1; --t) {
    if (state.delta == 1.0) {
      draw.eta.row(t - 1) = cur.transpose();
      continue;
    }
    const Eigen::VectorXd c_prev = state.c.row(t - 1).transpose();
    const double total = c_prev.sum();
    const double s = rng.beta(state.delta * total, (1.0 - state.delta) * total);
    const Eigen::VectorXd u = rng.dirichlet((1.0 - state.delta) * c_prev);
    cur = s * cur + (1.0 - s) * u;
    draw.s[t - 1] = s;
    draw.u.row(t - 1) = u.transpose();
    draw.eta.row(t - 1) = cur.transpose();
  }
  return draw;
}

// Joint draw of the weight path from its smoothing distribution: draw
// eta_T ~ Dirichlet(c_T), then walk backwards mixing with an innovation
//   eta_{t-1} = S_t eta_t + (1 - S_t) u,
//   S_t ~ Beta(delta 1'c_{t-1}, (1-delta) 1'c_{t-1}),  u ~ Dirichlet((1-delta) c_{t-1}).
// delta = 1 degenerates to S = 1, i.e. a constant path.
inline Eigen::MatrixXd edp_backward_sample(const EdpState& state, RngStream& rng) {
  return edp_backward_sample_detailed(state, rng).eta;
}

// Deterministic analogue of the backward sampler: substitute the mode of
// each draw (falling back to the mean whenever the mode sits on the simplex
// boundary) into the same backward identity.
inline Eigen::MatrixXd edp_backward_mode(const EdpState& state) {
  const int T = state.T();
  const int k = state.k();
  Eigen::MatrixXd eta(T, k);
  Eigen::VectorXd cur = detail::dirichlet_mode_or_mean(state.c.row(T - 1).transpose());
  eta.row(T - 1) = cur.transpose();
  for (int t = T - 1; t >= 1; --t) {
    if (state.delta == 1.0) {
      eta.row(t - 1) = cur.transpose();
      continue;
    }
    const Eigen::VectorXd c_prev = state.c.row(t - 1).transpose();
    const double total = c_prev.sum();
    const double s = detail::beta_mode_or_mean(state.delta * total, (1.0 - state.delta) * total);
    const Eigen::VectorXd u = detail::dirichlet_mode_or_mean((1.0 - state.delta) * c_prev);
    cur = s * cur + (1.0 - s) * u;
    eta.row(t - 1) = cur.transpose();
  }
  return eta;
}

// Marginal log-likelihood of the discount given an assignment path, with the
// weight path integrated out:
//   log prod_t [delta^{t-1} c0_{z_t} + sum_{l=0}^{t-2} delta^l 1(z_{t-1-l} = z_t)]
//            / [delta^{t-1} sum_j c0_j + (1 - delta^{t-1})/(1 - delta)]
// evaluated in log space; delta = 1 uses the algebraic limit (t-1) of the
// geometric sum. Equals the summed log sequential predictive probabilities
// of the forward filter.
inline double delta_marginal_loglik(const Eigen::VectorXd& c0, double delta,
                                    const std::vector<int>& z_path) {
  detail::check_edp_inputs(c0, delta, z_path);
  const int T = static_cast<int>(z_path.size());
  const double c0_sum = c0.sum();
  double loglik = 0.0;
  double delta_tm1 = 1.0;  // delta^{t-1}
  for (int t = 0; t < T; ++t) {
    const int zt = z_path[static_cast<std::size_t>(t)];
    double num = delta_tm1 * c0[zt];
    double geo = 0.0;
    double delta_l = 1.0;
    for (int l = 0; l <= t - 1; ++l) {
      if (z_path[static_cast<std::size_t>(t - 1 - l)] == zt) num += delta_l;
      geo += delta_l;
      delta_l *= delta;
    }
    const double den = delta_tm1 * c0_sum + geo;
    loglik += std::log(num) - std::log(den);
    delta_tm1 *= delta;
  }
  return loglik;
}

// One draw of delta by sampling-importance-resampling with a uniform
// proposal; log-weights are shifted by their maximum before exponentiating.
inline double delta_sir_draw(const Eigen::VectorXd& c0, const std::vector<int>& z_path,
                             int n_proposals, RngStream& rng) {
  if (n_proposals < 1) throw InvalidInputError("SIR needs at least one proposal");
  Eigen::VectorXd proposals(n_proposals);
  Eigen::VectorXd logw(n_proposals);
  for (int i = 0; i < n_proposals; ++i) {
    double d = rng.uniform();
    if (d <= 0.0) d = 1e-12;  // keep the proposal inside (0, 1)
    proposals[i] = d;
    logw[i] = delta_marginal_loglik(c0, d, z_path);
  }
  if (n_proposals == 1) return proposals[0];
  const double shift = logw.maxCoeff();
  const Eigen::VectorXd weights = (logw.array() - shift).exp();
  return proposals[rng.categorical(weights)];
}

inline std::vector<double> default_delta_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 20; ++i) grid.push_back(0.05 * i);
  return grid;
}

// Grid maximizer of the marginal log-likelihood; ties go to the larger delta.
inline double delta_grid_optimize(const Eigen::VectorXd& c0, const std::vector<int>& z_path,
                                  const std::vector<double>& grid) {
  if (grid.empty()) throw InvalidInputError("delta grid is empty");
  double best_delta = 0.0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (double d : grid) {
    if (!(d > 0.0) || d > 1.0) throw InvalidInputError("delta grid values must lie in (0, 1]");
    const double value = delta_marginal_loglik(c0, d, z_path);
    if (value > best_value || (value == best_value && d > best_delta)) {
      best_value = value;
      best_delta = d;
    }
  }
  return best_delta;
}

// Same objective averaged over several assignment paths (used by the SEM
// delta update, which marginalizes the dummies by Monte Carlo).
inline double delta_grid_optimize_mean(const Eigen::VectorXd& c0,
                                       const std::vector<std::vector<int>>& z_paths,
                                       const std::vector<double>& grid) {
  if (grid.empty()) throw InvalidInputError("delta grid is empty");
  if (z_paths.empty()) throw InvalidInputError("delta grid update needs assignment paths");
  double best_delta = 0.0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (double d : grid) {
    double value = 0.0;
    for (const auto& z : z_paths) value += delta_marginal_loglik(c0, d, z);
    value /= static_cast<double>(z_paths.size());
    if (value > best_value || (value == best_value && d > best_delta)) {
      best_value = value;
      best_delta = d;
    }
  }
  return best_delta;
}

}  // namespace dynclust
