#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dynclust/dirichlet_evolution.hpp"
#include "dynclust/dlm.hpp"
#include "dynclust/errors.hpp"
#include "dynclust/panel.hpp"
#include "dynclust/parallel.hpp"
#include "dynclust/rng.hpp"
#include "dynclust/static_mixture.hpp"
#include "dynclust/weighted_fit.hpp"

namespace dynclust {

struct DynamicMixtureModel {
  const TimeSeriesPanel* panel = nullptr;
  std::vector<DlmSpec> specs;
  Eigen::MatrixXd edp_prior;  // c0, n x k (one prior row per series)
  Eigen::VectorXd delta;      // n, each in (0, 1]
  double eps_w = kDefaultWeightEpsilon;

  int k() const { return static_cast<int>(specs.size()); }

  void validate() const {
    if (panel == nullptr) throw InvalidInputError("model has no panel");
    panel->validate();
    if (specs.empty()) throw InvalidInputError("model needs at least one cluster spec");
    for (const auto& spec : specs) {
      spec.validate();
      if (spec.obs_dim() != panel->m()) {
        throw InvalidInputError("cluster spec dimension does not match the panel");
      }
    }
    if (edp_prior.rows() != panel->n() || edp_prior.cols() != k()) {
      throw InvalidInputError("EDP prior must be n x k");
    }
    if ((edp_prior.array() <= 0.0).any()) {
      throw InvalidInputError("EDP prior entries must be positive");
    }
    if (delta.size() != panel->n()) throw InvalidInputError("delta must hold one value per series");
    for (int i = 0; i < delta.size(); ++i) {
      if (!(delta[i] > 0.0) || delta[i] > 1.0) {
        throw InvalidInputError("delta entries must lie in (0, 1]");
      }
    }
  }

  StaticMixtureModel as_static() const {
    StaticMixtureModel s;
    s.panel = panel;
    s.specs = specs;
    s.dirichlet_prior = Eigen::VectorXd::Ones(k());
    s.eps_w = eps_w;
    return s;
  }
};

struct DynamicParams {
  std::vector<ClusterParams> clusters;
  std::vector<Eigen::MatrixXd> eta;  // n matrices, T x k
  std::vector<std::vector<int>> z;   // n paths of length T
  Eigen::VectorXd delta;             // n
};

struct DynamicGibbsDraw {
  std::vector<Eigen::MatrixXd> eta;
  std::vector<std::vector<int>> z;
  std::vector<Eigen::MatrixXd> theta;
  std::vector<Eigen::VectorXd> phi;
  Eigen::VectorXd delta;
};

struct DynamicGibbsTrace {
  std::vector<DynamicGibbsDraw> draws;
  std::uint64_t seed = 0;
  int iterations = 0;
  int burn_in = 0;
  int thin = 1;
  bool delta_estimated = false;
  std::vector<double> loglik_path;  // complete-data observation log-likelihood
  std::vector<std::string> warnings;
};

// P(Z_it = j | eta_it, theta, phi, y_it): a single-instant posterior, shifted
// by the maximum log-density before exponentiating.
inline Eigen::VectorXd membership_posterior_t(const DynamicMixtureModel& model,
                                              const DynamicParams& params, int i, int t) {
  model.validate();
  if (i < 0 || i >= model.panel->n()) throw InvalidInputError("series index out of range");
  if (t < 0 || t >= model.panel->T()) throw InvalidInputError("time index out of range");
  const auto table = log_density_table(model.as_static(), params.clusters);
  return detail::guarded_posterior(
      detail::log_or_neg_inf(params.eta[static_cast<std::size_t>(i)].row(t).transpose()),
      table[static_cast<std::size_t>(i)].col(t));
}

// phi_jl | . ~ Gamma(a0 + N_j/2, b0 + SSR_jl/2) with N_j the number of
// (series, instant) pairs currently assigned to cluster j; empty clusters
// draw from the prior.
inline std::vector<Eigen::VectorXd> gibbs_step_phi_dynamic(
    const DynamicMixtureModel& model, const std::vector<std::vector<int>>& z,
    const std::vector<ClusterParams>& clusters, RngStream& rng,
    std::vector<std::string>* warnings = nullptr) {
  const TimeSeriesPanel& panel = *model.panel;
  const int k = model.k();
  const int m = panel.m();
  const int T = panel.T();
  std::vector<Eigen::VectorXd> phis(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const Eigen::MatrixXd mean =
        clusters[static_cast<std::size_t>(j)].theta *
        model.specs[static_cast<std::size_t>(j)].obs_matrix.transpose();
    Eigen::VectorXd ssr = Eigen::VectorXd::Zero(m);
    int count = 0;
    for (int i = 0; i < panel.n(); ++i) {
      for (int t = 0; t < T; ++t) {
        if (z[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] != j) continue;
        ++count;
        const Eigen::VectorXd r =
            panel.series[static_cast<std::size_t>(i)].row(t).transpose() -
            mean.row(t).transpose();
        ssr += r.cwiseProduct(r);
      }
    }
    Eigen::VectorXd draw(m);
    const double shape = kPhiPriorShape + 0.5 * static_cast<double>(count);
    for (int l = 0; l < m; ++l) {
      if (count > 0 && ssr[l] == 0.0 && warnings != nullptr) {
        warnings->push_back("degenerate zero residual sum for cluster " + std::to_string(j + 1));
      }
      const double rate = std::max(kPhiPriorRate + 0.5 * ssr[l], kGammaRateFloor);
      draw[l] = rng.gamma(count > 0 ? shape : kPhiPriorShape, count > 0 ? rate : kPhiPriorRate);
    }
    phis[static_cast<std::size_t>(j)] = draw;
  }
  return phis;
}

namespace detail {

// Per-time weights for cluster j collected from the membership paths.
inline Eigen::MatrixXd cluster_weight_matrix(const std::vector<Eigen::MatrixXd>& eta, int j) {
  const int n = static_cast<int>(eta.size());
  const int T = static_cast<int>(eta.front().rows());
  Eigen::MatrixXd w(n, T);
  for (int i = 0; i < n; ++i) w.row(i) = eta[static_cast<std::size_t>(i)].col(j).transpose();
  return w;
}

inline Eigen::MatrixXd indicator_weight_matrix(const std::vector<std::vector<int>>& z, int j,
                                               int T) {
  const int n = static_cast<int>(z.size());
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, T);
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < T; ++t) {
      if (z[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] == j) w(i, t) = 1.0;
    }
  }
  return w;
}

// Observed-data log-likelihood sum_{i,t} log sum_j eta_itj N(y_it | j).
inline double observed_loglik(const std::vector<Eigen::MatrixXd>& table,
                              const std::vector<Eigen::MatrixXd>& eta) {
  double out = 0.0;
  const int n = static_cast<int>(table.size());
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd& dens = table[static_cast<std::size_t>(i)];  // k x T
    const Eigen::MatrixXd& e = eta[static_cast<std::size_t>(i)];       // T x k
    for (int t = 0; t < dens.cols(); ++t) {
      const Eigen::VectorXd logw =
          log_or_neg_inf(e.row(t).transpose()) + Eigen::VectorXd(dens.col(t));
      const double shift = logw.maxCoeff();
      out += shift + std::log((logw.array() - shift).exp().sum());
    }
  }
  return out;
}

inline void apply_permutation_dynamic(DynamicParams& params, const std::vector<int>& perm) {
  const int k = static_cast<int>(perm.size());
  std::vector<ClusterParams> clusters(static_cast<std::size_t>(k));
  std::vector<int> inverse(static_cast<std::size_t>(k));
  for (int slot = 0; slot < k; ++slot) {
    clusters[static_cast<std::size_t>(slot)] =
        params.clusters[static_cast<std::size_t>(perm[static_cast<std::size_t>(slot)])];
    inverse[static_cast<std::size_t>(perm[static_cast<std::size_t>(slot)])] = slot;
  }
  params.clusters = std::move(clusters);
  for (auto& e : params.eta) {
    Eigen::MatrixXd shuffled(e.rows(), k);
    for (int slot = 0; slot < k; ++slot) shuffled.col(slot) = e.col(perm[static_cast<std::size_t>(slot)]);
    e = std::move(shuffled);
  }
  for (auto& zi : params.z) {
    for (auto& zt : zi) zt = inverse[static_cast<std::size_t>(zt)];
  }
}

}  // namespace detail

inline void relabel(DynamicParams& params, const std::vector<DlmSpec>& specs,
                    const RelabelRef& ref) {
  const auto perm = detail::relabel_permutation(params.clusters, specs, ref);
  detail::apply_permutation_dynamic(params, perm);
}

inline void relabel(DynamicGibbsTrace& trace, const std::vector<DlmSpec>& specs,
                    const RelabelRef& ref) {
  for (auto& draw : trace.draws) {
    DynamicParams tmp;
    tmp.clusters.resize(draw.theta.size());
    for (std::size_t j = 0; j < draw.theta.size(); ++j) {
      tmp.clusters[j] = ClusterParams{draw.theta[j], draw.phi[j]};
    }
    tmp.eta = std::move(draw.eta);
    tmp.z = std::move(draw.z);
    const auto perm = detail::relabel_permutation(tmp.clusters, specs, ref);
    detail::apply_permutation_dynamic(tmp, perm);
    draw.eta = std::move(tmp.eta);
    draw.z = std::move(tmp.z);
    for (std::size_t j = 0; j < draw.theta.size(); ++j) {
      draw.theta[j] = std::move(tmp.clusters[j].theta);
      draw.phi[j] = std::move(tmp.clusters[j].phi);
    }
  }
}

struct DynamicGibbsOptions {
  int iterations = 2000;
  int burn_in = 500;
  int thin = 1;
  std::uint64_t seed = 0;
  bool estimate_delta = false;
  int sir_proposals = 200;
  RelabelRef relabel;
};

// Gibbs sampler for the dynamic mixture: per iteration draw every Z_it, run
// the EDP forward filter / backward sampler per series, then draw phi and
// theta per cluster with per-time tiling, optionally refreshing delta by SIR.
inline DynamicGibbsTrace run_gibbs_dynamic(const DynamicMixtureModel& model,
                                           const DynamicParams& init,
                                           const DynamicGibbsOptions& opt) {
  model.validate();
  if (opt.iterations <= opt.burn_in || opt.burn_in < 0 || opt.thin < 1) {
    throw InvalidInputError("gibbs run needs iterations > burn_in >= 0 and thin >= 1");
  }
  const TimeSeriesPanel& panel = *model.panel;
  const int n = panel.n();
  const int T = panel.T();
  const int k = model.k();
  const StaticMixtureModel static_view = model.as_static();

  DynamicParams params = init;
  RngStream root(opt.seed);
  DynamicGibbsTrace trace;
  trace.seed = opt.seed;
  trace.iterations = opt.iterations;
  trace.burn_in = opt.burn_in;
  trace.thin = opt.thin;
  trace.delta_estimated = opt.estimate_delta;

  auto table = log_density_table(static_view, params.clusters);
  for (int it = 0; it < opt.iterations; ++it) {
    const std::uint64_t step = static_cast<std::uint64_t>(it);

    // Z and eta blocks, series by series.
    parallel_for(n, [&](int i) {
      RngStream sub = root.substream(0x6401, step, static_cast<std::uint64_t>(i));
      const Eigen::MatrixXd& dens = table[static_cast<std::size_t>(i)];
      auto& z_i = params.z[static_cast<std::size_t>(i)];
      for (int t = 0; t < T; ++t) {
        const Eigen::VectorXd probs = detail::guarded_posterior(
            detail::log_or_neg_inf(params.eta[static_cast<std::size_t>(i)].row(t).transpose()),
            dens.col(t));
        z_i[static_cast<std::size_t>(t)] = sub.categorical(probs);
      }
      const EdpState state =
          edp_forward_filter(model.edp_prior.row(i).transpose(), params.delta[i], z_i);
      params.eta[static_cast<std::size_t>(i)] = edp_backward_sample(state, sub);
    });

    // phi per cluster from the per-time member sets.
    {
      RngStream sub = root.substream(0x6402, step);
      const auto phis =
          gibbs_step_phi_dynamic(model, params.z, params.clusters, sub, &trace.warnings);
      for (int j = 0; j < k; ++j) {
        params.clusters[static_cast<std::size_t>(j)].phi = phis[static_cast<std::size_t>(j)];
      }
    }

    // theta per cluster with per-time replicate tiling.
    parallel_for(k, [&](int j) {
      const DlmSpec& spec = model.specs[static_cast<std::size_t>(j)];
      std::vector<const Eigen::MatrixXd*> members;
      members.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) members.push_back(&panel.series[static_cast<std::size_t>(i)]);
      const Eigen::MatrixXd w = detail::indicator_weight_matrix(params.z, j, T);
      auto tiled = tile_replicates(spec, members, w,
                                   DiagonalPrecision(params.clusters[static_cast<std::size_t>(j)].phi),
                                   model.eps_w);
      const FilterOutput filt =
          forward_filter(spec, tiled.blocks, default_prior_mean(spec.state_dim()),
                         default_prior_cov(spec.state_dim()));
      RngStream sub = root.substream(0x6403, step, static_cast<std::uint64_t>(j));
      params.clusters[static_cast<std::size_t>(j)].theta = backward_sample(spec, filt, sub);
    });

    // Optional delta refresh.
    if (opt.estimate_delta) {
      parallel_for(n, [&](int i) {
        RngStream sub = root.substream(0x6404, step, static_cast<std::uint64_t>(i));
        params.delta[i] = delta_sir_draw(model.edp_prior.row(i).transpose(),
                                         params.z[static_cast<std::size_t>(i)],
                                         opt.sir_proposals, sub);
      });
    }

    table = log_density_table(static_view, params.clusters);
    {
      double ll = 0.0;
      for (int i = 0; i < n; ++i) {
        for (int t = 0; t < T; ++t) {
          const int zit = params.z[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
          ll += std::log(params.eta[static_cast<std::size_t>(i)](t, zit)) +
                table[static_cast<std::size_t>(i)](zit, t);
        }
      }
      trace.loglik_path.push_back(ll);
    }

    if (it >= opt.burn_in && (it - opt.burn_in) % opt.thin == 0) {
      DynamicGibbsDraw draw;
      draw.eta = params.eta;
      draw.z = params.z;
      draw.delta = params.delta;
      draw.theta.reserve(static_cast<std::size_t>(k));
      draw.phi.reserve(static_cast<std::size_t>(k));
      for (int j = 0; j < k; ++j) {
        draw.theta.push_back(params.clusters[static_cast<std::size_t>(j)].theta);
        draw.phi.push_back(params.clusters[static_cast<std::size_t>(j)].phi);
      }
      trace.draws.push_back(std::move(draw));
    }
  }
  relabel(trace, model.specs, opt.relabel);
  return trace;
}

struct SemOptions {
  int mc_size = 10;  // M
  double tol = 1e-6;
  int max_iter = 500;
  double inner_tol = 1e-9;
  int inner_max_iter = 200;
  bool estimate_delta = false;
  std::vector<double> delta_grid = default_delta_grid();
  std::uint64_t seed = 0;
};

struct DynamicEstimate {
  DynamicParams params;
  std::vector<double> loglik_path;  // observed-data log-likelihood per iteration
  int iterations = 0;
  bool converged = false;
  std::vector<std::vector<Eigen::MatrixXd>> smooth_cov;  // per cluster
  // SEM only: entrywise standard error of the Monte Carlo weight average in
  // the final iteration (sd of the M mode paths / sqrt(M)).
  std::vector<Eigen::MatrixXd> eta_mc_se;
};

namespace detail {

inline double relative_param_change(const DynamicParams& prev, const DynamicParams& cur) {
  double change = 0.0;
  for (std::size_t j = 0; j < cur.clusters.size(); ++j) {
    change = std::max(change, (cur.clusters[j].theta - prev.clusters[j].theta).norm() /
                                  (1.0 + prev.clusters[j].theta.norm()));
    change = std::max(change, (cur.clusters[j].phi - prev.clusters[j].phi).norm() /
                                  (1.0 + prev.clusters[j].phi.norm()));
  }
  for (std::size_t i = 0; i < cur.eta.size(); ++i) {
    change = std::max(change, (cur.eta[i] - prev.eta[i]).cwiseAbs().maxCoeff());
  }
  return change;
}

inline void fill_modal_assignments(DynamicParams& params) {
  const int n = static_cast<int>(params.eta.size());
  const int T = static_cast<int>(params.eta.front().rows());
  params.z.assign(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(T), 0));
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < T; ++t) {
      int arg = 0;
      params.eta[static_cast<std::size_t>(i)].row(t).maxCoeff(&arg);
      params.z[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] = arg;
    }
  }
}

}  // namespace detail

// Stochastic EM: simulate M assignment trajectories per series, push each
// through the EDP forward filter and backward mode, average the M mode paths
// (renormalizing rows), optionally refresh delta on the simulated
// trajectories, then refit each cluster with the averaged per-time weights.
inline DynamicEstimate sem_estimate(const DynamicMixtureModel& model, const DynamicParams& init,
                                    const SemOptions& opt) {
  model.validate();
  if (opt.mc_size < 1) throw InvalidInputError("SEM needs at least one Monte Carlo draw");
  if (!(opt.tol > 0.0) || opt.max_iter < 1) {
    throw InvalidInputError("SEM needs a positive tolerance and max_iter >= 1");
  }
  const TimeSeriesPanel& panel = *model.panel;
  const int n = panel.n();
  const int T = panel.T();
  const int k = model.k();
  const StaticMixtureModel static_view = model.as_static();
  RngStream root(opt.seed);

  DynamicEstimate out;
  out.params = init;
  out.smooth_cov.resize(static_cast<std::size_t>(k));
  out.eta_mc_se.assign(static_cast<std::size_t>(n), Eigen::MatrixXd::Zero(T, k));

  auto table = log_density_table(static_view, out.params.clusters);
  for (int iter = 0; iter < opt.max_iter; ++iter) {
    const DynamicParams prev = out.params;
    const std::uint64_t step = static_cast<std::uint64_t>(iter);

    parallel_for(n, [&](int i) {
      RngStream sub = root.substream(0x7301, step, static_cast<std::uint64_t>(i));
      const Eigen::MatrixXd& dens = table[static_cast<std::size_t>(i)];
      // Per-instant sampling probabilities under the previous parameters.
      Eigen::MatrixXd probs(T, k);
      for (int t = 0; t < T; ++t) {
        probs.row(t) = detail::guarded_posterior(
                           detail::log_or_neg_inf(
                               out.params.eta[static_cast<std::size_t>(i)].row(t).transpose()),
                           dens.col(t))
                           .transpose();
      }
      std::vector<std::vector<int>> trajectories(
          static_cast<std::size_t>(opt.mc_size),
          std::vector<int>(static_cast<std::size_t>(T), 0));
      for (int mth = 0; mth < opt.mc_size; ++mth) {
        for (int t = 0; t < T; ++t) {
          trajectories[static_cast<std::size_t>(mth)][static_cast<std::size_t>(t)] =
              sub.categorical(probs.row(t).transpose());
        }
      }
      const Eigen::VectorXd c0 = model.edp_prior.row(i).transpose();
      if (opt.estimate_delta) {
        out.params.delta[i] = delta_grid_optimize_mean(c0, trajectories, opt.delta_grid);
      }
      Eigen::MatrixXd mean_path = Eigen::MatrixXd::Zero(T, k);
      Eigen::MatrixXd sq_path = Eigen::MatrixXd::Zero(T, k);
      for (const auto& z_path : trajectories) {
        const EdpState state = edp_forward_filter(c0, out.params.delta[i], z_path);
        const Eigen::MatrixXd mode = edp_backward_mode(state);
        mean_path += mode;
        sq_path += mode.cwiseProduct(mode);
      }
      mean_path /= static_cast<double>(opt.mc_size);
      sq_path /= static_cast<double>(opt.mc_size);
      out.eta_mc_se[static_cast<std::size_t>(i)] =
          ((sq_path - mean_path.cwiseProduct(mean_path)).cwiseMax(0.0) /
           static_cast<double>(opt.mc_size))
              .cwiseSqrt();
      for (int t = 0; t < T; ++t) mean_path.row(t) /= mean_path.row(t).sum();
      out.params.eta[static_cast<std::size_t>(i)] = mean_path;
    });

    // Cluster refits with time-varying weights gamma_itj = eta_itj.
    parallel_for(k, [&](int j) {
      const DlmSpec& spec = model.specs[static_cast<std::size_t>(j)];
      WeightedObservations wobs = WeightedObservations::from_panel(
          panel, detail::cluster_weight_matrix(out.params.eta, j), model.eps_w);
      auto fit = fit_weighted_dlm(
          spec, wobs, out.params.clusters[static_cast<std::size_t>(j)].theta,
          DiagonalPrecision(out.params.clusters[static_cast<std::size_t>(j)].phi), opt.inner_tol,
          opt.inner_max_iter);
      out.params.clusters[static_cast<std::size_t>(j)].theta = fit.path.theta;
      out.params.clusters[static_cast<std::size_t>(j)].phi = fit.phi.phi;
      out.smooth_cov[static_cast<std::size_t>(j)] = fit.path.smooth_cov;
    });

    table = log_density_table(static_view, out.params.clusters);
    out.loglik_path.push_back(detail::observed_loglik(table, out.params.eta));
    out.iterations = iter + 1;
    if (detail::relative_param_change(prev, out.params) < opt.tol) {
      out.converged = true;
      break;
    }
  }
  detail::fill_modal_assignments(out.params);
  return out;
}

struct IndependentOptions {
  double tol = 1e-6;
  int max_iter = 500;
  double inner_tol = 1e-9;
  int inner_max_iter = 200;
};

// Baseline without temporal coupling: each instant's weights come straight
// from the normalized densities, iterated against weighted cluster fits.
inline DynamicEstimate independent_weights_estimate(const DynamicMixtureModel& model,
                                                    const DynamicParams& init,
                                                    const IndependentOptions& opt = {}) {
  model.validate();
  if (!(opt.tol > 0.0) || opt.max_iter < 1) {
    throw InvalidInputError("estimation needs a positive tolerance and max_iter >= 1");
  }
  const TimeSeriesPanel& panel = *model.panel;
  const int n = panel.n();
  const int T = panel.T();
  const int k = model.k();
  const StaticMixtureModel static_view = model.as_static();

  DynamicEstimate out;
  out.params = init;
  out.smooth_cov.resize(static_cast<std::size_t>(k));

  auto table = log_density_table(static_view, out.params.clusters);
  for (int iter = 0; iter < opt.max_iter; ++iter) {
    const DynamicParams prev = out.params;

    parallel_for(n, [&](int i) {
      const Eigen::MatrixXd& dens = table[static_cast<std::size_t>(i)];
      Eigen::MatrixXd& eta = out.params.eta[static_cast<std::size_t>(i)];
      for (int t = 0; t < T; ++t) {
        eta.row(t) =
            detail::guarded_posterior(Eigen::VectorXd::Zero(k), dens.col(t)).transpose();
      }
    });

    parallel_for(k, [&](int j) {
      const DlmSpec& spec = model.specs[static_cast<std::size_t>(j)];
      WeightedObservations wobs = WeightedObservations::from_panel(
          panel, detail::cluster_weight_matrix(out.params.eta, j), model.eps_w);
      auto fit = fit_weighted_dlm(
          spec, wobs, out.params.clusters[static_cast<std::size_t>(j)].theta,
          DiagonalPrecision(out.params.clusters[static_cast<std::size_t>(j)].phi), opt.inner_tol,
          opt.inner_max_iter);
      out.params.clusters[static_cast<std::size_t>(j)].theta = fit.path.theta;
      out.params.clusters[static_cast<std::size_t>(j)].phi = fit.phi.phi;
      out.smooth_cov[static_cast<std::size_t>(j)] = fit.path.smooth_cov;
    });

    table = log_density_table(static_view, out.params.clusters);
    out.loglik_path.push_back(detail::observed_loglik(table, out.params.eta));
    out.iterations = iter + 1;
    if (detail::relative_param_change(prev, out.params) < opt.tol) {
      out.converged = true;
      break;
    }
  }
  detail::fill_modal_assignments(out.params);
  return out;
}

}  // namespace dynclust
