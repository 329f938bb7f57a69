#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dynclust/dynamic_mixture.hpp"
#include "dynclust/init.hpp"
#include "dynclust/io.hpp"
#include "dynclust/static_mixture.hpp"

namespace dynclust {

// Everything a finished run exposes: point summaries for every backend
// (posterior means for the samplers), plus the raw thinned trace for Gibbs
// runs and trace metadata.
struct EstimationResult {
  std::string algorithm;
  std::uint64_t seed = 0;
  int iterations_run = 0;
  double wall_seconds = 0.0;
  bool converged = true;
  std::string objective_name;
  std::vector<double> objective_path;

  std::vector<Eigen::MatrixXd> theta;     // k state paths, T x p_j
  std::vector<Eigen::MatrixXd> mean_obs;  // k cluster means F theta, T x m
  std::vector<Eigen::MatrixXd> sd_obs;    // k standard deviations, T x m
  std::vector<Eigen::VectorXd> phi;       // k precisions
  Eigen::MatrixXd eta_static;             // n x k (static backends)
  std::vector<Eigen::MatrixXd> eta_dynamic;  // n paths, T x k (dynamic backends)
  std::vector<int> z_static;
  std::vector<std::vector<int>> z_dynamic;
  Eigen::VectorXd delta;  // per-series discounts (dynamic backends)

  std::optional<GibbsTrace> static_trace;
  std::optional<DynamicGibbsTrace> dynamic_trace;
  std::vector<std::string> warnings;
};

namespace detail {

inline Eigen::MatrixXd obs_sd_from_cov(const DlmSpec& spec,
                                       const std::vector<Eigen::MatrixXd>& smooth_cov) {
  const int T = static_cast<int>(smooth_cov.size());
  Eigen::MatrixXd sd(T, spec.obs_dim());
  for (int t = 0; t < T; ++t) {
    const Eigen::MatrixXd cov =
        spec.obs_matrix * smooth_cov[static_cast<std::size_t>(t)] * spec.obs_matrix.transpose();
    sd.row(t) = cov.diagonal().cwiseMax(0.0).cwiseSqrt().transpose();
  }
  return sd;
}

template <class Params>
inline void fill_point_summaries(EstimationResult& result, const std::vector<DlmSpec>& specs,
                                 const Params& params,
                                 const std::vector<std::vector<Eigen::MatrixXd>>& smooth_cov) {
  const int k = static_cast<int>(specs.size());
  result.theta.resize(static_cast<std::size_t>(k));
  result.mean_obs.resize(static_cast<std::size_t>(k));
  result.sd_obs.resize(static_cast<std::size_t>(k));
  result.phi.resize(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const auto& cl = params.clusters[static_cast<std::size_t>(j)];
    result.theta[static_cast<std::size_t>(j)] = cl.theta;
    result.mean_obs[static_cast<std::size_t>(j)] =
        cl.theta * specs[static_cast<std::size_t>(j)].obs_matrix.transpose();
    result.phi[static_cast<std::size_t>(j)] = cl.phi;
    result.sd_obs[static_cast<std::size_t>(j)] =
        obs_sd_from_cov(specs[static_cast<std::size_t>(j)],
                        smooth_cov[static_cast<std::size_t>(j)]);
  }
}

// Posterior mean / SD / modal summaries over a static trace.
inline void summarize_static_trace(EstimationResult& result, const std::vector<DlmSpec>& specs,
                                   const GibbsTrace& trace, int n, int T, int m) {
  const int k = static_cast<int>(specs.size());
  const double draws = static_cast<double>(trace.draws.size());
  result.theta.assign(static_cast<std::size_t>(k), Eigen::MatrixXd());
  result.mean_obs.assign(static_cast<std::size_t>(k), Eigen::MatrixXd::Zero(T, m));
  result.sd_obs.assign(static_cast<std::size_t>(k), Eigen::MatrixXd::Zero(T, m));
  result.phi.assign(static_cast<std::size_t>(k), Eigen::VectorXd::Zero(m));
  result.eta_static = Eigen::MatrixXd::Zero(n, k);
  for (int j = 0; j < k; ++j) {
    result.theta[static_cast<std::size_t>(j)] =
        Eigen::MatrixXd::Zero(T, specs[static_cast<std::size_t>(j)].state_dim());
  }
  Eigen::MatrixXd sq_sum = Eigen::MatrixXd::Zero(T, m);
  std::vector<Eigen::MatrixXd> mean_sq(static_cast<std::size_t>(k),
                                       Eigen::MatrixXd::Zero(T, m));
  std::vector<std::vector<int>> z_counts(static_cast<std::size_t>(n),
                                         std::vector<int>(static_cast<std::size_t>(k), 0));
  for (const auto& draw : trace.draws) {
    for (int j = 0; j < k; ++j) {
      const Eigen::MatrixXd mean =
          draw.theta[static_cast<std::size_t>(j)] *
          specs[static_cast<std::size_t>(j)].obs_matrix.transpose();
      result.theta[static_cast<std::size_t>(j)] += draw.theta[static_cast<std::size_t>(j)];
      result.mean_obs[static_cast<std::size_t>(j)] += mean;
      mean_sq[static_cast<std::size_t>(j)] += mean.cwiseProduct(mean);
      result.phi[static_cast<std::size_t>(j)] += draw.phi[static_cast<std::size_t>(j)];
    }
    result.eta_static += draw.eta;
    for (int i = 0; i < n; ++i) {
      ++z_counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(
          draw.z[static_cast<std::size_t>(i)])];
    }
  }
  result.eta_static /= draws;
  result.z_static.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    result.z_static[static_cast<std::size_t>(i)] = static_cast<int>(
        std::max_element(z_counts[static_cast<std::size_t>(i)].begin(),
                         z_counts[static_cast<std::size_t>(i)].end()) -
        z_counts[static_cast<std::size_t>(i)].begin());
  }
  for (int j = 0; j < k; ++j) {
    result.theta[static_cast<std::size_t>(j)] /= draws;
    result.mean_obs[static_cast<std::size_t>(j)] /= draws;
    result.phi[static_cast<std::size_t>(j)] /= draws;
    const Eigen::MatrixXd var =
        (mean_sq[static_cast<std::size_t>(j)] / draws -
         result.mean_obs[static_cast<std::size_t>(j)].cwiseProduct(
             result.mean_obs[static_cast<std::size_t>(j)]))
            .cwiseMax(0.0);
    result.sd_obs[static_cast<std::size_t>(j)] = var.cwiseSqrt();
  }
}

inline void summarize_dynamic_trace(EstimationResult& result, const std::vector<DlmSpec>& specs,
                                    const DynamicGibbsTrace& trace, int n, int T, int m) {
  const int k = static_cast<int>(specs.size());
  const double draws = static_cast<double>(trace.draws.size());
  result.theta.assign(static_cast<std::size_t>(k), Eigen::MatrixXd());
  for (int j = 0; j < k; ++j) {
    result.theta[static_cast<std::size_t>(j)] =
        Eigen::MatrixXd::Zero(T, specs[static_cast<std::size_t>(j)].state_dim());
  }
  result.mean_obs.assign(static_cast<std::size_t>(k), Eigen::MatrixXd::Zero(T, m));
  result.sd_obs.assign(static_cast<std::size_t>(k), Eigen::MatrixXd::Zero(T, m));
  result.phi.assign(static_cast<std::size_t>(k), Eigen::VectorXd::Zero(m));
  result.eta_dynamic.assign(static_cast<std::size_t>(n), Eigen::MatrixXd::Zero(T, k));
  result.delta = Eigen::VectorXd::Zero(n);
  std::vector<Eigen::MatrixXd> mean_sq(static_cast<std::size_t>(k),
                                       Eigen::MatrixXd::Zero(T, m));
  std::vector<std::vector<std::vector<int>>> z_counts(
      static_cast<std::size_t>(n),
      std::vector<std::vector<int>>(static_cast<std::size_t>(T),
                                    std::vector<int>(static_cast<std::size_t>(k), 0)));
  for (const auto& draw : trace.draws) {
    for (int j = 0; j < k; ++j) {
      const Eigen::MatrixXd mean =
          draw.theta[static_cast<std::size_t>(j)] *
          specs[static_cast<std::size_t>(j)].obs_matrix.transpose();
      result.theta[static_cast<std::size_t>(j)] += draw.theta[static_cast<std::size_t>(j)];
      result.mean_obs[static_cast<std::size_t>(j)] += mean;
      mean_sq[static_cast<std::size_t>(j)] += mean.cwiseProduct(mean);
      result.phi[static_cast<std::size_t>(j)] += draw.phi[static_cast<std::size_t>(j)];
    }
    for (int i = 0; i < n; ++i) {
      result.eta_dynamic[static_cast<std::size_t>(i)] += draw.eta[static_cast<std::size_t>(i)];
      for (int t = 0; t < T; ++t) {
        ++z_counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)]
                  [static_cast<std::size_t>(
                      draw.z[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)])];
      }
    }
    result.delta += draw.delta;
  }
  result.delta /= draws;
  result.z_dynamic.assign(static_cast<std::size_t>(n),
                          std::vector<int>(static_cast<std::size_t>(T), 0));
  for (int i = 0; i < n; ++i) {
    result.eta_dynamic[static_cast<std::size_t>(i)] /= draws;
    for (int t = 0; t < T; ++t) {
      const auto& counts = z_counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
      result.z_dynamic[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] =
          static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }
  for (int j = 0; j < k; ++j) {
    result.theta[static_cast<std::size_t>(j)] /= draws;
    result.mean_obs[static_cast<std::size_t>(j)] /= draws;
    result.phi[static_cast<std::size_t>(j)] /= draws;
    const Eigen::MatrixXd var =
        (mean_sq[static_cast<std::size_t>(j)] / draws -
         result.mean_obs[static_cast<std::size_t>(j)].cwiseProduct(
             result.mean_obs[static_cast<std::size_t>(j)]))
            .cwiseMax(0.0);
    result.sd_obs[static_cast<std::size_t>(j)] = var.cwiseSqrt();
  }
}

}  // namespace detail

inline std::vector<DlmSpec> build_specs(const RunConfig& cfg) {
  std::vector<DlmSpec> specs;
  specs.reserve(cfg.clusters.size());
  for (const auto& cluster : cfg.clusters) {
    specs.push_back(make_spec(cluster.families, cluster.discount));
  }
  return specs;
}

// Runs the configured backend end to end: initialization, estimation,
// relabeling, posterior summaries.
inline EstimationResult run(const RunConfig& raw_config, const TimeSeriesPanel& panel) {
  const auto start = std::chrono::steady_clock::now();
  const RunConfig cfg = resolve_config(raw_config, panel);
  const std::vector<DlmSpec> specs = build_specs(cfg);
  const int n = panel.n();
  const int T = panel.T();
  const int m = panel.m();

  EstimationResult result;
  result.algorithm = to_string(cfg.algorithm);
  result.seed = cfg.seed;

  RngStream root(cfg.seed);
  RngStream init_rng = root.substream(0x696e6974);
  const InitPlan plan = make_init_plan(panel, specs, init_rng);

  Eigen::VectorXd c0 = Eigen::VectorXd::Ones(cfg.k);
  for (int j = 0; j < cfg.k; ++j) c0[j] = cfg.dirichlet_prior[static_cast<std::size_t>(j)];

  if (cfg.algorithm == Algorithm::StaticEm || cfg.algorithm == Algorithm::StaticGibbs) {
    StaticMixtureModel model;
    model.panel = &panel;
    model.specs = specs;
    model.dirichlet_prior = c0;
    model.eps_w = cfg.eps_w;
    StaticParams init = initialize_static(model, plan);
    RelabelRef ref;
    ref.coord = cfg.relabel_coord - 1;
    ref.t_ref = cfg.relabel_time > 0 ? cfg.relabel_time - 1
                                     : pick_reference_time(init.clusters, specs, ref.coord);

    if (cfg.algorithm == Algorithm::StaticEm) {
      EmOptions opt;
      opt.tol = cfg.tol;
      opt.max_iter = cfg.max_iter;
      EmResult em = em_estimate(model, init, opt);
      const auto perm = detail::relabel_permutation(em.params.clusters, specs, ref);
      detail::apply_permutation(em.params, perm);
      std::vector<std::vector<Eigen::MatrixXd>> cov(static_cast<std::size_t>(cfg.k));
      for (int j = 0; j < cfg.k; ++j) {
        cov[static_cast<std::size_t>(j)] =
            em.smooth_cov[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
      }
      detail::fill_point_summaries(result, specs, em.params, cov);
      result.eta_static = em.params.eta;
      result.z_static = em.params.z;
      result.objective_name = "em_q";
      result.objective_path = em.q_path;
      result.iterations_run = em.iterations;
      result.converged = em.converged;
    } else {
      GibbsOptions opt;
      opt.iterations = cfg.iterations;
      opt.burn_in = cfg.burn_in;
      opt.thin = cfg.thin;
      opt.seed = root.substream(0x676962).seed_key();
      opt.relabel = ref;
      GibbsTrace trace = run_gibbs(model, init, opt);
      detail::summarize_static_trace(result, specs, trace, n, T, m);
      result.objective_name = "log_posterior";
      result.objective_path = trace.logpost_path;
      result.iterations_run = cfg.iterations;
      result.warnings = trace.warnings;
      result.static_trace = std::move(trace);
    }
  } else {
    DynamicMixtureModel model;
    model.panel = &panel;
    model.specs = specs;
    model.edp_prior = c0.transpose().replicate(n, 1);
    model.delta = Eigen::VectorXd::Constant(n, 0.95);
    model.eps_w = cfg.eps_w;

    if (cfg.algorithm != Algorithm::Independent && cfg.delta_mode == DeltaMode::Fixed) {
      for (int i = 0; i < n; ++i) model.delta[i] = cfg.delta_values[static_cast<std::size_t>(i)];
    }
    DynamicParams init = initialize_dynamic(model, plan);
    if (cfg.algorithm != Algorithm::Independent && cfg.delta_mode != DeltaMode::Fixed) {
      // Quick uncoupled fit; its modal paths drive the discount heuristic.
      IndependentOptions quick;
      quick.tol = 1e-4;
      quick.max_iter = 50;
      const auto indep = independent_weights_estimate(model, init, quick);
      model.delta = initialize_delta(model, indep.params);
      init.delta = model.delta;
    }
    RelabelRef ref;
    ref.coord = cfg.relabel_coord - 1;
    ref.t_ref = cfg.relabel_time > 0 ? cfg.relabel_time - 1
                                     : pick_reference_time(init.clusters, specs, ref.coord);

    if (cfg.algorithm == Algorithm::DynamicGibbs) {
      DynamicGibbsOptions opt;
      opt.iterations = cfg.iterations;
      opt.burn_in = cfg.burn_in;
      opt.thin = cfg.thin;
      opt.seed = root.substream(0x676962).seed_key();
      opt.estimate_delta = cfg.delta_mode == DeltaMode::Estimate;
      opt.sir_proposals = cfg.sir_proposals;
      opt.relabel = ref;
      DynamicGibbsTrace trace = run_gibbs_dynamic(model, init, opt);
      detail::summarize_dynamic_trace(result, specs, trace, n, T, m);
      result.objective_name = "complete_data_loglik";
      result.objective_path = trace.loglik_path;
      result.iterations_run = cfg.iterations;
      result.warnings = trace.warnings;
      result.dynamic_trace = std::move(trace);
    } else {
      DynamicEstimate est;
      if (cfg.algorithm == Algorithm::DynamicSem) {
        SemOptions opt;
        opt.mc_size = cfg.mc_size;
        opt.tol = cfg.tol;
        opt.max_iter = cfg.max_iter;
        opt.estimate_delta = cfg.delta_mode == DeltaMode::Estimate;
        opt.seed = root.substream(0x73656d).seed_key();
        est = sem_estimate(model, init, opt);
      } else {
        IndependentOptions opt;
        opt.tol = cfg.tol;
        opt.max_iter = cfg.max_iter;
        est = independent_weights_estimate(model, init, opt);
      }
      const auto perm = detail::relabel_permutation(est.params.clusters, specs, ref);
      detail::apply_permutation_dynamic(est.params, perm);
      std::vector<std::vector<Eigen::MatrixXd>> cov(static_cast<std::size_t>(cfg.k));
      for (int j = 0; j < cfg.k; ++j) {
        cov[static_cast<std::size_t>(j)] =
            est.smooth_cov[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
      }
      detail::fill_point_summaries(result, specs, est.params, cov);
      result.eta_dynamic = est.params.eta;
      result.z_dynamic = est.params.z;
      if (cfg.algorithm == Algorithm::DynamicSem) result.delta = est.params.delta;
      result.objective_name = "observed_loglik";
      result.objective_path = est.loglik_path;
      result.iterations_run = est.iterations;
      result.converged = est.converged;
    }
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// Writes the run artifacts: cluster means with 2-SD bands, membership
// trajectories, point estimates or full thinned traces, and the manifest.
inline std::vector<std::string> emit_results(const EstimationResult& result,
                                             const TimeSeriesPanel& panel, const RunConfig& cfg,
                                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output directory '" + out_dir + "'");
  std::vector<std::string> written;
  auto open = [&](const std::string& name) {
    const std::string path = (fs::path(out_dir) / name).string();
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    written.push_back(path);
    return out;
  };
  const int n = panel.n();
  const int T = panel.T();
  const int m = panel.m();
  const int k = static_cast<int>(result.theta.size());
  auto fmt = [](double v) { return detail::format_double(v); };

  {
    auto out = open("cluster_means.csv");
    out << "cluster,time_index";
    for (int l = 0; l < m; ++l) {
      out << ",mean_" << panel.value_names[static_cast<std::size_t>(l)] << ",sd_"
          << panel.value_names[static_cast<std::size_t>(l)];
    }
    out << '\n';
    for (int j = 0; j < k; ++j) {
      for (int t = 0; t < T; ++t) {
        out << (j + 1) << ',' << (t + 1);
        for (int l = 0; l < m; ++l) {
          out << ',' << fmt(result.mean_obs[static_cast<std::size_t>(j)](t, l)) << ','
              << fmt(result.sd_obs[static_cast<std::size_t>(j)](t, l));
        }
        out << '\n';
      }
    }
  }

  {
    auto out = open("memberships.csv");
    if (!result.eta_dynamic.empty()) {
      out << "series_id,time_index,cluster,eta\n";
      for (int i = 0; i < n; ++i) {
        for (int t = 0; t < T; ++t) {
          for (int j = 0; j < k; ++j) {
            out << panel.ids[static_cast<std::size_t>(i)] << ',' << (t + 1) << ',' << (j + 1)
                << ',' << fmt(result.eta_dynamic[static_cast<std::size_t>(i)](t, j)) << '\n';
          }
        }
      }
    } else {
      out << "series_id,cluster,eta\n";
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
          out << panel.ids[static_cast<std::size_t>(i)] << ',' << (j + 1) << ','
              << fmt(result.eta_static(i, j)) << '\n';
        }
      }
    }
  }

  const bool has_trace = result.static_trace.has_value() || result.dynamic_trace.has_value();
  if (!has_trace) {
    {
      auto out = open("states.csv");
      out << "cluster,time_index,state_index,value\n";
      for (int j = 0; j < k; ++j) {
        const auto& theta = result.theta[static_cast<std::size_t>(j)];
        for (int t = 0; t < T; ++t) {
          for (int c = 0; c < theta.cols(); ++c) {
            out << (j + 1) << ',' << (t + 1) << ',' << (c + 1) << ',' << fmt(theta(t, c)) << '\n';
          }
        }
      }
    }
    {
      auto out = open("precisions.csv");
      out << "cluster,dim,phi\n";
      for (int j = 0; j < k; ++j) {
        for (int l = 0; l < m; ++l) {
          out << (j + 1) << ',' << (l + 1) << ',' << fmt(result.phi[static_cast<std::size_t>(j)][l])
              << '\n';
        }
      }
    }
    if (result.delta.size() == n) {
      auto out = open("deltas.csv");
      out << "series_id,delta\n";
      for (int i = 0; i < n; ++i) {
        out << panel.ids[static_cast<std::size_t>(i)] << ',' << fmt(result.delta[i]) << '\n';
      }
    }
  } else if (result.static_trace.has_value()) {
    const GibbsTrace& trace = *result.static_trace;
    {
      auto out = open("trace_eta.csv");
      out << "draw,series_id,cluster,eta\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < k; ++j) {
            out << (d + 1) << ',' << panel.ids[static_cast<std::size_t>(i)] << ',' << (j + 1)
                << ',' << fmt(trace.draws[d].eta(i, j)) << '\n';
          }
        }
      }
    }
    {
      auto out = open("trace_z.csv");
      out << "draw,series_id,z\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int i = 0; i < n; ++i) {
          out << (d + 1) << ',' << panel.ids[static_cast<std::size_t>(i)] << ','
              << (trace.draws[d].z[static_cast<std::size_t>(i)] + 1) << '\n';
        }
      }
    }
    {
      auto out = open("trace_theta.csv");
      out << "draw,cluster,time_index,state_index,value\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int j = 0; j < k; ++j) {
          const auto& theta = trace.draws[d].theta[static_cast<std::size_t>(j)];
          for (int t = 0; t < T; ++t) {
            for (int c = 0; c < theta.cols(); ++c) {
              out << (d + 1) << ',' << (j + 1) << ',' << (t + 1) << ',' << (c + 1) << ','
                  << fmt(theta(t, c)) << '\n';
            }
          }
        }
      }
    }
    {
      auto out = open("trace_phi.csv");
      out << "draw,cluster,dim,phi\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int j = 0; j < k; ++j) {
          for (int l = 0; l < m; ++l) {
            out << (d + 1) << ',' << (j + 1) << ',' << (l + 1) << ','
                << fmt(trace.draws[d].phi[static_cast<std::size_t>(j)][l]) << '\n';
          }
        }
      }
    }
  } else {
    const DynamicGibbsTrace& trace = *result.dynamic_trace;
    {
      auto out = open("trace_eta.csv");
      out << "draw,series_id,time_index,cluster,eta\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int i = 0; i < n; ++i) {
          for (int t = 0; t < T; ++t) {
            for (int j = 0; j < k; ++j) {
              out << (d + 1) << ',' << panel.ids[static_cast<std::size_t>(i)] << ',' << (t + 1)
                  << ',' << (j + 1) << ','
                  << fmt(trace.draws[d].eta[static_cast<std::size_t>(i)](t, j)) << '\n';
            }
          }
        }
      }
    }
    {
      auto out = open("trace_z.csv");
      out << "draw,series_id,time_index,z\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int i = 0; i < n; ++i) {
          for (int t = 0; t < T; ++t) {
            out << (d + 1) << ',' << panel.ids[static_cast<std::size_t>(i)] << ',' << (t + 1)
                << ','
                << (trace.draws[d].z[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] + 1)
                << '\n';
          }
        }
      }
    }
    {
      auto out = open("trace_theta.csv");
      out << "draw,cluster,time_index,state_index,value\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int j = 0; j < k; ++j) {
          const auto& theta = trace.draws[d].theta[static_cast<std::size_t>(j)];
          for (int t = 0; t < T; ++t) {
            for (int c = 0; c < theta.cols(); ++c) {
              out << (d + 1) << ',' << (j + 1) << ',' << (t + 1) << ',' << (c + 1) << ','
                  << fmt(theta(t, c)) << '\n';
            }
          }
        }
      }
    }
    {
      auto out = open("trace_phi.csv");
      out << "draw,cluster,dim,phi\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int j = 0; j < k; ++j) {
          for (int l = 0; l < m; ++l) {
            out << (d + 1) << ',' << (j + 1) << ',' << (l + 1) << ','
                << fmt(trace.draws[d].phi[static_cast<std::size_t>(j)][l]) << '\n';
          }
        }
      }
    }
    if (trace.delta_estimated) {
      auto out = open("trace_delta.csv");
      out << "draw,series_id,delta\n";
      for (std::size_t d = 0; d < trace.draws.size(); ++d) {
        for (int i = 0; i < n; ++i) {
          out << (d + 1) << ',' << panel.ids[static_cast<std::size_t>(i)] << ','
              << fmt(trace.draws[d].delta[i]) << '\n';
        }
      }
    }
    {
      auto out = open("deltas.csv");
      out << "series_id,delta\n";
      for (int i = 0; i < n; ++i) {
        out << panel.ids[static_cast<std::size_t>(i)] << ',' << fmt(result.delta[i]) << '\n';
      }
    }
  }

  {
    auto out = open("manifest.txt");
    for (const auto& [key, value] : manifest_entries(cfg)) {
      out << key << " = " << value << '\n';
    }
    out << "n = " << n << '\n';
    out << "T = " << T << '\n';
    out << "m = " << m << '\n';
    out << "iterations_run = " << result.iterations_run << '\n';
    out << "converged = " << (result.converged ? "true" : "false") << '\n';
    out << "wall_seconds = " << fmt(result.wall_seconds) << '\n';
    out << "objective_name = " << result.objective_name << '\n';
    out << "final_objective = "
        << (result.objective_path.empty() ? "none" : fmt(result.objective_path.back())) << '\n';
    out << "warning_count = " << result.warnings.size() << '\n';
    for (std::size_t w = 0; w < result.warnings.size(); ++w) {
      out << "warning" << (w + 1) << " = " << result.warnings[w] << '\n';
    }
    for (const auto& path : written) {
      if (path.find("manifest.txt") == std::string::npos) {
        out << "output." << fs::path(path).filename().string() << " = " << path << '\n';
      }
    }
  }
  return written;
}

}  // namespace dynclust
