#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dynclust/dlm.hpp"
#include "dynclust/errors.hpp"
#include "dynclust/panel.hpp"
#include "dynclust/parallel.hpp"
#include "dynclust/rng.hpp"
#include "dynclust/weighted_fit.hpp"

namespace dynclust {

// Near-flat Gamma prior on each observational precision; keeps the Gibbs
// conditional proper even for empty clusters.
inline constexpr double kPhiPriorShape = 1e-3;
inline constexpr double kPhiPriorRate = 1e-3;
inline constexpr double kGammaRateFloor = 1e-30;
inline constexpr double kQDecreaseTol = 1e-8;

struct StaticMixtureModel {
  const TimeSeriesPanel* panel = nullptr;
  std::vector<DlmSpec> specs;
  Eigen::VectorXd dirichlet_prior;  // c0, size k
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
    if (dirichlet_prior.size() != k()) {
      throw InvalidInputError("Dirichlet prior length must equal k");
    }
    for (int j = 0; j < dirichlet_prior.size(); ++j) {
      if (!(dirichlet_prior[j] > 0.0)) {
        throw InvalidInputError("Dirichlet prior entries must be positive");
      }
    }
  }
};

struct ClusterParams {
  Eigen::MatrixXd theta;  // T x p_j
  Eigen::VectorXd phi;    // m
};

struct StaticParams {
  std::vector<ClusterParams> clusters;
  Eigen::MatrixXd eta;  // n x k, rows on the simplex
  std::vector<int> z;   // n, 0-based cluster indices
};

// Reference instant and observation coordinate for the ordering restriction.
struct RelabelRef {
  int t_ref = 0;  // 0-based
  int coord = 0;  // 0-based observation-space coordinate
};

struct GibbsDraw {
  Eigen::MatrixXd eta;
  std::vector<int> z;
  std::vector<Eigen::MatrixXd> theta;
  std::vector<Eigen::VectorXd> phi;
};

struct GibbsTrace {
  std::vector<GibbsDraw> draws;
  std::uint64_t seed = 0;
  int iterations = 0;
  int burn_in = 0;
  int thin = 1;
  std::vector<double> logpost_path;  // complete-data log posterior per iteration
  std::vector<std::string> warnings;
};

// log N_m(y_it ; F_j theta_jt, V_j) for every series, cluster and instant.
// Returned as one k x T matrix per series; shared by Gibbs and EM.
inline std::vector<Eigen::MatrixXd> log_density_table(
    const StaticMixtureModel& model, const std::vector<ClusterParams>& clusters) {
  const TimeSeriesPanel& panel = *model.panel;
  const int n = panel.n();
  const int T = panel.T();
  const int m = panel.m();
  const int k = model.k();
  if (static_cast<int>(clusters.size()) != k) {
    throw InvalidInputError("cluster parameter count does not match k");
  }

  // Per-cluster means and precision terms, computed once.
  std::vector<Eigen::MatrixXd> means(static_cast<std::size_t>(k));
  std::vector<Eigen::VectorXd> log_phi(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const auto& cl = clusters[static_cast<std::size_t>(j)];
    if (cl.theta.rows() != T || cl.theta.cols() != model.specs[static_cast<std::size_t>(j)].state_dim()) {
      throw InvalidInputError("cluster state path has wrong shape");
    }
    if (cl.phi.size() != m) throw InvalidInputError("cluster precision has wrong length");
    for (int l = 0; l < m; ++l) {
      if (!(cl.phi[l] > 0.0) || !std::isfinite(cl.phi[l])) {
        throw InvalidInputError("cluster precisions must be positive and finite");
      }
    }
    means[static_cast<std::size_t>(j)] =
        cl.theta * model.specs[static_cast<std::size_t>(j)].obs_matrix.transpose();  // T x m
    log_phi[static_cast<std::size_t>(j)] = cl.phi.array().log();
  }

  std::vector<Eigen::MatrixXd> table(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Eigen::MatrixXd& entry = table[static_cast<std::size_t>(i)];
    entry.resize(k, T);
    const Eigen::MatrixXd& y = panel.series[static_cast<std::size_t>(i)];
    for (int j = 0; j < k; ++j) {
      const Eigen::MatrixXd r = y - means[static_cast<std::size_t>(j)];
      const auto& cl = clusters[static_cast<std::size_t>(j)];
      for (int t = 0; t < T; ++t) {
        double v = 0.0;
        for (int l = 0; l < m; ++l) {
          v += 0.5 * (log_phi[static_cast<std::size_t>(j)][l] - kLog2Pi) -
               0.5 * cl.phi[l] * r(t, l) * r(t, l);
        }
        entry(j, t) = v;
      }
    }
  }
  return table;
}

// Row sums of the table: L_ij = sum_t log N_m(...), an n x k matrix.
inline Eigen::MatrixXd series_cluster_loglik(const std::vector<Eigen::MatrixXd>& table) {
  const int n = static_cast<int>(table.size());
  const int k = static_cast<int>(table.front().rows());
  Eigen::MatrixXd L(n, k);
  for (int i = 0; i < n; ++i) L.row(i) = table[static_cast<std::size_t>(i)].rowwise().sum();
  return L;
}

namespace detail {

// Rescaled membership posterior: subtracting T * Obar_i * ln 10, with
// Obar_i = max_j (1/T) sum_t log10 N_m(...), equals shifting every summed
// log-density by max_j L_ij, which keeps the dominant cluster's product
// around one before exponentiating.
inline Eigen::VectorXd guarded_posterior(const Eigen::VectorXd& log_eta_row,
                                         const Eigen::VectorXd& loglik_row) {
  const double shift = loglik_row.maxCoeff();
  Eigen::VectorXd w = (log_eta_row + loglik_row).array() - shift;
  Eigen::VectorXd probs = w.array().exp();
  const double total = probs.sum();
  if (!(total > 0.0) || !std::isfinite(total)) {
    throw DegeneratePosteriorError("membership posterior collapsed to zero everywhere");
  }
  return probs / total;
}

inline Eigen::VectorXd log_or_neg_inf(const Eigen::VectorXd& v) {
  Eigen::VectorXd out(v.size());
  for (int j = 0; j < v.size(); ++j) {
    out[j] = v[j] > 0.0 ? std::log(v[j]) : -std::numeric_limits<double>::infinity();
  }
  return out;
}

inline double log_gamma_pdf(double x, double shape, double rate) {
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

inline double log_dirichlet_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& alpha) {
  double out = std::lgamma(alpha.sum());
  for (int j = 0; j < alpha.size(); ++j) {
    out += (alpha[j] - 1.0) * std::log(x[j]) - std::lgamma(alpha[j]);
  }
  return out;
}

}  // namespace detail

// P(Z_i = j | eta_i, theta, phi, y_i), computed through the rescaled form.
inline Eigen::VectorXd membership_posterior(const StaticMixtureModel& model,
                                            const StaticParams& params, int i) {
  model.validate();
  if (i < 0 || i >= model.panel->n()) throw InvalidInputError("series index out of range");
  const auto table = log_density_table(model, params.clusters);
  const Eigen::VectorXd loglik = table[static_cast<std::size_t>(i)].rowwise().sum();
  return detail::guarded_posterior(detail::log_or_neg_inf(params.eta.row(i).transpose()), loglik);
}

// eta_i | . ~ Dirichlet(c0 + e_{z_i}), independently per series.
inline Eigen::MatrixXd gibbs_step_eta(const std::vector<int>& z, const Eigen::VectorXd& c0,
                                      RngStream& rng) {
  const int n = static_cast<int>(z.size());
  const int k = static_cast<int>(c0.size());
  Eigen::MatrixXd eta(n, k);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd alpha = c0;
    alpha[z[static_cast<std::size_t>(i)]] += 1.0;
    eta.row(i) = rng.dirichlet(alpha).transpose();
  }
  return eta;
}

// phi_jl | . ~ Gamma(a0 + n_j T / 2, b0 + SSR_jl / 2); empty clusters draw
// from the prior. warnings gains an entry when a populated cluster reports
// an exactly-zero residual sum.
inline std::vector<Eigen::VectorXd> gibbs_step_phi(const StaticMixtureModel& model,
                                                   const std::vector<int>& z,
                                                   const std::vector<ClusterParams>& clusters,
                                                   RngStream& rng,
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
    int n_j = 0;
    for (int i = 0; i < panel.n(); ++i) {
      if (z[static_cast<std::size_t>(i)] != j) continue;
      ++n_j;
      const Eigen::MatrixXd r = panel.series[static_cast<std::size_t>(i)] - mean;
      ssr += r.cwiseProduct(r).colwise().sum().transpose();
    }
    Eigen::VectorXd draw(m);
    const double shape = kPhiPriorShape + 0.5 * static_cast<double>(n_j) * T;
    for (int l = 0; l < m; ++l) {
      if (n_j > 0 && ssr[l] == 0.0 && warnings != nullptr) {
        warnings->push_back("degenerate zero residual sum for cluster " + std::to_string(j + 1) +
                            " dimension " + std::to_string(l + 1));
      }
      const double rate = std::max(kPhiPriorRate + 0.5 * ssr[l], kGammaRateFloor);
      draw[l] = rng.gamma(n_j > 0 ? shape : kPhiPriorShape, n_j > 0 ? rate : kPhiPriorRate);
    }
    phis[static_cast<std::size_t>(j)] = draw;
  }
  return phis;
}

// theta_j | . by tiling the member series (unit weights) and running FFBS;
// an empty cluster walks the prior.
inline std::vector<Eigen::MatrixXd> gibbs_step_theta(const StaticMixtureModel& model,
                                                     const std::vector<int>& z,
                                                     const std::vector<Eigen::VectorXd>& phis,
                                                     RngStream& rng) {
  const TimeSeriesPanel& panel = *model.panel;
  const int k = model.k();
  std::vector<Eigen::MatrixXd> thetas(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const DlmSpec& spec = model.specs[static_cast<std::size_t>(j)];
    std::vector<const Eigen::MatrixXd*> members;
    for (int i = 0; i < panel.n(); ++i) {
      if (z[static_cast<std::size_t>(i)] == j) {
        members.push_back(&panel.series[static_cast<std::size_t>(i)]);
      }
    }
    const auto tiled = tile_replicates(
        spec, members,
        Eigen::MatrixXd::Ones(static_cast<int>(members.size()), panel.T()),
        DiagonalPrecision(phis[static_cast<std::size_t>(j)]), model.eps_w);
    std::vector<ObsBlock> blocks = tiled.blocks;
    if (blocks.empty()) {
      // No members anywhere: prior-only steps across the whole window.
      blocks.resize(static_cast<std::size_t>(panel.T()));
    }
    RngStream sub = rng.substream(0x7468, static_cast<std::uint64_t>(j));
    const FilterOutput filt = forward_filter(spec, blocks, default_prior_mean(spec.state_dim()),
                                             default_prior_cov(spec.state_dim()));
    thetas[static_cast<std::size_t>(j)] = backward_sample(spec, filt, sub);
  }
  return thetas;
}

namespace detail {

// Ordering-restriction permutation: within each structural set, clusters are
// sorted ascending by the cluster mean (F theta)_coord at t_ref, breaking
// ties (within 1e-10) at later instants, wrapping past T.
inline std::vector<int> relabel_permutation(const std::vector<ClusterParams>& clusters,
                                            const std::vector<DlmSpec>& specs,
                                            const RelabelRef& ref) {
  const int k = static_cast<int>(clusters.size());
  const int T = static_cast<int>(clusters.front().theta.rows());
  auto key = [&](int j, int t) {
    const auto& spec = specs[static_cast<std::size_t>(j)];
    return (spec.obs_matrix * clusters[static_cast<std::size_t>(j)].theta.row(t).transpose())(
        ref.coord);
  };
  auto ordered_before = [&](int a, int b) {
    for (int step = 0; step < T; ++step) {
      const int t = (ref.t_ref + step) % T;
      const double ka = key(a, t);
      const double kb = key(b, t);
      if (std::abs(ka - kb) > 1e-10) return ka < kb;
    }
    return a < b;  // fully tied everywhere: keep the original order
  };

  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  // Group cluster indices by structural tag, then sort each group in place.
  std::vector<std::string> tags(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) tags[static_cast<std::size_t>(j)] = specs[static_cast<std::size_t>(j)].structural_tag();
  for (int j = 0; j < k; ++j) {
    std::vector<int> group;
    for (int l = 0; l < k; ++l) {
      if (tags[static_cast<std::size_t>(l)] == tags[static_cast<std::size_t>(j)]) group.push_back(l);
    }
    if (group.front() != j) continue;  // handle each set once, at its first slot
    std::vector<int> sorted = group;
    std::sort(sorted.begin(), sorted.end(), ordered_before);
    for (std::size_t pos = 0; pos < group.size(); ++pos) {
      perm[static_cast<std::size_t>(group[pos])] = sorted[pos];
    }
  }
  return perm;  // perm[slot] = source cluster moved into that slot
}

inline void apply_permutation(StaticParams& params, const std::vector<int>& perm) {
  const int k = static_cast<int>(perm.size());
  std::vector<ClusterParams> clusters(static_cast<std::size_t>(k));
  Eigen::MatrixXd eta(params.eta.rows(), k);
  std::vector<int> inverse(static_cast<std::size_t>(k));
  for (int slot = 0; slot < k; ++slot) {
    clusters[static_cast<std::size_t>(slot)] = params.clusters[static_cast<std::size_t>(perm[static_cast<std::size_t>(slot)])];
    eta.col(slot) = params.eta.col(perm[static_cast<std::size_t>(slot)]);
    inverse[static_cast<std::size_t>(perm[static_cast<std::size_t>(slot)])] = slot;
  }
  params.clusters = std::move(clusters);
  params.eta = std::move(eta);
  for (auto& zi : params.z) zi = inverse[static_cast<std::size_t>(zi)];
}

}  // namespace detail

// Canonical ordering of the clusters in a parameter set; idempotent.
inline void relabel(StaticParams& params, const std::vector<DlmSpec>& specs,
                    const RelabelRef& ref) {
  const auto perm = detail::relabel_permutation(params.clusters, specs, ref);
  detail::apply_permutation(params, perm);
}

// Same restriction applied draw by draw across a trace.
inline void relabel(GibbsTrace& trace, const std::vector<DlmSpec>& specs,
                    const RelabelRef& ref) {
  for (auto& draw : trace.draws) {
    std::vector<ClusterParams> clusters(draw.theta.size());
    for (std::size_t j = 0; j < draw.theta.size(); ++j) {
      clusters[j] = ClusterParams{draw.theta[j], draw.phi[j]};
    }
    const auto perm = detail::relabel_permutation(clusters, specs, ref);
    StaticParams tmp{std::move(clusters), draw.eta, draw.z};
    detail::apply_permutation(tmp, perm);
    draw.eta = std::move(tmp.eta);
    draw.z = std::move(tmp.z);
    for (std::size_t j = 0; j < draw.theta.size(); ++j) {
      draw.theta[j] = std::move(tmp.clusters[j].theta);
      draw.phi[j] = std::move(tmp.clusters[j].phi);
    }
  }
}

// Fallback reference instant: the t maximizing the minimum pairwise
// separation of the cluster means at the chosen coordinate.
inline int pick_reference_time(const std::vector<ClusterParams>& clusters,
                               const std::vector<DlmSpec>& specs, int coord) {
  const int k = static_cast<int>(clusters.size());
  const int T = static_cast<int>(clusters.front().theta.rows());
  if (k < 2) return 0;
  int best_t = 0;
  double best_sep = -1.0;
  for (int t = 0; t < T; ++t) {
    double sep = std::numeric_limits<double>::infinity();
    for (int a = 0; a < k; ++a) {
      for (int b = a + 1; b < k; ++b) {
        const double ka = (specs[static_cast<std::size_t>(a)].obs_matrix *
                           clusters[static_cast<std::size_t>(a)].theta.row(t).transpose())(coord);
        const double kb = (specs[static_cast<std::size_t>(b)].obs_matrix *
                           clusters[static_cast<std::size_t>(b)].theta.row(t).transpose())(coord);
        sep = std::min(sep, std::abs(ka - kb));
      }
    }
    if (sep > best_sep) {
      best_sep = sep;
      best_t = t;
    }
  }
  return best_t;
}

struct GibbsOptions {
  int iterations = 2000;
  int burn_in = 500;
  int thin = 1;
  std::uint64_t seed = 0;
  RelabelRef relabel;
};

// Gibbs sampler for the static mixture: cycles Z -> eta -> phi -> theta and
// stores post-burn-in, thinned, relabeled draws.
inline GibbsTrace run_gibbs(const StaticMixtureModel& model, const StaticParams& init,
                            const GibbsOptions& opt) {
  model.validate();
  if (opt.iterations <= opt.burn_in || opt.burn_in < 0 || opt.thin < 1) {
    throw InvalidInputError("gibbs run needs iterations > burn_in >= 0 and thin >= 1");
  }
  const TimeSeriesPanel& panel = *model.panel;
  const int n = panel.n();
  const int k = model.k();

  StaticParams params = init;
  RngStream root(opt.seed);
  GibbsTrace trace;
  trace.seed = opt.seed;
  trace.iterations = opt.iterations;
  trace.burn_in = opt.burn_in;
  trace.thin = opt.thin;

  auto table = log_density_table(model, params.clusters);
  for (int it = 0; it < opt.iterations; ++it) {
    const std::uint64_t step = static_cast<std::uint64_t>(it);

    // Z block.
    parallel_for(n, [&](int i) {
      const Eigen::VectorXd probs = detail::guarded_posterior(
          detail::log_or_neg_inf(params.eta.row(i).transpose()),
          table[static_cast<std::size_t>(i)].rowwise().sum());
      RngStream sub = root.substream(0x5a01, step, static_cast<std::uint64_t>(i));
      params.z[static_cast<std::size_t>(i)] = sub.categorical(probs);
    });

    // eta block.
    parallel_for(n, [&](int i) {
      Eigen::VectorXd alpha = model.dirichlet_prior;
      alpha[params.z[static_cast<std::size_t>(i)]] += 1.0;
      RngStream sub = root.substream(0x5a02, step, static_cast<std::uint64_t>(i));
      params.eta.row(i) = sub.dirichlet(alpha).transpose();
    });

    // phi block, then theta conditioned on the fresh phi.
    {
      RngStream sub = root.substream(0x5a03, step);
      const auto phis = gibbs_step_phi(model, params.z, params.clusters, sub, &trace.warnings);
      for (int j = 0; j < k; ++j) params.clusters[static_cast<std::size_t>(j)].phi = phis[static_cast<std::size_t>(j)];
    }
    parallel_for(k, [&](int j) {
      const DlmSpec& spec = model.specs[static_cast<std::size_t>(j)];
      std::vector<const Eigen::MatrixXd*> members;
      for (int i = 0; i < n; ++i) {
        if (params.z[static_cast<std::size_t>(i)] == j) {
          members.push_back(&panel.series[static_cast<std::size_t>(i)]);
        }
      }
      auto tiled = tile_replicates(spec, members,
                                   Eigen::MatrixXd::Ones(static_cast<int>(members.size()), panel.T()),
                                   DiagonalPrecision(params.clusters[static_cast<std::size_t>(j)].phi),
                                   model.eps_w);
      if (tiled.blocks.empty()) tiled.blocks.resize(static_cast<std::size_t>(panel.T()));
      const FilterOutput filt =
          forward_filter(spec, tiled.blocks, default_prior_mean(spec.state_dim()),
                         default_prior_cov(spec.state_dim()));
      RngStream sub = root.substream(0x5a04, step, static_cast<std::uint64_t>(j));
      params.clusters[static_cast<std::size_t>(j)].theta = backward_sample(spec, filt, sub);
    });

    // Complete-data log posterior (without the state evolution term); the
    // refreshed table also feeds the next iteration's Z block.
    {
      table = log_density_table(model, params.clusters);
      double lp = 0.0;
      for (int i = 0; i < n; ++i) {
        const int zi = params.z[static_cast<std::size_t>(i)];
        lp += std::log(params.eta(i, zi)) +
              table[static_cast<std::size_t>(i)].row(zi).sum();
        lp += detail::log_dirichlet_pdf(params.eta.row(i).transpose(), model.dirichlet_prior);
      }
      for (int j = 0; j < k; ++j) {
        for (int l = 0; l < panel.m(); ++l) {
          lp += detail::log_gamma_pdf(params.clusters[static_cast<std::size_t>(j)].phi[l],
                                      kPhiPriorShape, kPhiPriorRate);
        }
      }
      trace.logpost_path.push_back(lp);
    }

    if (it >= opt.burn_in && (it - opt.burn_in) % opt.thin == 0) {
      GibbsDraw draw;
      draw.eta = params.eta;
      draw.z = params.z;
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

struct EmOptions {
  double tol = 1e-6;
  int max_iter = 500;
  double inner_tol = 1e-9;
  int inner_max_iter = 200;
};

struct EmResult {
  StaticParams params;  // eta holds the responsibilities gamma
  std::vector<double> q_path;
  int iterations = 0;
  bool converged = false;
  std::vector<std::vector<Eigen::MatrixXd>> smooth_cov;  // per cluster, per t
  std::vector<std::vector<Eigen::MatrixXd>> w_paths;     // per cluster
};

// Expectation-Maximization point estimation. The per-cluster evolution
// variance paths are pinned once, from a warmed-up fit under the
// initialization weights, so Q (Eq.-7 form plus the t=1 prior terms) is a
// single functional that every E/M block ascends. An iteration that fails
// to improve Q is rolled back and treated as convergence; a decrease beyond
// 1e-8 raises a ConsistencyError.
inline EmResult em_estimate(const StaticMixtureModel& model, const StaticParams& init,
                            const EmOptions& opt = {}) {
  model.validate();
  if (!(opt.tol > 0.0) || opt.max_iter < 1) {
    throw InvalidInputError("EM needs a positive tolerance and max_iter >= 1");
  }
  const TimeSeriesPanel& panel = *model.panel;
  const int n = panel.n();
  const int k = model.k();

  EmResult out;
  out.params = init;
  out.w_paths.resize(static_cast<std::size_t>(k));
  out.smooth_cov.resize(static_cast<std::size_t>(k));
  parallel_for(k, [&](int j) {
    const DlmSpec& spec = model.specs[static_cast<std::size_t>(j)];
    WeightedObservations wobs =
        WeightedObservations::from_panel(panel, Eigen::VectorXd(init.eta.col(j)), model.eps_w);
    const auto warm = fit_weighted_dlm(spec, wobs, init.clusters[static_cast<std::size_t>(j)].theta,
                                       DiagonalPrecision(init.clusters[static_cast<std::size_t>(j)].phi),
                                       opt.inner_tol, opt.inner_max_iter);
    out.w_paths[static_cast<std::size_t>(j)] = warm.w_path;
  });
  EmResult best = out;

  auto table = log_density_table(model, out.params.clusters);
  for (int iter = 0; iter < opt.max_iter; ++iter) {
    // E-step: responsibilities from the previous iteration's parameters.
    Eigen::MatrixXd gamma(n, k);
    parallel_for(n, [&](int i) {
      gamma.row(i) = detail::guarded_posterior(
                         detail::log_or_neg_inf(out.params.eta.row(i).transpose()),
                         table[static_cast<std::size_t>(i)].rowwise().sum())
                         .transpose();
    });
    for (int j = 0; j < k; ++j) {
      if (gamma.col(j).maxCoeff() < model.eps_w) {
        throw EmptyClusterError("cluster " + std::to_string(j + 1) + " collapsed in the E-step", j);
      }
    }

    // M-step: eta = gamma, then one weighted fit per cluster.
    out.params.eta = gamma;
    parallel_for(k, [&](int j) {
      const DlmSpec& spec = model.specs[static_cast<std::size_t>(j)];
      WeightedObservations wobs =
          WeightedObservations::from_panel(panel, Eigen::VectorXd(gamma.col(j)), model.eps_w);
      auto fit = fit_weighted_dlm(spec, wobs, out.params.clusters[static_cast<std::size_t>(j)].theta,
                                  DiagonalPrecision(out.params.clusters[static_cast<std::size_t>(j)].phi),
                                  opt.inner_tol, opt.inner_max_iter,
                                  &out.w_paths[static_cast<std::size_t>(j)]);
      out.params.clusters[static_cast<std::size_t>(j)].theta = fit.path.theta;
      out.params.clusters[static_cast<std::size_t>(j)].phi = fit.phi.phi;
      out.smooth_cov[static_cast<std::size_t>(j)] = fit.path.smooth_cov;
    });
    out.params.z.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      int arg = 0;
      gamma.row(i).maxCoeff(&arg);
      out.params.z[static_cast<std::size_t>(i)] = arg;
    }

    // Q at the new parameters (Eq.-7 form plus the t=1 prior terms).
    table = log_density_table(model, out.params.clusters);
    double q = 0.0;
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd loglik = table[static_cast<std::size_t>(i)].rowwise().sum();
      for (int j = 0; j < k; ++j) {
        const double g = gamma(i, j);
        if (g > 0.0) q += g * (std::log(g) + loglik[j]);
      }
    }
    for (int j = 0; j < k; ++j) {
      q += detail::state_prior_logpdf(
          model.specs[static_cast<std::size_t>(j)], out.params.clusters[static_cast<std::size_t>(j)].theta,
          out.w_paths[static_cast<std::size_t>(j)],
          default_prior_mean(model.specs[static_cast<std::size_t>(j)].state_dim()),
          default_prior_cov(model.specs[static_cast<std::size_t>(j)].state_dim()));
    }

    out.iterations = iter + 1;
    if (!out.q_path.empty()) {
      const double prev = out.q_path.back();
      if (q <= prev) {
        if (q < prev - std::max(kQDecreaseTol, std::abs(prev) * 1e-12)) {
          throw ConsistencyError("EM objective decreased");
        }
        out.params = best.params;  // roll back the non-improving iteration
        out.smooth_cov = best.smooth_cov;
        out.w_paths = best.w_paths;
        out.converged = true;
        break;
      }
    }
    out.q_path.push_back(q);
    best.params = out.params;
    best.smooth_cov = out.smooth_cov;
    best.w_paths = out.w_paths;
    if (out.q_path.size() >= 2) {
      const double prev = out.q_path[out.q_path.size() - 2];
      if (std::abs(q - prev) <= opt.tol * std::max(1.0, std::abs(prev))) {
        out.converged = true;
        break;
      }
    }
  }
  return out;
}

}  // namespace dynclust
