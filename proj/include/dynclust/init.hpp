#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dynclust/dlm.hpp"
#include "dynclust/dynamic_mixture.hpp"
#include "dynclust/errors.hpp"
#include "dynclust/panel.hpp"
#include "dynclust/parallel.hpp"
#include "dynclust/rng.hpp"
#include "dynclust/static_mixture.hpp"
#include "dynclust/weighted_fit.hpp"

namespace dynclust {

// Candidate series plus the deduplicated single-series fits: one fit per
// (structural set, candidate), l*k fits in total.
struct InitPlan {
  std::vector<int> candidates;                    // k series indices
  std::vector<std::vector<int>> structural_sets;  // cluster indices grouped by tag
  std::vector<int> set_of_cluster;                // cluster -> set
  std::vector<std::vector<WeightedFitResult>> fits;  // [set][candidate position]
  int fit_count = 0;

  int k() const { return static_cast<int>(candidates.size()); }
  int l() const { return static_cast<int>(structural_sets.size()); }
};

// k-means++ selection over whole series: first pick uniform, every further
// pick proportional to the squared distance to the nearest chosen series.
// Distances are Euclidean over the flattened series after per-dimension
// z-scoring, so no observation dimension dominates.
inline std::vector<int> kmeanspp_select(const TimeSeriesPanel& panel, int k, RngStream& rng) {
  panel.validate();
  const int n = panel.n();
  if (k < 1 || k > n) throw InvalidInputError("k-means++ needs 1 <= k <= n");
  const int T = panel.T();
  const int m = panel.m();

  Eigen::MatrixXd flat(n, T * m);
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd& s = panel.series[static_cast<std::size_t>(i)];
    for (int l = 0; l < m; ++l) flat.block(i, l * T, 1, T) = s.col(l).transpose();
  }
  for (int l = 0; l < m; ++l) {
    auto block = flat.middleCols(l * T, T);
    const double mean = block.mean();
    const double sd = std::sqrt((block.array() - mean).square().sum() /
                                std::max(1.0, static_cast<double>(block.size()) - 1.0));
    if (sd > 0.0) block = (block.array() - mean) / sd;
  }

  std::vector<int> chosen;
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  auto pick = [&](int idx) {
    chosen.push_back(idx);
    taken[static_cast<std::size_t>(idx)] = true;
  };
  pick(rng.uniform_int(n));
  Eigen::VectorXd d2 = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(chosen.size()) < k) {
    const int last = chosen.back();
    for (int i = 0; i < n; ++i) {
      const double d = (flat.row(i) - flat.row(last)).squaredNorm();
      d2[i] = std::min(d2[i], d);
    }
    Eigen::VectorXd weights = d2;
    for (int i = 0; i < n; ++i) {
      if (taken[static_cast<std::size_t>(i)]) weights[i] = 0.0;
    }
    if (weights.sum() > 0.0) {
      pick(rng.categorical(weights));
    } else {
      // Duplicate series: every remaining candidate sits on a chosen one.
      std::vector<int> open;
      for (int i = 0; i < n; ++i) {
        if (!taken[static_cast<std::size_t>(i)]) open.push_back(i);
      }
      pick(open[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(open.size())))]);
    }
  }
  return chosen;
}

namespace detail {

inline WeightedFitResult fit_single_series(const DlmSpec& spec, const Eigen::MatrixXd& series,
                                           const std::string& series_name) {
  DlmSpec attempt = spec;
  for (int tries = 0; tries < 3; ++tries) {
    try {
      WeightedObservations wobs;
      wobs.series = {&series};
      wobs.weights = Eigen::MatrixXd::Ones(1, series.rows());
      return fit_weighted_dlm(attempt, wobs, Eigen::MatrixXd(), DiagonalPrecision(), 1e-8, 100);
    } catch (const Error&) {
      // Retry with a tighter discount (less evolution noise).
      attempt.evo_discount = 1.0 - 0.5 * (1.0 - attempt.evo_discount);
    }
  }
  throw InitializationError("initialization fit failed for series '" + series_name + "'");
}

// Greedy candidate-to-cluster matching: walk (cluster, candidate) pairs in
// descending fitted-objective order, using each candidate once.
inline std::vector<int> assign_candidates(const InitPlan& plan) {
  const int k = plan.k();
  struct Pair {
    double value;
    int cluster;
    int candidate;
  };
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<std::size_t>(k) * static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const int set = plan.set_of_cluster[static_cast<std::size_t>(j)];
    for (int c = 0; c < k; ++c) {
      pairs.push_back(Pair{
          plan.fits[static_cast<std::size_t>(set)][static_cast<std::size_t>(c)].objective.back(),
          j, c});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const Pair& a, const Pair& b) { return a.value > b.value; });
  std::vector<int> candidate_of_cluster(static_cast<std::size_t>(k), -1);
  std::vector<bool> used(static_cast<std::size_t>(k), false);
  int assigned = 0;
  for (const auto& pr : pairs) {
    if (assigned == k) break;
    if (candidate_of_cluster[static_cast<std::size_t>(pr.cluster)] >= 0 ||
        used[static_cast<std::size_t>(pr.candidate)]) {
      continue;
    }
    candidate_of_cluster[static_cast<std::size_t>(pr.cluster)] = pr.candidate;
    used[static_cast<std::size_t>(pr.candidate)] = true;
    ++assigned;
  }
  return candidate_of_cluster;
}

}  // namespace detail

// Builds the initialization plan: k-means++ candidates, structural sets, and
// the l*k deduplicated single-series fits.
inline InitPlan make_init_plan(const TimeSeriesPanel& panel, const std::vector<DlmSpec>& specs,
                               RngStream& rng) {
  panel.validate();
  const int k = static_cast<int>(specs.size());
  InitPlan plan;
  plan.candidates = kmeanspp_select(panel, k, rng);

  plan.set_of_cluster.assign(static_cast<std::size_t>(k), -1);
  std::vector<std::string> tags;
  for (int j = 0; j < k; ++j) {
    const std::string tag = specs[static_cast<std::size_t>(j)].structural_tag();
    int set = -1;
    for (std::size_t s = 0; s < tags.size(); ++s) {
      if (tags[s] == tag) {
        set = static_cast<int>(s);
        break;
      }
    }
    if (set < 0) {
      set = static_cast<int>(tags.size());
      tags.push_back(tag);
      plan.structural_sets.emplace_back();
    }
    plan.structural_sets[static_cast<std::size_t>(set)].push_back(j);
    plan.set_of_cluster[static_cast<std::size_t>(j)] = set;
  }

  const int l = plan.l();
  plan.fits.assign(static_cast<std::size_t>(l), std::vector<WeightedFitResult>(
                                                    static_cast<std::size_t>(k)));
  std::vector<std::pair<int, int>> jobs;
  for (int s = 0; s < l; ++s) {
    for (int c = 0; c < k; ++c) jobs.emplace_back(s, c);
  }
  parallel_for(static_cast<int>(jobs.size()), [&](int idx) {
    const auto [s, c] = jobs[static_cast<std::size_t>(idx)];
    const int rep_cluster = plan.structural_sets[static_cast<std::size_t>(s)].front();
    const int series_idx = plan.candidates[static_cast<std::size_t>(c)];
    plan.fits[static_cast<std::size_t>(s)][static_cast<std::size_t>(c)] =
        detail::fit_single_series(specs[static_cast<std::size_t>(rep_cluster)],
                                  panel.series[static_cast<std::size_t>(series_idx)],
                                  panel.ids[static_cast<std::size_t>(series_idx)]);
  });
  plan.fit_count = l * k;
  return plan;
}

// Static initialization: assign fitted candidates to clusters, then set the
// memberships from the rescaled likelihood weights (no eta factor).
inline StaticParams initialize_static(const StaticMixtureModel& model, const InitPlan& plan) {
  model.validate();
  const int n = model.panel->n();
  const int k = model.k();
  const auto candidate_of_cluster = detail::assign_candidates(plan);

  StaticParams params;
  params.clusters.resize(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const auto& fit = plan.fits[static_cast<std::size_t>(plan.set_of_cluster[static_cast<std::size_t>(j)])]
                               [static_cast<std::size_t>(candidate_of_cluster[static_cast<std::size_t>(j)])];
    params.clusters[static_cast<std::size_t>(j)] = ClusterParams{fit.path.theta, fit.phi.phi};
  }
  const auto table = log_density_table(model, params.clusters);
  params.eta.resize(n, k);
  params.z.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    params.eta.row(i) = detail::guarded_posterior(
                            Eigen::VectorXd::Zero(k),
                            table[static_cast<std::size_t>(i)].rowwise().sum())
                            .transpose();
    int arg = 0;
    params.eta.row(i).maxCoeff(&arg);
    params.z[static_cast<std::size_t>(i)] = arg;
  }
  return params;
}

// Dynamic initialization: same cluster assignment; memberships come from the
// per-instant normalized densities.
inline DynamicParams initialize_dynamic(const DynamicMixtureModel& model, const InitPlan& plan) {
  model.validate();
  const int n = model.panel->n();
  const int T = model.panel->T();
  const int k = model.k();
  const auto candidate_of_cluster = detail::assign_candidates(plan);

  DynamicParams params;
  params.delta = model.delta;
  params.clusters.resize(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const auto& fit = plan.fits[static_cast<std::size_t>(plan.set_of_cluster[static_cast<std::size_t>(j)])]
                               [static_cast<std::size_t>(candidate_of_cluster[static_cast<std::size_t>(j)])];
    params.clusters[static_cast<std::size_t>(j)] = ClusterParams{fit.path.theta, fit.phi.phi};
  }
  const auto table = log_density_table(model.as_static(), params.clusters);
  params.eta.assign(static_cast<std::size_t>(n), Eigen::MatrixXd(T, k));
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < T; ++t) {
      params.eta[static_cast<std::size_t>(i)].row(t) =
          detail::guarded_posterior(Eigen::VectorXd::Zero(k),
                                    table[static_cast<std::size_t>(i)].col(t))
              .transpose();
    }
  }
  detail::fill_modal_assignments(params);
  return params;
}

// Discount heuristic: a series whose independent-weights modal cluster ever
// changes between adjacent instants gets a moderate delta, all others one
// close to the static boundary.
inline constexpr double kDeltaSwitcher = 0.5;
inline constexpr double kDeltaStable = 0.95;

inline Eigen::VectorXd initialize_delta(const DynamicMixtureModel& model,
                                        const DynamicParams& independent_fit) {
  const int n = model.panel->n();
  const int T = model.panel->T();
  if (static_cast<int>(independent_fit.z.size()) != n) {
    throw InvalidInputError("independent fit does not match the panel");
  }
  Eigen::VectorXd delta(n);
  for (int i = 0; i < n; ++i) {
    bool switches = false;
    const auto& z_i = independent_fit.z[static_cast<std::size_t>(i)];
    for (int t = 1; t < T; ++t) {
      if (z_i[static_cast<std::size_t>(t)] != z_i[static_cast<std::size_t>(t - 1)]) {
        switches = true;
        break;
      }
    }
    delta[i] = switches ? kDeltaSwitcher : kDeltaStable;
  }
  return delta;
}

}  // namespace dynclust
