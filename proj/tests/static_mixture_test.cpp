#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "dynclust/init.hpp"
#include "dynclust/static_mixture.hpp"
#include "dynclust/weighted_fit.hpp"
#include "test_support.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace dynclust;
using testsupport::InstanceRng;

namespace {

// Two flat clusters separated by a gap, a few series each.
TimeSeriesPanel separated_panel(int per_cluster, int T, double gap, double noise_sd,
                                std::uint64_t seed) {
  InstanceRng rng(seed);
  TimeSeriesPanel panel;
  panel.value_names = {"y1"};
  for (int i = 0; i < 2 * per_cluster; ++i) {
    const double level = i < per_cluster ? 0.0 : gap;
    MatrixXd y(T, 1);
    for (int t = 0; t < T; ++t) y(t, 0) = level + rng.normal(0.0, noise_sd);
    panel.ids.push_back("s" + std::string(i < 9 ? "0" : "") + std::to_string(i + 1));
    panel.series.push_back(std::move(y));
  }
  return panel;
}

StaticMixtureModel make_model(const TimeSeriesPanel& panel, int k, double discount = 0.9) {
  StaticMixtureModel model;
  model.panel = &panel;
  for (int j = 0; j < k; ++j) model.specs.push_back(random_walk_spec(panel.m(), discount));
  model.dirichlet_prior = VectorXd::Ones(k);
  return model;
}

std::vector<ClusterParams> flat_clusters(const std::vector<double>& levels, int T,
                                         double phi = 1.0) {
  std::vector<ClusterParams> clusters;
  for (double level : levels) {
    clusters.push_back(ClusterParams{MatrixXd::Constant(T, 1, level),
                                     VectorXd::Constant(1, phi)});
  }
  return clusters;
}

int accuracy_up_to_permutation(const std::vector<int>& got, const std::vector<int>& truth) {
  int direct = 0, flipped = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    direct += got[i] == truth[i];
    flipped += got[i] == 1 - truth[i];
  }
  return std::max(direct, flipped);
}

}  // namespace

TEST(LogDensityTable, ZeroResidualValue) {
  TimeSeriesPanel panel;
  panel.ids = {"a"};
  panel.series = {MatrixXd::Constant(3, 1, 2.0)};
  panel.value_names = {"y1"};
  const auto model = make_model(panel, 1);
  const double phi = 4.0;
  const auto table = log_density_table(model, flat_clusters({2.0}, 3, phi));
  // -0.5 log(2 pi / phi)
  EXPECT_NEAR(table[0](0, 0), 0.5 * (std::log(phi) - std::log(2.0 * M_PI)), 1e-14);
}

TEST(LogDensityTable, LargePrecisionWithResidualDivergesDown) {
  TimeSeriesPanel panel;
  panel.ids = {"a"};
  panel.series = {MatrixXd::Constant(1, 1, 1.0)};
  panel.value_names = {"y1"};
  const auto model = make_model(panel, 1);
  const double d1 = log_density_table(model, flat_clusters({0.0}, 1, 1e2))[0](0, 0);
  const double d2 = log_density_table(model, flat_clusters({0.0}, 1, 1e6))[0](0, 0);
  const double d3 = log_density_table(model, flat_clusters({0.0}, 1, 1e10))[0](0, 0);
  EXPECT_GT(d1, d2);
  EXPECT_GT(d2, d3);
}

TEST(LogDensityTable, MatchesDirectGaussianPdf) {
  InstanceRng rng(31);
  TimeSeriesPanel panel;
  panel.value_names = {"u", "v"};
  for (int i = 0; i < 2; ++i) {
    panel.ids.push_back("s" + std::to_string(i));
    panel.series.push_back(
        MatrixXd::NullaryExpr(3, 2, [&](int, int) { return rng.normal(); }));
  }
  StaticMixtureModel model;
  model.panel = &panel;
  model.specs = {random_walk_spec(2, 0.9), random_walk_spec(2, 0.9)};
  model.dirichlet_prior = VectorXd::Ones(2);
  std::vector<ClusterParams> clusters;
  for (int j = 0; j < 2; ++j) {
    clusters.push_back(
        ClusterParams{MatrixXd::NullaryExpr(3, 2, [&](int, int) { return rng.normal(); }),
                      Eigen::Vector2d(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0))});
  }
  const auto table = log_density_table(model, clusters);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      for (int t = 0; t < 3; ++t) {
        double expected = 0.0;
        for (int l = 0; l < 2; ++l) {
          const double var = 1.0 / clusters[static_cast<std::size_t>(j)].phi[l];
          const double r = panel.series[static_cast<std::size_t>(i)](t, l) -
                           clusters[static_cast<std::size_t>(j)].theta(t, l);
          expected += -0.5 * std::log(2.0 * M_PI * var) - 0.5 * r * r / var;
        }
        EXPECT_NEAR(table[static_cast<std::size_t>(i)](j, t), expected, 1e-12);
      }
    }
  }
}

TEST(LogDensityTable, RejectsNonPositivePrecision) {
  TimeSeriesPanel panel;
  panel.ids = {"a"};
  panel.series = {MatrixXd::Constant(1, 1, 1.0)};
  const auto model = make_model(panel, 1);
  auto clusters = flat_clusters({0.0}, 1);
  clusters[0].phi[0] = 0.0;
  EXPECT_THROW(log_density_table(model, clusters), InvalidInputError);
}

TEST(MembershipPosterior, SingleClusterIsCertain) {
  TimeSeriesPanel panel;
  panel.ids = {"a"};
  panel.series = {MatrixXd::Constant(4, 1, 1.0)};
  const auto model = make_model(panel, 1);
  StaticParams params;
  params.clusters = flat_clusters({1.0}, 4);
  params.eta = MatrixXd::Ones(1, 1);
  params.z = {0};
  const VectorXd post = membership_posterior(model, params, 0);
  EXPECT_DOUBLE_EQ(post[0], 1.0);
}

TEST(MembershipPosterior, IdenticalClustersReturnPriorWeights) {
  TimeSeriesPanel panel;
  panel.ids = {"a"};
  panel.series = {MatrixXd::Constant(5, 1, 0.3)};
  const auto model = make_model(panel, 2);
  StaticParams params;
  params.clusters = flat_clusters({0.0, 0.0}, 5);
  params.eta = MatrixXd(1, 2);
  params.eta << 0.3, 0.7;
  params.z = {0};
  const VectorXd post = membership_posterior(model, params, 0);
  EXPECT_NEAR(post[0], 0.3, 1e-12);
  EXPECT_NEAR(post[1], 0.7, 1e-12);
}

// The guard against underflow: naive products hit exact zero at T = 200 while
// the rescaled form matches the extended-precision reference.
TEST(MembershipPosterior, GuardedFormSurvivesUnderflow) {
  const int T = 200;
  InstanceRng rng(41);
  TimeSeriesPanel panel;
  panel.ids = {"a"};
  MatrixXd y(T, 1);
  for (int t = 0; t < T; ++t) y(t, 0) = rng.normal(0.0, 1.0);
  panel.series = {y};
  const auto model = make_model(panel, 2);
  StaticParams params;
  // Offset clusters: per-instant densities around e^-6, so the T = 200
  // product sits far below DBL_MIN yet comfortably inside long double range.
  params.clusters = flat_clusters({1.5, 1.7}, T, 4.0);
  params.eta = MatrixXd(1, 2);
  params.eta << 0.5, 0.5;
  params.z = {0};

  std::vector<MatrixXd> means = {params.clusters[0].theta, params.clusters[1].theta};
  std::vector<VectorXd> phis = {params.clusters[0].phi, params.clusters[1].phi};
  const auto naive = testsupport::direct_membership_posterior<double>(
      params.eta.row(0).transpose(), y, means, phis);
  EXPECT_EQ(naive[0], 0.0);  // 0/0 without the guard
  EXPECT_EQ(naive[1], 0.0);

  const auto reference = testsupport::direct_membership_posterior<long double>(
      params.eta.row(0).transpose(), y, means, phis);
  const VectorXd post = membership_posterior(model, params, 0);
  EXPECT_NEAR(post.sum(), 1.0, 1e-12);
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(post[j], static_cast<double>(reference[static_cast<std::size_t>(j)]), 1e-6);
  }
}

TEST(MembershipPosterior, MatchesExtendedPrecisionAcrossRandomInstances) {
  for (int rep = 0; rep < 25; ++rep) {
    InstanceRng rng(600 + rep);
    const int T = rep % 5 == 0 ? 500 : rng.uniform_int(3, 60);
    const int k = rng.uniform_int(2, 4);
    TimeSeriesPanel panel;
    panel.ids = {"a"};
    MatrixXd y(T, 1);
    for (int t = 0; t < T; ++t) y(t, 0) = rng.normal(0.0, 1.0);
    panel.series = {y};
    const auto model = make_model(panel, k);
    StaticParams params;
    std::vector<double> levels;
    for (int j = 0; j < k; ++j) levels.push_back(rng.uniform(-2.0, 2.0));
    params.clusters = flat_clusters(levels, T, rng.uniform(0.5, 3.0));
    params.eta = MatrixXd(1, k);
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
      params.eta(0, j) = rng.uniform(0.1, 1.0);
      total += params.eta(0, j);
    }
    params.eta.row(0) /= total;
    params.z = {0};

    std::vector<MatrixXd> means;
    std::vector<VectorXd> phis;
    for (int j = 0; j < k; ++j) {
      means.push_back(params.clusters[static_cast<std::size_t>(j)].theta);
      phis.push_back(params.clusters[static_cast<std::size_t>(j)].phi);
    }
    const auto reference = testsupport::direct_membership_posterior<long double>(
        params.eta.row(0).transpose(), y, means, phis);
    const VectorXd post = membership_posterior(model, params, 0);
    for (int j = 0; j < k; ++j) {
      EXPECT_NEAR(post[j], static_cast<double>(reference[static_cast<std::size_t>(j)]), 1e-6)
          << "rep " << rep;
    }
  }
}

TEST(GibbsStepEta, SingleClusterAlwaysOne) {
  RngStream rng(1);
  const MatrixXd eta = gibbs_step_eta({0, 0, 0}, VectorXd::Ones(1), rng);
  EXPECT_TRUE((eta.array() == 1.0).all());
}

TEST(GibbsStepEta, PosteriorMeanMatchesBeta21) {
  RngStream rng(2);
  const int draws = 100000;
  double sum = 0.0, sq = 0.0;
  for (int d = 0; d < draws; ++d) {
    const MatrixXd eta = gibbs_step_eta({0}, VectorXd::Ones(2), rng);
    sum += eta(0, 0);
    sq += eta(0, 0) * eta(0, 0);
  }
  const double mean = sum / draws;
  const double sd = std::sqrt(sq / draws - mean * mean);
  const double se = sd / std::sqrt(static_cast<double>(draws));
  EXPECT_LT(std::abs(mean - 2.0 / 3.0), 4.0 * se);
}

TEST(GibbsStepEta, HugePriorConcentratesAtProportions) {
  RngStream rng(3);
  Eigen::Vector2d c0(3e6, 1e6);
  const MatrixXd eta = gibbs_step_eta({0}, VectorXd(c0), rng);
  EXPECT_NEAR(eta(0, 0), 0.75, 2e-3);
}

TEST(GibbsStepPhi, EmptyClusterDrawsFromPrior) {
  TimeSeriesPanel panel = separated_panel(2, 6, 4.0, 0.3, 7);
  auto model = make_model(panel, 2);
  const std::vector<int> z(4, 0);  // cluster 2 empty
  RngStream rng1(5), rng2(5);
  const auto draw1 = gibbs_step_phi(model, z, flat_clusters({0.0, 4.0}, 6), rng1);
  const auto draw2 = gibbs_step_phi(model, z, flat_clusters({0.0, 4.0}, 6), rng2);
  EXPECT_GT(draw1[1][0], 0.0);
  EXPECT_EQ(draw1[1][0], draw2[1][0]);  // seeded prior draw
}

TEST(GibbsStepPhi, ConcentratesAtResidualPrecision) {
  // 50 series, unit-variance residuals around level 0 => phi near 1.
  TimeSeriesPanel panel = separated_panel(25, 40, 0.0, 1.0, 8);
  auto model = make_model(panel, 1);
  const std::vector<int> z(static_cast<std::size_t>(panel.n()), 0);
  RngStream rng(6);
  const auto draws = gibbs_step_phi(model, z, flat_clusters({0.0}, 40), rng);
  EXPECT_NEAR(draws[0][0], 1.0, 0.2);
}

TEST(GibbsStepTheta, TwoIdenticalMembersEqualDoubledPrecision) {
  // Tiling algebra: two copies of a series carry the same information as one
  // copy observed with doubled precision. Compare filter moments directly.
  DlmSpec spec = random_walk_spec(1, 0.9);
  InstanceRng rng(9);
  MatrixXd y(10, 1);
  for (int t = 0; t < 10; ++t) y(t, 0) = rng.normal(1.0, 0.7);
  const VectorXd unit = VectorXd::Ones(2);
  const auto tiled =
      tile_replicates(spec, {&y, &y}, unit, DiagonalPrecision::ones(1));
  const auto filt_two = forward_filter(spec, tiled.blocks, default_prior_mean(1),
                                       default_prior_cov(1));
  const auto filt_double =
      forward_filter(spec, y, DiagonalPrecision(VectorXd::Constant(1, 2.0)),
                     default_prior_mean(1), default_prior_cov(1));
  for (int t = 0; t < 10; ++t) {
    EXPECT_NEAR(filt_two.m[t][0], filt_double.m[t][0], 1e-10);
    EXPECT_NEAR(filt_two.C[t](0, 0), filt_double.C[t](0, 0), 1e-10);
  }
}

TEST(GibbsStepTheta, EmptyClusterWalksPrior) {
  TimeSeriesPanel panel = separated_panel(2, 8, 4.0, 0.3, 10);
  auto model = make_model(panel, 2);
  const std::vector<int> z(4, 0);
  RngStream rng(7);
  const auto thetas = gibbs_step_theta(
      model, z, {VectorXd::Ones(1), VectorXd::Ones(1)}, rng);
  EXPECT_EQ(thetas[1].rows(), 8);
  EXPECT_TRUE(thetas[1].allFinite());
}

TEST(RunGibbs, RecoversSeparatedClusters) {
  TimeSeriesPanel panel = separated_panel(3, 15, 5.0, 0.3, 11);
  auto model = make_model(panel, 2);
  RngStream init_rng(12);
  const auto plan = make_init_plan(panel, model.specs, init_rng);
  const auto init = initialize_static(model, plan);
  GibbsOptions opt;
  opt.iterations = 400;
  opt.burn_in = 100;
  opt.seed = 13;
  opt.relabel = RelabelRef{0, 0};
  const GibbsTrace trace = run_gibbs(model, init, opt);
  EXPECT_EQ(trace.draws.size(), 300u);

  // Posterior modal assignments, clusters relabeled ascending at t=1.
  std::vector<int> modal(static_cast<std::size_t>(panel.n()), 0);
  for (int i = 0; i < panel.n(); ++i) {
    int count1 = 0;
    for (const auto& draw : trace.draws) count1 += draw.z[static_cast<std::size_t>(i)];
    modal[static_cast<std::size_t>(i)] = count1 * 2 > static_cast<int>(trace.draws.size());
  }
  const std::vector<int> truth = {0, 0, 0, 1, 1, 1};
  EXPECT_EQ(accuracy_up_to_permutation(modal, truth), panel.n());
}

TEST(RunGibbs, SeededReproducibility) {
  TimeSeriesPanel panel = separated_panel(2, 10, 4.0, 0.3, 14);
  auto model = make_model(panel, 2);
  RngStream init_rng(15);
  const auto plan = make_init_plan(panel, model.specs, init_rng);
  const auto init = initialize_static(model, plan);
  GibbsOptions opt;
  opt.iterations = 50;
  opt.burn_in = 10;
  opt.seed = 99;
  const GibbsTrace a = run_gibbs(model, init, opt);
  const GibbsTrace b = run_gibbs(model, init, opt);
  ASSERT_EQ(a.draws.size(), b.draws.size());
  for (std::size_t d = 0; d < a.draws.size(); ++d) {
    EXPECT_EQ(a.draws[d].z, b.draws[d].z);
    EXPECT_EQ((a.draws[d].eta - b.draws[d].eta).norm(), 0.0);
  }
}

TEST(RunGibbs, SingleClusterEtaIsDegenerate) {
  TimeSeriesPanel panel = separated_panel(2, 8, 0.0, 0.5, 16);
  auto model = make_model(panel, 1);
  RngStream init_rng(17);
  const auto plan = make_init_plan(panel, model.specs, init_rng);
  const auto init = initialize_static(model, plan);
  GibbsOptions opt;
  opt.iterations = 30;
  opt.burn_in = 5;
  opt.seed = 1;
  const GibbsTrace trace = run_gibbs(model, init, opt);
  for (const auto& draw : trace.draws) {
    EXPECT_TRUE((draw.eta.array() == 1.0).all());
  }
}

TEST(RunGibbs, ThinningControlsDrawCount) {
  TimeSeriesPanel panel = separated_panel(2, 6, 4.0, 0.3, 18);
  auto model = make_model(panel, 2);
  RngStream init_rng(19);
  const auto plan = make_init_plan(panel, model.specs, init_rng);
  const auto init = initialize_static(model, plan);
  GibbsOptions opt;
  opt.iterations = 90;
  opt.burn_in = 30;
  opt.thin = 3;
  opt.seed = 5;
  const GibbsTrace trace = run_gibbs(model, init, opt);
  EXPECT_EQ(trace.draws.size(), 20u);
}

TEST(RunGibbs, TwoSeedsAgreeWithinMonteCarloError) {
  TimeSeriesPanel panel = separated_panel(3, 12, 5.0, 0.3, 20);
  auto model = make_model(panel, 2);
  RngStream init_rng(21);
  const auto plan = make_init_plan(panel, model.specs, init_rng);
  const auto init = initialize_static(model, plan);
  GibbsOptions opt;
  opt.iterations = 600;
  opt.burn_in = 200;
  opt.relabel = RelabelRef{0, 0};
  opt.seed = 100;
  const GibbsTrace a = run_gibbs(model, init, opt);
  opt.seed = 200;
  const GibbsTrace b = run_gibbs(model, init, opt);
  auto mean_theta = [](const GibbsTrace& tr, int j) {
    double sum = 0.0;
    for (const auto& draw : tr.draws) sum += draw.theta[static_cast<std::size_t>(j)].mean();
    return sum / static_cast<double>(tr.draws.size());
  };
  for (int j = 0; j < 2; ++j) {
    EXPECT_NE(mean_theta(a, j), mean_theta(b, j));  // different draws
    EXPECT_NEAR(mean_theta(a, j), mean_theta(b, j), 0.05);
  }
}

TEST(EmEstimate, RecoversSeparatedClustersWithMonotoneQ) {
  TimeSeriesPanel panel = separated_panel(4, 15, 5.0, 0.3, 22);
  auto model = make_model(panel, 2);
  RngStream init_rng(23);
  const auto plan = make_init_plan(panel, model.specs, init_rng);
  const auto init = initialize_static(model, plan);
  const EmResult em = em_estimate(model, init, EmOptions{});
  EXPECT_TRUE(em.converged);
  for (std::size_t i = 1; i < em.q_path.size(); ++i) {
    EXPECT_GE(em.q_path[i], em.q_path[i - 1] - 1e-10);
  }
  // Responsibilities essentially binary and correct.
  const std::vector<int> truth = {0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_EQ(accuracy_up_to_permutation(em.params.z, truth), panel.n());
  for (int i = 0; i < panel.n(); ++i) {
    EXPECT_GT(em.params.eta.row(i).maxCoeff(), 0.999);
    EXPECT_NEAR(em.params.eta.row(i).sum(), 1.0, 1e-12);
  }
}

TEST(EmEstimate, SingleClusterReducesToUnitWeightFit) {
  TimeSeriesPanel panel = separated_panel(3, 12, 0.0, 0.4, 24);
  auto model = make_model(panel, 1);
  RngStream init_rng(25);
  const auto plan = make_init_plan(panel, model.specs, init_rng);
  const auto init = initialize_static(model, plan);
  const EmResult em = em_estimate(model, init, EmOptions{});
  EXPECT_TRUE((em.params.eta.array() == 1.0).all());

  WeightedObservations wobs =
      WeightedObservations::from_panel(panel, VectorXd::Ones(panel.n()));
  const auto direct = fit_weighted_dlm(model.specs[0], wobs, MatrixXd(),
                                       DiagonalPrecision(init.clusters[0].phi), 1e-9, 200);
  EXPECT_LT((em.params.clusters[0].theta - direct.path.theta).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(EmEstimate, PermutationEquivariance) {
  TimeSeriesPanel panel = separated_panel(3, 10, 4.0, 0.3, 26);
  auto model = make_model(panel, 2);
  RngStream init_rng(27);
  const auto plan = make_init_plan(panel, model.specs, init_rng);
  StaticParams init = initialize_static(model, plan);

  StaticParams swapped = init;
  std::swap(swapped.clusters[0], swapped.clusters[1]);
  swapped.eta.col(0).swap(swapped.eta.col(1));
  for (auto& z : swapped.z) z = 1 - z;

  EmOptions opt;
  opt.max_iter = 1;
  opt.tol = 1e-15;
  const EmResult a = em_estimate(model, init, opt);
  const EmResult b = em_estimate(model, swapped, opt);
  EXPECT_LT((a.params.clusters[0].theta - b.params.clusters[1].theta).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_LT((a.params.eta.col(0) - b.params.eta.col(1)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(a.q_path.back(), b.q_path.back(), 1e-9);
}

TEST(EmEstimate, CollapsedClusterIsReported) {
  TimeSeriesPanel panel = separated_panel(3, 10, 0.0, 0.4, 28);
  auto model = make_model(panel, 2);
  StaticParams init;
  init.clusters = flat_clusters({0.0, 1e6}, 10);  // second cluster absurdly far
  init.eta = MatrixXd::Constant(panel.n(), 2, 0.5);
  init.z.assign(static_cast<std::size_t>(panel.n()), 0);
  try {
    em_estimate(model, init, EmOptions{});
    FAIL() << "expected EmptyClusterError";
  } catch (const EmptyClusterError& e) {
    EXPECT_EQ(e.cluster(), 1);
  }
}

TEST(Relabel, OrderedInputIsIdentity) {
  StaticParams params;
  params.clusters = flat_clusters({1.0, 2.0}, 5);
  params.eta = MatrixXd(2, 2);
  params.eta << 0.9, 0.1, 0.2, 0.8;
  params.z = {0, 1};
  const StaticParams before = params;
  std::vector<DlmSpec> specs = {random_walk_spec(1, 0.9), random_walk_spec(1, 0.9)};
  relabel(params, specs, RelabelRef{2, 0});
  EXPECT_EQ(params.z, before.z);
  EXPECT_EQ((params.eta - before.eta).norm(), 0.0);
}

TEST(Relabel, SwappedClustersAreRestoredJointly) {
  StaticParams params;
  params.clusters = flat_clusters({5.0, 1.0}, 4);
  params.clusters[0].phi[0] = 9.0;
  params.clusters[1].phi[0] = 2.0;
  params.eta = MatrixXd(2, 2);
  params.eta << 0.9, 0.1, 0.2, 0.8;
  params.z = {0, 1};
  std::vector<DlmSpec> specs = {random_walk_spec(1, 0.9), random_walk_spec(1, 0.9)};
  relabel(params, specs, RelabelRef{0, 0});
  EXPECT_DOUBLE_EQ(params.clusters[0].theta(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(params.clusters[0].phi[0], 2.0);
  EXPECT_DOUBLE_EQ(params.clusters[1].phi[0], 9.0);
  EXPECT_DOUBLE_EQ(params.eta(0, 1), 0.9);
  EXPECT_EQ(params.z[0], 1);
  EXPECT_EQ(params.z[1], 0);

  // Idempotence.
  const StaticParams once = params;
  relabel(params, specs, RelabelRef{0, 0});
  EXPECT_EQ(params.z, once.z);
  EXPECT_EQ((params.eta - once.eta).norm(), 0.0);
}

TEST(Relabel, TieBrokenAtNextInstant) {
  StaticParams params;
  MatrixXd theta_a(3, 1), theta_b(3, 1);
  theta_a << 1.0, 9.0, 0.0;
  theta_b << 1.0, 2.0, 0.0;  // tie at t=0, b smaller at t=1
  params.clusters = {ClusterParams{theta_a, VectorXd::Ones(1)},
                     ClusterParams{theta_b, VectorXd::Ones(1)}};
  params.eta = MatrixXd::Constant(1, 2, 0.5);
  params.z = {0};
  std::vector<DlmSpec> specs = {random_walk_spec(1, 0.9), random_walk_spec(1, 0.9)};
  relabel(params, specs, RelabelRef{0, 0});
  EXPECT_DOUBLE_EQ(params.clusters[0].theta(1, 0), 2.0);
}

TEST(Relabel, OnlyStructuralSetsArePermuted) {
  // A random-walk cluster above a local-linear cluster: different sets, so
  // the ordering restriction must not swap them.
  StaticParams params;
  params.clusters = {ClusterParams{MatrixXd::Constant(3, 1, 7.0), VectorXd::Ones(1)},
                     ClusterParams{MatrixXd::Zero(3, 2), VectorXd::Ones(1)}};
  params.eta = MatrixXd::Constant(1, 2, 0.5);
  params.z = {0};
  std::vector<DlmSpec> specs = {random_walk_spec(1, 0.9), local_linear_spec(1, 0.9)};
  relabel(params, specs, RelabelRef{0, 0});
  EXPECT_DOUBLE_EQ(params.clusters[0].theta(0, 0), 7.0);
  EXPECT_EQ(params.clusters[1].theta.cols(), 2);
}

TEST(Relabel, MidChainFlipYieldsUnimodalMarginals) {
  // Build a trace whose labels flip halfway and check the restriction
  // separates the per-cluster marginals again.
  std::vector<DlmSpec> specs = {random_walk_spec(1, 0.9), random_walk_spec(1, 0.9)};
  GibbsTrace trace;
  InstanceRng rng(30);
  for (int d = 0; d < 200; ++d) {
    GibbsDraw draw;
    const double low = 1.0 + rng.normal(0.0, 0.05);
    const double high = 4.0 + rng.normal(0.0, 0.05);
    const bool flipped = d >= 100;
    draw.theta = {MatrixXd::Constant(5, 1, flipped ? high : low),
                  MatrixXd::Constant(5, 1, flipped ? low : high)};
    draw.phi = {VectorXd::Ones(1), VectorXd::Ones(1)};
    draw.eta = MatrixXd::Constant(1, 2, 0.5);
    draw.z = {flipped ? 1 : 0};
    trace.draws.push_back(std::move(draw));
  }
  relabel(trace, specs, RelabelRef{0, 0});
  double max_c0 = -1e300, min_c1 = 1e300;
  for (const auto& draw : trace.draws) {
    max_c0 = std::max(max_c0, draw.theta[0](0, 0));
    min_c1 = std::min(min_c1, draw.theta[1](0, 0));
    EXPECT_EQ(draw.z[0], 0);  // the flipped half is mapped back
  }
  EXPECT_LT(max_c0, min_c1);
}

TEST(PickReferenceTime, MaximizesMinimumSeparation) {
  MatrixXd theta_a(4, 1), theta_b(4, 1);
  theta_a << 0.0, 0.0, 0.0, 0.0;
  theta_b << 0.1, 3.0, 0.5, 0.2;
  std::vector<ClusterParams> clusters = {ClusterParams{theta_a, VectorXd::Ones(1)},
                                         ClusterParams{theta_b, VectorXd::Ones(1)}};
  std::vector<DlmSpec> specs = {random_walk_spec(1, 0.9), random_walk_spec(1, 0.9)};
  EXPECT_EQ(pick_reference_time(clusters, specs, 0), 1);
}
