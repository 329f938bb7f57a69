#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dynclust/errors.hpp"
#include "dynclust/rng.hpp"

namespace dynclust {

inline constexpr double kDiffusePriorVariance = 1e6;
inline constexpr double kDefaultWeightEpsilon = 1e-8;
inline constexpr double kLog2Pi = 1.8378770664093454836;

// Structural specification of one cluster's Dynamic Linear Model:
//   y_t = F theta_t + nu_t,        nu_t ~ N(0, V)
//   theta_t = G theta_{t-1} + w_t, w_t  ~ N(0, W_t)
// with W_t driven by the single discount factor evo_discount.
struct DlmSpec {
  Eigen::MatrixXd obs_matrix;   // F, m x p
  Eigen::MatrixXd evo_matrix;   // G, p x p
  double evo_discount = 0.9;    // in (0, 1]

  int obs_dim() const { return static_cast<int>(obs_matrix.rows()); }
  int state_dim() const { return static_cast<int>(obs_matrix.cols()); }

  // Two specs belong to the same structural set exactly when their (F, G)
  // pairs are entrywise equal; deriving the tag from the entries makes the
  // "iff" hold by construction.
  std::string structural_tag() const {
    std::string tag;
    tag.reserve(static_cast<std::size_t>(16 * (obs_matrix.size() + evo_matrix.size())));
    char buf[32];
    auto append = [&](double v) {
      std::snprintf(buf, sizeof(buf), "%.17g;", v);
      tag += buf;
    };
    for (int i = 0; i < obs_matrix.rows(); ++i)
      for (int j = 0; j < obs_matrix.cols(); ++j) append(obs_matrix(i, j));
    tag += '|';
    for (int i = 0; i < evo_matrix.rows(); ++i)
      for (int j = 0; j < evo_matrix.cols(); ++j) append(evo_matrix(i, j));
    return tag;
  }

  void validate() const {
    if (obs_matrix.rows() < 1 || obs_matrix.cols() < 1) {
      throw InvalidInputError("spec observational matrix must be non-empty");
    }
    if (evo_matrix.rows() != obs_matrix.cols() || evo_matrix.cols() != obs_matrix.cols()) {
      throw InvalidInputError("spec evolution matrix must be p x p");
    }
    if (!obs_matrix.allFinite() || !evo_matrix.allFinite()) {
      throw InvalidInputError("spec matrices must be finite");
    }
    if (!(evo_discount > 0.0) || evo_discount > 1.0) {
      throw InvalidInputError("spec discount must lie in (0, 1]");
    }
  }
};

enum class StructuralFamily { RandomWalk, LocalLinear };

// One structural block per observation dimension, stacked block-diagonally.
inline DlmSpec make_spec(const std::vector<StructuralFamily>& families, double discount) {
  if (families.empty()) throw InvalidInputError("spec needs at least one structural block");
  int p = 0;
  for (auto f : families) p += (f == StructuralFamily::RandomWalk) ? 1 : 2;
  const int m = static_cast<int>(families.size());
  DlmSpec spec;
  spec.obs_matrix = Eigen::MatrixXd::Zero(m, p);
  spec.evo_matrix = Eigen::MatrixXd::Zero(p, p);
  spec.evo_discount = discount;
  int col = 0;
  for (int l = 0; l < m; ++l) {
    if (families[static_cast<std::size_t>(l)] == StructuralFamily::RandomWalk) {
      spec.obs_matrix(l, col) = 1.0;
      spec.evo_matrix(col, col) = 1.0;
      col += 1;
    } else {
      spec.obs_matrix(l, col) = 1.0;
      spec.evo_matrix(col, col) = 1.0;
      spec.evo_matrix(col, col + 1) = 1.0;
      spec.evo_matrix(col + 1, col + 1) = 1.0;
      col += 2;
    }
  }
  spec.validate();
  return spec;
}

inline DlmSpec random_walk_spec(int m, double discount) {
  return make_spec(std::vector<StructuralFamily>(static_cast<std::size_t>(m),
                                                 StructuralFamily::RandomWalk),
                   discount);
}

inline DlmSpec local_linear_spec(int m, double discount) {
  return make_spec(std::vector<StructuralFamily>(static_cast<std::size_t>(m),
                                                 StructuralFamily::LocalLinear),
                   discount);
}

// Diagonal observational precision: V = diag(1/phi).
struct DiagonalPrecision {
  Eigen::VectorXd phi;

  DiagonalPrecision() = default;
  explicit DiagonalPrecision(Eigen::VectorXd values) : phi(std::move(values)) {}
  static DiagonalPrecision ones(int m) { return DiagonalPrecision(Eigen::VectorXd::Ones(m)); }

  int dim() const { return static_cast<int>(phi.size()); }
  Eigen::VectorXd variances() const { return phi.cwiseInverse(); }

  void validate() const {
    if (phi.size() < 1) throw InvalidInputError("precision vector is empty");
    for (int l = 0; l < phi.size(); ++l) {
      if (!(phi[l] > 0.0) || !std::isfinite(phi[l])) {
        throw InvalidInputError("precision entries must be positive and finite");
      }
    }
  }
};

// Stacked observations for one time instant; rows() may be zero (no update).
struct ObsBlock {
  Eigen::VectorXd y;
  Eigen::MatrixXd F;    // rows() x p
  Eigen::VectorXd var;  // observational variance per row

  int rows() const { return static_cast<int>(y.size()); }
};

// Per-time filtering quantities, retained for smoothing and sampling.
struct FilterOutput {
  std::vector<Eigen::VectorXd> a, m;     // prior / posterior means
  std::vector<Eigen::MatrixXd> R, C, W;  // prior / posterior / evolution covariances
  double loglik = 0.0;                   // one-step-ahead predictive log-likelihood

  int T() const { return static_cast<int>(m.size()); }
};

// Smoothed state trajectory. theta holds the mode (= mean) path or a sampled
// path; smooth_cov is filled by the mode smoother only.
struct StatePath {
  Eigen::MatrixXd theta;                   // T x p
  std::vector<Eigen::MatrixXd> smooth_cov; // T matrices, p x p (mode path only)

  int T() const { return static_cast<int>(theta.rows()); }
};

namespace detail {

inline void symmetrize(Eigen::MatrixXd& M) { M = 0.5 * (M + M.transpose()).eval(); }

struct PsdFactor {
  Eigen::MatrixXd vectors;
  Eigen::VectorXd values;  // clipped at zero
  int rank = 0;
};

inline PsdFactor psd_factor(const Eigen::MatrixXd& M) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  if (es.info() != Eigen::Success) {
    throw NumericalError("eigendecomposition failed on a covariance matrix");
  }
  PsdFactor f;
  f.vectors = es.eigenvectors();
  f.values = es.eigenvalues().cwiseMax(0.0);
  const double tol = f.values.maxCoeff() * 1e-12;
  for (int i = 0; i < f.values.size(); ++i) {
    if (f.values[i] > tol) ++f.rank;
    else f.values[i] = 0.0;
  }
  return f;
}

inline Eigen::MatrixXd pinv_psd(const Eigen::MatrixXd& M) {
  const PsdFactor f = psd_factor(M);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(f.values.size());
  for (int i = 0; i < f.values.size(); ++i) {
    if (f.values[i] > 0.0) inv[i] = 1.0 / f.values[i];
  }
  return f.vectors * inv.asDiagonal() * f.vectors.transpose();
}

// Log-density of N(mean, cov) evaluated at x, with cov possibly singular:
// the quadratic form and determinant run over the positive eigenspace.
inline double gaussian_logpdf_psd(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                                  const Eigen::MatrixXd& cov) {
  const PsdFactor f = psd_factor(cov);
  const Eigen::VectorXd d = f.vectors.transpose() * (x - mean);
  double out = 0.0;
  for (int i = 0; i < f.values.size(); ++i) {
    if (f.values[i] > 0.0) {
      out -= 0.5 * (kLog2Pi + std::log(f.values[i]) + d[i] * d[i] / f.values[i]);
    }
  }
  return out;
}

inline Eigen::VectorXd sample_mvn(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                  RngStream& rng) {
  const PsdFactor f = psd_factor(cov);
  Eigen::VectorXd z(mean.size());
  for (int i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return mean + f.vectors * (f.values.cwiseSqrt().asDiagonal() * z);
}

}  // namespace detail

// W_t = ((1 - delta) / delta) * G C_{t-1} G'. delta = 1 gives exactly zero.
inline Eigen::MatrixXd discount_evolution_variance(const DlmSpec& spec,
                                                   const Eigen::MatrixXd& prior_cov) {
  spec.validate();
  if (prior_cov.rows() != spec.state_dim() || prior_cov.cols() != spec.state_dim()) {
    throw InvalidInputError("prior covariance has wrong dimensions");
  }
  if (!prior_cov.allFinite()) {
    throw InvalidInputError("prior covariance holds non-finite values");
  }
  if (spec.evo_discount == 1.0) {
    return Eigen::MatrixXd::Zero(spec.state_dim(), spec.state_dim());
  }
  const double factor = (1.0 - spec.evo_discount) / spec.evo_discount;
  Eigen::MatrixXd w =
      factor * spec.evo_matrix * prior_cov * spec.evo_matrix.transpose();
  detail::symmetrize(w);
  return w;
}

inline Eigen::VectorXd default_prior_mean(int p) { return Eigen::VectorXd::Zero(p); }

inline Eigen::MatrixXd default_prior_cov(int p) {
  return kDiffusePriorVariance * Eigen::MatrixXd::Identity(p, p);
}

// Kalman forward filter over per-time observation blocks. Rows carry
// independent noise (diagonal V), so each block is absorbed one scalar
// observation at a time; empty blocks perform the prior-only step. When
// w_path is given it overrides the discount construction.
inline FilterOutput forward_filter(const DlmSpec& spec, const std::vector<ObsBlock>& blocks,
                                   const Eigen::VectorXd& prior_mean,
                                   const Eigen::MatrixXd& prior_cov,
                                   const std::vector<Eigen::MatrixXd>* w_path = nullptr) {
  spec.validate();
  const int p = spec.state_dim();
  const int T = static_cast<int>(blocks.size());
  if (T < 1) throw InvalidInputError("filter needs at least one time instant");
  if (prior_mean.size() != p || prior_cov.rows() != p || prior_cov.cols() != p) {
    throw InvalidInputError("filter prior has wrong dimensions");
  }
  if (!prior_mean.allFinite() || !prior_cov.allFinite()) {
    throw InvalidInputError("filter prior holds non-finite values");
  }
  if (w_path && static_cast<int>(w_path->size()) != T) {
    throw InvalidInputError("explicit evolution variance path has wrong length");
  }

  FilterOutput out;
  out.a.resize(static_cast<std::size_t>(T));
  out.R.resize(static_cast<std::size_t>(T));
  out.m.resize(static_cast<std::size_t>(T));
  out.C.resize(static_cast<std::size_t>(T));
  out.W.resize(static_cast<std::size_t>(T));

  Eigen::VectorXd m_prev = prior_mean;
  Eigen::MatrixXd C_prev = prior_cov;
  const Eigen::MatrixXd& G = spec.evo_matrix;

  for (int t = 0; t < T; ++t) {
    const std::size_t ti = static_cast<std::size_t>(t);
    Eigen::MatrixXd P = G * C_prev * G.transpose();
    detail::symmetrize(P);
    out.W[ti] = w_path ? (*w_path)[ti] : discount_evolution_variance(spec, C_prev);
    out.a[ti] = G * m_prev;
    out.R[ti] = P + out.W[ti];
    detail::symmetrize(out.R[ti]);

    Eigen::VectorXd m = out.a[ti];
    Eigen::MatrixXd C = out.R[ti];
    const ObsBlock& block = blocks[ti];
    if (block.rows() > 0) {
      if (block.F.rows() != block.rows() || block.F.cols() != p ||
          block.var.size() != block.rows()) {
        throw InvalidInputError("observation block has inconsistent dimensions at t=" +
                                std::to_string(t + 1));
      }
      for (int r = 0; r < block.rows(); ++r) {
        const Eigen::RowVectorXd f = block.F.row(r);
        const Eigen::VectorXd Cf = C * f.transpose();
        const double q = f.dot(Cf) + block.var[r];
        if (!(q > 0.0) || !std::isfinite(q)) {
          throw NumericalError("singular innovation covariance in forward filter", t);
        }
        const double e = block.y[r] - f.dot(m);
        m += Cf * (e / q);
        C -= (Cf * Cf.transpose()) / q;
        detail::symmetrize(C);
        out.loglik -= 0.5 * (kLog2Pi + std::log(q) + e * e / q);
      }
    }
    if (!m.allFinite() || !C.allFinite()) {
      throw NumericalError("filter moments became non-finite", t);
    }
    out.m[ti] = std::move(m);
    out.C[ti] = std::move(C);
    m_prev = out.m[ti];
    C_prev = out.C[ti];
  }
  return out;
}

// Single-series convenience: one m-dimensional observation per time instant.
inline FilterOutput forward_filter(const DlmSpec& spec, const Eigen::MatrixXd& obs,
                                   const DiagonalPrecision& precision,
                                   const Eigen::VectorXd& prior_mean,
                                   const Eigen::MatrixXd& prior_cov) {
  precision.validate();
  if (obs.cols() != spec.obs_dim() || precision.dim() != spec.obs_dim()) {
    throw InvalidInputError("observation matrix does not match the spec dimension");
  }
  const Eigen::VectorXd var = precision.variances();
  std::vector<ObsBlock> blocks(static_cast<std::size_t>(obs.rows()));
  for (int t = 0; t < obs.rows(); ++t) {
    blocks[static_cast<std::size_t>(t)] = ObsBlock{obs.row(t).transpose(), spec.obs_matrix, var};
  }
  return forward_filter(spec, blocks, prior_mean, prior_cov);
}

// Mode (= mean) trajectory of the joint smoothing distribution, with the
// marginal smoothing covariances retained for uncertainty bands.
inline StatePath backward_smooth_mode(const DlmSpec& spec, const FilterOutput& filt) {
  const int T = filt.T();
  const int p = spec.state_dim();
  StatePath path;
  path.theta.resize(T, p);
  path.smooth_cov.resize(static_cast<std::size_t>(T));

  Eigen::VectorXd s = filt.m.back();
  Eigen::MatrixXd S = filt.C.back();
  path.theta.row(T - 1) = s.transpose();
  path.smooth_cov[static_cast<std::size_t>(T - 1)] = S;
  const Eigen::MatrixXd& G = spec.evo_matrix;
  for (int t = T - 2; t >= 0; --t) {
    const std::size_t ti = static_cast<std::size_t>(t);
    const Eigen::MatrixXd B =
        filt.C[ti] * G.transpose() * detail::pinv_psd(filt.R[ti + 1]);
    if (!B.allFinite()) {
      throw NumericalError("singular prior covariance in backward gain", t);
    }
    s = filt.m[ti] + B * (s - filt.a[ti + 1]);
    Eigen::MatrixXd S_new =
        filt.C[ti] - B * (filt.R[ti + 1] - S) * B.transpose();
    detail::symmetrize(S_new);
    S = std::move(S_new);
    if (!s.allFinite() || !S.allFinite()) {
      throw NumericalError("smoother moments became non-finite", t);
    }
    path.theta.row(t) = s.transpose();
    path.smooth_cov[ti] = S;
  }
  return path;
}

// One joint draw from the smoothing distribution (backward sampling).
inline Eigen::MatrixXd backward_sample(const DlmSpec& spec, const FilterOutput& filt,
                                       RngStream& rng) {
  const int T = filt.T();
  const int p = spec.state_dim();
  Eigen::MatrixXd theta(T, p);
  Eigen::VectorXd draw = detail::sample_mvn(filt.m.back(), filt.C.back(), rng);
  theta.row(T - 1) = draw.transpose();
  const Eigen::MatrixXd& G = spec.evo_matrix;
  for (int t = T - 2; t >= 0; --t) {
    const std::size_t ti = static_cast<std::size_t>(t);
    const Eigen::MatrixXd B =
        filt.C[ti] * G.transpose() * detail::pinv_psd(filt.R[ti + 1]);
    if (!B.allFinite()) {
      throw NumericalError("singular prior covariance in backward gain", t);
    }
    const Eigen::VectorXd h = filt.m[ti] + B * (draw - filt.a[ti + 1]);
    Eigen::MatrixXd H = filt.C[ti] - B * filt.R[ti + 1] * B.transpose();
    detail::symmetrize(H);
    draw = detail::sample_mvn(h, H, rng);
    if (!draw.allFinite()) {
      throw NumericalError("backward sample became non-finite", t);
    }
    theta.row(t) = draw.transpose();
  }
  return theta;
}

// Stacked replicate observations for a cluster, one block per time instant.
struct TiledObservations {
  std::vector<ObsBlock> blocks;
  int active = 0;  // total (series, time) entries retained

  bool empty() const { return active == 0; }
};

// Vertical tiling of member series. Series i at time t contributes m rows
// with observational variance V / gamma_{it}; entries with weight below
// eps_w are dropped before tiling. Weights are n_members x T for per-time
// memberships; an n_members x 1 column (a static weight per series) is
// broadcast across the window.
inline TiledObservations tile_replicates(const DlmSpec& spec,
                                         const std::vector<const Eigen::MatrixXd*>& members,
                                         const Eigen::MatrixXd& raw_weights,
                                         const DiagonalPrecision& precision,
                                         double eps_w = kDefaultWeightEpsilon) {
  spec.validate();
  precision.validate();
  const int m = spec.obs_dim();
  if (precision.dim() != m) {
    throw InvalidInputError("precision dimension does not match the spec");
  }
  const int n_members = static_cast<int>(members.size());
  if (raw_weights.rows() != n_members) {
    throw InvalidInputError("weight rows do not match the member count");
  }
  int T = 0;
  for (const auto* s : members) {
    if (s == nullptr) throw InvalidInputError("null member series");
    if (T == 0) T = static_cast<int>(s->rows());
    if (s->rows() != T || s->cols() != m) {
      throw InvalidInputError("member series shapes do not agree");
    }
  }
  Eigen::MatrixXd weights;
  if (n_members > 0 && raw_weights.cols() == 1 && T > 1) {
    weights = raw_weights.col(0).replicate(1, T);
  } else {
    weights = raw_weights;
  }
  if (n_members > 0 && weights.cols() != T) {
    throw InvalidInputError("weight columns do not match the series length");
  }
  if (!weights.allFinite()) throw InvalidInputError("weights must be finite");

  const Eigen::VectorXd base_var = precision.variances();
  TiledObservations out;
  out.blocks.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    std::vector<int> active;
    for (int i = 0; i < n_members; ++i) {
      if (weights(i, t) >= eps_w) active.push_back(i);
    }
    ObsBlock& block = out.blocks[static_cast<std::size_t>(t)];
    const int rows = static_cast<int>(active.size()) * m;
    block.y.resize(rows);
    block.F.resize(rows, spec.state_dim());
    block.var.resize(rows);
    int row = 0;
    for (int i : active) {
      block.y.segment(row, m) = members[static_cast<std::size_t>(i)]->row(t).transpose();
      block.F.middleRows(row, m) = spec.obs_matrix;
      block.var.segment(row, m) = base_var / weights(i, t);
      row += m;
    }
    out.active += static_cast<int>(active.size());
  }
  return out;
}

}  // namespace dynclust
