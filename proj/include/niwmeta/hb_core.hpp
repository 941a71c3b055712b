#pragma once

#include <functional>

#include "niwmeta/model.hpp"
#include "niwmeta/numerics.hpp"

namespace niwmeta {

/// NIW variational posterior q(mu, Sigma) = N(mu; m0, Sigma / l0) IW(Sigma; V0, n0)
/// with diagonal V0 and l0 = infinity.
///
/// Stored unconstrained: V0 = exp(rho_v), n0 = (d + 1) + softplus(rho_n).
struct GlobalPosterior {
  Vec m0;
  Vec rho_v;
  double rho_n = 0.0;

  Index dim() const { return m0.size(); }
  Vec v0() const { return rho_v.array().exp(); }
  double n0() const { return static_cast<double>(dim()) + 1.0 + softplus(rho_n); }
  /// Prior precision n0 / V0 seen by every episode.
  Vec prior_precision() const { return n0() * (-rho_v.array()).exp(); }

  /// Builds the unconstrained form from (m0, V0, n0); n0 must exceed d + 1.
  static GlobalPosterior from_natural(Vec m0, const Vec& v0, double n0);
};

/// Hyper-prior of the NIW prior on phi. Kept for the record; the
/// infinite-episode objective does not depend on it.
struct PriorHyper {
  Vec mu0;
  DiagMat sigma0;
  double lambda0 = 1.0;
  double nu0 = 1.0;
};

struct DiagGaussian {
  Vec mean;
  DiagMat var;

  Index dim() const { return mean.size(); }
};

/// Quadratic fit of an episode loss: l(theta) ~ 1/2 (theta - m_bar)^T A_bar (theta - m_bar).
struct EpisodeMoments {
  Vec m_bar;
  DiagMat a_bar;
};

struct SgldConfig {
  int steps = 5;       // M_L
  int burn_in = 2;     // B
  double step_size = 1e-3;
  double precision_floor = 1e-6;
  double precision_cap = 1e6;

  void validate() const;
};

using LossGradFn = std::function<LossGrad(const Vec&)>;

/// SGLD chain theta <- theta - (eta/2) grad + N(0, eta I) started at `init`.
/// Returns the mean and clamped inverse variance of the post-burn-in iterates.
/// Throws NumericError on a non-finite gradient.
EpisodeMoments sgld_moments(const LossGradFn& loss, const Vec& init, const SgldConfig& cfg,
                            Rng& rng);

/// Closed-form minimizer of the per-episode objective:
///   V* = (A_bar + n0 V0^-1)^-1,  m* = V* (A_bar m_bar + n0 V0^-1 m0).
DiagGaussian episodic_posterior(const GlobalPosterior& l0, const EpisodeMoments& mom);

/// E_{q(phi)} KL(q_i || N(mu, Sigma)) including all constants.
double expected_kl(const DiagGaussian& q, const GlobalPosterior& l0);

/// Constant-dropped penalty of the outer objective:
///   log|V0|/|V*| + n0 tr(V* V0^-1) + n0 (m* - m0)^T V0^-1 (m* - m0) - psi_d(n0 / 2).
/// Equals 2 expected_kl + d log 2 + d.
double g_term(const GlobalPosterior& l0, const DiagGaussian& post);

struct NiwMode {
  Vec mu;
  DiagMat sigma;
};

/// Mode of q(phi): mu* = m0, Sigma* = V0 / (n0 + d + 2).
NiwMode niw_mode(const GlobalPosterior& l0);

}  // namespace niwmeta
