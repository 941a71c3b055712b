#include "niwmeta/hb_core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace niwmeta {

GlobalPosterior GlobalPosterior::from_natural(Vec m0, const Vec& v0, double n0) {
  require_same_size(m0.size(), v0.size(), "GlobalPosterior::from_natural");
  const double excess = n0 - (static_cast<double>(m0.size()) + 1.0);
  if (!(excess > 0.0)) throw DomainError("GlobalPosterior: n0 must exceed d + 1");
  if ((v0.array() <= 0.0).any()) throw DomainError("GlobalPosterior: V0 must be positive");
  GlobalPosterior g;
  g.m0 = std::move(m0);
  g.rho_v = v0.array().log();
  // Inverse softplus.
  g.rho_n = excess > 30.0 ? excess : std::log(std::expm1(excess));
  return g;
}

void SgldConfig::validate() const {
  if (steps < 1 || burn_in < 0 || burn_in >= steps) {
    throw DomainError("sgld: need steps > burn_in >= 0");
  }
  if (!(step_size > 0.0)) throw DomainError("sgld: step_size must be > 0");
  if (!(precision_floor > 0.0) || !(precision_cap >= precision_floor)) {
    throw DomainError("sgld: need 0 < precision_floor <= precision_cap");
  }
}

EpisodeMoments sgld_moments(const LossGradFn& loss, const Vec& init, const SgldConfig& cfg,
                            Rng& rng) {
  cfg.validate();
  const Index d = init.size();
  const double noise_scale = std::sqrt(cfg.step_size);
  Vec theta = init;
  Vec sum = Vec::Zero(d);
  Vec sum_sq = Vec::Zero(d);
  Vec first;  // shift for a stable variance
  int kept = 0;
  for (int t = 1; t <= cfg.steps; ++t) {
    const LossGrad lg = loss(theta);
    if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
      throw NumericError("sgld: non-finite loss/gradient at iteration " + std::to_string(t));
    }
    require_same_size(lg.grad.size(), d, "sgld gradient");
    theta.noalias() -= 0.5 * cfg.step_size * lg.grad;
    for (Index k = 0; k < d; ++k) theta[k] += noise_scale * rng.normal();
    if (t > cfg.burn_in) {
      if (kept == 0) first = theta;
      const Vec shifted = theta - first;
      sum += shifted;
      sum_sq += shifted.cwiseProduct(shifted);
      ++kept;
    }
  }
  EpisodeMoments mom;
  const double n = static_cast<double>(kept);
  const Vec mean_shift = sum / n;
  mom.m_bar = first + mean_shift;
  Vec precision(d);
  for (Index k = 0; k < d; ++k) {
    const double var = kept > 1 ? (sum_sq[k] - n * mean_shift[k] * mean_shift[k]) / (n - 1.0) : 0.0;
    const double p = var > 0.0 ? 1.0 / var : cfg.precision_cap;
    precision[k] = std::clamp(p, cfg.precision_floor, cfg.precision_cap);
  }
  mom.a_bar = DiagMat(std::move(precision));
  return mom;
}

DiagGaussian episodic_posterior(const GlobalPosterior& l0, const EpisodeMoments& mom) {
  require_same_size(l0.dim(), mom.m_bar.size(), "episodic_posterior");
  require_same_size(l0.dim(), mom.a_bar.size(), "episodic_posterior");
  const Vec p = l0.prior_precision();
  const Vec total = mom.a_bar.diag + p;
  DiagGaussian q;
  q.mean = (mom.a_bar.diag.cwiseProduct(mom.m_bar) + p.cwiseProduct(l0.m0)).cwiseQuotient(total);
  q.var = DiagMat(total.cwiseInverse());
  return q;
}

double g_term(const GlobalPosterior& l0, const DiagGaussian& post) {
  require_same_size(l0.dim(), post.dim(), "g_term");
  const Index d = l0.dim();
  const double n0 = l0.n0();
  const Vec p = l0.prior_precision();
  const Vec diff = post.mean - l0.m0;
  const double log_ratio = l0.rho_v.sum() - post.var.diag.array().log().sum();
  const double trace = (p.array() * post.var.diag.array()).sum();
  const double quad = (p.array() * diff.array().square()).sum();
  return log_ratio + trace + quad - multivariate_digamma(0.5 * n0, static_cast<int>(d));
}

double expected_kl(const DiagGaussian& q, const GlobalPosterior& l0) {
  const double d = static_cast<double>(l0.dim());
  return 0.5 * (g_term(l0, q) - d * std::numbers::ln2 - d);
}

NiwMode niw_mode(const GlobalPosterior& l0) {
  const double denom = l0.n0() + static_cast<double>(l0.dim()) + 2.0;
  return {l0.m0, DiagMat(l0.v0() / denom)};
}

}  // namespace niwmeta
