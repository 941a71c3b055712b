#include <doctest.h>

#include "oracles.hpp"

using namespace niwmeta;
using testing::random_moments;
using testing::random_posterior;
using testing::golden_min;
using testing::mc_expected_kl;
using testing::rel_err;

namespace {

// Unnormalized NIW log density at mu = m0 for diagonal Sigma.
double niw_logdensity_at_mean(const Vec& sigma, const GlobalPosterior& l0) {
  const double d = static_cast<double>(l0.dim());
  const Vec v0 = l0.v0();
  double s = 0.0;
  for (Index k = 0; k < sigma.size(); ++k) {
    s += -0.5 * (l0.n0() + d + 2.0) * std::log(sigma[k]) - 0.5 * v0[k] / sigma[k];
  }
  return s;
}

}  // namespace

TEST_CASE("global posterior parameterization") {
  const Vec m0 = Vec::Constant(3, 0.5);
  const Vec v0 = (Vec(3) << 0.5, 1.0, 2.0).finished();
  const GlobalPosterior l0 = GlobalPosterior::from_natural(m0, v0, 6.5);
  CHECK((l0.v0() - v0).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(l0.n0() == doctest::Approx(6.5));
  CHECK((l0.prior_precision() - (6.5 * v0.cwiseInverse())).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(GlobalPosterior::from_natural(m0, v0, 4.0), DomainError);
  GlobalPosterior any;
  any.m0 = Vec::Zero(4);
  any.rho_v = Vec::Zero(4);
  any.rho_n = -50.0;
  CHECK(any.n0() >= 5.0);
  any.rho_n = 0.0;
  CHECK(any.n0() == doctest::Approx(5.0 + std::log(2.0)));
}

TEST_CASE("episodic posterior limits") {
  Rng rng(1);
  const GlobalPosterior l0 = random_posterior(6, rng);
  EpisodeMoments mom = random_moments(6, rng);

  mom.a_bar = DiagMat(Vec::Zero(6));
  const DiagGaussian none = episodic_posterior(l0, mom);
  CHECK((none.mean - l0.m0).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((none.var.diag - l0.v0() / l0.n0()).cwiseAbs().maxCoeff() < 1e-15);

  GlobalPosterior flat = l0;
  flat.rho_v.setConstant(60.0);
  mom = random_moments(6, rng);
  const DiagGaussian data = episodic_posterior(flat, mom);
  CHECK((data.mean - mom.m_bar).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("episodic posterior matches a numerical optimizer") {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const GlobalPosterior l0 = random_posterior(10, rng);
    const EpisodeMoments mom = random_moments(10, rng);
    const DiagGaussian post = episodic_posterior(l0, mom);
    const Vec p = l0.prior_precision();
    for (Index k = 0; k < 10; ++k) {
      const double a = mom.a_bar[k], mb = mom.m_bar[k], m0 = l0.m0[k], pk = p[k];
      // Expected quadratic loss plus the m/V-dependent part of the expected KL.
      const auto obj_m = [&](double m) { return 0.5 * a * (m - mb) * (m - mb) + 0.5 * pk * (m - m0) * (m - m0); };
      const auto obj_logv = [&](double lv) {
        const double v = std::exp(lv);
        return 0.5 * a * v + 0.5 * (pk * v - lv);
      };
      const double m_opt = golden_min(obj_m, std::min(mb, m0) - 1.0, std::max(mb, m0) + 1.0);
      const double v_opt = std::exp(golden_min(obj_logv, -30.0, 10.0));
      CHECK(std::abs(post.mean[k] - m_opt) < 1e-6);
      CHECK(std::abs(post.var[k] - v_opt) < 1e-6 * std::max(1.0, v_opt));
    }
  }
}

TEST_CASE("episodic posterior stationarity and shrinkage") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const GlobalPosterior l0 = random_posterior(8, rng);
    const EpisodeMoments mom = random_moments(8, rng);
    const DiagGaussian post = episodic_posterior(l0, mom);
    const Vec p = l0.prior_precision();
    const Vec& a = mom.a_bar.diag;
    const Vec station = a.cwiseProduct(post.mean - mom.m_bar) + p.cwiseProduct(post.mean - l0.m0);
    CHECK(station.cwiseAbs().maxCoeff() < 1e-10 * (1.0 + p.maxCoeff()));
    CHECK((post.var.diag.cwiseInverse() - (a + p)).cwiseAbs().maxCoeff() < 1e-10 * (1.0 + p.maxCoeff()));
    CHECK((post.var.diag.array() <= (l0.v0() / l0.n0()).array()).all());
  }
}

TEST_CASE("expected kl matches a Monte Carlo oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 3; ++trial) {
    GlobalPosterior l0 = random_posterior(2, rng);
    DiagGaussian q;
    q.mean = l0.m0 + 0.5 * rng.normal_vec(2);
    q.var = DiagMat((l0.v0() / l0.n0()).array() * (0.3 + rng.uniform()));
    const double exact = expected_kl(q, l0);
    const double mc = mc_expected_kl(q, l0, 100000, 100 + trial);
    CHECK(rel_err(exact, mc) < 0.01);
  }
}

TEST_CASE("expected kl is non-negative") {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index d = 1 + static_cast<Index>(rng.uniform_int(6));
    const GlobalPosterior l0 = random_posterior(d, rng);
    const DiagGaussian q = episodic_posterior(l0, random_moments(d, rng));
    CHECK(expected_kl(q, l0) >= 0.0);
  }
}

TEST_CASE("g term identities") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Index d = 1 + static_cast<Index>(rng.uniform_int(20));
    const GlobalPosterior l0 = random_posterior(d, rng);
    const DiagGaussian q = episodic_posterior(l0, random_moments(d, rng));
    const double g = g_term(l0, q);
    const double identity = 2.0 * expected_kl(q, l0) + static_cast<double>(d) * (std::log(2.0) + 1.0);
    CHECK(std::abs(g - identity) < 1e-9 * std::max(1.0, std::abs(g)));
  }
  const GlobalPosterior l0 = random_posterior(5, rng);
  const DiagGaussian at_prior{l0.m0, DiagMat(l0.v0() / l0.n0())};
  const double n0 = l0.n0();
  CHECK(g_term(l0, at_prior) ==
        doctest::Approx(5.0 * std::log(n0) + 5.0 - multivariate_digamma(0.5 * n0, 5)).epsilon(1e-12));
}

TEST_CASE("g term matches an independent evaluation of its formula") {
  Rng rng(7);
  const GlobalPosterior l0 = random_posterior(5, rng);
  const DiagGaussian q = episodic_posterior(l0, random_moments(5, rng));
  const Vec v0 = l0.v0();
  const double n0 = l0.n0();
  double ref = 0.0;
  for (Index k = 0; k < 5; ++k) {
    const double dm = q.mean[k] - l0.m0[k];
    ref += std::log(v0[k]) - std::log(q.var[k]) + n0 * q.var[k] / v0[k] + n0 * dm * dm / v0[k];
  }
  double psi = 0.0;
  for (int j = 1; j <= 5; ++j) psi += digamma(0.5 * n0 + 0.5 * (1 - j));
  ref -= psi;
  CHECK(g_term(l0, q) == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("expected kl scaling identities") {
  Rng rng(8);
  GlobalPosterior l0 = random_posterior(4, rng);
  DiagGaussian q{l0.m0, DiagMat(l0.v0() / l0.n0())};
  // At the prior mean the trace and quadratic terms reduce to d.
  const double n0 = l0.n0();
  CHECK(expected_kl(q, l0) ==
        doctest::Approx(0.5 * (4.0 * std::log(n0) - 4.0 * std::log(2.0) - multivariate_digamma(0.5 * n0, 4)))
            .epsilon(1e-12));

  q = episodic_posterior(l0, random_moments(4, rng));
  GlobalPosterior l0x2 = l0;
  l0x2.rho_v.array() += std::log(2.0);
  const DiagGaussian qx2{q.mean, DiagMat(2.0 * q.var.diag)};
  const Vec delta = q.mean - l0.m0;
  const double quad = n0 * delta.cwiseProduct(l0.v0().cwiseInverse()).dot(delta);
  CHECK(expected_kl(qx2, l0x2) - expected_kl(q, l0) == doctest::Approx(-0.25 * quad).epsilon(1e-9));
}

TEST_CASE("niw mode") {
  Rng rng(9);
  GlobalPosterior l0 = random_posterior(3, rng);
  const NiwMode mode = niw_mode(l0);
  CHECK(mode.mu == l0.m0);
  const double denom = l0.n0() + 3.0 + 2.0;
  CHECK((mode.sigma.diag - l0.v0() / denom).cwiseAbs().maxCoeff() < 1e-15);

  // Grid search over each diagonal entry.
  for (Index k = 0; k < 3; ++k) {
    double best = -1e300, arg = 0.0;
    for (int i = 0; i <= 20000; ++i) {
      Vec sigma = mode.sigma.diag;
      sigma[k] = mode.sigma[k] * std::exp(-1.0 + 2.0 * i / 20000.0);
      const double v = niw_logdensity_at_mean(sigma, l0);
      if (v > best) {
        best = v;
        arg = sigma[k];
      }
    }
    CHECK(rel_err(arg, mode.sigma[k]) < 2e-4);
  }

  const Vec v0 = Vec::Constant(3, l0.n0() + 5.0);
  l0.rho_v = v0.array().log();
  CHECK((niw_mode(l0).sigma.diag - Vec::Ones(3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sgld on a quadratic recovers the posterior mean") {
  const Vec c = (Vec(3) << 1.0, -2.0, 0.5).finished();
  const LossGradFn quad = [&](const Vec& th) { return LossGrad{0.5 * (th - c).squaredNorm(), th - c}; };
  SgldConfig cfg;
  cfg.steps = 20000;
  cfg.burn_in = 2000;
  cfg.step_size = 0.01;
  Rng rng(10);
  const EpisodeMoments mom = sgld_moments(quad, Vec::Zero(3), cfg, rng);
  CHECK((mom.m_bar - c).cwiseAbs().maxCoeff() < 3.0);
  // Stationary variance is 1, so the precision estimate is near 1.
  CHECK((mom.a_bar.diag.array() > 0.5).all());
  CHECK((mom.a_bar.diag.array() < 2.0).all());
}

TEST_CASE("sgld edge cases") {
  const LossGradFn quad = [](const Vec& th) { return LossGrad{0.5 * th.squaredNorm(), th}; };
  SgldConfig cfg;
  cfg.steps = 3;
  cfg.burn_in = 2;
  Rng rng(11);
  const EpisodeMoments one = sgld_moments(quad, Vec::Ones(4), cfg, rng);
  CHECK((one.a_bar.diag.array() == cfg.precision_cap).all());

  cfg = SgldConfig{};
  Rng r1(12), r2(12);
  const EpisodeMoments a = sgld_moments(quad, Vec::Ones(4), cfg, r1);
  const EpisodeMoments b = sgld_moments(quad, Vec::Ones(4), cfg, r2);
  CHECK(a.m_bar == b.m_bar);
  CHECK(a.a_bar.diag == b.a_bar.diag);
  CHECK((a.a_bar.diag.array() >= cfg.precision_floor).all());
  CHECK((a.a_bar.diag.array() <= cfg.precision_cap).all());

  const LossGradFn bad = [](const Vec& th) {
    LossGrad lg{0.0, th};
    lg.grad[0] = std::nan("");
    return lg;
  };
  CHECK_THROWS_AS(sgld_moments(bad, Vec::Ones(2), cfg, r1), NumericError);

  cfg.burn_in = 5;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
}
