#include <doctest.h>

#include "support.hpp"

using namespace niwmeta;
using testing::max_rel_err;
using testing::numeric_gradient;

namespace {

const MlpSpec kSpec{{2, 4, 3}, Activation::tanh};

GlobalPosterior small_posterior(Rng& rng) {
  const Index d = kSpec.param_count();
  Vec m0 = init_mlp_params(kSpec, rng);
  return GlobalPosterior::from_natural(m0, Vec::Constant(d, 0.05), static_cast<double>(d) + 5.0);
}

}  // namespace

TEST_CASE("zero adaptation steps return the prior mode") {
  Rng rng(1);
  const GlobalPosterior l0 = small_posterior(rng);
  const Episode ep = testing::toy_regression_episode(rng);
  TestAdaptConfig cfg;
  cfg.steps = 0;
  const TestPosterior post = test_adapt(l0, kSpec, HeadConfig{}, ep.support, 0, cfg, rng);
  const NiwMode mode = niw_mode(l0);
  CHECK(post.dist.mean == mode.mu);
  CHECK(post.dist.var.diag == mode.sigma.diag);
  CHECK(post.steps_taken == 0);
  CHECK_FALSE(post.warning);
}

TEST_CASE("diagonal gaussian KL against a direct formula") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Index d = 4;
    DiagGaussian q{rng.normal_vec(d), DiagMat(Vec(rng.normal_vec(d).array().exp()))};
    NiwMode p{rng.normal_vec(d), DiagMat(Vec(rng.normal_vec(d).array().exp()))};
    double want = 0.0;
    for (Index i = 0; i < d; ++i) {
      const double vq = q.var.diag[i], vp = p.sigma.diag[i];
      const double dm = q.mean[i] - p.mu[i];
      want += 0.5 * (std::log(vp / vq) + (vq + dm * dm) / vp - 1.0);
    }
    CHECK(diag_gaussian_kl(q, p) == doctest::Approx(want).epsilon(1e-12));
  }
  DiagGaussian same{Vec::Ones(3), DiagMat(Vec::Constant(3, 2.0))};
  CHECK(diag_gaussian_kl(same, NiwMode{same.mean, same.var}) == doctest::Approx(0.0));
}

TEST_CASE("test ELBO gradient matches finite differences") {
  Rng rng(3);
  for (int trial = 0; trial < 8; ++trial) {
    const bool regression = trial % 2 == 0;
    const GlobalPosterior l0 = small_posterior(rng);
    const NiwMode prior = niw_mode(l0);
    HeadConfig head;
    Episode ep;
    if (regression) {
      ep = testing::toy_regression_episode(rng);
    } else {
      head.kind = HeadKind::ncc;
      ep = sample_blob_episode(3, 2, 2, 2, 0.8, rng, 2.0);
    }
    const Index d = kSpec.param_count();
    const Vec mean = prior.mu + 0.1 * rng.normal_vec(d);
    Vec log_var = prior.sigma.diag.array().log().matrix() + 0.3 * rng.normal_vec(d);
    RowMat eps(2, d);
    for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
    const double w = trial < 4 ? 1.0 : 0.3;
    const TestElbo e = test_elbo(kSpec, head, prior, ep.support, ep.n_way, mean, log_var, eps, w);
    const Vec fd_mean = numeric_gradient(
        [&](const Vec& m) {
          return test_elbo(kSpec, head, prior, ep.support, ep.n_way, m, log_var, eps, w).value;
        },
        mean);
    const Vec fd_lv = numeric_gradient(
        [&](const Vec& lv) {
          return test_elbo(kSpec, head, prior, ep.support, ep.n_way, mean, lv, eps, w).value;
        },
        log_var);
    CHECK(max_rel_err(e.d_mean, fd_mean) < 1e-4);
    CHECK(max_rel_err(e.d_log_var, fd_lv) < 1e-4);
    CHECK(e.value == doctest::Approx(w * e.expected_nll + e.kl));
  }
}

TEST_CASE("with the likelihood off, adaptation stays at the prior") {
  Rng rng(4);
  const GlobalPosterior l0 = small_posterior(rng);
  const Episode ep = testing::toy_regression_episode(rng);
  TestAdaptConfig cfg;
  cfg.steps = 25;
  cfg.likelihood_weight = 0.0;
  const TestPosterior post = test_adapt(l0, kSpec, HeadConfig{}, ep.support, 0, cfg, rng);
  const NiwMode mode = niw_mode(l0);
  CHECK((post.dist.mean - mode.mu).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((post.dist.var.diag - mode.sigma.diag).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("test ELBO is non-increasing over adaptation steps") {
  Rng rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    const GlobalPosterior l0 = small_posterior(rng);
    const Episode ep = testing::toy_regression_episode(rng);
    const NiwMode prior = niw_mode(l0);
    TestAdaptConfig cfg;
    cfg.lr = trial < 3 ? 1e-3 : 1e-1;
    double prev = std::numeric_limits<double>::infinity();
    for (int steps = 0; steps <= 12; steps += 3) {
      cfg.steps = steps;
      Rng r(100 + static_cast<std::uint64_t>(trial));  // same noise every time
      const TestPosterior post = test_adapt(l0, kSpec, HeadConfig{}, ep.support, 0, cfg, r);
      Rng r2(100 + static_cast<std::uint64_t>(trial));
      RowMat eps(cfg.mc_samples, kSpec.param_count());
      for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = r2.normal();
      const double value = test_elbo(kSpec, HeadConfig{}, prior, ep.support, 0, post.dist.mean,
                                     post.dist.var.diag.array().log().matrix(), eps)
                               .value;
      CHECK(value <= prev + 1e-9 * std::abs(prev));
      prev = value;
    }
  }
}

TEST_CASE("prediction is deterministic and policy independent") {
  Rng rng(6);
  const GlobalPosterior l0 = small_posterior(rng);
  const Episode ep = testing::toy_regression_episode(rng);
  TestAdaptConfig cfg;
  const TestPosterior post = test_adapt(l0, kSpec, HeadConfig{}, ep.support, 0, cfg, rng);
  Rng a(7), b(7), c(7);
  const PredictiveSet p1 = predict(kSpec, HeadConfig{}, post, ep.support, ep.query.inputs, 0, 30, a);
  const PredictiveSet p2 = predict(kSpec, HeadConfig{}, post, ep.support, ep.query.inputs, 0, 30, b,
                                   ExecPolicy::parallel);
  const PredictiveSet p3 = predict(kSpec, HeadConfig{}, post, ep.support, ep.query.inputs, 0, 30, c);
  CHECK(p1.point_predictions == p2.point_predictions);
  CHECK(p1.predictive_samples == p2.predictive_samples);
  CHECK(p1.predictive_samples == p3.predictive_samples);
  CHECK(p1.point_predictions.rows() == ep.query.size());
  CHECK(p1.point_predictions.cols() == 30);
  CHECK(p1.sigma_obs == 0.5);
}

TEST_CASE("classification probabilities sum to one") {
  Rng rng(8);
  const GlobalPosterior l0 = small_posterior(rng);
  const Episode ep = sample_blob_episode(5, 3, 4, 2, 1.0, rng);
  HeadConfig head;
  head.kind = HeadKind::ncc;
  const TestPosterior post = test_adapt(l0, kSpec, head, ep.support, 5, TestAdaptConfig{}, rng);
  const PredictiveSet p = predict(kSpec, head, post, ep.support, ep.query.inputs, 5, 20, rng,
                                  ExecPolicy::parallel);
  REQUIRE(p.class_probs.rows() == ep.query.size());
  REQUIRE(p.class_probs.cols() == 5);
  for (Index i = 0; i < p.class_probs.rows(); ++i) {
    CHECK(p.class_probs.row(i).sum() == doctest::Approx(1.0));
    CHECK(p.class_probs.row(i).minCoeff() >= 0.0);
  }
}

TEST_CASE("vanishing posterior variance gives identical sample predictions") {
  Rng rng(9);
  const Index d = kSpec.param_count();
  const Episode ep = testing::toy_regression_episode(rng);
  TestPosterior post;
  post.dist.mean = init_mlp_params(kSpec, rng);
  post.dist.var = DiagMat(Vec::Constant(d, 1e-300));
  const PredictiveSet p = predict(kSpec, HeadConfig{}, post, ep.support, ep.query.inputs, 0, 10, rng);
  const Vec point = predict_regression(kSpec, post.dist.mean, ep.support, ep.query.inputs, HeadConfig{});
  for (Index s = 0; s < 10; ++s) {
    CHECK((p.point_predictions.col(s) - point).cwiseAbs().maxCoeff() < 1e-12);
  }
  // The observation noise is still there.
  CHECK((p.predictive_samples.col(0) - point).norm() > 0.0);
}
