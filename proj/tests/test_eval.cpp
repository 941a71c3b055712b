#include <doctest.h>

#include <numeric>

#include "support.hpp"

using namespace niwmeta;

namespace {

TrainedModel tiny_model(Method method, const TaskDistribution& tasks, Index episodes = 30) {
  TrainConfig cfg;
  cfg.method = method;
  cfg.episodes = episodes;
  cfg.seed = 4;
  if (tasks.kind == TaskKind::blobs) {
    cfg.backbone = MlpSpec{{tasks.blobs.dim, 6, 4}, Activation::tanh};
    cfg.head.kind = HeadKind::ncc;
  } else {
    cfg.backbone = MlpSpec{{1, 6, 4}, Activation::tanh};
  }
  return train(cfg, tasks).model;
}

EvalSettings small_settings() {
  EvalSettings s;
  s.test_episodes = 6;
  s.validation_episodes = 4;
  s.ms_samples = 8;
  s.mv_steps = {0, 3};
  return s;
}

}  // namespace

TEST_CASE("ece with one bin is the gap between mean accuracy and mean confidence") {
  Rng rng(1);
  std::vector<double> conf(200);
  std::vector<int> correct(200);
  double sc = 0.0, sa = 0.0;
  for (std::size_t i = 0; i < conf.size(); ++i) {
    conf[i] = rng.uniform();
    correct[i] = rng.uniform() < 0.3 ? 1 : 0;
    sc += conf[i];
    sa += correct[i];
  }
  CHECK(ece(conf, correct, 1).ece == doctest::Approx(std::abs(sa - sc) / 200.0));
}

TEST_CASE("ece on a hand example") {
  // Bins of width 0.5: {0.2, 0.4} with 1 correct, {0.9, 1.0} with 2 correct.
  const CalibrationReport r = ece({0.2, 0.4, 0.9, 1.0}, {1, 0, 1, 1}, 2);
  CHECK(r.ece == doctest::Approx(0.5 * std::abs(0.5 - 0.3) + 0.5 * std::abs(1.0 - 0.95)));
  REQUIRE(r.bins.size() == 2);
  CHECK(r.bins[0].count == 2);
  CHECK(r.bins[1].count == 2);
  CHECK(ece({1.0}, {1}, 20).ece == doctest::Approx(0.0));
}

TEST_CASE("ece is invariant to permutations and bounded") {
  Rng rng(2);
  std::vector<double> conf(100);
  std::vector<int> correct(100);
  for (std::size_t i = 0; i < conf.size(); ++i) {
    conf[i] = rng.uniform();
    correct[i] = rng.uniform() < conf[i] ? 1 : 0;
  }
  const double base = ece(conf, correct).ece;
  std::vector<std::size_t> perm(conf.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (int t = 0; t < 5; ++t) {
    for (std::size_t i = perm.size() - 1; i > 0; --i) {
      std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
    }
    std::vector<double> c2;
    std::vector<int> k2;
    for (auto p : perm) {
      c2.push_back(conf[p]);
      k2.push_back(correct[p]);
    }
    CHECK(ece(c2, k2).ece == doctest::Approx(base).epsilon(1e-12));
  }
  CHECK(base >= 0.0);
  CHECK(base <= 1.0);
  CHECK_THROWS(ece({0.5}, {1, 0}));
}

TEST_CASE("temperature search minimizes validation ece over the grid") {
  Rng rng(3);
  RowMat logits(300, 4);
  std::vector<int> labels(300);
  for (Index i = 0; i < 300; ++i) {
    labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(4));
    for (Index k = 0; k < 4; ++k) logits(i, k) = 4.0 * rng.normal();
    logits(i, labels[static_cast<std::size_t>(i)]) += 2.0;
  }
  const std::vector<double> grid{0.5, 1.0, 2.0, 3.0, 4.0, 6.0};
  const double t = temperature_search(logits, labels, grid);
  double best = 1e300, best_t = 0.0;
  for (double g : grid) {
    const double e = ece_from_logits(logits, labels, g).ece;
    if (e < best) {
      best = e;
      best_t = g;
    }
  }
  CHECK(t == best_t);
  // Overconfident logits want T > 1.
  CHECK(t > 1.0);
  // Ties (all-identical logits) go to the smaller temperature.
  CHECK(temperature_search(RowMat::Zero(10, 2), std::vector<int>(10, 0), {3.0, 1.0, 2.0}) == 1.0);
}

TEST_CASE("ece from logits matches softmax confidences") {
  RowMat logits(2, 2);
  logits << 0.0, std::log(3.0), 0.0, 0.0;
  const CalibrationReport r = ece_from_logits(logits, {1, 0}, 1.0, 1);
  CHECK(r.ece == doctest::Approx(std::abs(1.0 - (0.75 + 0.5) / 2.0)));
  const CalibrationReport r2 = ece_from_logits(logits, {1, 0}, 2.0, 1);
  const double c = std::sqrt(3.0) / (1.0 + std::sqrt(3.0));
  CHECK(r2.ece == doctest::Approx(std::abs(1.0 - (c + 0.5) / 2.0)));
  CHECK(r2.temperature == 2.0);
}

TEST_CASE("empirical quantile interpolates linearly") {
  const std::vector<double> s{1.0, 2.0, 4.0, 8.0};
  CHECK(empirical_quantile(s, 0.0) == 1.0);
  CHECK(empirical_quantile(s, 1.0) == 8.0);
  CHECK(empirical_quantile(s, 0.5) == doctest::Approx(3.0));
  CHECK(empirical_quantile(s, 0.25) == doctest::Approx(1.75));
  CHECK(empirical_quantile({5.0}, 0.3) == 5.0);
}

TEST_CASE("r_ece of a well specified ensemble is small") {
  Rng rng(4);
  const Index n = 2000, s = 200;
  RowMat samples(n, s);
  Vec targets(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = rng.normal();
    targets[i] = mu + rng.normal();
    for (Index k = 0; k < s; ++k) samples(i, k) = mu + rng.normal();
  }
  const double r = r_ece(samples, targets);
  CHECK(r < 0.02);
  CHECK(r >= 0.0);
}

TEST_CASE("r_ece limits") {
  Rng rng(5);
  const Index n = 4000;
  Vec targets(n);
  for (Index i = 0; i < n; ++i) targets[i] = rng.normal();
  // Point mass above every target: the frequency is 1 at every p.
  CHECK(r_ece(RowMat::Constant(n, 2, 100.0), targets) == doctest::Approx(0.5));
  CHECK(r_ece(RowMat::Constant(n, 2, -100.0), targets) == doctest::Approx(0.5));
  // Unbiased point prediction: frequency 1/2 at every p.
  RowMat point(n, 2);
  for (Index i = 0; i < n; ++i) point.row(i).setConstant(targets[i] + rng.normal());
  CHECK(r_ece(point, targets) == doctest::Approx(0.25).epsilon(0.05));
  // An overconfident ensemble sits between the two.
  RowMat narrow(n, 50);
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < 50; ++k) narrow(i, k) = 0.1 * rng.normal();
  }
  const double r = r_ece(narrow, targets);
  CHECK(r > 0.1);
  CHECK(r < 0.5);
  CHECK_THROWS(r_ece(RowMat::Zero(3, 1), Vec::Zero(3)));
}

TEST_CASE("mse and accuracy") {
  Vec a(3), b(3);
  a << 1.0, 2.0, 3.0;
  b << 1.0, 0.0, 4.0;
  CHECK(mse(a, b) == doctest::Approx(5.0 / 3.0));
  CHECK(accuracy({1, 2, 3, 4}, {1, 2, 0, 4}) == doctest::Approx(0.75));
}

TEST_CASE("bound report") {
  const BoundReport r = make_bound_report(90.0, 45, 3.0);
  CHECK(r.rhs == doctest::Approx(4.0));
  CHECK(r.holds);
  CHECK_FALSE(make_bound_report(45.0, 45, 3.0).holds);
}

TEST_CASE("pac-bayes check is deterministic and policy independent") {
  TaskDistribution tasks;
  const TrainedModel model = tiny_model(Method::niw_meta, tasks);
  BoundCheckConfig cfg;
  cfg.n_tasks = 6;
  cfg.heldout_points = 20;
  Rng a(9), b(9);
  const BoundReport s = pac_bayes_check(100.0, 45, model, tasks, cfg, a, ExecPolicy::serial);
  const BoundReport p = pac_bayes_check(100.0, 45, model, tasks, cfg, b, ExecPolicy::parallel);
  CHECK(s.lhs == p.lhs);
  CHECK(std::isfinite(s.lhs));
  CHECK(s.n_tasks == 6);
  CHECK(s.rhs == doctest::Approx(200.0 / 45.0));
}

TEST_CASE("evaluation is policy independent") {
  TaskDistribution tasks;
  const TrainedModel model = tiny_model(Method::niw_meta, tasks);
  const EvalSettings s = small_settings();
  const EvalReport a = evaluate(model, tasks, s, 11, ExecPolicy::serial);
  const EvalReport b = evaluate(model, tasks, s, 11, ExecPolicy::parallel);
  REQUIRE(a.variants.size() == 2);
  REQUIRE(b.variants.size() == 2);
  CHECK(a.point.mse == b.point.mse);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.variants[i].mse == b.variants[i].mse);
    CHECK(a.variants[i].r_ece == b.variants[i].r_ece);
    CHECK(a.variants[i].mv_steps == s.mv_steps[i]);
  }
  CHECK(a.episodes == 6);
}

TEST_CASE("point-estimate methods report no probabilistic variants") {
  TaskDistribution tasks;
  for (Method m : {Method::protonet, Method::fomaml}) {
    const EvalReport r = evaluate(tiny_model(m, tasks), tasks, small_settings(), 3);
    CHECK(r.variants.empty());
    CHECK(std::isfinite(r.point.mse));
    CHECK(r.point.r_ece >= 0.0);
  }
}

TEST_CASE("classification evaluation") {
  TaskDistribution tasks;
  tasks.kind = TaskKind::blobs;
  const TrainedModel model = tiny_model(Method::niw_meta, tasks, 10);
  const EvalReport r = evaluate(model, tasks, small_settings(), 5);
  CHECK(r.task == TaskType::classification);
  REQUIRE(r.variants.size() == 2);
  for (const auto& v : r.variants) {
    CHECK(v.accuracy >= 0.0);
    CHECK(v.accuracy <= 1.0);
    CHECK(v.ece >= 0.0);
    CHECK(v.ece_tuned >= 0.0);
  }
  CHECK(r.point.accuracy > 0.0);
}
