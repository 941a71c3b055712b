// Serial reference vs OpenMP kernels on the default Sine-Line backbone.
// Prints one row per kernel and checks that both policies agree bit for bit.
#include <chrono>
#include <cstdio>
#include <functional>

#include "niwmeta/eval.hpp"

using namespace niwmeta;

namespace {

double seconds(const std::function<void()>& fn, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

void row(const char* name, double serial, double parallel, bool same) {
  std::printf("%-18s %10.4f %10.4f %8.2fx  %s\n", name, serial, parallel, serial / parallel,
              same ? "identical" : "MISMATCH");
}

}  // namespace

int main() {
  TaskDistribution tasks;
  TrainConfig cfg;
  cfg.episodes = 200;
  cfg.outer_lr = 3e-4;
  cfg.init_v0 = 0.01;
  cfg.sgld.precision_cap = 1e4;
  cfg.grad_clip = 1000.0;
  cfg.seed = 1;
  const TrainedModel model = train(cfg, tasks).model;

  std::printf("threads: %d\n", max_threads());
  std::printf("%-18s %10s %10s %9s\n", "kernel", "serial_s", "parallel_s", "speedup");

  EvalSettings es;
  es.test_episodes = 40;
  es.validation_episodes = 0;
  es.ms_samples = 50;
  EvalReport ser, par;
  const double ts = seconds([&] { ser = evaluate(model, tasks, es, 2, ExecPolicy::serial); }, 2);
  const double tp = seconds([&] { par = evaluate(model, tasks, es, 2, ExecPolicy::parallel); }, 2);
  bool same = ser.point.mse == par.point.mse;
  for (std::size_t i = 0; i < ser.variants.size(); ++i) {
    same = same && ser.variants[i].mse == par.variants[i].mse && ser.variants[i].r_ece == par.variants[i].r_ece;
  }
  row("evaluate", ts, tp, same);

  Rng ep_rng(3);
  const Episode ep = sample_episode(tasks, ep_rng);
  Rng adapt_rng(4);
  const TestPosterior post = test_adapt(*model.posterior, cfg.backbone, cfg.head, ep.support, 0,
                                        TestAdaptConfig{}, adapt_rng);
  PredictiveSet ps, pp;
  const double ps_t = seconds(
      [&] {
        Rng r(5);
        ps = predict(cfg.backbone, cfg.head, post, ep.support, ep.query.inputs, 0, 200, r, ExecPolicy::serial);
      },
      3);
  const double pp_t = seconds(
      [&] {
        Rng r(5);
        pp = predict(cfg.backbone, cfg.head, post, ep.support, ep.query.inputs, 0, 200, r, ExecPolicy::parallel);
      },
      3);
  row("predict", ps_t, pp_t, ps.predictive_samples == pp.predictive_samples);

  BoundCheckConfig bc;
  bc.n_tasks = 100;
  BoundReport bs, bp;
  const double bs_t = seconds(
      [&] {
        Rng r(6);
        bs = pac_bayes_check(1.0, 45, model, tasks, bc, r, ExecPolicy::serial);
      },
      2);
  const double bp_t = seconds(
      [&] {
        Rng r(6);
        bp = pac_bayes_check(1.0, 45, model, tasks, bc, r, ExecPolicy::parallel);
      },
      2);
  row("pac_bayes_check", bs_t, bp_t, bs.lhs == bp.lhs);
  return 0;
}
