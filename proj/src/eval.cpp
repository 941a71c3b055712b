#include "niwmeta/eval.hpp"

#include <algorithm>
#include <cmath>

namespace niwmeta {

CalibrationReport ece(const std::vector<double>& confidences, const std::vector<int>& correct,
                      int n_bins) {
  require_same_size(static_cast<Index>(confidences.size()), static_cast<Index>(correct.size()), "ece");
  if (n_bins < 1) throw DomainError("ece: n_bins must be >= 1");
  CalibrationReport rep;
  rep.bins.assign(static_cast<std::size_t>(n_bins), CalibrationBin{});
  std::vector<double> conf_sum(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> acc_sum(static_cast<std::size_t>(n_bins), 0.0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("ece: confidence outside [0, 1]");
    const auto b = std::min<std::size_t>(static_cast<std::size_t>(c * n_bins),
                                         static_cast<std::size_t>(n_bins - 1));
    ++rep.bins[b].count;
    conf_sum[b] += c;
    acc_sum[b] += correct[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(confidences.size());
  for (std::size_t b = 0; b < rep.bins.size(); ++b) {
    auto& bin = rep.bins[b];
    if (bin.count == 0) continue;
    bin.avg_confidence = conf_sum[b] / static_cast<double>(bin.count);
    bin.avg_accuracy = acc_sum[b] / static_cast<double>(bin.count);
    rep.ece += static_cast<double>(bin.count) / n * std::abs(bin.avg_accuracy - bin.avg_confidence);
  }
  return rep;
}

CalibrationReport ece_from_logits(const RowMat& logits, const std::vector<int>& labels,
                                  double temperature, int n_bins) {
  require_same_size(logits.rows(), static_cast<Index>(labels.size()), "ece_from_logits");
  if (!(temperature > 0.0)) throw DomainError("ece_from_logits: temperature must be > 0");
  const RowMat probs = softmax_rows(logits / temperature);
  std::vector<double> conf(static_cast<std::size_t>(logits.rows()));
  std::vector<int> correct(conf.size());
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg = 0;
    conf[static_cast<std::size_t>(i)] = probs.row(i).maxCoeff(&arg);
    correct[static_cast<std::size_t>(i)] = arg == labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  CalibrationReport rep = ece(conf, correct, n_bins);
  rep.temperature = temperature;
  return rep;
}

double temperature_search(const RowMat& logits, const std::vector<int>& labels,
                          std::vector<double> grid, int n_bins) {
  if (grid.empty()) throw DomainError("temperature_search: empty grid");
  std::sort(grid.begin(), grid.end());
  double best_t = grid.front();
  double best = ece_from_logits(logits, labels, best_t, n_bins).ece;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double e = ece_from_logits(logits, labels, grid[i], n_bins).ece;
    if (e < best) {
      best = e;
      best_t = grid[i];
    }
  }
  return best_t;
}

double empirical_quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw DomainError("empirical_quantile: empty sample");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double r_ece(const RowMat& predictive_samples, const Vec& targets, int n_bins) {
  require_same_size(predictive_samples.rows(), targets.size(), "r_ece");
  if (predictive_samples.cols() < 2) throw DomainError("r_ece: need at least 2 samples per query");
  if (n_bins < 1) throw DomainError("r_ece: n_bins must be >= 1");
  const Index nq = targets.size();
  if (nq == 0) throw DomainError("r_ece: no queries");
  std::vector<Index> below(static_cast<std::size_t>(n_bins), 0);
  std::vector<double> row(static_cast<std::size_t>(predictive_samples.cols()));
  for (Index q = 0; q < nq; ++q) {
    for (Index s = 0; s < predictive_samples.cols(); ++s) row[static_cast<std::size_t>(s)] = predictive_samples(q, s);
    std::sort(row.begin(), row.end());
    for (int b = 0; b < n_bins; ++b) {
      const double p = (b + 0.5) / n_bins;
      if (targets[q] <= empirical_quantile(row, p)) ++below[static_cast<std::size_t>(b)];
    }
  }
  double total = 0.0;
  for (int b = 0; b < n_bins; ++b) {
    const double p = (b + 0.5) / n_bins;
    total += std::abs(static_cast<double>(below[static_cast<std::size_t>(b)]) / static_cast<double>(nq) - p);
  }
  return total / n_bins;
}

double mse(const Vec& predictions, const Vec& targets) {
  require_same_size(predictions.size(), targets.size(), "mse");
  if (predictions.size() == 0) throw DomainError("mse: empty input");
  return (predictions - targets).squaredNorm() / static_cast<double>(predictions.size());
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  require_same_size(static_cast<Index>(predicted.size()), static_cast<Index>(labels.size()), "accuracy");
  if (predicted.empty()) throw DomainError("accuracy: empty input");
  Index hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

BoundReport make_bound_report(double epsilon_star, Index n, double lhs) {
  if (n < 1) throw DomainError("bound: n must be >= 1");
  BoundReport rep;
  rep.epsilon_star = epsilon_star;
  rep.n = n;
  rep.lhs = lhs;
  rep.rhs = 2.0 * epsilon_star / static_cast<double>(n);
  rep.holds = rep.lhs <= rep.rhs;
  return rep;
}

namespace {

// Mean per-point NLL of `points` under params, head built on `support`.
double heldout_risk(const MlpSpec& spec, const HeadConfig& head, const Vec& params,
                    const DataSet& support, const DataSet& points, int n_way) {
  return episode_loss(spec, params, support, points, head, n_way);
}

}  // namespace

BoundReport pac_bayes_check(double epsilon_star, Index n, const TrainedModel& model,
                            const TaskDistribution& tasks, const BoundCheckConfig& cfg, Rng& rng,
                            ExecPolicy policy) {
  if (!model.posterior) throw DomainError("pac_bayes_check: model has no global posterior");
  if (cfg.n_tasks < 1 || cfg.heldout_points < 1) throw DomainError("pac_bayes_check: bad counts");
  const GlobalPosterior& l0 = *model.posterior;
  // Fresh tasks and their per-task generators are fixed before the parallel loop.
  std::vector<Episode> episodes;
  std::vector<Rng> task_rngs;
  for (Index i = 0; i < cfg.n_tasks; ++i) {
    episodes.push_back(sample_episode(tasks, rng));
    task_rngs.push_back(rng.split(static_cast<std::uint64_t>(i)));
  }
  std::vector<double> risks(static_cast<std::size_t>(cfg.n_tasks));
  for_each_index(policy, cfg.n_tasks, [&](std::ptrdiff_t i) {
    const auto idx = static_cast<std::size_t>(i);
    const Episode& ep = episodes[idx];
    Rng& r = task_rngs[idx];
    const LossGradFn loss = [&](const Vec& theta) {
      return episode_loss_and_grad(model.backbone, theta, ep, model.head);
    };
    const EpisodeMoments mom = sgld_moments(loss, l0.m0, cfg.sgld, r);
    const DiagGaussian q = episodic_posterior(l0, mom);
    const Vec theta = sample_diag_gaussian(q.mean, q.var, r);
    const DataSet held = sample_from_task(ep.meta, cfg.heldout_points, tasks, r);
    risks[idx] = heldout_risk(model.backbone, model.head, theta, ep.support, held, ep.n_way);
  });
  double lhs = 0.0;
  for (double v : risks) lhs += v;
  lhs /= static_cast<double>(cfg.n_tasks);
  BoundReport rep = make_bound_report(epsilon_star, n, lhs);
  rep.n_tasks = cfg.n_tasks;
  return rep;
}

namespace {

Vec point_params(const TrainedModel& model, const DataSet& support, int n_way) {
  if (model.method == Method::fomaml || model.method == Method::reptile) {
    return adapt_on_support(model.backbone, model.head, model.params, support, n_way,
                            model.inner_steps, model.inner_lr);
  }
  return model.params;
}

struct EpisodeOutput {
  // Regression
  Vec targets;
  Vec point_pred;
  std::vector<Vec> variant_mean;
  std::vector<RowMat> variant_samples;
  // Classification
  std::vector<int> labels;
  RowMat point_logits;
  std::vector<RowMat> variant_probs;
  std::vector<bool> warnings;
};

EpisodeOutput evaluate_episode(const TrainedModel& model, const Episode& ep,
                               const EvalSettings& settings, Rng rng) {
  EpisodeOutput out;
  const bool regression = model.head.kind == HeadKind::ridge;
  const Vec params = point_params(model, ep.support, ep.n_way);
  if (regression) {
    out.targets = ep.query.targets;
    out.point_pred = predict_regression(model.backbone, params, ep.support, ep.query.inputs, model.head);
  } else {
    out.labels = ep.query.labels;
    out.point_logits =
        predict_logits(model.backbone, params, ep.support, ep.query.inputs, model.head, ep.n_way);
  }
  if (!model.posterior) return out;
  for (int mv : settings.mv_steps) {
    TestAdaptConfig adapt = settings.adapt;
    adapt.steps = mv;
    const TestPosterior post =
        test_adapt(*model.posterior, model.backbone, model.head, ep.support, ep.n_way, adapt, rng);
    const PredictiveSet ps = predict(model.backbone, model.head, post, ep.support, ep.query.inputs,
                                     ep.n_way, settings.ms_samples, rng, ExecPolicy::serial);
    out.warnings.push_back(post.warning);
    if (regression) {
      out.variant_mean.push_back(ps.predictive_mean());
      out.variant_samples.push_back(ps.predictive_samples);
    } else {
      out.variant_probs.push_back(ps.class_probs);
    }
  }
  return out;
}

template <class T>
T stack_rows(const std::vector<T>& parts) {
  Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  const Index cols = parts.empty() ? 0 : parts.front().cols();
  T out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

std::vector<int> argmax_rows(const RowMat& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) {
    Index arg = 0;
    m.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

std::vector<EpisodeOutput> run_episodes(const TrainedModel& model, const std::vector<Episode>& eps,
                                        const EvalSettings& settings, const Rng& algo_root,
                                        ExecPolicy policy) {
  std::vector<EpisodeOutput> outs(eps.size());
  for_each_index(policy, static_cast<std::ptrdiff_t>(eps.size()), [&](std::ptrdiff_t i) {
    const auto idx = static_cast<std::size_t>(i);
    outs[idx] = evaluate_episode(model, eps[idx], settings, algo_root.split(idx));
  });
  return outs;
}

// Probability rows turned into log-probabilities so temperature scaling applies.
RowMat log_probs(const RowMat& probs) { return probs.array().max(1e-300).log(); }

}  // namespace

EvalReport evaluate(const TrainedModel& model, const TaskDistribution& tasks,
                    const EvalSettings& settings, std::uint64_t seed, ExecPolicy policy) {
  if (settings.test_episodes < 1) throw DomainError("evaluate: test_episodes must be >= 1");
  if (settings.ms_samples < 2 && model.head.kind == HeadKind::ridge) {
    throw DomainError("evaluate: ms_samples must be >= 2 for regression calibration");
  }
  const Rng root(seed);
  Rng episode_rng = root.split(streams::test_episodes);
  const std::vector<Episode> test = sample_episodes(tasks, settings.test_episodes, episode_rng);
  const std::vector<EpisodeOutput> outs =
      run_episodes(model, test, settings, root.split(streams::test_algorithm), policy);

  EvalReport rep;
  rep.method = model.method;
  rep.task = tasks.task_type();
  rep.episodes = settings.test_episodes;
  rep.point.name = "point";
  const std::size_t n_variants = model.posterior ? settings.mv_steps.size() : 0;

  if (rep.task == TaskType::regression) {
    std::vector<Vec> targets, point;
    for (const auto& o : outs) {
      targets.push_back(o.targets);
      point.push_back(o.point_pred);
    }
    const Vec y = stack_rows(targets);
    const Vec yhat = stack_rows(point);
    rep.point.mse = mse(yhat, y);
    // Degenerate predictive: every sample equals the point prediction.
    const RowMat degenerate = yhat.replicate(1, std::max(2, settings.ms_samples));
    rep.point.r_ece = r_ece(degenerate, y, settings.n_bins);
    for (std::size_t v = 0; v < n_variants; ++v) {
      std::vector<Vec> means;
      std::vector<RowMat> samples;
      VariantMetrics vm;
      for (const auto& o : outs) {
        means.push_back(o.variant_mean[v]);
        samples.push_back(o.variant_samples[v]);
        vm.adapt_warning = vm.adapt_warning || o.warnings[v];
      }
      vm.mv_steps = settings.mv_steps[v];
      vm.name = "mv" + std::to_string(vm.mv_steps);
      vm.mse = mse(stack_rows(means), y);
      vm.r_ece = r_ece(stack_rows(samples), y, settings.n_bins);
      rep.variants.push_back(vm);
    }
    return rep;
  }

  // Classification: temperatures are searched on a separate validation stream.
  Rng val_rng = root.split(streams::validation_episodes);
  const std::vector<Episode> val = sample_episodes(tasks, settings.validation_episodes, val_rng);
  const std::vector<EpisodeOutput> val_outs =
      run_episodes(model, val, settings, root.split(streams::test_algorithm).split(1u << 20), policy);

  std::vector<int> labels, val_labels;
  std::vector<RowMat> logits, val_logits;
  for (const auto& o : outs) {
    labels.insert(labels.end(), o.labels.begin(), o.labels.end());
    logits.push_back(o.point_logits);
  }
  for (const auto& o : val_outs) {
    val_labels.insert(val_labels.end(), o.labels.begin(), o.labels.end());
    val_logits.push_back(o.point_logits);
  }
  auto fill = [&](VariantMetrics& vm, const RowMat& test_logits, const RowMat& validation_logits) {
    vm.accuracy = accuracy(argmax_rows(test_logits), labels);
    vm.ece = ece_from_logits(test_logits, labels, 1.0, settings.n_bins).ece;
    vm.temperature =
        temperature_search(validation_logits, val_labels, settings.temperature_grid, settings.n_bins);
    vm.ece_tuned = ece_from_logits(test_logits, labels, vm.temperature, settings.n_bins).ece;
  };
  fill(rep.point, stack_rows(logits), stack_rows(val_logits));
  for (std::size_t v = 0; v < n_variants; ++v) {
    std::vector<RowMat> probs, val_probs;
    VariantMetrics vm;
    for (const auto& o : outs) {
      probs.push_back(o.variant_probs[v]);
      vm.adapt_warning = vm.adapt_warning || o.warnings[v];
    }
    for (const auto& o : val_outs) val_probs.push_back(o.variant_probs[v]);
    vm.mv_steps = settings.mv_steps[v];
    vm.name = "mv" + std::to_string(vm.mv_steps);
    fill(vm, log_probs(stack_rows(probs)), log_probs(stack_rows(val_probs)));
    rep.variants.push_back(vm);
  }
  return rep;
}

}  // namespace niwmeta
