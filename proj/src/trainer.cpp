#include "niwmeta/trainer.hpp"

#include <chrono>
#include <cmath>

namespace niwmeta {

const char* to_string(Method m) {
  switch (m) {
    case Method::niw_meta: return "niw_meta";
    case Method::fomaml: return "fomaml";
    case Method::reptile: return "reptile";
    case Method::protonet: return "protonet";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "niw_meta") return Method::niw_meta;
  if (s == "fomaml") return Method::fomaml;
  if (s == "reptile") return Method::reptile;
  if (s == "protonet") return Method::protonet;
  throw DomainError("unknown method: " + s);
}

void TrainConfig::validate() const {
  backbone.validate();
  if (episodes < 1) throw DomainError("train: episodes must be >= 1");
  if (!(outer_lr >= 0.0)) throw DomainError("train: outer_lr must be >= 0");
  if (mc_samples < 1) throw DomainError("train: mc_samples must be >= 1");
  if (inner_steps < 0) throw DomainError("train: inner_steps must be >= 0");
  if (!(inner_lr >= 0.0)) throw DomainError("train: inner_lr must be >= 0");
  if (!(init_v0 > 0.0) || !(init_n0_excess > 0.0)) {
    throw DomainError("train: init_v0 and init_n0_excess must be > 0");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw DomainError("train: momentum must be in [0, 1)");
  if (!(grad_clip >= 0.0)) throw DomainError("train: grad_clip must be >= 0");
  if (smoothing_window < 1) throw DomainError("train: smoothing_window must be >= 1");
  if (!(head.sigma_obs > 0.0)) throw DomainError("train: sigma_obs must be > 0");
  if (head.kind == HeadKind::ridge && !(head.ridge_lambda > 0.0)) {
    throw DomainError("train: ridge lambda must be > 0");
  }
  if (!(head.temperature > 0.0)) throw DomainError("train: head temperature must be > 0");
  sgld.validate();
}

double f_term(const GlobalPosterior& l0, const EpisodeMoments& mom, const Episode& ep,
              const MlpSpec& spec, const HeadConfig& head, int mc_samples, Rng& rng) {
  if (mc_samples < 1) throw DomainError("f_term: mc_samples must be >= 1");
  const DiagGaussian post = episodic_posterior(l0, mom);
  double sum = 0.0;
  for (int s = 0; s < mc_samples; ++s) {
    const Vec theta = sample_diag_gaussian(post.mean, post.var, rng);
    sum += episode_loss(spec, theta, ep, head);
  }
  return sum / mc_samples;
}

namespace {

OuterEval full_objective(const GlobalPosterior& l0, const Episode& ep, const EpisodeMoments& mom,
                         const RowMat& eps, const MlpSpec& spec, const HeadConfig& head) {
  const Index d = l0.dim();
  const double n0 = l0.n0();
  const Vec p = l0.prior_precision();
  const Vec& a = mom.a_bar.diag;
  const Vec s = a + p;
  const Vec inv_s = s.cwiseInverse();
  // Episodic posterior and g from the shared pieces; episodic_posterior and
  // g_term compute the same quantities from scratch.
  OuterEval out;
  out.posterior.mean = (a.cwiseProduct(mom.m_bar) + p.cwiseProduct(l0.m0)).cwiseProduct(inv_s);
  out.posterior.var = DiagMat(inv_s);
  const Vec& m_star = out.posterior.mean;
  const Vec sd = inv_s.cwiseSqrt();

  // f: reparameterized Monte-Carlo average with the given noise.
  const Index n_mc = eps.rows();
  Vec mean_grad = Vec::Zero(d);
  Vec d_f_dp = Vec::Zero(d);
  const Vec dm_dp = (l0.m0 - m_star).cwiseProduct(inv_s);
  const Vec dsd_dp = -0.5 * sd.cwiseProduct(inv_s);
  for (Index i = 0; i < n_mc; ++i) {
    const Vec e = eps.row(i).transpose();
    const Vec theta = m_star + sd.cwiseProduct(e);
    const LossGrad lg = episode_loss_and_grad(spec, theta, ep, head);
    out.f += lg.loss;
    mean_grad += lg.grad;
    d_f_dp.array() += lg.grad.array() * (dm_dp.array() + e.array() * dsd_dp.array());
  }
  out.f /= static_cast<double>(n_mc);
  mean_grad /= static_cast<double>(n_mc);
  d_f_dp /= static_cast<double>(n_mc);

  // g, written per coordinate as rho + log s + P/s + P delta^2 - psi_d(n0/2).
  const Vec delta = m_star - l0.m0;
  out.g = l0.rho_v.sum() + s.array().log().sum() + (p.array() * inv_s.array()).sum() +
          (p.array() * delta.array().square()).sum() - multivariate_digamma(0.5 * n0, static_cast<int>(d));
  out.kl = 0.5 * (out.g - static_cast<double>(d) * (std::log(2.0) + 1.0));
  out.value = out.f + 0.5 * out.g;

  const Vec d_h_dp = inv_s.array() + a.array() * inv_s.array().square() + delta.array().square() -
                     2.0 * p.array() * delta.array().square() * inv_s.array();
  const Vec d_obj_dp = d_f_dp + 0.5 * d_h_dp;

  out.grad.d_m0 = (p.array() * inv_s.array()) * (mean_grad.array() - delta.array() * a.array());
  out.grad.d_rho_v = 0.5 - p.array() * d_obj_dp.array();
  const double d_n0 = (d_obj_dp.array() * p.array()).sum() / n0 -
                      0.25 * multivariate_trigamma(0.5 * n0, static_cast<int>(d));
  out.grad.d_rho_n = d_n0 * sigmoid(l0.rho_n);
  return out;
}

OuterEval spiky_objective(const GlobalPosterior& l0, const Episode& ep, const EpisodeMoments& mom,
                          const MlpSpec& spec, const HeadConfig& head, ObjectiveMode mode) {
  const Index d = l0.dim();
  OuterEval out;
  out.grad.d_rho_v = Vec::Zero(d);
  out.grad.d_rho_n = 0.0;
  if (mode == ObjectiveMode::reptile) {
    out.posterior = {mom.m_bar, DiagMat::constant(d, 0.0)};
    const Vec diff = l0.m0 - mom.m_bar;
    out.value = out.f = 0.5 * diff.squaredNorm();
    out.grad.d_m0 = diff;
    return out;
  }
  Vec m_star = l0.m0;
  Vec dm_dm0 = Vec::Ones(d);
  if (mode == ObjectiveMode::protonet_with_nll) {
    const Vec p = l0.prior_precision();
    const Vec s = mom.a_bar.diag + p;
    m_star = (mom.a_bar.diag.cwiseProduct(mom.m_bar) + p.cwiseProduct(l0.m0)).cwiseQuotient(s);
    dm_dm0 = p.cwiseQuotient(s);
  }
  const LossGrad lg = episode_loss_and_grad(spec, m_star, ep, head);
  out.posterior = {m_star, DiagMat::constant(d, 0.0)};
  out.value = out.f = lg.loss;
  out.grad.d_m0 = dm_dm0.cwiseProduct(lg.grad);
  return out;
}

// Scale factor bringing the joint norm of the gradient blocks under `clip`.
double clip_scale(double sq_norm, double clip) {
  if (clip <= 0.0) return 1.0;
  const double norm = std::sqrt(sq_norm);
  return norm > clip ? clip / norm : 1.0;
}

void apply_update(Vec& x, Vec& velocity, const Vec& grad, const TrainConfig& cfg,
                  double scale = 1.0) {
  if (cfg.optimizer == OptimizerKind::momentum) {
    if (velocity.size() != grad.size()) velocity = Vec::Zero(grad.size());
    velocity = cfg.momentum * velocity + scale * grad;
    x.noalias() -= cfg.outer_lr * velocity;
  } else {
    x.noalias() -= (cfg.outer_lr * scale) * grad;
  }
}

void apply_clipped(Vec& x, Vec& velocity, const Vec& grad, const TrainConfig& cfg) {
  apply_update(x, velocity, grad, cfg, clip_scale(grad.squaredNorm(), cfg.grad_clip));
}

}  // namespace

OuterEval outer_gradient(const GlobalPosterior& l0, const Episode& ep, const EpisodeMoments& mom,
                         const RowMat& eps, const MlpSpec& spec, const HeadConfig& head,
                         ObjectiveMode mode) {
  require_same_size(l0.dim(), mom.m_bar.size(), "outer_gradient moments");
  if (mode != ObjectiveMode::full) return spiky_objective(l0, ep, mom, spec, head, mode);
  require_same_size(l0.dim(), spec.param_count(), "outer_gradient backbone");
  require_same_size(eps.cols(), l0.dim(), "outer_gradient noise");
  if (eps.rows() < 1) throw DomainError("outer_gradient: need at least one noise sample");
  OuterEval out = full_objective(l0, ep, mom, eps, spec, head);
  if (!std::isfinite(out.value) || !out.grad.d_m0.allFinite() || !out.grad.d_rho_v.allFinite() ||
      !std::isfinite(out.grad.d_rho_n)) {
    throw NumericError("outer_gradient: non-finite objective or gradient");
  }
  return out;
}

OuterEval outer_gradient(const GlobalPosterior& l0, const Episode& ep, const TrainConfig& cfg,
                         Rng& rng) {
  const LossGradFn loss = [&](const Vec& theta) {
    return episode_loss_and_grad(cfg.backbone, theta, ep, cfg.head);
  };
  const EpisodeMoments mom = sgld_moments(loss, l0.m0, cfg.sgld, rng);
  RowMat eps(cfg.mc_samples, l0.dim());
  for (Index i = 0; i < eps.rows(); ++i) {
    for (Index k = 0; k < eps.cols(); ++k) eps(i, k) = rng.normal();
  }
  return outer_gradient(l0, ep, mom, eps, cfg.backbone, cfg.head, ObjectiveMode::full);
}

GlobalPosterior initial_posterior(const TrainConfig& cfg, Rng& rng) {
  Vec m0 = init_mlp_params(cfg.backbone, rng);
  const Index d = m0.size();
  return GlobalPosterior::from_natural(std::move(m0), Vec::Constant(d, cfg.init_v0),
                                       static_cast<double>(d) + 1.0 + cfg.init_n0_excess);
}

NiwMetaTrainer::NiwMetaTrainer(const TrainConfig& cfg, GlobalPosterior init, Rng rng)
    : cfg_(cfg), l0_(std::move(init)), rng_(std::move(rng)) {
  cfg_.validate();
  require_same_size(l0_.dim(), cfg_.backbone.param_count(), "NiwMetaTrainer");
}

OuterEval NiwMetaTrainer::step(const Episode& ep) {
  OuterEval ev = outer_gradient(l0_, ep, cfg_, rng_);
  const double scale =
      clip_scale(ev.grad.d_m0.squaredNorm() + ev.grad.d_rho_v.squaredNorm() +
                     ev.grad.d_rho_n * ev.grad.d_rho_n,
                 cfg_.grad_clip);
  if (scale < 1.0) {
    ev.grad.d_m0 *= scale;
    ev.grad.d_rho_v *= scale;
    ev.grad.d_rho_n *= scale;
  }
  apply_update(l0_.m0, velocity_.d_m0, ev.grad.d_m0, cfg_);
  apply_update(l0_.rho_v, velocity_.d_rho_v, ev.grad.d_rho_v, cfg_);
  if (cfg_.optimizer == OptimizerKind::momentum) {
    velocity_.d_rho_n = cfg_.momentum * velocity_.d_rho_n + ev.grad.d_rho_n;
    l0_.rho_n -= cfg_.outer_lr * velocity_.d_rho_n;
  } else {
    l0_.rho_n -= cfg_.outer_lr * ev.grad.d_rho_n;
  }
  return ev;
}

std::size_t NiwMetaTrainer::state_bytes() const {
  const auto vec_bytes = [](const Vec& v) { return static_cast<std::size_t>(v.size()) * sizeof(double); };
  return sizeof(*this) + vec_bytes(l0_.m0) + vec_bytes(l0_.rho_v) + vec_bytes(velocity_.d_m0) +
         vec_bytes(velocity_.d_rho_v);
}

BaselineTrainer::BaselineTrainer(const TrainConfig& cfg, Vec init)
    : cfg_(cfg), params_(std::move(init)) {
  cfg_.validate();
  require_same_size(params_.size(), cfg_.backbone.param_count(), "BaselineTrainer");
}

Vec adapt_on_support(const MlpSpec& spec, const HeadConfig& head, const Vec& params,
                     const DataSet& support, int n_way, int steps, double lr) {
  Vec theta = params;
  for (int k = 0; k < steps; ++k) {
    theta.noalias() -= lr * episode_loss_and_grad(spec, theta, support, support, head, n_way).grad;
  }
  return theta;
}

double BaselineTrainer::step(const Episode& ep) {
  const auto& spec = cfg_.backbone;
  const auto& head = cfg_.head;
  switch (cfg_.method) {
    case Method::protonet: {
      const LossGrad lg = episode_loss_and_grad(spec, params_, ep, head);
      apply_clipped(params_, velocity_, lg.grad, cfg_);
      return lg.loss;
    }
    case Method::fomaml: {
      const Vec adapted = adapt_on_support(spec, head, params_, ep.support, ep.n_way,
                                           cfg_.inner_steps, cfg_.inner_lr);
      const LossGrad lg = episode_loss_and_grad(spec, adapted, ep, head);
      apply_clipped(params_, velocity_, lg.grad, cfg_);
      return lg.loss;
    }
    case Method::reptile: {
      Vec theta = params_;
      double loss = 0.0;
      for (int k = 0; k < cfg_.inner_steps; ++k) {
        const LossGrad lg = episode_loss_and_grad(spec, theta, ep, head);
        if (k == 0) loss = lg.loss;
        theta.noalias() -= cfg_.inner_lr * lg.grad;
      }
      if (cfg_.inner_steps == 0) loss = episode_loss(spec, theta, ep, head);
      // Interpolate toward the adapted iterate.
      const Vec direction = params_ - theta;
      apply_clipped(params_, velocity_, direction, cfg_);
      return loss;
    }
    case Method::niw_meta:
      break;
  }
  throw DomainError("BaselineTrainer: niw_meta is not a baseline");
}

std::size_t BaselineTrainer::state_bytes() const {
  return sizeof(*this) + static_cast<std::size_t>(params_.size() + velocity_.size()) * sizeof(double);
}

namespace {

double tail_mean(const std::vector<double>& xs, Index window) {
  if (xs.empty()) return 0.0;
  const std::size_t n = std::min<std::size_t>(xs.size(), static_cast<std::size_t>(window));
  double sum = 0.0;
  for (std::size_t i = xs.size() - n; i < xs.size(); ++i) sum += xs[i];
  return sum / static_cast<double>(n);
}

using Clock = std::chrono::steady_clock;

}  // namespace

TrainResult train_niw_meta(const TrainConfig& cfg, const TaskDistribution& tasks) {
  cfg.validate();
  tasks.validate();
  if (cfg.method != Method::niw_meta) throw DomainError("train_niw_meta: method must be niw_meta");
  const Rng root(cfg.seed);
  Rng episode_rng = root.split(streams::train_episodes);
  Rng init_rng = root.split(streams::init);
  NiwMetaTrainer trainer(cfg, initial_posterior(cfg, init_rng), root.split(streams::algorithm));

  TrainResult result;
  RunRecord& rec = result.record;
  rec.method = Method::niw_meta;
  rec.objective_trace.reserve(static_cast<std::size_t>(cfg.episodes));
  rec.loss_trace.reserve(static_cast<std::size_t>(cfg.episodes));
  rec.elbo_trace.reserve(static_cast<std::size_t>(cfg.episodes));
  rec.episode_seconds.reserve(static_cast<std::size_t>(cfg.episodes));
  for (Index i = 0; i < cfg.episodes; ++i) {
    // Each episode is generated, used for one outer step and dropped.
    const Episode ep = sample_episode(tasks, episode_rng);
    const auto t0 = Clock::now();
    OuterEval ev;
    try {
      ev = trainer.step(ep);
    } catch (const std::exception& e) {
      throw TrainingError(e.what(), i);
    }
    rec.episode_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    rec.objective_trace.push_back(ev.value);
    rec.loss_trace.push_back(ev.f);
    rec.query_size = ep.query.size();
    rec.elbo_trace.push_back(static_cast<double>(ep.query.size()) * ev.f + ev.kl);
  }
  rec.epsilon_star = tail_mean(rec.elbo_trace, cfg.smoothing_window);

  TrainedModel& model = result.model;
  model.method = Method::niw_meta;
  model.backbone = cfg.backbone;
  model.head = cfg.head;
  model.posterior = trainer.posterior();
  model.params = trainer.posterior().m0;
  return result;
}

TrainResult train_baseline(const TrainConfig& cfg, const TaskDistribution& tasks) {
  cfg.validate();
  tasks.validate();
  if (cfg.method == Method::niw_meta) throw DomainError("train_baseline: niw_meta is not a baseline");
  const Rng root(cfg.seed);
  Rng episode_rng = root.split(streams::train_episodes);
  Rng init_rng = root.split(streams::init);
  // Same initial backbone as NIW-Meta's m0 for the same seed.
  BaselineTrainer trainer(cfg, initial_posterior(cfg, init_rng).m0);

  TrainResult result;
  RunRecord& rec = result.record;
  rec.method = cfg.method;
  rec.objective_trace.reserve(static_cast<std::size_t>(cfg.episodes));
  rec.episode_seconds.reserve(static_cast<std::size_t>(cfg.episodes));
  for (Index i = 0; i < cfg.episodes; ++i) {
    const Episode ep = sample_episode(tasks, episode_rng);
    const auto t0 = Clock::now();
    double loss = 0.0;
    try {
      loss = trainer.step(ep);
    } catch (const std::exception& e) {
      throw TrainingError(e.what(), i);
    }
    if (!std::isfinite(loss) || !trainer.params().allFinite()) {
      throw TrainingError("non-finite loss or parameters", i);
    }
    rec.episode_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    rec.objective_trace.push_back(loss);
    rec.query_size = ep.query.size();
  }
  rec.loss_trace = rec.objective_trace;

  TrainedModel& model = result.model;
  model.method = cfg.method;
  model.backbone = cfg.backbone;
  model.head = cfg.head;
  model.params = trainer.params();
  if (cfg.method == Method::fomaml || cfg.method == Method::reptile) {
    model.inner_steps = cfg.inner_steps;
    model.inner_lr = cfg.inner_lr;
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, const TaskDistribution& tasks) {
  return cfg.method == Method::niw_meta ? train_niw_meta(cfg, tasks) : train_baseline(cfg, tasks);
}

namespace {

ReductionReport protonet_reduction(std::uint64_t seed) {
  ReductionReport rep;
  rep.mode = "protonet";
  Rng rng(seed);
  const MlpSpec spec{{2, 8, 4}, Activation::tanh};
  HeadConfig head;
  head.kind = HeadKind::ncc;
  const Episode ep = sample_blob_episode(3, 3, 4, 2, 0.8, rng);
  const Index d = spec.param_count();
  const GlobalPosterior l0 = GlobalPosterior::from_natural(init_mlp_params(spec, rng),
                                                           Vec::Constant(d, 0.5),
                                                           static_cast<double>(d) + 3.0);
  SgldConfig sgld;
  const LossGradFn loss = [&](const Vec& theta) { return episode_loss_and_grad(spec, theta, ep, head); };
  const EpisodeMoments mom = sgld_moments(loss, l0.m0, sgld, rng);
  const RowMat no_noise = RowMat::Zero(1, d);

  const OuterEval reduced = outer_gradient(l0, ep, mom, no_noise, spec, head, ObjectiveMode::protonet);
  const Vec protonet_step = episode_loss_and_grad(spec, l0.m0, ep, head).grad;
  rep.max_abs_diff = (reduced.grad.d_m0 - protonet_step).cwiseAbs().maxCoeff();

  const OuterEval control =
      outer_gradient(l0, ep, mom, no_noise, spec, head, ObjectiveMode::protonet_with_nll);
  rep.control_rel_diff = (control.grad.d_m0 - protonet_step).norm() / protonet_step.norm();
  rep.passed = rep.max_abs_diff < 1e-9 && rep.control_rel_diff > 1e-3;
  return rep;
}

ReductionReport reptile_reduction(std::uint64_t seed) {
  ReductionReport rep;
  rep.mode = "reptile";
  Rng rng(seed);
  constexpr Index kDim = 1;
  constexpr int kEpisodes = 200;
  const Vec center = Vec::Constant(kDim, 1.5);
  // Start far from the center so the approach is visible.
  GlobalPosterior l0 = GlobalPosterior::from_natural(Vec::Constant(kDim, -2.0), Vec::Ones(kDim),
                                                     static_cast<double>(kDim) + 2.0);
  const MlpSpec unused{{1, 1}, Activation::tanh};
  const Episode empty;
  const double start_distance = (l0.m0 - center).norm();
  Vec running_sum = Vec::Zero(kDim);
  for (int i = 1; i <= kEpisodes; ++i) {
    // Task optima spread 0.25 around the center.
    EpisodeMoments mom{center + 0.25 * rng.normal_vec(kDim), DiagMat::constant(kDim, 1.0)};
    running_sum += mom.m_bar;
    const OuterEval ev =
        outer_gradient(l0, empty, mom, RowMat(), unused, HeadConfig{}, ObjectiveMode::reptile);
    // Step size 1/i makes m0 the exact running mean of the m_bar stream.
    l0.m0 -= ev.grad.d_m0 / static_cast<double>(i);
    rep.distances.push_back((l0.m0 - center).norm());
  }
  rep.running_mean_gap = (l0.m0 - running_sum / kEpisodes).cwiseAbs().maxCoeff();
  const double final_distance = rep.distances.back();
  rep.passed = rep.running_mean_gap < 1e-9 && final_distance < 0.1 && final_distance < start_distance;
  return rep;
}

}  // namespace

ReductionReport reduction_check(ReductionMode mode, std::uint64_t seed) {
  return mode == ReductionMode::protonet ? protonet_reduction(seed) : reptile_reduction(seed);
}

}  // namespace niwmeta
