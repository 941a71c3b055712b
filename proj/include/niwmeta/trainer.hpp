#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "niwmeta/hb_core.hpp"
#include "niwmeta/model.hpp"
#include "niwmeta/tasks.hpp"

namespace niwmeta {

enum class Method { niw_meta, fomaml, reptile, protonet };

const char* to_string(Method m);
Method method_from_string(const std::string& s);

enum class OptimizerKind { sgd, momentum };

struct TrainConfig {
  Method method = Method::niw_meta;
  Index episodes = 20000;
  double outer_lr = 1e-3;
  int mc_samples = 1;
  SgldConfig sgld;
  HeadConfig head;
  MlpSpec backbone{{1, 40, 40, 40}, Activation::tanh};
  std::uint64_t seed = 0;
  // fomaml / reptile inner loop
  int inner_steps = 1;
  double inner_lr = 0.01;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double momentum = 0.9;
  // Initial global posterior: V0 = init_v0 * 1, n0 = d + 1 + init_n0_excess.
  double init_v0 = 1.0;
  double init_n0_excess = 1.0;
  // Episodes averaged for the smoothed final objective.
  Index smoothing_window = 1000;
  // Global L2 norm cap on each outer gradient; 0 disables clipping.
  double grad_clip = 0.0;

  void validate() const;
};

/// Gradient of f_i + g_i / 2 w.r.t. the unconstrained global parameters.
struct OuterGrad {
  Vec d_m0;
  Vec d_rho_v;
  double d_rho_n = 0.0;
};

/// Which terms of the outer objective are active.
///  - full: the NIW-Meta objective f + g/2.
///  - protonet: episode NLL dropped from the episodic problem (so m* = m0),
///    spiky V* and no g term. The m0 step is the plain head-on-support gradient.
///  - protonet_with_nll: as protonet but the SGLD precision is kept in m*.
///  - reptile: penalty and g dropped, spiky V*, so m* = m_bar and m0 tracks
///    the average of m_bar through 1/2 ||m0 - m_bar||^2.
enum class ObjectiveMode { full, protonet, protonet_with_nll, reptile };

struct OuterEval {
  double value = 0.0;  // f + g / 2
  double f = 0.0;
  double g = 0.0;
  double kl = 0.0;     // expected KL with constants
  OuterGrad grad;
  DiagGaussian posterior;
};

/// Monte-Carlo estimate of E_eps[ l(m* + sqrt(V*) eps) ].
double f_term(const GlobalPosterior& l0, const EpisodeMoments& mom, const Episode& ep,
              const MlpSpec& spec, const HeadConfig& head, int mc_samples, Rng& rng);

/// Value and analytic gradient for fixed moments and fixed reparameterization
/// noise `eps` (one row per Monte-Carlo sample).
OuterEval outer_gradient(const GlobalPosterior& l0, const Episode& ep, const EpisodeMoments& mom,
                         const RowMat& eps, const MlpSpec& spec, const HeadConfig& head,
                         ObjectiveMode mode = ObjectiveMode::full);

/// SGLD from m0, fresh noise, then the fixed-noise gradient above.
OuterEval outer_gradient(const GlobalPosterior& l0, const Episode& ep, const TrainConfig& cfg,
                         Rng& rng);

GlobalPosterior initial_posterior(const TrainConfig& cfg, Rng& rng);

/// Trained artifact. `posterior` is set for NIW-Meta; `params` is the
/// backbone point estimate (m0 for NIW-Meta).
struct TrainedModel {
  Method method = Method::niw_meta;
  MlpSpec backbone;
  HeadConfig head;
  Vec params;
  std::optional<GlobalPosterior> posterior;
  int inner_steps = 0;
  double inner_lr = 0.0;
};

struct RunRecord {
  Method method = Method::niw_meta;
  std::vector<double> objective_trace;  // per episode
  std::vector<double> loss_trace;       // per episode query loss
  std::vector<double> elbo_trace;       // NIW-Meta: n_q f + E[KL], per episode
  std::vector<double> episode_seconds;  // wall clock, not reproducible
  double epsilon_star = 0.0;            // smoothed final ELBO value (NIW-Meta)
  Index query_size = 0;
};

struct TrainResult {
  TrainedModel model;
  RunRecord record;
};

/// Seeded streams used by training and evaluation. Every method sees the
/// same training episodes for the same seed.
namespace streams {
inline constexpr std::uint64_t train_episodes = 1;
inline constexpr std::uint64_t algorithm = 2;
inline constexpr std::uint64_t init = 3;
inline constexpr std::uint64_t test_episodes = 4;
inline constexpr std::uint64_t test_algorithm = 5;
inline constexpr std::uint64_t validation_episodes = 6;
inline constexpr std::uint64_t bound = 7;
inline constexpr std::uint64_t bench = 8;
}  // namespace streams

/// Online NIW-Meta learner. State is the global posterior plus optimizer
/// buffers; nothing from past episodes is kept.
class NiwMetaTrainer {
 public:
  NiwMetaTrainer(const TrainConfig& cfg, GlobalPosterior init, Rng rng);

  OuterEval step(const Episode& ep);
  const GlobalPosterior& posterior() const { return l0_; }
  std::size_t state_bytes() const;

 private:
  TrainConfig cfg_;
  GlobalPosterior l0_;
  Rng rng_;
  OuterGrad velocity_;
};

/// First-order MAML, Reptile and ProtoNet/RidgeNet point-estimate learners.
class BaselineTrainer {
 public:
  BaselineTrainer(const TrainConfig& cfg, Vec init);

  /// Returns the query loss seen by the outer update.
  double step(const Episode& ep);
  const Vec& params() const { return params_; }
  std::size_t state_bytes() const;

 private:
  TrainConfig cfg_;
  Vec params_;
  Vec velocity_;
};

/// Inner SGD on the support set (head fit and evaluated on the support).
Vec adapt_on_support(const MlpSpec& spec, const HeadConfig& head, const Vec& params,
                     const DataSet& support, int n_way, int steps, double lr);

TrainResult train_niw_meta(const TrainConfig& cfg, const TaskDistribution& tasks);
TrainResult train_baseline(const TrainConfig& cfg, const TaskDistribution& tasks);
TrainResult train(const TrainConfig& cfg, const TaskDistribution& tasks);

/// Thrown by the training loops with the failing episode attached.
class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, Index episode)
      : NumericError(what), episode_(episode) {}
  Index episode() const { return episode_; }

 private:
  Index episode_;
};

struct ReductionReport {
  std::string mode;
  bool passed = false;
  double max_abs_diff = 0.0;      // protonet: update-vector difference
  double control_rel_diff = 0.0;  // protonet: negative control with the NLL term kept
  double running_mean_gap = 0.0;  // reptile: |m0 - running mean of m_bar|
  std::vector<double> distances;  // reptile: ||m0 - c|| after each episode
};

enum class ReductionMode { protonet, reptile };

/// Checks the ProtoNet and Reptile special cases of the outer update.
ReductionReport reduction_check(ReductionMode mode, std::uint64_t seed);

}  // namespace niwmeta
