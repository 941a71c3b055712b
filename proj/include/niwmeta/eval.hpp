#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "niwmeta/kernels.hpp"
#include "niwmeta/meta_test.hpp"
#include "niwmeta/tasks.hpp"
#include "niwmeta/trainer.hpp"

namespace niwmeta {

struct CalibrationBin {
  Index count = 0;
  double avg_confidence = 0.0;
  double avg_accuracy = 0.0;
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
  double temperature = 1.0;
};

/// Equal-width confidence bins on [0, 1]; ECE = sum_b (N_b / N) |acc_b - conf_b|.
CalibrationReport ece(const std::vector<double>& confidences, const std::vector<int>& correct,
                      int n_bins = 20);

/// ECE of softmax(logits / T) with max-probability confidences.
CalibrationReport ece_from_logits(const RowMat& logits, const std::vector<int>& labels,
                                  double temperature, int n_bins = 20);

/// Grid temperature with the lowest validation ECE; ties go to the smaller T.
double temperature_search(const RowMat& logits, const std::vector<int>& labels,
                          std::vector<double> grid, int n_bins = 20);

/// Linear-interpolation quantile of an ascending sample.
double empirical_quantile(const std::vector<double>& sorted, double p);

/// Regression calibration error. For p on the bin centers of a 20-bin grid,
/// compares p with the fraction of queries whose target falls below the
/// p-quantile of that query's predictive samples (one row per query).
double r_ece(const RowMat& predictive_samples, const Vec& targets, int n_bins = 20);

double mse(const Vec& predictions, const Vec& targets);
double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

struct BoundReport {
  double epsilon_star = 0.0;  // smoothed training objective, an upper-bound proxy
  Index n = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
  Index n_tasks = 0;
};

BoundReport make_bound_report(double epsilon_star, Index n, double lhs);

struct BoundCheckConfig {
  Index n_tasks = 50;
  Index heldout_points = 100;
  SgldConfig sgld;
};

/// Estimates E_i E_{q_i*}[R_i(theta)] on fresh tasks: SGLD moments, closed-form
/// q_i*, one sample theta ~ q_i*, and the mean held-out NLL with the head fit
/// on the task's support. Compares against 2 epsilon* / n.
BoundReport pac_bayes_check(double epsilon_star, Index n, const TrainedModel& model,
                            const TaskDistribution& tasks, const BoundCheckConfig& cfg, Rng& rng,
                            ExecPolicy policy = ExecPolicy::parallel);

struct EvalSettings {
  Index test_episodes = 600;
  Index validation_episodes = 100;
  std::vector<int> mv_steps{0, 10};
  TestAdaptConfig adapt;
  int ms_samples = 100;
  int n_bins = 20;
  std::vector<double> temperature_grid{0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0, 4.0};
};

/// Metrics of one prediction mode.
struct VariantMetrics {
  std::string name;
  int mv_steps = -1;           // -1 for point estimates
  double mse = 0.0;            // regression
  double r_ece = -1.0;         // regression, < 0 when not applicable
  double accuracy = 0.0;       // classification
  double ece = -1.0;           // classification, at T = 1
  double ece_tuned = -1.0;     // classification, at the searched temperature
  double temperature = 1.0;
  bool adapt_warning = false;
};

struct EvalReport {
  Method method = Method::niw_meta;
  TaskType task = TaskType::regression;
  Index episodes = 0;
  std::vector<VariantMetrics> variants;  // probabilistic variants (NIW-Meta)
  VariantMetrics point;                  // point estimate, degenerate predictive
};

/// Meta-test over a fresh seeded episode stream. Episodes are evaluated
/// independently under `policy`; aggregation is in episode order.
EvalReport evaluate(const TrainedModel& model, const TaskDistribution& tasks,
                    const EvalSettings& settings, std::uint64_t seed,
                    ExecPolicy policy = ExecPolicy::parallel);

}  // namespace niwmeta
