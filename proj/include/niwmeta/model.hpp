#pragma once

#include <string>
#include <vector>

#include "niwmeta/episode.hpp"
#include "niwmeta/numerics.hpp"

namespace niwmeta {

enum class Activation { tanh, relu };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Fully connected backbone. `widths` runs input -> hidden... -> feature dim.
/// The activation is applied after every layer but the last.
///
/// Flat parameter layout, per layer: weights (out x in, row-major), then biases.
struct MlpSpec {
  std::vector<int> widths;
  Activation activation = Activation::tanh;

  int num_layers() const { return static_cast<int>(widths.size()) - 1; }
  int input_dim() const { return widths.front(); }
  int feature_dim() const { return widths.back(); }
  Index param_count() const;
  void validate() const;

  bool operator==(const MlpSpec&) const = default;
};

/// Activations kept from a forward pass; acts[0] is the input batch.
struct MlpTape {
  std::vector<RowMat> acts;
};

RowMat mlp_forward(const MlpSpec& spec, const Vec& params, const RowMat& inputs,
                   MlpTape* tape = nullptr);

/// Adds d(loss)/d(params) to `grad` given d(loss)/d(features).
void mlp_backward(const MlpSpec& spec, const Vec& params, const MlpTape& tape,
                  const RowMat& d_features, Vec& grad);

Vec mlp_features(const MlpSpec& spec, const Vec& params, const Vec& x);

/// LeCun-normal weights, small normal biases.
Vec init_mlp_params(const MlpSpec& spec, Rng& rng);

enum class HeadKind { ridge, ncc };

const char* to_string(HeadKind k);
HeadKind head_kind_from_string(const std::string& s);

struct HeadConfig {
  HeadKind kind = HeadKind::ridge;
  double ridge_lambda = 0.1;
  double temperature = 1.0;        // ncc
  bool normalize_features = false; // ncc
  double sigma_obs = 0.5;          // Gaussian observation noise for regression
};

struct RidgeHead {
  Mat weights;  // (h + 1) x outputs, last row is the bias
  double lambda = 0.0;

  Mat predict(const RowMat& features) const;
};

/// W = (Phi^T Phi + lambda D)^-1 Phi^T Y with Phi = [features, 1] and D the
/// identity with a zero in the bias slot.
RidgeHead ridge_fit(const RowMat& features, const Mat& targets, double lambda);

/// -||f_q - c_k||^2 / T for every class centroid c_k of the support features.
Vec ncc_logits(const RowMat& support_features, const std::vector<int>& support_labels,
               const Vec& query_feature, double temperature, int n_way);

double gaussian_nll(double prediction, double target, double sigma);

struct LossGrad {
  double loss = 0.0;
  Vec grad;
};

/// Mean negative log-likelihood of `eval` under the head built on `fit`,
/// and its exact gradient w.r.t. the backbone parameters (through the head).
LossGrad episode_loss_and_grad(const MlpSpec& spec, const Vec& params, const DataSet& fit,
                               const DataSet& eval, const HeadConfig& head, int n_way = 0);

/// Support/query convention: head on the support set, loss on the query set.
LossGrad episode_loss_and_grad(const MlpSpec& spec, const Vec& params, const Episode& ep,
                               const HeadConfig& head);

double episode_loss(const MlpSpec& spec, const Vec& params, const DataSet& fit,
                    const DataSet& eval, const HeadConfig& head, int n_way = 0);
double episode_loss(const MlpSpec& spec, const Vec& params, const Episode& ep,
                    const HeadConfig& head);

/// Regression point predictions for `query_inputs` with the head fit on `support`.
Vec predict_regression(const MlpSpec& spec, const Vec& params, const DataSet& support,
                       const RowMat& query_inputs, const HeadConfig& head);

/// Classification logits (queries x n_way) with the head built on `support`.
RowMat predict_logits(const MlpSpec& spec, const Vec& params, const DataSet& support,
                      const RowMat& query_inputs, const HeadConfig& head, int n_way);

/// Row-wise softmax.
RowMat softmax_rows(const RowMat& logits);

}  // namespace niwmeta
