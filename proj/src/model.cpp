#include "niwmeta/model.hpp"

#include <cmath>
#include <numbers>

namespace niwmeta {

const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw DomainError("unknown activation: " + s);
}

const char* to_string(HeadKind k) { return k == HeadKind::ridge ? "ridge" : "ncc"; }

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "ridge") return HeadKind::ridge;
  if (s == "ncc") return HeadKind::ncc;
  throw DomainError("unknown head kind: " + s);
}

Index MlpSpec::param_count() const {
  Index d = 0;
  for (int l = 0; l < num_layers(); ++l) d += static_cast<Index>(widths[l + 1]) * (widths[l] + 1);
  return d;
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw DimensionError("MlpSpec: need at least an input and a feature width");
  for (int w : widths) {
    if (w < 1) throw DimensionError("MlpSpec: widths must be positive");
  }
}

namespace {

using ConstRowMap = Eigen::Map<const RowMat>;

void apply_activation(Activation a, RowMat& z) {
  if (a == Activation::tanh) {
    z = z.array().tanh();
  } else {
    z = z.array().max(0.0);
  }
}

}  // namespace

RowMat mlp_forward(const MlpSpec& spec, const Vec& params, const RowMat& inputs, MlpTape* tape) {
  require_same_size(params.size(), spec.param_count(), "mlp_forward params");
  require_same_size(inputs.cols(), spec.input_dim(), "mlp_forward inputs");
  if (tape) {
    tape->acts.clear();
    tape->acts.reserve(static_cast<std::size_t>(spec.num_layers()) + 1);
    tape->acts.push_back(inputs);
  }
  RowMat a = inputs;
  Index offset = 0;
  const int layers = spec.num_layers();
  for (int l = 0; l < layers; ++l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    ConstRowMap w(params.data() + offset, out, in);
    offset += static_cast<Index>(out) * in;
    Eigen::Map<const Eigen::RowVectorXd> b(params.data() + offset, out);
    offset += out;
    RowMat z = a * w.transpose();
    z.rowwise() += b;
    if (l + 1 < layers) apply_activation(spec.activation, z);
    a = std::move(z);
    if (tape) tape->acts.push_back(a);
  }
  return a;
}

void mlp_backward(const MlpSpec& spec, const Vec& params, const MlpTape& tape,
                  const RowMat& d_features, Vec& grad) {
  const int layers = spec.num_layers();
  if (static_cast<int>(tape.acts.size()) != layers + 1) {
    throw DimensionError("mlp_backward: tape does not match spec");
  }
  if (grad.size() != spec.param_count()) grad = Vec::Zero(spec.param_count());
  // Offsets of each layer's block in the flat vector.
  std::vector<Index> offsets(static_cast<std::size_t>(layers));
  Index offset = 0;
  for (int l = 0; l < layers; ++l) {
    offsets[static_cast<std::size_t>(l)] = offset;
    offset += static_cast<Index>(spec.widths[l + 1]) * (spec.widths[l] + 1);
  }
  RowMat delta = d_features;
  for (int l = layers - 1; l >= 0; --l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    const Index off = offsets[static_cast<std::size_t>(l)];
    if (l + 1 < layers) {
      const RowMat& act = tape.acts[static_cast<std::size_t>(l + 1)];
      if (spec.activation == Activation::tanh) {
        delta.array() *= 1.0 - act.array().square();
      } else {
        delta.array() *= (act.array() > 0.0).cast<double>();
      }
    }
    const RowMat& prev = tape.acts[static_cast<std::size_t>(l)];
    Eigen::Map<RowMat> gw(grad.data() + off, out, in);
    gw.noalias() += delta.transpose() * prev;
    Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + off + static_cast<Index>(out) * in, out);
    gb += delta.colwise().sum();
    if (l > 0) {
      ConstRowMap w(params.data() + off, out, in);
      RowMat next = delta * w;
      delta = std::move(next);
    }
  }
}

Vec mlp_features(const MlpSpec& spec, const Vec& params, const Vec& x) {
  RowMat in = x.transpose();
  return mlp_forward(spec, params, in).row(0).transpose();
}

Vec init_mlp_params(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  Vec params(spec.param_count());
  Index offset = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (Index i = 0; i < static_cast<Index>(out) * in; ++i) params[offset++] = scale * rng.normal();
    for (int i = 0; i < out; ++i) params[offset++] = 0.1 * rng.normal();
  }
  return params;
}

namespace {

RowMat with_bias_column(const RowMat& f) {
  RowMat out(f.rows(), f.cols() + 1);
  out.leftCols(f.cols()) = f;
  out.col(f.cols()).setOnes();
  return out;
}

Eigen::LLT<Mat> ridge_system(const RowMat& phi, double lambda) {
  if (!(lambda > 0.0)) throw DomainError("ridge: lambda must be > 0");
  Mat m = phi.transpose() * phi;
  m.diagonal().head(phi.cols() - 1).array() += lambda;
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw NumericError("ridge: normal equations are not positive definite");
  return llt;
}

}  // namespace

Mat RidgeHead::predict(const RowMat& features) const { return with_bias_column(features) * weights; }

RidgeHead ridge_fit(const RowMat& features, const Mat& targets, double lambda) {
  require_same_size(features.rows(), targets.rows(), "ridge_fit");
  if (features.rows() == 0) throw DimensionError("ridge_fit: empty support");
  const RowMat phi = with_bias_column(features);
  const auto llt = ridge_system(phi, lambda);
  RidgeHead head;
  head.weights = llt.solve(phi.transpose() * targets);
  head.lambda = lambda;
  return head;
}

namespace {

RowMat class_centroids(const RowMat& features, const std::vector<int>& labels, int n_way,
                       std::vector<Index>& counts) {
  require_same_size(features.rows(), static_cast<Index>(labels.size()), "ncc support labels");
  RowMat centroids = RowMat::Zero(n_way, features.cols());
  counts.assign(static_cast<std::size_t>(n_way), 0);
  for (Index i = 0; i < features.rows(); ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    if (c < 0 || c >= n_way) throw DomainError("ncc: label out of range");
    centroids.row(c) += features.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < n_way; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw DomainError("ncc: class " + std::to_string(c) + " has no support point");
    }
    centroids.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  return centroids;
}

RowMat ncc_logit_matrix(const RowMat& query_f, const RowMat& centroids, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("ncc: temperature must be > 0");
  RowMat logits(query_f.rows(), centroids.rows());
  for (Index q = 0; q < query_f.rows(); ++q) {
    for (Index c = 0; c < centroids.rows(); ++c) {
      logits(q, c) = -(query_f.row(q) - centroids.row(c)).squaredNorm() / temperature;
    }
  }
  return logits;
}

RowMat normalize_rows(const RowMat& f, Vec& norms) {
  norms = f.rowwise().norm();
  RowMat out = f;
  for (Index i = 0; i < f.rows(); ++i) {
    if (!(norms[i] > 0.0)) throw NumericError("ncc: cannot normalize a zero feature vector");
    out.row(i) /= norms[i];
  }
  return out;
}

// Chain rule through row-wise L2 normalization.
RowMat normalize_rows_backward(const RowMat& unit, const Vec& norms, const RowMat& d_unit) {
  RowMat out(unit.rows(), unit.cols());
  for (Index i = 0; i < unit.rows(); ++i) {
    const double dot = unit.row(i).dot(d_unit.row(i));
    out.row(i) = (d_unit.row(i) - dot * unit.row(i)) / norms[i];
  }
  return out;
}

double ridge_head_loss(const RowMat& fit_f, const DataSet& fit, const RowMat& eval_f,
                       const DataSet& eval, const HeadConfig& head, RowMat* d_fit,
                       RowMat* d_eval) {
  require_same_size(fit.targets.size(), fit_f.rows(), "ridge head fit targets");
  require_same_size(eval.targets.size(), eval_f.rows(), "ridge head eval targets");
  const Index h = fit_f.cols();
  const RowMat a = with_bias_column(fit_f);
  const RowMat b = with_bias_column(eval_f);
  const auto llt = ridge_system(a, head.ridge_lambda);
  const Vec w = llt.solve(a.transpose() * fit.targets);
  const Vec resid = b * w - eval.targets;
  const double s2 = head.sigma_obs * head.sigma_obs;
  const double nq = static_cast<double>(eval_f.rows());
  const double loss =
      resid.squaredNorm() / (2.0 * s2 * nq) + 0.5 * std::log(2.0 * std::numbers::pi * s2);
  if (d_fit && d_eval) {
    const Vec r = resid / (s2 * nq);
    *d_eval = (r * w.transpose()).leftCols(h);
    const Vec z = llt.solve(b.transpose() * r);
    const Vec fit_resid = fit.targets - a * w;
    *d_fit = (fit_resid * z.transpose() - (a * z) * w.transpose()).leftCols(h);
  }
  return loss;
}

double ncc_head_loss(const RowMat& fit_f, const DataSet& fit, const RowMat& eval_f,
                     const DataSet& eval, const HeadConfig& head, int n_way, RowMat* d_fit,
                     RowMat* d_eval) {
  require_same_size(static_cast<Index>(eval.labels.size()), eval_f.rows(), "ncc eval labels");
  std::vector<Index> counts;
  const RowMat centroids = class_centroids(fit_f, fit.labels, n_way, counts);
  const RowMat logits = ncc_logit_matrix(eval_f, centroids, head.temperature);
  const RowMat probs = softmax_rows(logits);
  const Index nq = eval_f.rows();
  double loss = 0.0;
  for (Index q = 0; q < nq; ++q) {
    const int y = eval.labels[static_cast<std::size_t>(q)];
    if (y < 0 || y >= n_way) throw DomainError("ncc: query label out of range");
    const double max_logit = logits.row(q).maxCoeff();
    const double lse = max_logit + std::log((logits.row(q).array() - max_logit).exp().sum());
    loss += lse - logits(q, y);
  }
  loss /= static_cast<double>(nq);
  if (d_fit && d_eval) {
    const double t = head.temperature;
    RowMat d_logits = probs;
    for (Index q = 0; q < nq; ++q) d_logits(q, eval.labels[static_cast<std::size_t>(q)]) -= 1.0;
    d_logits /= static_cast<double>(nq);
    d_eval->setZero(eval_f.rows(), eval_f.cols());
    RowMat d_centroids = RowMat::Zero(centroids.rows(), centroids.cols());
    for (Index q = 0; q < nq; ++q) {
      for (Index c = 0; c < centroids.rows(); ++c) {
        const Eigen::RowVectorXd diff = eval_f.row(q) - centroids.row(c);
        d_eval->row(q) -= (2.0 / t) * d_logits(q, c) * diff;
        d_centroids.row(c) += (2.0 / t) * d_logits(q, c) * diff;
      }
    }
    d_fit->resize(fit_f.rows(), fit_f.cols());
    for (Index i = 0; i < fit_f.rows(); ++i) {
      const int c = fit.labels[static_cast<std::size_t>(i)];
      d_fit->row(i) = d_centroids.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
    }
  }
  return loss;
}

// Head loss on features, with optional d/d(features) for both sets.
double head_loss(const RowMat& fit_f, const DataSet& fit, const RowMat& eval_f,
                 const DataSet& eval, const HeadConfig& head, int n_way, RowMat* d_fit,
                 RowMat* d_eval) {
  if (fit_f.rows() == 0) throw DimensionError("episode loss: empty support");
  if (eval_f.rows() == 0) throw DimensionError("episode loss: empty query");
  if (head.kind == HeadKind::ridge) {
    return ridge_head_loss(fit_f, fit, eval_f, eval, head, d_fit, d_eval);
  }
  if (!head.normalize_features) {
    return ncc_head_loss(fit_f, fit, eval_f, eval, head, n_way, d_fit, d_eval);
  }
  Vec fit_norms, eval_norms;
  const RowMat fit_u = normalize_rows(fit_f, fit_norms);
  const RowMat eval_u = normalize_rows(eval_f, eval_norms);
  const double loss = ncc_head_loss(fit_u, fit, eval_u, eval, head, n_way, d_fit, d_eval);
  if (d_fit && d_eval) {
    *d_fit = normalize_rows_backward(fit_u, fit_norms, *d_fit);
    *d_eval = normalize_rows_backward(eval_u, eval_norms, *d_eval);
  }
  return loss;
}

int resolve_n_way(const DataSet& fit, int n_way) {
  if (n_way > 0 || !fit.is_classification()) return n_way;
  int m = 0;
  for (int y : fit.labels) m = std::max(m, y + 1);
  return m;
}

}  // namespace

Vec ncc_logits(const RowMat& support_features, const std::vector<int>& support_labels,
               const Vec& query_feature, double temperature, int n_way) {
  require_same_size(support_features.cols(), query_feature.size(), "ncc_logits");
  std::vector<Index> counts;
  const RowMat centroids = class_centroids(support_features, support_labels, n_way, counts);
  RowMat q = query_feature.transpose();
  return ncc_logit_matrix(q, centroids, temperature).row(0).transpose();
}

double gaussian_nll(double prediction, double target, double sigma) {
  const double s2 = sigma * sigma;
  const double r = prediction - target;
  return r * r / (2.0 * s2) + 0.5 * std::log(2.0 * std::numbers::pi * s2);
}

RowMat softmax_rows(const RowMat& logits) {
  RowMat out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

LossGrad episode_loss_and_grad(const MlpSpec& spec, const Vec& params, const DataSet& fit,
                               const DataSet& eval, const HeadConfig& head, int n_way) {
  n_way = resolve_n_way(fit, n_way);
  LossGrad out;
  out.grad = Vec::Zero(spec.param_count());
  RowMat d_fit, d_eval;
  MlpTape fit_tape;
  const RowMat fit_f = mlp_forward(spec, params, fit.inputs, &fit_tape);
  if (&fit == &eval) {
    out.loss = head_loss(fit_f, fit, fit_f, eval, head, n_way, &d_fit, &d_eval);
    d_fit += d_eval;
    mlp_backward(spec, params, fit_tape, d_fit, out.grad);
  } else {
    MlpTape eval_tape;
    const RowMat eval_f = mlp_forward(spec, params, eval.inputs, &eval_tape);
    out.loss = head_loss(fit_f, fit, eval_f, eval, head, n_way, &d_fit, &d_eval);
    mlp_backward(spec, params, fit_tape, d_fit, out.grad);
    mlp_backward(spec, params, eval_tape, d_eval, out.grad);
  }
  if (!std::isfinite(out.loss) || !out.grad.allFinite()) {
    throw NumericError("episode_loss_and_grad: non-finite loss or gradient");
  }
  return out;
}

LossGrad episode_loss_and_grad(const MlpSpec& spec, const Vec& params, const Episode& ep,
                               const HeadConfig& head) {
  return episode_loss_and_grad(spec, params, ep.support, ep.query, head, ep.n_way);
}

double episode_loss(const MlpSpec& spec, const Vec& params, const DataSet& fit,
                    const DataSet& eval, const HeadConfig& head, int n_way) {
  n_way = resolve_n_way(fit, n_way);
  const RowMat fit_f = mlp_forward(spec, params, fit.inputs);
  if (&fit == &eval) return head_loss(fit_f, fit, fit_f, eval, head, n_way, nullptr, nullptr);
  const RowMat eval_f = mlp_forward(spec, params, eval.inputs);
  return head_loss(fit_f, fit, eval_f, eval, head, n_way, nullptr, nullptr);
}

double episode_loss(const MlpSpec& spec, const Vec& params, const Episode& ep,
                    const HeadConfig& head) {
  return episode_loss(spec, params, ep.support, ep.query, head, ep.n_way);
}

Vec predict_regression(const MlpSpec& spec, const Vec& params, const DataSet& support,
                       const RowMat& query_inputs, const HeadConfig& head) {
  if (head.kind != HeadKind::ridge) throw DomainError("predict_regression: needs a ridge head");
  const RowMat fit_f = mlp_forward(spec, params, support.inputs);
  const RidgeHead ridge = ridge_fit(fit_f, support.targets, head.ridge_lambda);
  return ridge.predict(mlp_forward(spec, params, query_inputs)).col(0);
}

RowMat predict_logits(const MlpSpec& spec, const Vec& params, const DataSet& support,
                      const RowMat& query_inputs, const HeadConfig& head, int n_way) {
  if (head.kind != HeadKind::ncc) throw DomainError("predict_logits: needs an ncc head");
  RowMat fit_f = mlp_forward(spec, params, support.inputs);
  RowMat query_f = mlp_forward(spec, params, query_inputs);
  if (head.normalize_features) {
    Vec norms;
    fit_f = normalize_rows(fit_f, norms);
    query_f = normalize_rows(query_f, norms);
  }
  std::vector<Index> counts;
  const RowMat centroids = class_centroids(fit_f, support.labels, n_way, counts);
  return ncc_logit_matrix(query_f, centroids, head.temperature);
}

}  // namespace niwmeta
