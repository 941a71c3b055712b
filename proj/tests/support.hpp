#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "niwmeta/eval.hpp"

namespace testing {

using namespace niwmeta;

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

/// Central differences, one coordinate at a time.
inline Vec numeric_gradient(const std::function<double(const Vec&)>& f, const Vec& x,
                            double h = 1e-5) {
  Vec g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vec a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

/// Worst coordinate-wise relative error. Coordinates far below the largest
/// one are compared on the scale of 1e-3 times the largest, and nothing below
/// 1e-5, where central differences with h = 1e-5 are rounding noise.
inline double max_rel_err(const Vec& a, const Vec& b) {
  const double floor = std::max(1e-3 * b.cwiseAbs().maxCoeff(), 1e-5);
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  }
  return worst;
}

/// Small regression episode with 2-d inputs.
inline Episode toy_regression_episode(Rng& rng, Index n_support = 5, Index n_query = 7, int dim = 2) {
  Episode ep;
  const Vec w = rng.normal_vec(dim);
  auto fill = [&](DataSet& ds, Index n) {
    ds.inputs.resize(n, dim);
    ds.targets.resize(n);
    for (Index i = 0; i < n; ++i) {
      for (int k = 0; k < dim; ++k) ds.inputs(i, k) = rng.uniform(-2.0, 2.0);
      ds.targets[i] = std::sin(ds.inputs.row(i).dot(w.transpose()));
    }
  };
  fill(ep.support, n_support);
  fill(ep.query, n_query);
  return ep;
}

inline GlobalPosterior random_posterior(Index d, Rng& rng) {
  GlobalPosterior l0;
  l0.m0 = rng.normal_vec(d);
  l0.rho_v = Vec(d);
  for (Index i = 0; i < d; ++i) l0.rho_v[i] = rng.uniform(-1.0, 1.0);
  l0.rho_n = rng.uniform(-1.0, 2.0);
  return l0;
}

inline EpisodeMoments random_moments(Index d, Rng& rng) {
  EpisodeMoments mom;
  mom.m_bar = rng.normal_vec(d);
  Vec a(d);
  for (Index i = 0; i < d; ++i) a[i] = std::exp(rng.uniform(-1.0, 2.0));
  mom.a_bar = DiagMat(a);
  return mom;
}

}  // namespace testing
