#include "niwmeta/numerics.hpp"

#include <cmath>
#include <limits>

#include <boost/random/normal_distribution.hpp>

namespace niwmeta {

namespace {

constexpr double kAsymptoticThreshold = 10.0;

void require_positive(double x, const char* fn) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw DomainError(std::string(fn) + ": argument must be finite and > 0, got " +
                      std::to_string(x));
  }
}

}  // namespace

void require_same_size(Index a, Index b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": size mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

double digamma(double x) {
  require_positive(x, "digamma");
  double shift = 0.0;
  while (x < kAsymptoticThreshold) {
    shift -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double z = inv * inv;
  // Bernoulli-number tail: -sum B_2k / (2k x^2k).
  const double tail =
      z * (-1.0 / 12 +
           z * (1.0 / 120 +
                z * (-1.0 / 252 +
                     z * (1.0 / 240 + z * (-1.0 / 132 + z * (691.0 / 32760 + z * (-1.0 / 12)))))));
  return shift + std::log(x) - 0.5 * inv + tail;
}

double trigamma(double x) {
  require_positive(x, "trigamma");
  double shift = 0.0;
  while (x < kAsymptoticThreshold) {
    shift += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double z = inv * inv;
  const double tail =
      inv * z *
      (1.0 / 6 +
       z * (-1.0 / 30 +
            z * (1.0 / 42 + z * (-1.0 / 30 + z * (5.0 / 66 + z * (-691.0 / 2730 + z * (7.0 / 6)))))));
  return shift + inv + 0.5 * z + tail;
}

double multivariate_digamma(double a, int d) {
  if (d < 1) throw DomainError("multivariate_digamma: d must be >= 1");
  if (!(a - 0.5 * (d - 1) > 0.0)) {
    throw DomainError("multivariate_digamma: requires a > (d - 1) / 2");
  }
  // The arguments a - j/2 form two unit-step chains starting at a and a - 1/2.
  // Along a chain psi(b - k) = psi(b) - sum_{i=1..k} 1 / (b - i).
  double sum = 0.0;
  for (int chain = 0; chain < 2 && chain < d; ++chain) {
    const double b = a - 0.5 * chain;
    const int len = (d - chain + 1) / 2;
    double acc = 0.0;
    for (int i = 1; i < len; ++i) acc += (len - i) / (b - i);
    sum += len * digamma(b) - acc;
  }
  return sum;
}

double multivariate_trigamma(double a, int d) {
  if (d < 1) throw DomainError("multivariate_trigamma: d must be >= 1");
  if (!(a - 0.5 * (d - 1) > 0.0)) {
    throw DomainError("multivariate_trigamma: requires a > (d - 1) / 2");
  }
  // Same chains as multivariate_digamma, with psi1(x - 1) = psi1(x) + 1 / (x - 1)^2.
  double sum = 0.0;
  for (int chain = 0; chain < 2 && chain < d; ++chain) {
    const double b = a - 0.5 * chain;
    const int len = (d - chain + 1) / 2;
    double acc = 0.0;
    for (int i = 1; i < len; ++i) acc += (len - i) / ((b - i) * (b - i));
    sum += len * trigamma(b) + acc;
  }
  return sum;
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::split(std::uint64_t stream) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw DomainError("Rng::uniform_int: n must be > 0");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return r % n;
}

double Rng::normal() {
  boost::random::normal_distribution<double> dist;  // ziggurat
  return dist(engine_);
}

Vec Rng::normal_vec(Index n) {
  Vec out(n);
  for (Index i = 0; i < n; ++i) out[i] = normal();
  return out;
}

Vec sample_diag_gaussian(const Vec& mean, const DiagMat& var, Rng& rng) {
  require_same_size(mean.size(), var.size(), "sample_diag_gaussian");
  if ((var.diag.array() < 0.0).any()) throw DomainError("sample_diag_gaussian: negative variance");
  return mean + (var.diag.array().sqrt() * rng.normal_vec(mean.size()).array()).matrix();
}

}  // namespace niwmeta
