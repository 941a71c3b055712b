#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace niwmeta {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Argument outside the domain of a special function or distribution.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Operand shapes that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN/Inf showed up where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Diagonal matrix stored as its diagonal.
struct DiagMat {
  Vec diag;

  DiagMat() = default;
  explicit DiagMat(Vec d) : diag(std::move(d)) {}
  static DiagMat constant(Index n, double value) { return DiagMat(Vec::Constant(n, value)); }

  Index size() const { return diag.size(); }
  double operator[](Index i) const { return diag[i]; }
  bool all_positive() const { return (diag.array() > 0.0).all(); }
};

inline bool all_finite(const Eigen::Ref<const Vec>& v) { return v.allFinite(); }

void require_same_size(Index a, Index b, const char* what);

// Special functions. Small arguments are shifted upward by the recurrence
// into x >= 10 where the asymptotic expansion is used.
double digamma(double x);
double trigamma(double x);

/// psi_d(a) = sum_{j=1..d} psi(a + (1 - j) / 2).
double multivariate_digamma(double a, int d);
/// d/da psi_d(a).
double multivariate_trigamma(double a, int d);

double softplus(double x);
double sigmoid(double x);

/// Seeded generator. Streams are derived by `split`, never shared across
/// threads. Uniform and normal variates are produced from the raw 64-bit
/// output by fixed arithmetic, so a seed gives the same numbers on every
/// conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  /// Independent child stream keyed by `stream`; does not advance this one.
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  Vec normal_vec(Index n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// mean + sqrt(var) * eps with eps ~ N(0, I).
Vec sample_diag_gaussian(const Vec& mean, const DiagMat& var, Rng& rng);

}  // namespace niwmeta
