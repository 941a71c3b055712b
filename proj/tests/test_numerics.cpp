#include <doctest.h>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "support.hpp"

using namespace niwmeta;
using testing::rel_err;

TEST_CASE("digamma and trigamma agree with boost") {
  for (double x : {1e-3, 0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 9.99, 10.0, 42.0, 1e3, 1e6}) {
    CHECK(rel_err(digamma(x), boost::math::digamma(x)) < 1e-12);
    CHECK(rel_err(trigamma(x), boost::math::trigamma(x)) < 1e-12);
  }
  CHECK(std::abs(digamma(1.0) + 0.57721566490153286) < 1e-14);
}

TEST_CASE("special functions reject non-positive arguments") {
  CHECK_THROWS_AS(digamma(0.0), DomainError);
  CHECK_THROWS_AS(trigamma(-1.0), DomainError);
  CHECK_THROWS_AS(multivariate_digamma(0.4, 3), DomainError);
}

TEST_CASE("multivariate digamma is a sum of shifted digammas") {
  for (int d : {1, 2, 5, 40}) {
    const double a = 0.5 * d + 1.3;
    double ref = 0.0, ref1 = 0.0;
    for (int j = 1; j <= d; ++j) {
      ref += boost::math::digamma(a + 0.5 * (1 - j));
      ref1 += boost::math::trigamma(a + 0.5 * (1 - j));
    }
    CHECK(rel_err(multivariate_digamma(a, d), ref) < 1e-12);
    CHECK(rel_err(multivariate_trigamma(a, d), ref1) < 1e-12);
  }
  // The derivative relation, by central differences.
  const double a = 4.2, h = 1e-5;
  const double fd = (multivariate_digamma(a + h, 6) - multivariate_digamma(a - h, 6)) / (2 * h);
  CHECK(rel_err(fd, multivariate_trigamma(a, 6)) < 1e-7);
}

TEST_CASE("softplus and sigmoid") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(softplus(800.0) == doctest::Approx(800.0));
  CHECK(softplus(-800.0) >= 0.0);
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == doctest::Approx(1.0));
  const double h = 1e-6;
  CHECK(rel_err((softplus(0.7 + h) - softplus(0.7 - h)) / (2 * h), sigmoid(0.7)) < 1e-8);
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  const Rng root(11);
  Rng s1 = root.split(1), s1b = root.split(1), s2 = root.split(2);
  CHECK(s1.normal() == s1b.normal());
  CHECK(s1.next_u64() != s2.next_u64());
  // Splitting does not advance the parent.
  Rng p1(3), p2(3);
  (void)p1.split(5);
  CHECK(p1.next_u64() == p2.next_u64());
}

TEST_CASE("rng moments") {
  Rng rng(123);
  const int n = 200000;
  double s = 0.0, s2 = 0.0, u = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
    u += rng.uniform();
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
  CHECK(std::abs(u / n - 0.5) < 0.005);
  for (int i = 0; i < 1000; ++i) {
    const auto k = rng.uniform_int(7);
    CHECK(k < 7);
  }
}

TEST_CASE("diagonal gaussian sampling") {
  Rng rng(5);
  const Vec mean = Vec::Constant(2, 3.0);
  const DiagMat var(Vec::Constant(2, 4.0));
  double s = 0.0, s2 = 0.0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const Vec x = sample_diag_gaussian(mean, var, rng);
    s += x[0];
    s2 += (x[0] - 3.0) * (x[0] - 3.0);
  }
  CHECK(std::abs(s / n - 3.0) < 0.05);
  CHECK(std::abs(s2 / n - 4.0) < 0.1);
  CHECK_THROWS(sample_diag_gaussian(mean, DiagMat(Vec::Constant(3, 1.0)), rng));
}
