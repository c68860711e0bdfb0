#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gpalps/concrete.hpp"
#include "gpalps/rng.hpp"
#include "test_support.hpp"

using namespace gpalps;
using Catch::Approx;

TEST_CASE("anneal_temperature: peak at three quarters of the run") {
  REQUIRE(anneal_temperature(750.0, 1000.0) == 10.0);
  REQUIRE(anneal_temperature(0.75 * 3456.0, 3456.0) == 10.0);
}

TEST_CASE("anneal_temperature: endpoint values from the closed form") {
  const double start = 0.66 + 9.34 * std::exp(-std::pow(0.75 / 0.083, 2));
  REQUIRE(std::abs(anneal_temperature(0.0, 1000.0) - start) < 1e-9);
  REQUIRE(anneal_temperature(0.0, 1000.0) == Approx(0.66).margin(1e-9));
  const double end = 0.66 + 9.34 * std::exp(-std::pow(0.25 / 0.083, 2));
  REQUIRE(std::abs(anneal_temperature(1000.0, 1000.0) - end) < 1e-9);
  REQUIRE(anneal_temperature(1000.0, 1000.0) == Approx(0.6611).margin(5e-5));
}

TEST_CASE("anneal_temperature: domain checks") {
  REQUIRE_THROWS_AS(anneal_temperature(-1.0, 100.0), std::invalid_argument);
  REQUIRE_THROWS_AS(anneal_temperature(101.0, 100.0), std::invalid_argument);
  REQUIRE_THROWS_AS(anneal_temperature(0.0, 0.0), std::invalid_argument);
}

TEST_CASE("concrete_sample: symmetric point maps to one half") {
  ConcreteParams p{0.5, 0.7};
  REQUIRE(concrete_sample(p, 0.5) == Approx(0.5).margin(1e-14));
}

TEST_CASE("concrete_sample: deterministic in (params, u)") {
  ConcreteParams p{0.83, 1.3};
  REQUIRE(concrete_sample(p, 0.321) == concrete_sample(p, 0.321));
}

TEST_CASE("concrete_sample: zero-temperature limit recovers the Bernoulli mean") {
  ConcreteParams p{0.9, 1e-3};
  Rng rng(17);
  const int N = 100000;
  double acc = 0.0;
  for (int i = 0; i < N; ++i) acc += concrete_sample(p, rng.uniform());
  REQUIRE(acc / N == Approx(0.9).margin(0.01));
}

TEST_CASE("concrete_sample: clamps boundary uniforms") {
  ConcreteParams p{0.4, 0.5};
  const double at0 = concrete_sample(p, 0.0);
  const double at1 = concrete_sample(p, 1.0);
  REQUIRE(at0 > 0.0);
  REQUIRE(at1 < 1.0);
}

TEST_CASE("concrete_log_density: integrates to one") {
  ConcreteParams p{0.3, 0.66};
  const int nodes = 100000;
  double integral = 0.0;
  for (int k = 0; k < nodes; ++k) {
    const double x = (k + 0.5) / nodes;
    integral += std::exp(concrete_log_density(x, p));
  }
  integral /= nodes;
  REQUIRE(integral == Approx(1.0).margin(1e-3));
}

TEST_CASE("concrete_log_density: relabeling symmetry") {
  ConcreteParams p{0.3, 0.66};
  ConcreteParams q{0.7, 0.66};
  for (double x : {0.1, 0.37, 0.5, 0.81, 0.99})
    REQUIRE(concrete_log_density(x, p) == Approx(concrete_log_density(1.0 - x, q)).epsilon(1e-12));
}

TEST_CASE("concrete_log_density: own samples score higher than the flipped model") {
  ConcreteParams own{0.8, 0.7};
  ConcreteParams flipped{0.2, 0.7};
  Rng rng(5);
  const int N = 20000;
  double lp_own = 0.0, lp_flip = 0.0;
  for (int i = 0; i < N; ++i) {
    const double x = concrete_sample(own, rng.uniform());
    lp_own += concrete_log_density(x, own);
    lp_flip += concrete_log_density(x, flipped);
  }
  REQUIRE(lp_own > lp_flip);
}

TEST_CASE("concrete_log_density: domain error outside (0,1)") {
  ConcreteParams p{0.4, 0.5};
  REQUIRE_THROWS_AS(concrete_log_density(0.0, p), std::invalid_argument);
  REQUIRE_THROWS_AS(concrete_log_density(1.0, p), std::invalid_argument);
  REQUIRE_THROWS_AS(concrete_log_density(-0.2, p), std::invalid_argument);
}

TEST_CASE("concrete_logit_logpdf: change of variables matches the x-space density") {
  // log q_X(x) = log q_Z(logit x) - log(x) - log(1-x)
  for (double rho : {0.2, 0.5, 0.85}) {
    for (double lambda : {0.5, 0.66, 2.0}) {
      ConcreteParams p{rho, lambda};
      for (double x : {0.05, 0.3, 0.5, 0.77, 0.95}) {
        const double z = logit(x);
        const double via_logit =
            concrete_logit_logpdf(z, logit(rho), lambda) - std::log(x) - std::log1p(-x);
        REQUIRE(concrete_log_density(x, p) == Approx(via_logit).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("concrete_sample and logit density are a consistent pair") {
  // MC average of log q at its own samples equals the negative entropy of a
  // logistic location-scale transform; location-free in rho.
  ConcreteParams a{0.3, 0.8};
  ConcreteParams b{0.9, 0.8};
  Rng rng(11);
  const int N = 50000;
  std::vector<double> da, db;
  for (int i = 0; i < N; ++i) {
    const double u = rng.uniform();
    const double xa = concrete_sample(a, u);
    const double xb = concrete_sample(b, u);
    da.push_back(concrete_logit_logpdf(logit(xa), logit(a.probability), a.temperature));
    db.push_back(concrete_logit_logpdf(logit(xb), logit(b.probability), b.temperature));
  }
  auto ma = test_support::mean_se(da);
  auto mb = test_support::mean_se(db);
  REQUIRE(std::abs(ma.mean - mb.mean) < 3.0 * std::sqrt(ma.se * ma.se + mb.se * mb.se));
}
