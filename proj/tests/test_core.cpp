#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "gpalps/gaussian.hpp"
#include "gpalps/kernels.hpp"
#include "gpalps/linalg.hpp"
#include "test_support.hpp"

using namespace gpalps;
using Catch::Approx;

TEST_CASE("chol_jitter: identity needs no jitter") {
  auto r = chol_jitter(Eigen::MatrixXd::Identity(3, 3));
  REQUIRE(r.jitter == 0.0);
  REQUIRE((r.L - Eigen::MatrixXd::Identity(3, 3)).norm() < 1e-14);
}

TEST_CASE("chol_jitter: rank-1 matrix succeeds with small jitter") {
  Rng rng(7);
  Eigen::VectorXd v = rng.normal_vector(5);
  Eigen::MatrixXd M = v * v.transpose();
  auto r = chol_jitter(M);
  REQUIRE(r.jitter <= 1e-4);
  Eigen::MatrixXd recon = r.L * r.L.transpose();
  Eigen::MatrixXd target = M;
  target.diagonal().array() += r.jitter;
  REQUIRE((recon - target).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("chol_jitter: indefinite matrix errors at the cap") {
  Eigen::MatrixXd M = Eigen::MatrixXd::Identity(3, 3);
  M(0, 0) = -1.0;
  REQUIRE_THROWS_AS(chol_jitter(M), NotPositiveDefinite);
}

TEST_CASE("chol_jitter: rejects asymmetric input") {
  Eigen::MatrixXd M(2, 2);
  M << 1.0, 0.5, 0.0, 1.0;
  REQUIRE_THROWS_AS(chol_jitter(M), std::invalid_argument);
}

TEST_CASE("chol_jitter: reconstructs random SPD matrices") {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::MatrixXd M = test_support::random_spd(6, rng);
    auto r = chol_jitter(M);
    Eigen::MatrixXd recon = r.L * r.L.transpose();
    recon.diagonal().array() -= r.jitter;
    REQUIRE((recon - M).cwiseAbs().maxCoeff() < 1e-9 * M.norm());
  }
}

TEST_CASE("gram: zero distance returns the variance") {
  auto k = KernelSpec::rbf(1.0, 1.0);
  REQUIRE(k(3.7, 3.7) == Approx(1.0));
  auto ke = KernelSpec::exp_sine_squared(5.0, 2.0, 1.7);
  REQUIRE(ke(0.4, 0.4) == Approx(1.7));
}

TEST_CASE("gram: cosine kernel is 1 at a full period") {
  auto k = KernelSpec::cosine(0.25);
  REQUIRE(k(5.0, 1.0) == Approx(1.0).margin(1e-12));
}

TEST_CASE("gram: rbf closed form at unit distance") {
  auto k = KernelSpec::rbf(1.0, 1.0);
  REQUIRE(k(0.0, 1.0) == Approx(std::exp(-0.5)).epsilon(1e-12));
  REQUIRE(k(0.0, 1.0) == Approx(0.60653065971263342).epsilon(1e-12));
}

TEST_CASE("gram: symmetric on shared inputs") {
  Rng rng(3);
  Eigen::VectorXd t = rng.normal_vector(20);
  for (auto k : {KernelSpec::rbf(0.7, 1.2), KernelSpec::cosine(0.3, 0.5),
                 KernelSpec::exp_sine_squared(3.0, 1.0, 2.0)}) {
    Eigen::MatrixXd K = gram(k, t);
    REQUIRE((K - K.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("gram: entries match the pointwise kernel") {
  Rng rng(4);
  Eigen::VectorXd a = rng.normal_vector(4);
  Eigen::VectorXd b = rng.normal_vector(3);
  auto k = KernelSpec::product({KernelSpec::rbf(1.5, 1.1), KernelSpec::cosine(0.2, 0.9)});
  Eigen::MatrixXd K = gram(k, a, b);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) REQUIRE(K(i, j) == Approx(k(a[i], b[j])).epsilon(1e-14));
}

TEST_CASE("gram: all kernel kinds yield factorisable Grams on random inputs") {
  Rng rng(5);
  std::vector<KernelSpec> kinds = {
      KernelSpec::rbf(0.9, 1.0), KernelSpec::exp_sine_squared(4.0, 1.2, 0.8),
      KernelSpec::cosine(0.15, 1.0),
      KernelSpec::product({KernelSpec::rbf(2.0, 1.0), KernelSpec::cosine(0.1, 1.0)})};
  for (const auto& k : kinds) {
    for (int n : {5, 50, 200}) {
      Eigen::VectorXd t(n);
      for (int i = 0; i < n; ++i) t[i] = rng.uniform(-10.0, 10.0);
      REQUIRE_NOTHROW(chol_jitter(gram(k, t)));
    }
  }
}

TEST_CASE("gram: invalid hyperparameters raise InvalidKernel") {
  auto bad = KernelSpec::rbf(std::numeric_limits<double>::quiet_NaN(), 1.0);
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(3, 0.0, 1.0);
  REQUIRE_THROWS_AS(gram(bad, t), InvalidKernel);
  auto neg = KernelSpec::cosine(0.5, -1.0);
  REQUIRE_THROWS_AS(gram(neg, t), InvalidKernel);
}

TEST_CASE("make_gram_bundle: shapes and cross-consistency") {
  Rng rng(6);
  Eigen::VectorXd t = rng.normal_vector(9);
  Eigen::VectorXd tz = Eigen::VectorXd::LinSpaced(4, -1.0, 1.0);
  auto k = KernelSpec::rbf(1.0, 1.0);
  auto g = make_gram_bundle(k, t, tz);
  REQUIRE(g.K_cc.rows() == 9);
  REQUIRE(g.K_cz.cols() == 4);
  REQUIRE(g.K_zz.rows() == 4);
  REQUIRE(g.K_cz(2, 1) == Approx(k(t[2], tz[1])));
  Eigen::MatrixXd recon = g.chol_K_zz * g.chol_K_zz.transpose();
  recon.diagonal().array() -= g.jitter_used;
  REQUIRE((recon - g.K_zz).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("gaussian_kl: identical distributions give zero") {
  Rng rng(8);
  DiagonalGaussian d{rng.normal_vector(4), Eigen::VectorXd::Constant(4, 0.7)};
  REQUIRE(gaussian_kl(d, d) == Approx(0.0).margin(1e-13));
  FullGaussian f{rng.normal_vector(3), test_support::random_spd(3, rng)};
  REQUIRE(gaussian_kl(f, f) == Approx(0.0).margin(1e-10));
}

TEST_CASE("gaussian_kl: scalar shifted-mean closed form") {
  const double m = 0.8, s = 0.4;
  DiagonalGaussian q{Eigen::VectorXd::Constant(1, m), Eigen::VectorXd::Constant(1, s)};
  DiagonalGaussian p{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, s)};
  REQUIRE(gaussian_kl(q, p) == Approx(m * m / (2.0 * s)).epsilon(1e-12));
}

TEST_CASE("gaussian_kl: agrees with a Monte-Carlo oracle") {
  Rng rng(9);
  FullGaussian q{rng.normal_vector(3), test_support::random_spd(3, rng)};
  FullGaussian p{rng.normal_vector(3), test_support::random_spd(3, rng)};
  const double kl = gaussian_kl(q, p);

  const int N = 100000;
  auto cholq = chol_jitter(q.covariance);
  std::vector<double> samples;
  samples.reserve(N);
  for (int i = 0; i < N; ++i) {
    Eigen::VectorXd x = q.mean + cholq.L * rng.normal_vector(3);
    samples.push_back(test_support::dense_mvn_logpdf(x, q.mean, q.covariance) -
                      test_support::dense_mvn_logpdf(x, p.mean, p.covariance));
  }
  auto ms = test_support::mean_se(samples);
  REQUIRE(std::abs(kl - ms.mean) < 3.0 * ms.se);
}

TEST_CASE("gaussian_kl: dimension mismatch") {
  DiagonalGaussian a{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(2)};
  DiagonalGaussian b{Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3)};
  REQUIRE_THROWS_AS(gaussian_kl(a, b), std::invalid_argument);
}

TEST_CASE("gaussian_kl: nonnegative on random pairs, positive when perturbed") {
  Rng rng(10);
  for (int rep = 0; rep < 20; ++rep) {
    FullGaussian q{rng.normal_vector(4), test_support::random_spd(4, rng)};
    FullGaussian p{rng.normal_vector(4), test_support::random_spd(4, rng)};
    REQUIRE(gaussian_kl(q, p) >= -1e-10);
  }
  FullGaussian q{Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3)};
  FullGaussian p = q;
  p.mean[0] += 1e-3;
  REQUIRE(gaussian_kl(q, p) > 1e-10);
}

TEST_CASE("mvn_sample: zero-covariance limit returns the mean") {
  Rng rng(12);
  FullGaussian g{rng.normal_vector(4), 1e-30 * Eigen::MatrixXd::Identity(4, 4)};
  Eigen::VectorXd x = mvn_sample(g, rng);
  REQUIRE((x - g.mean).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("mvn_sample: deterministic in (g, eps)") {
  Rng rng(13);
  FullGaussian g{rng.normal_vector(3), test_support::random_spd(3, rng)};
  Eigen::VectorXd eps = rng.normal_vector(3);
  Eigen::VectorXd a = mvn_sample(g, eps);
  Eigen::VectorXd b = mvn_sample(g, eps);
  REQUIRE(a == b);
}

TEST_CASE("mvn_sample: law of large numbers and empirical covariance") {
  Rng rng(14);
  FullGaussian g{rng.normal_vector(3), test_support::random_spd(3, rng)};
  auto chol = chol_jitter(g.covariance);
  const int N = 100000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(3);
  Eigen::MatrixXd sumsq = Eigen::MatrixXd::Zero(3, 3);
  for (int i = 0; i < N; ++i) {
    Eigen::VectorXd x = mvn_sample_chol(g.mean, chol.L, rng);
    sum += x;
    sumsq += x * x.transpose();
  }
  Eigen::VectorXd mean = sum / N;
  for (int i = 0; i < 3; ++i) {
    const double sd = std::sqrt(g.covariance(i, i));
    REQUIRE(std::abs(mean[i] - g.mean[i]) < 4.0 * sd / std::sqrt(double(N)));
  }
  Eigen::MatrixXd cov = sumsq / N - mean * mean.transpose();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double scale = std::sqrt(g.covariance(i, i) * g.covariance(j, j));
      REQUIRE(std::abs(cov(i, j) - g.covariance(i, j)) < 0.05 * scale);
    }
}
