#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "gpalps/gibbs.hpp"
#include "test_support.hpp"

using namespace gpalps;
using Catch::Approx;

namespace {

ModelSpec small_spec(int m, int p, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<KernelSpec> ks;
  for (int j = 0; j < m; ++j) ks.push_back(KernelSpec::rbf(0.6 + 0.25 * j, 1.0));
  ModelSpec spec = ModelSpec::uniform(ks, p, 0.5, 1.0, 0.3);
  for (int j = 0; j < m; ++j) spec.theta[j] = rng.uniform(0.2, 0.8);
  for (int i = 0; i < p; ++i) {
    spec.sigma2[i] = rng.uniform(0.1, 0.6);
    for (int j = 0; j < m; ++j) spec.s(i, j) = rng.uniform(0.5, 2.0);
  }
  return spec;
}

// Generic dense Bayesian-linear-regression oracle: posterior of x in
// y = A x + e, e ~ N(0, Sigma), x ~ N(0, P), all dense with explicit inverses.
FullGaussian dense_blr(const Eigen::VectorXd& y, const Eigen::MatrixXd& A,
                       const Eigen::MatrixXd& Sigma, const Eigen::MatrixXd& P) {
  const Eigen::MatrixXd Si = Sigma.inverse();
  const Eigen::MatrixXd prec = P.inverse() + A.transpose() * Si * A;
  FullGaussian g;
  g.covariance = prec.inverse();
  g.mean = g.covariance * (A.transpose() * (Si * y));
  return g;
}

// The mixing operator A = (H diag b) kron I_n acting on stacked latents.
Eigen::MatrixXd mixing_operator(const Eigen::MatrixXd& H, const Eigen::VectorXd& b,
                                Eigen::Index n) {
  const Eigen::MatrixXd W = H * b.asDiagonal();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(H.rows() * n, H.cols() * n);
  for (int i = 0; i < H.rows(); ++i)
    for (int j = 0; j < H.cols(); ++j)
      A.block(i * n, j * n, n, n) = W(i, j) * Eigen::MatrixXd::Identity(n, n);
  return A;
}

}  // namespace

TEST_CASE("x posterior: precision route matches the dense BLR oracle") {
  const int m = 2, p = 2, n = 4;
  auto spec = small_spec(m, p, 1);
  Rng rng(2);
  Eigen::MatrixXd inputs = rng.normal_vector(n);
  const GibbsWork work = GibbsWork::prepare(spec, inputs);
  for (int rep = 0; rep < 6; ++rep) {
    Eigen::MatrixXd Y = rng.normal_matrix(p, n);
    Eigen::MatrixXd H = rng.normal_matrix(p, m);
    Eigen::VectorXd b(m);
    b << 1.0, (rep % 2 ? 1.0 : 0.0);
    auto g = x_posterior_precision(Y, H, b, spec, work);

    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(m * n, m * n);
    for (int j = 0; j < m; ++j) {
      K.block(j * n, j * n, n, n) = work.K[j];
      K.block(j * n, j * n, n, n).diagonal().array() +=
          1e-10;  // match the factor's jitter scale
    }
    Eigen::MatrixXd Sigma = Eigen::MatrixXd::Zero(p * n, p * n);
    for (int i = 0; i < p; ++i)
      Sigma.block(i * n, i * n, n, n) =
          spec.sigma2[i] * Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd y(p * n);
    for (int i = 0; i < p; ++i) y.segment(i * n, n) = Y.row(i).transpose();
    auto oracle = dense_blr(y, mixing_operator(H, b, n), Sigma, K);
    REQUIRE((g.mean - oracle.mean).cwiseAbs().maxCoeff() < 1e-8);
    REQUIRE((g.covariance - oracle.covariance).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("x posterior: data-space moments equal the precision route") {
  for (auto [m, p, n] : std::vector<std::tuple<int, int, int>>{{3, 1, 5}, {2, 2, 4}, {4, 2, 3}}) {
    auto spec = small_spec(m, p, 7 + m);
    Rng rng(11 + m);
    Eigen::MatrixXd inputs = Eigen::VectorXd::LinSpaced(n, 0.0, 1.1 * n);
    const GibbsWork work = GibbsWork::prepare(spec, inputs);
    Eigen::MatrixXd Y = rng.normal_matrix(p, n);
    Eigen::MatrixXd H = rng.normal_matrix(p, m);
    Eigen::VectorXd b = Eigen::VectorXd::Ones(m);
    b[0] = 0.0;
    auto a = x_posterior_precision(Y, H, b, spec, work);
    auto d = x_posterior_dataspace(Y, H, b, spec, work);
    REQUIRE((a.mean - d.mean).cwiseAbs().maxCoeff() < 1e-8);
    REQUIRE((a.covariance - d.covariance).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("sample_x: closed gates return prior moments") {
  const int m = 1, p = 1, n = 4;
  auto spec = small_spec(m, p, 3);
  Rng rng(4);
  Eigen::MatrixXd inputs = Eigen::VectorXd::LinSpaced(n, 0.0, 2.0);
  const GibbsWork work = GibbsWork::prepare(spec, inputs);
  Eigen::MatrixXd Y = rng.normal_matrix(p, n);
  Eigen::MatrixXd H = rng.normal_matrix(p, m);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
  const int N = 10000;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < N; ++k) {
    Eigen::MatrixXd X = sample_x(Y, H, b, spec, work, rng);
    mean += X.row(0).transpose();
    cov += X.row(0).transpose() * X.row(0);
  }
  mean /= N;
  cov = cov / N - mean * mean.transpose();
  REQUIRE(mean.cwiseAbs().maxCoeff() < 4.5 / std::sqrt(double(N)) + 0.02);
  for (int a = 0; a < n; ++a)
    for (int c = 0; c < n; ++c)
      REQUIRE(std::abs(cov(a, c) - work.K[0](a, c)) < 0.06);
}

TEST_CASE("sample_x: noiseless identity mixing interpolates the data") {
  const int m = 2, p = 2, n = 4;
  auto spec = small_spec(m, p, 5);
  spec.sigma2.setConstant(1e-10);
  Rng rng(6);
  Eigen::MatrixXd inputs = rng.normal_vector(n);
  const GibbsWork work = GibbsWork::prepare(spec, inputs);
  Eigen::MatrixXd Y = rng.normal_matrix(p, n);
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(p, m);
  Eigen::VectorXd b = Eigen::VectorXd::Ones(m);
  Eigen::MatrixXd X = sample_x(Y, H, b, spec, work, rng);
  REQUIRE((X - Y).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("sample_x: Matheron-route sample moments match the exact Gaussian") {
  const int m = 3, p = 1, n = 3;  // p < m forces the data-space route
  auto spec = small_spec(m, p, 8);
  Rng rng(9);
  Eigen::MatrixXd inputs = rng.normal_vector(n);
  const GibbsWork work = GibbsWork::prepare(spec, inputs);
  Eigen::MatrixXd Y = rng.normal_matrix(p, n);
  Eigen::MatrixXd H = rng.normal_matrix(p, m);
  Eigen::VectorXd b = Eigen::VectorXd::Ones(m);
  auto exact = x_posterior_precision(Y, H, b, spec, work);
  const int N = 20000;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(m * n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(m * n, m * n);
  for (int k = 0; k < N; ++k) {
    Eigen::MatrixXd X = sample_x(Y, H, b, spec, work, rng);
    Eigen::VectorXd x(m * n);
    for (int j = 0; j < m; ++j) x.segment(j * n, n) = X.row(j).transpose();
    mean += x;
    cov += x * x.transpose();
  }
  mean /= N;
  cov = cov / N - mean * mean.transpose();
  for (int i = 0; i < m * n; ++i) {
    const double sd = std::sqrt(exact.covariance(i, i));
    REQUIRE(std::abs(mean[i] - exact.mean[i]) < 5.0 * sd / std::sqrt(double(N)));
  }
  for (int i = 0; i < m * n; ++i)
    for (int j = 0; j < m * n; ++j) {
      const double scale =
          std::sqrt(exact.covariance(i, i) * exact.covariance(j, j));
      REQUIRE(std::abs(cov(i, j) - exact.covariance(i, j)) < 0.07 * scale + 1e-6);
    }
}

TEST_CASE("sample_h: closed gates draw from the prior") {
  const int m = 2, p = 2, n = 5;
  auto spec = small_spec(m, p, 10);
  Rng rng(11);
  Eigen::MatrixXd Y = rng.normal_matrix(p, n);
  Eigen::MatrixXd X = rng.normal_matrix(m, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
  const int N = 20000;
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(p, m);
  Eigen::MatrixXd var = Eigen::MatrixXd::Zero(p, m);
  for (int k = 0; k < N; ++k) {
    Eigen::MatrixXd H = sample_h(Y, X, b, spec, rng);
    mean += H;
    var += H.cwiseProduct(H);
  }
  mean /= N;
  var = var / N - mean.cwiseProduct(mean);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < m; ++j) {
      REQUIRE(std::abs(mean(i, j)) < 5.0 * std::sqrt(spec.s(i, j) / N));
      REQUIRE(var(i, j) == Approx(spec.s(i, j)).epsilon(0.08));
    }
}

TEST_CASE("sample_h: posterior matches the dense oracle and the OLS limit") {
  const int m = 2, p = 2, n = 6;
  auto spec = small_spec(m, p, 12);
  Rng rng(13);
  Eigen::MatrixXd Y = rng.normal_matrix(p, n);
  Eigen::MatrixXd X = rng.normal_matrix(m, n);
  Eigen::VectorXd b = Eigen::VectorXd::Ones(m);

  // Oracle per output row: y_i = X^T diag(b) h_i + e.
  for (int i = 0; i < p; ++i) {
    const Eigen::MatrixXd A = X.transpose() * b.asDiagonal();
    auto oracle = dense_blr(Y.row(i).transpose(), A,
                            spec.sigma2[i] * Eigen::MatrixXd::Identity(n, n),
                            Eigen::MatrixXd(spec.s.row(i).asDiagonal()));
    // Empirical check via many draws is slow; verify against the internal
    // mean/cov by reconstructing them from the sampling equations.
    const Eigen::MatrixXd C = X * X.transpose();
    Eigen::MatrixXd P = C.cwiseProduct(b * b.transpose()) / spec.sigma2[i];
    P.diagonal() += spec.s.row(i).cwiseInverse().transpose();
    auto chol = chol_jitter(P);
    const Eigen::VectorXd rhs = b.asDiagonal() * (X * Y.row(i).transpose()) / spec.sigma2[i];
    const Eigen::VectorXd mean = chol_solve(chol.L, rhs);
    const Eigen::MatrixXd cov = chol_solve(chol.L, Eigen::MatrixXd::Identity(m, m));
    REQUIRE((mean - oracle.mean).cwiseAbs().maxCoeff() < 1e-8);
    REQUIRE((cov - oracle.covariance).cwiseAbs().maxCoeff() < 1e-8);
  }

  // Single output, single active latent, large n: posterior mean ~ OLS.
  {
    ModelSpec s1 = small_spec(1, 1, 14);
    s1.sigma2[0] = 0.05;
    const int big = 4000;
    Rng r2(15);
    Eigen::MatrixXd Xb = r2.normal_matrix(1, big);
    const double h_true = 1.37;
    Eigen::MatrixXd Yb(1, big);
    for (int c = 0; c < big; ++c)
      Yb(0, c) = h_true * Xb(0, c) + std::sqrt(s1.sigma2[0]) * r2.normal();
    const double ols =
        (Xb.row(0) * Yb.row(0).transpose())(0, 0) / Xb.row(0).squaredNorm();
    std::vector<double> draws;
    for (int k = 0; k < 400; ++k)
      draws.push_back(sample_h(Yb, Xb, Eigen::VectorXd::Ones(1), s1, r2)(0, 0));
    auto ms = test_support::mean_se(draws);
    REQUIRE(std::abs(ms.mean - ols) < 5.0 * ms.se + 1e-3);
  }
}

TEST_CASE("gate_prob_from_stat: plug-in values") {
  REQUIRE(gate_prob_from_stat(0.5, std::log(3.0)) == Approx(0.75).epsilon(1e-12));
  REQUIRE(gate_prob_from_stat(0.3, 0.0) == Approx(0.3).epsilon(1e-12));
}

TEST_CASE("sample_b: no-information gates fall back to the prior") {
  const int m = 2, p = 1, n = 5;
  auto spec = small_spec(m, p, 16);
  Rng rng(17);
  Eigen::MatrixXd Y = rng.normal_matrix(p, n);
  Eigen::MatrixXd X = rng.normal_matrix(m, n);
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(p, m);
  const Eigen::MatrixXd C = X * X.transpose();
  const Eigen::MatrixXd XYt = X * Y.transpose();
  for (int j = 0; j < m; ++j) {
    const double c = gate_stat(Y, X, H, Eigen::VectorXd::Ones(m), spec, j, C, XYt);
    REQUIRE(c == Approx(0.0).margin(1e-14));
    REQUIRE(gate_prob_from_stat(spec.theta[j], c) == Approx(spec.theta[j]).epsilon(1e-12));
  }
}

TEST_CASE("sample_b: conditional matches exhaustive enumeration") {
  Rng rng(18);
  for (int rep = 0; rep < 25; ++rep) {
    const int m = 2 + static_cast<int>(rng.below(3));  // up to 4
    const int p = 2, n = 5;
    auto spec = small_spec(m, p, 19 + rep);
    Eigen::MatrixXd Y = rng.normal_matrix(p, n);
    Eigen::MatrixXd X = rng.normal_matrix(m, n);
    Eigen::MatrixXd H = rng.normal_matrix(p, m);
    Eigen::VectorXd b(m);
    for (int j = 0; j < m; ++j) b[j] = rng.flip(0.5) ? 1.0 : 0.0;
    const Eigen::MatrixXd C = X * X.transpose();
    const Eigen::MatrixXd XYt = X * Y.transpose();
    for (int j = 0; j < m; ++j) {
      const double c = gate_stat(Y, X, H, b, spec, j, C, XYt);
      const double p1 = gate_prob_from_stat(spec.theta[j], c);
      // Brute force over b_j in {0,1} with the rest fixed.
      Eigen::VectorXd b0 = b, b1 = b;
      b0[j] = 0.0;
      b1[j] = 1.0;
      const double l0 = log_likelihood(Y, X, H, b0, spec) + std::log1p(-spec.theta[j]);
      const double l1 = log_likelihood(Y, X, H, b1, spec) + std::log(spec.theta[j]);
      const double mx = std::max(l0, l1);
      const double oracle = std::exp(l1 - mx) / (std::exp(l0 - mx) + std::exp(l1 - mx));
      REQUIRE(std::abs(p1 - oracle) < 1e-10);
    }
  }
}

TEST_CASE("run_chain: deterministic for a fixed seed") {
  const int m = 2, p = 1, n = 5;
  auto spec = small_spec(m, p, 20);
  Rng rng(21);
  Eigen::MatrixXd inputs = Eigen::VectorXd::LinSpaced(n, 0.0, 2.0);
  Eigen::MatrixXd Y = rng.normal_matrix(p, n);
  ChainConfig cfg;
  cfg.iterations = 60;
  cfg.burn_in = 10;
  cfg.thinning = 2;
  cfg.seed = 77;
  auto a = run_chain(Y, spec, inputs, cfg);
  auto b = run_chain(Y, spec, inputs, cfg);
  REQUIRE(a.retained == b.retained);
  REQUIRE(a.retained_b == b.retained_b);
  REQUIRE(a.activation_freq == b.activation_freq);
}

TEST_CASE("run_chain: recovers active latents on prior-generated data") {
  const int m = 2, p = 2, n = 24;
  int wins = 0;
  for (int seed = 0; seed < 20; ++seed) {
    ModelSpec spec = ModelSpec::uniform(
        {KernelSpec::cosine(0.8, 1.0), KernelSpec::rbf(2.0, 1.0)}, p, 0.5, 1.0, 0.05);
    Rng rng(100 + seed);
    Eigen::MatrixXd inputs = Eigen::VectorXd::LinSpaced(n, 0.0, 6.0);
    PriorOverrides fixed;
    fixed.b = Eigen::VectorXd::Zero(m);
    (*fixed.b)[0] = 1.0;  // latent 0 on, latent 1 off
    Eigen::MatrixXd Hstar(p, m);
    Hstar << 1.2, 0.9, -0.8, 1.1;
    fixed.H = Hstar;
    auto [draw, Y] = sample_prior(spec, inputs, rng, fixed);
    ChainConfig cfg;
    cfg.iterations = 300;
    cfg.burn_in = 100;
    cfg.seed = 1000 + seed;
    auto sum = run_chain(Y, spec, inputs, cfg);
    if (sum.activation_freq[0] > sum.activation_freq[1]) ++wins;
  }
  REQUIRE(wins >= 19);
}

TEST_CASE("run_chain: Geweke forward vs successive-conditional moments") {
  const int m = 2, p = 1, n = 3;
  ModelSpec spec = ModelSpec::uniform(
      {KernelSpec::rbf(0.8, 1.0), KernelSpec::rbf(1.6, 1.0)}, p, 0.4, 1.3, 0.4);
  Eigen::MatrixXd inputs = Eigen::VectorXd::LinSpaced(n, 0.0, 1.5);
  const GibbsWork work = GibbsWork::prepare(spec, inputs);

  auto stats = [&](const Eigen::MatrixXd& X, const Eigen::MatrixXd& H,
                   const Eigen::VectorXd& b, const Eigen::MatrixXd& Y) {
    Eigen::VectorXd g(5);
    g[0] = b.mean();
    g[1] = H.array().square().mean();
    g[2] = X.array().square().mean();
    g[3] = Y.array().square().mean();
    g[4] = Y.array().mean();
    return g;
  };

  const int Nf = 30000;
  Rng rf(42);
  Eigen::VectorXd facc = Eigen::VectorXd::Zero(5), facc2 = Eigen::VectorXd::Zero(5);
  for (int k = 0; k < Nf; ++k) {
    auto [draw, Y] = sample_prior(spec, inputs, rf);
    const Eigen::VectorXd g = stats(draw.X, draw.H, draw.b, Y);
    facc += g;
    facc2 += g.cwiseProduct(g);
  }
  const Eigen::VectorXd fmean = facc / Nf;
  const Eigen::VectorXd fse =
      ((facc2 / Nf - fmean.cwiseProduct(fmean)) / Nf).cwiseMax(0.0).cwiseSqrt();

  // Successive-conditional simulator: resample latents given Y, then Y given
  // latents, tracking the same statistics.
  const int Nc = 60000, warm = 2000;
  Rng rc(43);
  GibbsState st;
  {
    auto [draw, Y0] = sample_prior(spec, inputs, rc);
    st.X = draw.X;
    st.H = draw.H;
    st.b = draw.b;
  }
  Eigen::MatrixXd Y;
  {
    Eigen::MatrixXd F = st.H * st.b.asDiagonal() * st.X;
    Y = F;
    for (int i = 0; i < p; ++i)
      for (int c = 0; c < n; ++c) Y(i, c) += std::sqrt(spec.sigma2[i]) * rc.normal();
  }
  std::vector<int> order = {0, 1};
  const int batches = 40;
  Eigen::MatrixXd batch_means = Eigen::MatrixXd::Zero(batches, 5);
  int per_batch = 0, bi = 0;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(5);
  std::vector<Eigen::VectorXd> kept;
  for (int k = 0; k < Nc; ++k) {
    st.X = sample_x(Y, st.H, st.b, spec, work, rc);
    st.H = sample_h(Y, st.X, st.b, spec, rc);
    st.b = sample_b(Y, st.X, st.H, spec, st.b, rc, order);
    Eigen::MatrixXd F = st.H * st.b.asDiagonal() * st.X;
    Y = F;
    for (int i = 0; i < p; ++i)
      for (int c = 0; c < n; ++c) Y(i, c) += std::sqrt(spec.sigma2[i]) * rc.normal();
    if (k < warm) continue;
    kept.push_back(stats(st.X, st.H, st.b, Y));
  }
  const int chunk = static_cast<int>(kept.size()) / batches;
  Eigen::VectorXd cmean = Eigen::VectorXd::Zero(5);
  for (int bidx = 0; bidx < batches; ++bidx) {
    Eigen::VectorXd bm = Eigen::VectorXd::Zero(5);
    for (int k = 0; k < chunk; ++k) bm += kept[bidx * chunk + k];
    bm /= chunk;
    batch_means.row(bidx) = bm.transpose();
    cmean += bm;
  }
  cmean /= batches;
  Eigen::VectorXd cse(5);
  for (int i = 0; i < 5; ++i) {
    double v = 0.0;
    for (int bidx = 0; bidx < batches; ++bidx)
      v += std::pow(batch_means(bidx, i) - cmean[i], 2);
    cse[i] = std::sqrt(v / (batches - 1.0) / batches);
  }
  (void)per_batch;
  (void)bi;
  (void)acc;
  for (int i = 0; i < 5; ++i) {
    const double se = std::sqrt(fse[i] * fse[i] + cse[i] * cse[i]);
    INFO("statistic " << i << ": forward " << fmean[i] << " chain " << cmean[i] << " se " << se);
    REQUIRE(std::abs(fmean[i] - cmean[i]) < 4.0 * se);
  }
}

TEST_CASE("log_joint: finite after each conditional resample") {
  const int m = 2, p = 2, n = 5;
  auto spec = small_spec(m, p, 30);
  Rng rng(31);
  Eigen::MatrixXd inputs = rng.normal_vector(n);
  const GibbsWork work = GibbsWork::prepare(spec, inputs);
  Eigen::MatrixXd Y = rng.normal_matrix(p, n);
  GibbsState st;
  {
    auto [draw, y0] = sample_prior(spec, inputs, rng);
    st.X = draw.X;
    st.H = draw.H;
    st.b = draw.b;
  }
  std::vector<int> order = {0, 1};
  for (int k = 0; k < 30; ++k) {
    st.X = sample_x(Y, st.H, st.b, spec, work, rng);
    REQUIRE(std::isfinite(log_joint(Y, st, spec, work)));
    st.H = sample_h(Y, st.X, st.b, spec, rng);
    REQUIRE(std::isfinite(log_joint(Y, st, spec, work)));
    st.b = sample_b(Y, st.X, st.H, spec, st.b, rng, order);
    REQUIRE(std::isfinite(log_joint(Y, st, spec, work)));
  }
}

TEST_CASE("LatentConditional: interpolates chain latents at training points") {
  const int m = 2, p = 1, n = 6;
  auto spec = small_spec(m, p, 32);
  Rng rng(33);
  Eigen::MatrixXd inputs = Eigen::VectorXd::LinSpaced(n, 0.0, 3.0);
  const GibbsWork work = GibbsWork::prepare(spec, inputs);
  LatentConditional cond(spec, work, inputs, inputs);
  Eigen::MatrixXd X = rng.normal_matrix(m, n);
  Eigen::MatrixXd Xs = cond.draw(X, rng);
  REQUIRE((Xs - X).cwiseAbs().maxCoeff() < 2e-3);
}
