#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <tuple>
#include <vector>

#include "gpalps/gaussian.hpp"
#include "gpalps/kernels.hpp"
#include "gpalps/rng.hpp"

namespace gpalps {

// GP-ALPS prior: m latent GPs x_j with kernels k_j, Bernoulli gates
// b_j ~ Bern(theta_j), mixing entries H_ij ~ N(0, s_ij), outputs
// y_i(t) ~ N(sum_j H_ij b_j x_j(t), sigma2_i).
struct ModelSpec {
  int m = 1;  // latent count
  int p = 1;  // output count
  std::vector<KernelSpec> kernels;
  Eigen::VectorXd theta;        // m, gate priors in (0,1)
  Eigen::MatrixXd s;            // p x m, mixing prior variances
  Eigen::VectorXd sigma2;       // p, noise variances
  std::vector<int> latent_input_columns;  // empty = all latents read input column 0

  void validate() const {
    if (m < 1 || p < 1) throw std::invalid_argument("ModelSpec: m and p must be >= 1");
    if (static_cast<int>(kernels.size()) != m)
      throw std::invalid_argument("ModelSpec: kernel count != m");
    if (theta.size() != m) throw std::invalid_argument("ModelSpec: theta size != m");
    if (!((theta.array() > 0.0).all() && (theta.array() < 1.0).all()))
      throw std::invalid_argument("ModelSpec: theta must lie strictly in (0,1)");
    if (s.rows() != p || s.cols() != m) throw std::invalid_argument("ModelSpec: s shape");
    if (!(s.array() > 0.0).all()) throw std::invalid_argument("ModelSpec: s must be positive");
    if (sigma2.size() != p || !(sigma2.array() > 0.0).all())
      throw std::invalid_argument("ModelSpec: sigma2 must be positive");
    for (const auto& k : kernels) k.validate();
    if (!latent_input_columns.empty() &&
        static_cast<int>(latent_input_columns.size()) != m)
      throw std::invalid_argument("ModelSpec: latent_input_columns size != m");
  }

  int input_column(int j) const {
    return latent_input_columns.empty() ? 0 : latent_input_columns[j];
  }

  // Uniform spec: m latents, shared priors.
  static ModelSpec uniform(std::vector<KernelSpec> ks, int p, double theta0 = 0.5,
                           double s0 = 1.0, double sigma2_0 = 0.1) {
    ModelSpec spec;
    spec.m = static_cast<int>(ks.size());
    spec.p = p;
    spec.kernels = std::move(ks);
    spec.theta = Eigen::VectorXd::Constant(spec.m, theta0);
    spec.s = Eigen::MatrixXd::Constant(p, spec.m, s0);
    spec.sigma2 = Eigen::VectorXd::Constant(p, sigma2_0);
    return spec;
  }
};

// Observations Y (p x n) at inputs (n x d). Time-series experiments use d = 1;
// tabular feature selection routes latent j to its own input column.
struct Dataset {
  Eigen::MatrixXd inputs;  // n x d
  Eigen::MatrixXd Y;       // p x n
  std::optional<Eigen::Index> test_split_begin;  // index into the point ordering

  Eigen::Index n() const { return inputs.rows(); }
  Eigen::Index p() const { return Y.rows(); }

  // 1-D input vector (column 0); the common case.
  Eigen::VectorXd t() const { return inputs.col(0); }

  static Dataset from_series(const Eigen::VectorXd& t, const Eigen::MatrixXd& Y) {
    Dataset d;
    d.inputs = t;
    d.Y = Y;
    d.validate();
    return d;
  }

  void validate() const {
    if (inputs.rows() < 1) throw std::invalid_argument("Dataset: needs n >= 1");
    if (Y.cols() != inputs.rows()) throw std::invalid_argument("Dataset: Y column count != n");
    if (!inputs.allFinite() || !Y.allFinite())
      throw std::invalid_argument("Dataset: non-finite entries");
  }

  Eigen::VectorXd latent_inputs(const ModelSpec& spec, int j) const {
    return inputs.col(spec.input_column(j));
  }
};

// One joint draw of the latent variables.
struct LatentDraw {
  Eigen::MatrixXd X;  // m x n
  Eigen::MatrixXd H;  // p x m
  Eigen::VectorXd b;  // m, binary (or relaxed in (0,1))
};

struct PriorOverrides {
  std::optional<Eigen::MatrixXd> H;
  std::optional<Eigen::VectorXd> b;
};

// Forward-sample the generative model on inputs t.
inline std::pair<LatentDraw, Eigen::MatrixXd> sample_prior(const ModelSpec& spec,
                                                           const Eigen::MatrixXd& inputs,
                                                           Rng& rng,
                                                           const PriorOverrides& fixed = {}) {
  spec.validate();
  const Eigen::Index n = inputs.rows();
  LatentDraw draw;
  draw.X.resize(spec.m, n);
  for (int j = 0; j < spec.m; ++j) {
    const Eigen::VectorXd tj = inputs.col(spec.input_column(j));
    const Eigen::MatrixXd K = gram(spec.kernels[j], tj);
    const auto chol = chol_jitter(K);
    draw.X.row(j) = (chol.L * rng.normal_vector(n)).transpose();
  }
  if (fixed.b.has_value()) {
    draw.b = *fixed.b;
  } else {
    draw.b.resize(spec.m);
    for (int j = 0; j < spec.m; ++j) draw.b[j] = rng.flip(spec.theta[j]) ? 1.0 : 0.0;
  }
  if (fixed.H.has_value()) {
    draw.H = *fixed.H;
  } else {
    draw.H.resize(spec.p, spec.m);
    for (int i = 0; i < spec.p; ++i)
      for (int j = 0; j < spec.m; ++j) draw.H(i, j) = rng.normal(0.0, std::sqrt(spec.s(i, j)));
  }
  Eigen::MatrixXd F = draw.H * draw.b.asDiagonal() * draw.X;
  Eigen::MatrixXd Y = F;
  for (int i = 0; i < spec.p; ++i) {
    const double sd = std::sqrt(spec.sigma2[i]);
    for (Eigen::Index c = 0; c < n; ++c) Y(i, c) += rng.normal(0.0, sd);
  }
  return {std::move(draw), std::move(Y)};
}

// sum_i sum_t log N(y_it; sum_k H_ik b_k X_kt, sigma2_i); b may be relaxed.
inline double log_likelihood(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& X,
                             const Eigen::MatrixXd& H, const Eigen::VectorXd& b,
                             const ModelSpec& spec) {
  const Eigen::Index n = Y.cols();
  const Eigen::MatrixXd R = Y - H * b.asDiagonal() * X;
  double ll = 0.0;
  for (int i = 0; i < spec.p; ++i) {
    const double s2 = spec.sigma2[i];
    ll += -0.5 * static_cast<double>(n) * std::log(2.0 * M_PI * s2) -
          0.5 * R.row(i).squaredNorm() / s2;
  }
  return ll;
}

// Posterior draws of (H, b, x(t*)); used by the Monte-Carlo predictive.
using PosteriorSampler =
    std::function<std::tuple<Eigen::MatrixXd, Eigen::VectorXd, Eigen::MatrixXd>()>;

struct Predictive {
  Eigen::MatrixXd mean;      // p x n*
  Eigen::MatrixXd variance;  // p x n*, includes observation noise
};

// Monte-Carlo moments of f(t*) = H (x(t*) o b), plus observation noise.
inline Predictive predict(const PosteriorSampler& sampler, Eigen::Index n_star, int samples,
                          const Eigen::VectorXd& sigma2) {
  if (samples < 1) throw std::invalid_argument("predict: samples must be >= 1");
  const Eigen::Index p = sigma2.size();
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(p, n_star);
  Eigen::MatrixXd sumsq = Eigen::MatrixXd::Zero(p, n_star);
  for (int s = 0; s < samples; ++s) {
    auto [H, b, Xs] = sampler();
    Eigen::MatrixXd F = H * b.asDiagonal() * Xs;
    sum += F;
    sumsq += F.cwiseProduct(F);
  }
  Predictive out;
  out.mean = sum / static_cast<double>(samples);
  out.variance = (sumsq / static_cast<double>(samples) - out.mean.cwiseProduct(out.mean))
                     .cwiseMax(0.0);
  out.variance.colwise() += sigma2;
  return out;
}

}  // namespace gpalps
