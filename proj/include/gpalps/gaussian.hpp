#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "gpalps/linalg.hpp"
#include "gpalps/rng.hpp"

namespace gpalps {

struct DiagonalGaussian {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;

  void validate() const {
    if (mean.size() != variance.size())
      throw std::invalid_argument("DiagonalGaussian: mean/variance size mismatch");
    if (!(variance.array() > 0.0).all())
      throw std::invalid_argument("DiagonalGaussian: variances must be strictly positive");
  }
};

struct FullGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;

  void validate() const {
    if (covariance.rows() != mean.size() || covariance.cols() != mean.size())
      throw std::invalid_argument("FullGaussian: covariance shape mismatch");
  }

  static FullGaussian from_diagonal(const DiagonalGaussian& d) {
    FullGaussian g;
    g.mean = d.mean;
    g.covariance = d.variance.asDiagonal();
    return g;
  }
};

// KL(q || p) for diagonal Gaussians, elementwise scalar form.
inline double gaussian_kl(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  q.validate();
  p.validate();
  if (q.mean.size() != p.mean.size())
    throw std::invalid_argument("gaussian_kl: dimension mismatch");
  const auto sq = q.variance.array();
  const auto sp = p.variance.array();
  const auto dm = (q.mean - p.mean).array();
  return (0.5 * ((sp.log() - sq.log()) + (sq + dm.square()) / sp - 1.0)).sum();
}

// KL(q || p) for full Gaussians: trace / quadratic / log-det closed form.
inline double gaussian_kl(const FullGaussian& q, const FullGaussian& p) {
  q.validate();
  p.validate();
  const Eigen::Index k = q.mean.size();
  if (p.mean.size() != k) throw std::invalid_argument("gaussian_kl: dimension mismatch");
  const auto Lp = chol_jitter(p.covariance);
  const auto Lq = chol_jitter(q.covariance);
  // tr(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2
  const Eigen::MatrixXd W = solve_lower(Lp.L, Lq.L);
  const double trace_term = W.squaredNorm();
  const Eigen::VectorXd dm = q.mean - p.mean;
  const Eigen::VectorXd w = solve_lower(Lp.L, dm);
  const double quad = w.squaredNorm();
  const double logdet = log_det_from_chol(Lp.L) - log_det_from_chol(Lq.L);
  return 0.5 * (trace_term + quad - static_cast<double>(k) + logdet);
}

inline double gaussian_kl(const DiagonalGaussian& q, const FullGaussian& p) {
  return gaussian_kl(FullGaussian::from_diagonal(q), p);
}

inline double gaussian_kl(const FullGaussian& q, const DiagonalGaussian& p) {
  return gaussian_kl(q, FullGaussian::from_diagonal(p));
}

// Reparametrised draw: mean + L * eps with L the (jittered) Cholesky factor.
inline Eigen::VectorXd mvn_sample(const FullGaussian& g, const Eigen::VectorXd& eps) {
  g.validate();
  const auto chol = chol_jitter(g.covariance);
  return g.mean + chol.L * eps;
}

inline Eigen::VectorXd mvn_sample(const FullGaussian& g, Rng& rng) {
  return mvn_sample(g, rng.normal_vector(g.mean.size()));
}

// Draw using a precomputed factor (avoids refactoring in sampling loops).
inline Eigen::VectorXd mvn_sample_chol(const Eigen::VectorXd& mean, const Eigen::MatrixXd& L,
                                       Rng& rng) {
  return mean + L * rng.normal_vector(mean.size());
}

inline Eigen::VectorXd diag_sample(const DiagonalGaussian& g, Rng& rng) {
  g.validate();
  return g.mean + (g.variance.array().sqrt() * rng.normal_vector(g.mean.size()).array()).matrix();
}

inline double normal_logpdf(double x, double mean, double variance) {
  const double r = x - mean;
  return -0.5 * (std::log(2.0 * M_PI * variance) + r * r / variance);
}

}  // namespace gpalps
