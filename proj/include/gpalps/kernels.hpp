#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "gpalps/errors.hpp"
#include "gpalps/linalg.hpp"

namespace gpalps {

enum class KernelKind { Rbf, ExpSineSquared, Cosine, Product };

// Positive-definite covariance on scalar inputs with fixed hyperparameters.
//   rbf:              v * exp(-(a-b)^2 / (2 l^2))
//   exp-sine-squared: v * exp(-2 sin^2(pi (a-b) / T) / l^2)
//   cosine:           v * cos(2 pi f (a-b))
//   product:          elementwise product of the factors
struct KernelSpec {
  KernelKind kind = KernelKind::Rbf;
  double lengthscale = 1.0;
  double period_or_frequency = 1.0;  // period for exp-sine-squared, frequency for cosine
  double variance = 1.0;
  std::vector<KernelSpec> factors;   // product kind only

  static KernelSpec rbf(double lengthscale, double variance = 1.0) {
    KernelSpec k;
    k.kind = KernelKind::Rbf;
    k.lengthscale = lengthscale;
    k.variance = variance;
    return k;
  }

  static KernelSpec exp_sine_squared(double period, double lengthscale = 1.0,
                                     double variance = 1.0) {
    KernelSpec k;
    k.kind = KernelKind::ExpSineSquared;
    k.period_or_frequency = period;
    k.lengthscale = lengthscale;
    k.variance = variance;
    return k;
  }

  static KernelSpec cosine(double frequency, double variance = 1.0) {
    KernelSpec k;
    k.kind = KernelKind::Cosine;
    k.period_or_frequency = frequency;
    k.variance = variance;
    return k;
  }

  static KernelSpec product(std::vector<KernelSpec> fs) {
    KernelSpec k;
    k.kind = KernelKind::Product;
    k.factors = std::move(fs);
    return k;
  }

  void validate() const {
    auto positive_finite = [](double x) { return std::isfinite(x) && x > 0.0; };
    switch (kind) {
      case KernelKind::Rbf:
        if (!positive_finite(lengthscale) || !positive_finite(variance))
          throw InvalidKernel("rbf: hyperparameters must be positive and finite");
        break;
      case KernelKind::ExpSineSquared:
        if (!positive_finite(lengthscale) || !positive_finite(variance) ||
            !positive_finite(period_or_frequency))
          throw InvalidKernel("exp-sine-squared: hyperparameters must be positive and finite");
        break;
      case KernelKind::Cosine:
        if (!positive_finite(variance) || !positive_finite(period_or_frequency))
          throw InvalidKernel("cosine: hyperparameters must be positive and finite");
        break;
      case KernelKind::Product:
        if (factors.empty()) throw InvalidKernel("product: needs at least one factor");
        for (const auto& f : factors) f.validate();
        break;
    }
  }

  // k as a function of the input difference.
  double at_delta(double d) const {
    switch (kind) {
      case KernelKind::Rbf:
        return variance * std::exp(-0.5 * d * d / (lengthscale * lengthscale));
      case KernelKind::ExpSineSquared: {
        const double s = std::sin(M_PI * d / period_or_frequency);
        return variance * std::exp(-2.0 * s * s / (lengthscale * lengthscale));
      }
      case KernelKind::Cosine:
        return variance * std::cos(2.0 * M_PI * period_or_frequency * d);
      case KernelKind::Product: {
        double out = 1.0;
        for (const auto& f : factors) out *= f.at_delta(d);
        return out;
      }
    }
    return 0.0;
  }

  double operator()(double a, double b) const { return at_delta(a - b); }

  std::string name() const {
    switch (kind) {
      case KernelKind::Rbf: return "rbf";
      case KernelKind::ExpSineSquared: return "exp-sine-squared";
      case KernelKind::Cosine: return "cosine";
      case KernelKind::Product: return "product";
    }
    return "?";
  }
};

inline Eigen::MatrixXd gram(const KernelSpec& kernel, const Eigen::VectorXd& a,
                            const Eigen::VectorXd& b) {
  kernel.validate();
  if (!a.allFinite() || !b.allFinite())
    throw std::invalid_argument("gram: inputs must be finite");
  Eigen::MatrixXd K(a.size(), b.size());
  for (Eigen::Index j = 0; j < b.size(); ++j)
    for (Eigen::Index i = 0; i < a.size(); ++i) K(i, j) = kernel.at_delta(a[i] - b[j]);
  return K;
}

inline Eigen::MatrixXd gram(const KernelSpec& kernel, const Eigen::VectorXd& a) {
  Eigen::MatrixXd K = gram(kernel, a, a);
  // Exact symmetry for the factorisation paths.
  K = 0.5 * (K + K.transpose()).eval();
  return K;
}

// Gram matrices tying data inputs t to inducing inputs tz under one kernel.
struct GramBundle {
  Eigen::MatrixXd K_cc;       // n x n
  Eigen::MatrixXd K_cz;       // n x l
  Eigen::MatrixXd K_zz;       // l x l
  Eigen::MatrixXd chol_K_zz;  // lower factor of K_zz + jitter I
  double jitter_used = 0.0;
};

inline GramBundle make_gram_bundle(const KernelSpec& kernel, const Eigen::VectorXd& t,
                                   const Eigen::VectorXd& tz, double extra_jitter = 0.0) {
  GramBundle g;
  g.K_cc = gram(kernel, t);
  g.K_cz = gram(kernel, t, tz);
  g.K_zz = gram(kernel, tz);
  Eigen::MatrixXd Kzz = g.K_zz;
  if (extra_jitter > 0.0) Kzz.diagonal().array() += extra_jitter;
  auto chol = chol_jitter(Kzz);
  g.chol_K_zz = std::move(chol.L);
  g.jitter_used = chol.jitter + extra_jitter;
  return g;
}

}  // namespace gpalps
