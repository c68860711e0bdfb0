#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gpalps {

// Relaxed Bernoulli on (0,1): probability rho, temperature lambda.
struct ConcreteParams {
  double probability = 0.5;
  double temperature = 1.0;

  void validate() const {
    if (!(probability > 0.0 && probability < 1.0))
      throw std::invalid_argument("ConcreteParams: probability must lie in (0,1)");
    if (!(temperature > 0.0))
      throw std::invalid_argument("ConcreteParams: temperature must be positive");
  }
};

// Posterior-gate temperature schedule over the training run.
inline double anneal_temperature(double n, double N) {
  if (!(N > 0.0) || n < 0.0 || n > N)
    throw std::invalid_argument("anneal_temperature: need 0 <= n <= N, N > 0");
  const double z = (n - 0.75 * N) / (0.083 * N);
  return 0.66 + (10.0 - 0.66) * std::exp(-z * z);
}

inline double clamp_unit_open(double u) { return std::clamp(u, 1e-7, 1.0 - 1e-7); }

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// b = sigmoid((logit(rho) + log u - log(1-u)) / lambda); u clamped into (0,1).
inline double concrete_sample(const ConcreteParams& params, double u) {
  params.validate();
  u = clamp_unit_open(u);
  const double noise = std::log(u) - std::log1p(-u);
  return stable_sigmoid((logit(params.probability) + noise) / params.temperature);
}

// Log-density of the binary concrete at x in (0,1):
//   log[l a x^(-l-1) (1-x)^(-l-1)] - 2 log[a x^(-l) + (1-x)^(-l)], a = rho/(1-rho).
// Evaluated in log-space throughout.
inline double concrete_log_density(double x, const ConcreteParams& params) {
  params.validate();
  if (!(x > 0.0 && x < 1.0))
    throw std::invalid_argument("concrete_log_density: x must lie in (0,1)");
  const double l = params.temperature;
  const double log_alpha = logit(params.probability);
  const double log_x = std::log(x);
  const double log_1mx = std::log1p(-x);
  // log(a x^-l + (1-x)^-l) via logsumexp
  const double t1 = log_alpha - l * log_x;
  const double t2 = -l * log_1mx;
  const double mx = std::max(t1, t2);
  const double lse = mx + std::log(std::exp(t1 - mx) + std::exp(t2 - mx));
  return std::log(l) + log_alpha - (l + 1.0) * (log_x + log_1mx) - 2.0 * lse;
}

// Log-density of the concrete's logit: z = logit(b) follows a logistic
// distribution with location logit(rho)/lambda and scale 1/lambda. Used in the
// ELBO's gate KL where the sigmoid Jacobians of q and p cancel.
inline double concrete_logit_logpdf(double z, double logit_rho, double lambda) {
  return std::log(lambda) + logit_rho - lambda * z - 2.0 * softplus(logit_rho - lambda * z);
}

}  // namespace gpalps
