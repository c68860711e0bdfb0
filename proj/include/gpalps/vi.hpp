#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gpalps/autodiff.hpp"
#include "gpalps/concrete.hpp"
#include "gpalps/model.hpp"
#include "gpalps/rng.hpp"

namespace gpalps {

struct ViConfig {
  int iterations = 2000;
  int batch_size = 0;        // 0 = full batch
  double learning_rate = 1e-2;
  int mc_samples = 8;
  std::uint64_t seed = 0;
  int num_inducing = 10;
  double prior_temperature = 0.5;
  double inducing_jitter = 1e-6;  // nugget on K_zz; rank-deficient kernels need it
  bool learn_noise = true;
  bool learn_inducing = true;
  double noise_init = 0.0;   // <= 0: 0.1 * var(Y_i) per output
  // Fraction of iterations with log_sigma2 held at its init. Learning the
  // noise from the start lets it absorb weak latents before their mixing
  // weights and inducing means have locked on.
  double noise_warmup_frac = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (iterations < 1 || mc_samples < 1 || num_inducing < 1)
      throw std::invalid_argument("ViConfig: iterations, mc_samples, num_inducing must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("ViConfig: learning_rate > 0");
  }
};

// Free parameters of q(X^z), q(H), q(b) plus inducing locations and the
// annealing clock. Covariance factors are stored as raw matrices whose lower
// triangle is the factor and whose diagonal passes through softplus.
struct VariationalState {
  Eigen::VectorXd tz;                    // l, shared inducing locations
  std::vector<Eigen::VectorXd> mz;       // m vectors of length l
  std::vector<Eigen::MatrixXd> L_raw;    // m matrices l x l
  Eigen::MatrixXd mH;                    // p x m
  Eigen::MatrixXd log_sH;                // p x m
  Eigen::VectorXd rho_logits;            // m
  Eigen::VectorXd log_sigma2;            // p
  int iteration = 0;
  int total_iterations = 0;

  int num_latents() const { return static_cast<int>(mz.size()); }
  int num_inducing() const { return static_cast<int>(tz.size()); }
  int num_outputs() const { return static_cast<int>(log_sigma2.size()); }

  Eigen::MatrixXd chol_factor(int j) const {
    Eigen::MatrixXd L = L_raw[j].triangularView<Eigen::StrictlyLower>();
    for (Eigen::Index i = 0; i < L.rows(); ++i) L(i, i) = softplus(L_raw[j](i, i));
    return L;
  }

  Eigen::MatrixXd Sz(int j) const {
    const Eigen::MatrixXd L = chol_factor(j);
    return L * L.transpose();
  }

  Eigen::VectorXd rho() const {
    return rho_logits.unaryExpr([](double x) { return stable_sigmoid(x); });
  }

  Eigen::VectorXd sigma2() const { return log_sigma2.array().exp(); }

  void validate() const {
    const int m = num_latents();
    if (static_cast<int>(L_raw.size()) != m) throw std::invalid_argument("state: L_raw count");
    if (mH.cols() != m || log_sH.cols() != m || rho_logits.size() != m)
      throw std::invalid_argument("state: latent-count mismatch");
    if (mH.rows() != log_sH.rows() || mH.rows() != log_sigma2.size())
      throw std::invalid_argument("state: output-count mismatch");
    for (int j = 0; j < m; ++j)
      if (mz[j].size() != tz.size() || L_raw[j].rows() != tz.size() ||
          L_raw[j].cols() != tz.size())
        throw std::invalid_argument("state: inducing-count mismatch");
  }
};

inline Eigen::VectorXd activation_probabilities(const VariationalState& state) {
  return state.rho();
}

// ---------------------------------------------------------------------------
// Counter-based noise streams: reproducible, independent of batch order, and
// tied to the global point index so batch estimators are additive.

namespace detail_noise {
constexpr std::uint64_t kTagX = 0x78;
constexpr std::uint64_t kTagH = 0x48;
constexpr std::uint64_t kTagB = 0x42;

class StreamRng {
 public:
  explicit StreamRng(std::uint64_t seed) : s_(seed) {}
  double uniform() {
    s_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = splitmix64(s_);
    return (static_cast<double>(z >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  std::uint64_t s_;
};
}  // namespace detail_noise

struct NoiseContext {
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;

  // eps for q(x_t): m-vector per (global point, mc sample)
  Eigen::VectorXd eps_x(std::uint64_t point, std::uint64_t sample, int m) const {
    detail_noise::StreamRng r(
        hash_combine(seed ^ detail_noise::kTagX, iteration, point, sample));
    Eigen::VectorXd v(m);
    for (int j = 0; j < m; ++j) v[j] = r.normal();
    return v;
  }

  Eigen::MatrixXd eps_H(std::uint64_t sample, int p, int m) const {
    detail_noise::StreamRng r(hash_combine(seed ^ detail_noise::kTagH, iteration, sample));
    Eigen::MatrixXd e(p, m);
    for (int j = 0; j < m; ++j)
      for (int i = 0; i < p; ++i) e(i, j) = r.normal();
    return e;
  }

  Eigen::VectorXd uniforms_b(std::uint64_t sample, int m) const {
    detail_noise::StreamRng r(hash_combine(seed ^ detail_noise::kTagB, iteration, sample));
    Eigen::VectorXd u(m);
    for (int j = 0; j < m; ++j) u[j] = clamp_unit_open(r.uniform());
    return u;
  }
};

// ---------------------------------------------------------------------------

struct ElboBreakdown {
  double ell = 0.0;
  double kl_z = 0.0;  // negated KL terms: L = ell + kl_z + kl_h + kl_b
  double kl_h = 0.0;
  double kl_b = 0.0;
  double total = 0.0;
};

struct QxMarginals {
  Eigen::MatrixXd d;    // m x B, per-point means
  Eigen::MatrixXd var;  // m x B, per-latent marginal variances
};

// Exact Gaussian marginals of q(X) = integral p(X|X^z) q(X^z) dX^z at the
// batch points: (d_t)_j = (A_j m^z_j)_t, (S^x_t)_jj = Ktilde^j_tt + a^T S^z_j a.
inline QxMarginals marginal_qx(const VariationalState& state,
                               const std::vector<GramBundle>& grams,
                               const std::vector<int>& batch) {
  const int m = state.num_latents();
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  QxMarginals out;
  out.d.resize(m, B);
  out.var.resize(m, B);
  for (int j = 0; j < m; ++j) {
    const GramBundle& g = grams[j];
    Eigen::MatrixXd Kbz(B, g.K_cz.cols());
    Eigen::VectorXd kdiag(B);
    for (Eigen::Index c = 0; c < B; ++c) {
      Kbz.row(c) = g.K_cz.row(batch[static_cast<std::size_t>(c)]);
      kdiag[c] = g.K_cc(batch[static_cast<std::size_t>(c)], batch[static_cast<std::size_t>(c)]);
    }
    // A = Kbz Kzz^-1 via two triangular solves
    const Eigen::MatrixXd A = chol_solve(g.chol_K_zz, Kbz.transpose()).transpose();
    out.d.row(j) = (A * state.mz[j]).transpose();
    const Eigen::MatrixXd AL = A * state.chol_factor(j);
    out.var.row(j) = (kdiag.array() - (A.array() * Kbz.array()).rowwise().sum() +
                      AL.array().square().rowwise().sum())
                         .max(1e-12)
                         .transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// ELBO graph construction.

namespace detail_vi {

inline ad::Var kernel_gram_ad(ad::Tape& tape, const KernelSpec& k, ad::Var D) {
  switch (k.kind) {
    case KernelKind::Rbf:
      return tape.mul_c(
          tape.exp(tape.mul_c(tape.square(D), -0.5 / (k.lengthscale * k.lengthscale))),
          k.variance);
    case KernelKind::ExpSineSquared:
      return tape.mul_c(
          tape.exp(tape.mul_c(tape.square(tape.sin(tape.mul_c(D, M_PI / k.period_or_frequency))),
                              -2.0 / (k.lengthscale * k.lengthscale))),
          k.variance);
    case KernelKind::Cosine:
      return tape.mul_c(tape.cos(tape.mul_c(D, 2.0 * M_PI * k.period_or_frequency)), k.variance);
    case KernelKind::Product: {
      ad::Var out = kernel_gram_ad(tape, k.factors[0], D);
      for (std::size_t i = 1; i < k.factors.size(); ++i)
        out = tape.cmul(out, kernel_gram_ad(tape, k.factors[i], D));
      return out;
    }
  }
  throw std::invalid_argument("kernel_gram_ad: unknown kind");
}

struct ElboGraph {
  ad::Var total, ell, kl_z, kl_h, kl_b;
  ad::Var tz, mH, log_sH, rho_logits, log_sigma2;
  std::vector<ad::Var> mz, L_raw;
};

inline ElboGraph build_elbo_graph(ad::Tape& tape, const VariationalState& state,
                                  const ModelSpec& spec, const Dataset& data,
                                  const std::vector<int>& batch, int mc_samples,
                                  const NoiseContext& noise, double temperature,
                                  const ViConfig& cfg) {
  const int m = state.num_latents();
  const int p = spec.p;
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index n = data.n();
  if (B == 0) throw std::invalid_argument("elbo: batch must be nonempty");

  ElboGraph g;
  g.tz = tape.param(state.tz);
  g.mH = tape.param(state.mH);
  g.log_sH = tape.param(state.log_sH);
  g.rho_logits = tape.param(state.rho_logits);
  g.log_sigma2 = tape.param(state.log_sigma2);
  for (int j = 0; j < m; ++j) {
    g.mz.push_back(tape.param(state.mz[j]));
    g.L_raw.push_back(tape.param(state.L_raw[j]));
  }

  // Per-latent q(x_t) marginals at the batch points.
  std::vector<ad::Var> d_rows, sd_rows, L_factors, Kzz_vars;
  Eigen::MatrixXd Ybatch(p, B);
  for (Eigen::Index c = 0; c < B; ++c) Ybatch.col(c) = data.Y.col(batch[static_cast<std::size_t>(c)]);
  for (int j = 0; j < m; ++j) {
    Eigen::VectorXd xb(B);
    const Eigen::VectorXd col = data.inputs.col(spec.input_column(j));
    for (Eigen::Index c = 0; c < B; ++c) xb[c] = col[batch[static_cast<std::size_t>(c)]];
    ad::Var xb_c = tape.constant(Eigen::MatrixXd(xb));

    ad::Var Dzz = tape.outer_diff(g.tz, g.tz);
    ad::Var Kzz = kernel_gram_ad(tape, spec.kernels[j], Dzz);
    ad::Var Dzb = tape.outer_diff(g.tz, xb_c);
    ad::Var Kzb = kernel_gram_ad(tape, spec.kernels[j], Dzb);
    ad::Var Kbz = tape.transpose(Kzb);
    ad::Var A = tape.transpose(tape.solve_psd(Kzz, Kzb, cfg.inducing_jitter));  // B x l

    ad::Var d_j = tape.matmul(A, g.mz[j]);  // B x 1
    ad::Var L_j = tape.tril_softplus_diag(g.L_raw[j]);
    ad::Var AL = tape.matmul(A, L_j);
    const double kdiag = spec.kernels[j].at_delta(0.0);
    ad::Var var_j = tape.max_c(
        tape.add(tape.sub(tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Constant(B, 1, kdiag))),
                          tape.rowsum(tape.cmul(A, Kbz))),
                 tape.rowsum(tape.square(AL))),
        1e-12);

    d_rows.push_back(tape.transpose(d_j));
    sd_rows.push_back(tape.transpose(tape.sqrt(var_j)));
    L_factors.push_back(L_j);
    Kzz_vars.push_back(Kzz);
  }
  ad::Var Dmat = tape.vstack(d_rows);    // m x B
  ad::Var SDmat = tape.vstack(sd_rows);  // m x B

  // Expected log-likelihood, reparametrised MC over q(x_t), q(H), q(b).
  ad::Var sd_H = tape.exp(tape.mul_c(g.log_sH, 0.5));
  ad::Var inv_sig2 = tape.exp(tape.neg(g.log_sigma2));
  ad::Var sum_logsig = tape.sum(g.log_sigma2);
  ad::Var Yc = tape.constant(Ybatch);

  const double lp = std::log(2.0 * M_PI);
  ad::Var ell_acc = tape.constant(0.0);
  ad::Var klb_acc = tape.constant(0.0);
  const double lambda_p = cfg.prior_temperature;
  Eigen::VectorXd logit_theta(m);
  for (int j = 0; j < m; ++j) logit_theta[j] = logit(spec.theta[j]);
  ad::Var logit_theta_c = tape.constant(Eigen::MatrixXd(logit_theta));

  for (int s = 0; s < mc_samples; ++s) {
    Eigen::MatrixXd eps_x(m, B);
    for (Eigen::Index c = 0; c < B; ++c)
      eps_x.col(c) = noise.eps_x(static_cast<std::uint64_t>(batch[static_cast<std::size_t>(c)]),
                                 static_cast<std::uint64_t>(s), m);
    ad::Var X_s = tape.add(Dmat, tape.cmul(SDmat, tape.constant(eps_x)));
    ad::Var H_s = tape.add(g.mH, tape.cmul(sd_H, tape.constant(noise.eps_H(
                                               static_cast<std::uint64_t>(s), p, m))));

    const Eigen::VectorXd u = noise.uniforms_b(static_cast<std::uint64_t>(s), m);
    Eigen::VectorXd eps_b(m);
    for (int j = 0; j < m; ++j) eps_b[j] = std::log(u[j]) - std::log1p(-u[j]);
    ad::Var z_s = tape.mul_c(tape.add(g.rho_logits, tape.constant(Eigen::MatrixXd(eps_b))),
                             1.0 / temperature);
    ad::Var b_s = tape.sigmoid(z_s);

    ad::Var F = tape.matmul(tape.matmul(H_s, tape.diagmat(b_s)), X_s);
    ad::Var R = tape.sub(Yc, F);
    ad::Var quad = tape.sum(tape.cmul(tape.rowsum(tape.square(R)), inv_sig2));
    ad::Var ell_s = tape.sub(tape.mul_c(quad, -0.5),
                             tape.add_c(tape.mul_c(sum_logsig, 0.5 * static_cast<double>(B)),
                                        0.5 * static_cast<double>(B) * p * lp));
    ell_acc = tape.add(ell_acc, ell_s);

    // Gate KL by MC on the logit scale (sigmoid Jacobians of q and p cancel).
    // log q(z) is location-free in rho so it enters as a constant.
    ad::Var vp = tape.add(logit_theta_c, tape.mul_c(z_s, -lambda_p));
    ad::Var logp = tape.add_c(tape.sub(vp, tape.mul_c(tape.softplus(vp), 2.0)), std::log(lambda_p));
    double logq_const = 0.0;
    for (int j = 0; j < m; ++j)
      logq_const += std::log(temperature) - eps_b[j] - 2.0 * softplus(-eps_b[j]);
    klb_acc = tape.add(klb_acc, tape.add_c(tape.sum(logp), -logq_const));
  }
  const double inv_S = 1.0 / static_cast<double>(mc_samples);
  g.ell = tape.mul_c(ell_acc, inv_S * static_cast<double>(n) / static_cast<double>(B));
  g.kl_b = tape.mul_c(klb_acc, inv_S);

  // KL(q(X^z) || p(X^z)): full-Gaussian closed form per latent.
  ad::Var klz_acc = tape.constant(0.0);
  for (int j = 0; j < m; ++j) {
    ad::Var S_j = tape.matmul(L_factors[j], tape.transpose(L_factors[j]));
    ad::Var tr = tape.trace(tape.solve_psd(Kzz_vars[j], S_j, cfg.inducing_jitter));
    ad::Var quad = tape.sum(
        tape.cmul(g.mz[j], tape.solve_psd(Kzz_vars[j], g.mz[j], cfg.inducing_jitter)));
    ad::Var ld_K = tape.logdet_psd(Kzz_vars[j], cfg.inducing_jitter);
    ad::Var ld_S = tape.mul_c(tape.sum(tape.log(tape.diagvec(L_factors[j]))), 2.0);
    ad::Var kl_j = tape.add_c(
        tape.add(tape.add(tr, quad), tape.sub(ld_K, ld_S)),
        -static_cast<double>(state.num_inducing()));
    klz_acc = tape.add(klz_acc, kl_j);
  }
  g.kl_z = tape.mul_c(klz_acc, -0.5);

  // KL(q(H) || p(H)): diagonal closed form.
  ad::Var sH = tape.exp(g.log_sH);
  Eigen::MatrixXd log_s_prior = spec.s.array().log();
  Eigen::MatrixXd inv_2s = 0.5 * spec.s.array().inverse();
  ad::Var klh_terms = tape.add(
      tape.mul_c(tape.sub(tape.constant(log_s_prior), g.log_sH), 0.5),
      tape.cmul(tape.add(sH, tape.square(g.mH)), tape.constant(inv_2s)));
  g.kl_h = tape.neg(tape.add_c(tape.sum(klh_terms), -0.5 * static_cast<double>(p * m)));

  g.total = tape.add(tape.add(g.ell, g.kl_b), tape.add(g.kl_z, g.kl_h));
  return g;
}

// Flat parameter vector layout: tz, then per latent (mz_j, L_raw_j row-major),
// then mH, log_sH (column-major as stored), rho_logits, log_sigma2.
struct ParamLayout {
  int l = 0, m = 0, p = 0;
  int total = 0;

  static ParamLayout of(const VariationalState& s) {
    ParamLayout lay;
    lay.l = s.num_inducing();
    lay.m = s.num_latents();
    lay.p = s.num_outputs();
    lay.total = lay.l + lay.m * (lay.l + lay.l * lay.l) + 2 * lay.p * lay.m + lay.m + lay.p;
    return lay;
  }
};

inline Eigen::VectorXd pack(const VariationalState& s) {
  const auto lay = ParamLayout::of(s);
  Eigen::VectorXd v(lay.total);
  int off = 0;
  v.segment(off, lay.l) = s.tz;
  off += lay.l;
  for (int j = 0; j < lay.m; ++j) {
    v.segment(off, lay.l) = s.mz[j];
    off += lay.l;
    v.segment(off, lay.l * lay.l) = Eigen::Map<const Eigen::VectorXd>(s.L_raw[j].data(),
                                                                      lay.l * lay.l);
    off += lay.l * lay.l;
  }
  v.segment(off, lay.p * lay.m) = Eigen::Map<const Eigen::VectorXd>(s.mH.data(), lay.p * lay.m);
  off += lay.p * lay.m;
  v.segment(off, lay.p * lay.m) =
      Eigen::Map<const Eigen::VectorXd>(s.log_sH.data(), lay.p * lay.m);
  off += lay.p * lay.m;
  v.segment(off, lay.m) = s.rho_logits;
  off += lay.m;
  v.segment(off, lay.p) = s.log_sigma2;
  return v;
}

inline void unpack(const Eigen::VectorXd& v, VariationalState& s) {
  const auto lay = ParamLayout::of(s);
  int off = 0;
  s.tz = v.segment(off, lay.l);
  off += lay.l;
  for (int j = 0; j < lay.m; ++j) {
    s.mz[j] = v.segment(off, lay.l);
    off += lay.l;
    s.L_raw[j] = Eigen::Map<const Eigen::MatrixXd>(v.segment(off, lay.l * lay.l).data(), lay.l,
                                                   lay.l);
    off += lay.l * lay.l;
  }
  s.mH = Eigen::Map<const Eigen::MatrixXd>(v.segment(off, lay.p * lay.m).data(), lay.p, lay.m);
  off += lay.p * lay.m;
  s.log_sH = Eigen::Map<const Eigen::MatrixXd>(v.segment(off, lay.p * lay.m).data(), lay.p,
                                               lay.m);
  off += lay.p * lay.m;
  s.rho_logits = v.segment(off, lay.m);
  off += lay.m;
  s.log_sigma2 = v.segment(off, lay.p);
}

// Gradient in the same flat layout.
inline Eigen::VectorXd collect_grad(ad::Tape& tape, const ElboGraph& g,
                                    const VariationalState& s) {
  const auto lay = ParamLayout::of(s);
  Eigen::VectorXd v(lay.total);
  int off = 0;
  v.segment(off, lay.l) = tape.grad(g.tz);
  off += lay.l;
  for (int j = 0; j < lay.m; ++j) {
    v.segment(off, lay.l) = tape.grad(g.mz[j]);
    off += lay.l;
    Eigen::MatrixXd gl = tape.grad(g.L_raw[j]);
    v.segment(off, lay.l * lay.l) = Eigen::Map<const Eigen::VectorXd>(gl.data(), lay.l * lay.l);
    off += lay.l * lay.l;
  }
  Eigen::MatrixXd gh = tape.grad(g.mH);
  v.segment(off, lay.p * lay.m) = Eigen::Map<const Eigen::VectorXd>(gh.data(), lay.p * lay.m);
  off += lay.p * lay.m;
  Eigen::MatrixXd gs = tape.grad(g.log_sH);
  v.segment(off, lay.p * lay.m) = Eigen::Map<const Eigen::VectorXd>(gs.data(), lay.p * lay.m);
  off += lay.p * lay.m;
  v.segment(off, lay.m) = tape.grad(g.rho_logits);
  off += lay.m;
  v.segment(off, lay.p) = tape.grad(g.log_sigma2);
  return v;
}

inline std::string param_block_name(const ParamLayout& lay, int idx) {
  if (idx < lay.l) return "tz";
  idx -= lay.l;
  const int per_latent = lay.l + lay.l * lay.l;
  if (idx < lay.m * per_latent) {
    const int j = idx / per_latent;
    const int r = idx % per_latent;
    return (r < lay.l ? "mz[" : "L_raw[") + std::to_string(j) + "]";
  }
  idx -= lay.m * per_latent;
  if (idx < lay.p * lay.m) return "mH";
  idx -= lay.p * lay.m;
  if (idx < lay.p * lay.m) return "log_sH";
  idx -= lay.p * lay.m;
  if (idx < lay.m) return "rho_logits";
  return "log_sigma2";
}

inline ElboBreakdown read_breakdown(const ad::Tape& tape, const ElboGraph& g) {
  ElboBreakdown b;
  b.ell = tape.scalar(g.ell);
  b.kl_z = tape.scalar(g.kl_z);
  b.kl_h = tape.scalar(g.kl_h);
  b.kl_b = tape.scalar(g.kl_b);
  b.total = tape.scalar(g.total);
  return b;
}

}  // namespace detail_vi

inline ElboBreakdown elbo(const VariationalState& state, const ModelSpec& spec,
                          const Dataset& data, const std::vector<int>& batch, int mc_samples,
                          const NoiseContext& noise, double temperature,
                          const ViConfig& cfg = {}) {
  ad::Tape tape;
  auto g = detail_vi::build_elbo_graph(tape, state, spec, data, batch, mc_samples, noise,
                                       temperature, cfg);
  auto b = detail_vi::read_breakdown(tape, g);
  if (!std::isfinite(b.total)) {
    std::ostringstream os;
    os << "elbo: non-finite value (ell=" << b.ell << " kl_z=" << b.kl_z << " kl_h=" << b.kl_h
       << " kl_b=" << b.kl_b << ")";
    throw NumericalError(os.str());
  }
  return b;
}

inline ElboBreakdown elbo_with_grad(const VariationalState& state, const ModelSpec& spec,
                                    const Dataset& data, const std::vector<int>& batch,
                                    int mc_samples, const NoiseContext& noise,
                                    double temperature, const ViConfig& cfg,
                                    Eigen::VectorXd& grad_out) {
  ad::Tape tape;
  auto g = detail_vi::build_elbo_graph(tape, state, spec, data, batch, mc_samples, noise,
                                       temperature, cfg);
  tape.backward(g.total);
  grad_out = detail_vi::collect_grad(tape, g, state);
  return detail_vi::read_breakdown(tape, g);
}

// Neutral initialisation: zero inducing means, S^z = 0.1 K_zz, gates at 0.5,
// inducing locations on a uniform grid over the input range.
inline VariationalState init_state(const ModelSpec& spec, const Dataset& data,
                                   const ViConfig& cfg, Rng& rng) {
  spec.validate();
  data.validate();
  cfg.validate();
  const int m = spec.m;
  const int l = cfg.num_inducing;
  VariationalState st;

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int j = 0; j < m; ++j) {
    const Eigen::VectorXd col = data.inputs.col(spec.input_column(j));
    lo = std::min(lo, col.minCoeff());
    hi = std::max(hi, col.maxCoeff());
  }
  if (!(hi > lo)) hi = lo + 1.0;
  st.tz.resize(l);
  for (int i = 0; i < l; ++i)
    st.tz[i] = (l == 1) ? 0.5 * (lo + hi)
                        : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(l - 1);

  auto inv_softplus = [](double y) {
    // solve softplus(x) = y
    return y > 30.0 ? y : std::log(std::expm1(y));
  };
  for (int j = 0; j < m; ++j) {
    st.mz.push_back(Eigen::VectorXd::Zero(l));
    Eigen::MatrixXd Kzz = gram(spec.kernels[j], st.tz);
    Kzz.diagonal().array() += cfg.inducing_jitter;
    const auto chol = chol_jitter(Kzz);
    Eigen::MatrixXd L0 = std::sqrt(0.1) * chol.L;
    Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(l, l);
    raw.triangularView<Eigen::StrictlyLower>() = L0;
    for (int i = 0; i < l; ++i) raw(i, i) = inv_softplus(std::max(L0(i, i), 1e-6));
    st.L_raw.push_back(std::move(raw));
  }
  st.mH = 0.1 * rng.normal_matrix(spec.p, m);
  st.log_sH = Eigen::MatrixXd::Constant(spec.p, m, std::log(0.1));
  st.rho_logits = Eigen::VectorXd::Zero(m);
  if (cfg.learn_noise) {
    st.log_sigma2.resize(spec.p);
    for (int i = 0; i < spec.p; ++i) {
      double v;
      if (cfg.noise_init > 0.0) {
        v = cfg.noise_init;
      } else {
        const Eigen::VectorXd row = data.Y.row(i);
        const double mean = row.mean();
        v = std::max(1e-4, 0.1 * (row.array() - mean).square().mean());
      }
      st.log_sigma2[i] = std::log(v);
    }
  } else {
    st.log_sigma2 = spec.sigma2.array().log();
  }
  st.iteration = 0;
  st.total_iterations = cfg.iterations;
  return st;
}

struct FitResult {
  VariationalState state;
  std::vector<ElboBreakdown> trace;
};

// Adam ascent on all free parameters; temperature follows the annealing
// schedule; every iteration's breakdown is recorded.
inline FitResult fit(VariationalState state, const ModelSpec& spec, const Dataset& data,
                     const ViConfig& cfg) {
  cfg.validate();
  state.validate();
  const auto lay = detail_vi::ParamLayout::of(state);
  const int N = cfg.iterations;
  const Eigen::Index n = data.n();
  const int B = (cfg.batch_size <= 0 || cfg.batch_size >= n)
                    ? static_cast<int>(n)
                    : cfg.batch_size;

  Eigen::VectorXd params = detail_vi::pack(state);
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(lay.total);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(lay.total);

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(hash_combine(cfg.seed, 0x5348ULL));
  std::size_t cursor = order.size();  // trigger shuffle on first use

  FitResult out;
  out.trace.reserve(static_cast<std::size_t>(N));

  ad::Tape tape;
  for (int it = 0; it < N; ++it) {
    std::vector<int> batch;
    if (B == static_cast<int>(n)) {
      batch = order;
    } else {
      batch.reserve(static_cast<std::size_t>(B));
      for (int k = 0; k < B; ++k) {
        if (cursor == order.size()) {
          shuffle_rng.shuffle(order);
          cursor = 0;
        }
        batch.push_back(order[cursor++]);
      }
    }

    const double T = anneal_temperature(it, N);
    NoiseContext noise{cfg.seed, static_cast<std::uint64_t>(it)};
    tape.clear();
    auto g = detail_vi::build_elbo_graph(tape, state, spec, data, batch, cfg.mc_samples, noise,
                                         T, cfg);
    tape.backward(g.total);
    Eigen::VectorXd grad = detail_vi::collect_grad(tape, g, state);
    out.trace.push_back(detail_vi::read_breakdown(tape, g));

    if (!grad.allFinite()) {
      int bad = 0;
      for (Eigen::Index i = 0; i < grad.size(); ++i)
        if (!std::isfinite(grad[i])) { bad = static_cast<int>(i); break; }
      std::ostringstream os;
      os << "fit: non-finite gradient at iteration " << it << " (flat parameter index " << bad
         << ", block " << detail_vi::param_block_name(lay, bad) << ")";
      throw NumericalError(os.str());
    }

    if (!cfg.learn_inducing) grad.segment(0, lay.l).setZero();
    const bool noise_frozen =
        !cfg.learn_noise ||
        it < static_cast<int>(cfg.noise_warmup_frac * static_cast<double>(N));
    if (noise_frozen) grad.segment(lay.total - lay.p, lay.p).setZero();

    // Adam, ascent direction.
    const double t = static_cast<double>(it + 1);
    m1 = cfg.adam_beta1 * m1 + (1.0 - cfg.adam_beta1) * grad;
    m2 = cfg.adam_beta2 * m2 + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
    params.array() += cfg.learning_rate * (m1.array() / c1) /
                      ((m2.array() / c2).sqrt() + cfg.adam_eps);
    detail_vi::unpack(params, state);
    state.iteration = it + 1;
  }
  out.state = std::move(state);
  return out;
}

// Draws (H, b, x(t*)) from the trained variational posterior for the
// Monte-Carlo predictive. Gates are sampled as hard Bernoulli(rho).
inline PosteriorSampler vi_posterior_sampler(const VariationalState& state,
                                             const ModelSpec& spec,
                                             const Eigen::MatrixXd& star_inputs, Rng& rng,
                                             double inducing_jitter = 1e-6) {
  const int m = state.num_latents();
  const Eigen::Index ns = star_inputs.rows();
  std::vector<GramBundle> bundles;
  for (int j = 0; j < m; ++j)
    bundles.push_back(make_gram_bundle(spec.kernels[j], star_inputs.col(spec.input_column(j)),
                                       state.tz, inducing_jitter));
  std::vector<int> all(static_cast<std::size_t>(ns));
  std::iota(all.begin(), all.end(), 0);
  auto marg = std::make_shared<QxMarginals>(marginal_qx(state, bundles, all));
  auto st = std::make_shared<VariationalState>(state);
  Rng* r = &rng;
  return [marg, st, r, m, ns]() {
    Eigen::MatrixXd Xs(m, ns);
    for (int j = 0; j < m; ++j)
      for (Eigen::Index c = 0; c < ns; ++c)
        Xs(j, c) = marg->d(j, c) + std::sqrt(marg->var(j, c)) * r->normal();
    Eigen::MatrixXd H = st->mH;
    for (Eigen::Index i = 0; i < H.rows(); ++i)
      for (int j = 0; j < m; ++j)
        H(i, j) += std::sqrt(std::exp(st->log_sH(i, j))) * r->normal();
    Eigen::VectorXd b(m);
    const Eigen::VectorXd rho = st->rho();
    for (int j = 0; j < m; ++j) b[j] = r->flip(rho[j]) ? 1.0 : 0.0;
    return std::make_tuple(H, b, Xs);
  };
}

}  // namespace gpalps
