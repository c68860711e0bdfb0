#pragma once

#include <Eigen/Dense>
#include <functional>
#include <sstream>
#include <vector>

#include "gpalps/concrete.hpp"
#include "gpalps/gaussian.hpp"
#include "gpalps/model.hpp"

namespace gpalps {

// One state of the exact-posterior chain.
struct GibbsState {
  Eigen::MatrixXd X;  // m x n
  Eigen::MatrixXd H;  // p x m
  Eigen::VectorXd b;  // m, binary
  double log_joint = 0.0;
};

struct ChainConfig {
  int iterations = 2000;
  int burn_in = 500;
  int thinning = 1;
  std::uint64_t seed = 0;
  bool random_sweep = false;  // gate sweep order; default fixed ascending

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("ChainConfig: iterations >= 1");
    if (burn_in < 0 || burn_in >= iterations)
      throw std::invalid_argument("ChainConfig: need 0 <= burn_in < iterations");
    if (thinning < 1) throw std::invalid_argument("ChainConfig: thinning >= 1");
  }
};

// Fixed per-run matrices: the latent Gram factors on the training inputs.
struct GibbsWork {
  std::vector<Eigen::MatrixXd> K;       // m of n x n
  std::vector<Eigen::MatrixXd> chol_K;  // lower factors (jittered)

  static GibbsWork prepare(const ModelSpec& spec, const Eigen::MatrixXd& inputs) {
    GibbsWork w;
    for (int j = 0; j < spec.m; ++j) {
      Eigen::MatrixXd Kj = gram(spec.kernels[j], inputs.col(spec.input_column(j)));
      auto chol = chol_jitter(Kj);
      w.K.push_back(std::move(Kj));
      w.chol_K.push_back(std::move(chol.L));
    }
    return w;
  }
};

// ---------------------------------------------------------------------------
// p(X | Y, H, b): one Bayesian linear regression in vec(X) = [x_1; ...; x_m].

// Dense precision route: S_x = [K^-1 + H_b^T S_b^-1 H_b]^-1 as an explicit
// mn x mn Gaussian. Used directly at small sizes and as the cross-check for
// the data-space route.
inline FullGaussian x_posterior_precision(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& H,
                                          const Eigen::VectorXd& b, const ModelSpec& spec,
                                          const GibbsWork& work) {
  const int m = spec.m;
  const Eigen::Index n = Y.cols();
  const Eigen::MatrixXd W = H * b.asDiagonal();
  const Eigen::MatrixXd G =
      W.transpose() * spec.sigma2.cwiseInverse().asDiagonal() * W;  // m x m
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(m * n, m * n);
  for (int j = 0; j < m; ++j) {
    P.block(j * n, j * n, n, n) =
        chol_solve(work.chol_K[j], Eigen::MatrixXd::Identity(n, n));
    for (int k = 0; k < m; ++k)
      P.block(j * n, k * n, n, n).diagonal().array() += G(j, k);
  }
  P = 0.5 * (P + P.transpose()).eval();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m * n);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < spec.p; ++i)
      rhs.segment(j * n, n) += (W(i, j) / spec.sigma2[i]) * Y.row(i).transpose();
  auto cholP = chol_jitter(P);
  FullGaussian g;
  g.mean = chol_solve(cholP.L, rhs);
  g.covariance = chol_solve(cholP.L, Eigen::MatrixXd::Identity(m * n, m * n));
  g.covariance = 0.5 * (g.covariance + g.covariance.transpose()).eval();
  return g;
}

namespace detail_gibbs {

// Data-space quantities shared by the Matheron draw and its moment identities:
// M = A K A^T + S_b with A = (H diag b) kron I_n.
inline Eigen::MatrixXd dataspace_gram(const Eigen::MatrixXd& W, const ModelSpec& spec,
                                      const GibbsWork& work, Eigen::Index n) {
  const int p = spec.p;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(p * n, p * n);
  for (int i = 0; i < p; ++i) {
    for (int i2 = 0; i2 < p; ++i2) {
      double any = 0.0;
      for (int j = 0; j < spec.m; ++j) any += std::abs(W(i, j) * W(i2, j));
      if (any == 0.0) continue;
      Eigen::MatrixXd block = Eigen::MatrixXd::Zero(n, n);
      for (int j = 0; j < spec.m; ++j) {
        const double w = W(i, j) * W(i2, j);
        if (w != 0.0) block += w * work.K[j];
      }
      M.block(i * n, i2 * n, n, n) = block;
    }
    M.block(i * n, i * n, n, n).diagonal().array() += spec.sigma2[i];
  }
  return M;
}

// K A^T t, block j = K_j * sum_i W_ij t_i.
inline Eigen::MatrixXd k_at(const Eigen::MatrixXd& W, const GibbsWork& work,
                            const Eigen::MatrixXd& Tmat) {
  // Tmat: p x n (row i = t_i). Returns m x n (row j).
  const int m = static_cast<int>(work.K.size());
  const Eigen::Index n = Tmat.cols();
  Eigen::MatrixXd out(m, n);
  for (int j = 0; j < m; ++j) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < Tmat.rows(); ++i) acc += W(i, j) * Tmat.row(i).transpose();
    out.row(j) = (work.K[j] * acc).transpose();
  }
  return out;
}

}  // namespace detail_gibbs

// Data-space moments: mean = K A^T M^-1 y, cov = K - K A^T M^-1 A K. Equal to
// the precision-route Gaussian by the push-through identity.
inline FullGaussian x_posterior_dataspace(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& H,
                                          const Eigen::VectorXd& b, const ModelSpec& spec,
                                          const GibbsWork& work) {
  const int m = spec.m;
  const int p = spec.p;
  const Eigen::Index n = Y.cols();
  const Eigen::MatrixXd W = H * b.asDiagonal();
  const Eigen::MatrixXd M = detail_gibbs::dataspace_gram(W, spec, work, n);
  auto cholM = chol_jitter(M);

  Eigen::VectorXd y(p * n);
  for (int i = 0; i < p; ++i) y.segment(i * n, n) = Y.row(i).transpose();
  const Eigen::VectorXd t = chol_solve(cholM.L, y);
  Eigen::MatrixXd Tmat(p, n);
  for (int i = 0; i < p; ++i) Tmat.row(i) = t.segment(i * n, n).transpose();
  const Eigen::MatrixXd mean_rows = detail_gibbs::k_at(W, work, Tmat);  // m x n

  // Cov: K - (K A^T) M^-1 (A K); build A K (pn x mn) once.
  Eigen::MatrixXd AK(p * n, m * n);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < m; ++j) AK.block(i * n, j * n, n, n) = W(i, j) * work.K[j];
  const Eigen::MatrixXd MinvAK = chol_solve(cholM.L, AK);
  Eigen::MatrixXd cov = -AK.transpose() * MinvAK;
  for (int j = 0; j < m; ++j) cov.block(j * n, j * n, n, n) += work.K[j];
  FullGaussian g;
  g.mean.resize(m * n);
  for (int j = 0; j < m; ++j) g.mean.segment(j * n, n) = mean_rows.row(j).transpose();
  g.covariance = 0.5 * (cov + cov.transpose()).eval();
  return g;
}

// Exact draw from p(X | Y, H, b). Uses the mn x mn precision factor when that
// is the smaller system, otherwise a Matheron-style draw against the pn x pn
// data-space factor (identical distribution, desk-scale friendly when p << m).
inline Eigen::MatrixXd sample_x(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& H,
                                const Eigen::VectorXd& b, const ModelSpec& spec,
                                const GibbsWork& work, Rng& rng) {
  const int m = spec.m;
  const int p = spec.p;
  const Eigen::Index n = Y.cols();
  Eigen::MatrixXd X(m, n);
  if (m <= p) {
    const Eigen::MatrixXd W = H * b.asDiagonal();
    const Eigen::MatrixXd G = W.transpose() * spec.sigma2.cwiseInverse().asDiagonal() * W;
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(m * n, m * n);
    for (int j = 0; j < m; ++j) {
      P.block(j * n, j * n, n, n) =
          chol_solve(work.chol_K[j], Eigen::MatrixXd::Identity(n, n));
      for (int k = 0; k < m; ++k)
        P.block(j * n, k * n, n, n).diagonal().array() += G(j, k);
    }
    P = 0.5 * (P + P.transpose()).eval();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m * n);
    for (int j = 0; j < m; ++j)
      for (int i = 0; i < p; ++i)
        rhs.segment(j * n, n) += (W(i, j) / spec.sigma2[i]) * Y.row(i).transpose();
    auto cholP = chol_jitter(P);
    const Eigen::VectorXd mean = chol_solve(cholP.L, rhs);
    const Eigen::VectorXd x =
        mean + solve_lower_t(cholP.L, rng.normal_vector(m * n));
    for (int j = 0; j < m; ++j) X.row(j) = x.segment(j * n, n).transpose();
    return X;
  }

  // Matheron: x = x0 + K A^T M^-1 (y - A x0 - e), x0 ~ prior, e ~ noise.
  const Eigen::MatrixXd W = H * b.asDiagonal();
  Eigen::MatrixXd X0(m, n);
  for (int j = 0; j < m; ++j) X0.row(j) = (work.chol_K[j] * rng.normal_vector(n)).transpose();
  Eigen::MatrixXd R(p, n);  // residual rows, r_i = y_i - sum_j W_ij x0_j - e_i
  for (int i = 0; i < p; ++i) {
    Eigen::VectorXd r = Y.row(i).transpose();
    for (int j = 0; j < m; ++j) r -= W(i, j) * X0.row(j).transpose();
    const double sd = std::sqrt(spec.sigma2[i]);
    for (Eigen::Index c = 0; c < n; ++c) r[c] -= sd * rng.normal();
    R.row(i) = r.transpose();
  }
  const Eigen::MatrixXd M = detail_gibbs::dataspace_gram(W, spec, work, n);
  auto cholM = chol_jitter(M);
  Eigen::VectorXd rvec(p * n);
  for (int i = 0; i < p; ++i) rvec.segment(i * n, n) = R.row(i).transpose();
  const Eigen::VectorXd t = chol_solve(cholM.L, rvec);
  Eigen::MatrixXd Tmat(p, n);
  for (int i = 0; i < p; ++i) Tmat.row(i) = t.segment(i * n, n).transpose();
  X = X0 + detail_gibbs::k_at(W, work, Tmat);
  return X;
}

// p(H | X, Y, b): p independent m-dimensional Gaussians.
inline Eigen::MatrixXd sample_h(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& X,
                                const Eigen::VectorXd& b, const ModelSpec& spec, Rng& rng) {
  const int m = spec.m;
  const int p = spec.p;
  const Eigen::MatrixXd C = X * X.transpose();  // m x m
  const Eigen::MatrixXd Cb = C.cwiseProduct(b * b.transpose());
  Eigen::MatrixXd H(p, m);
  for (int i = 0; i < p; ++i) {
    Eigen::MatrixXd P = Cb / spec.sigma2[i];
    P.diagonal() += spec.s.row(i).cwiseInverse().transpose();
    auto chol = chol_jitter(P);
    const Eigen::VectorXd rhs =
        b.asDiagonal() * (X * Y.row(i).transpose()) / spec.sigma2[i];
    const Eigen::VectorXd mean = chol_solve(chol.L, rhs);
    H.row(i) = (mean + solve_lower_t(chol.L, rng.normal_vector(m))).transpose();
  }
  return H;
}

// The gate conditional statistic c_j from the collapsed quadratic form, and
// the normalised two-point probability p(b_j = 1 | rest).
inline double gate_stat(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& X,
                        const Eigen::MatrixXd& H, const Eigen::VectorXd& b,
                        const ModelSpec& spec, int j, const Eigen::MatrixXd& C,
                        const Eigen::MatrixXd& XYt) {
  double c = 0.0;
  for (int i = 0; i < spec.p; ++i) {
    double cross = 0.0;
    for (int k = 0; k < spec.m; ++k)
      if (k != j) cross += H(i, k) * b[k] * C(j, k);
    const double term =
        2.0 * H(i, j) * cross + H(i, j) * H(i, j) * C(j, j) - 2.0 * H(i, j) * XYt(j, i);
    c += term / spec.sigma2[i];
  }
  return -0.5 * c;
}

inline double gate_prob_from_stat(double theta, double c) {
  return stable_sigmoid(logit(theta) + c);
}

// Sequential sweep over the gates; each draw conditions on the latest b.
inline Eigen::VectorXd sample_b(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& X,
                                const Eigen::MatrixXd& H, const ModelSpec& spec,
                                Eigen::VectorXd b, Rng& rng,
                                const std::vector<int>& sweep_order) {
  const Eigen::MatrixXd C = X * X.transpose();
  const Eigen::MatrixXd XYt = X * Y.transpose();  // m x p
  for (int j : sweep_order) {
    const double c = gate_stat(Y, X, H, b, spec, j, C, XYt);
    const double p1 = gate_prob_from_stat(spec.theta[j], c);
    b[j] = rng.flip(p1) ? 1.0 : 0.0;
  }
  return b;
}

inline double log_joint(const Eigen::MatrixXd& Y, const GibbsState& st, const ModelSpec& spec,
                        const GibbsWork& work) {
  double lj = log_likelihood(Y, st.X, st.H, st.b, spec);
  const Eigen::Index n = Y.cols();
  for (int j = 0; j < spec.m; ++j) {
    const Eigen::VectorXd w = solve_lower(work.chol_K[j], st.X.row(j).transpose());
    lj += -0.5 * (w.squaredNorm() + log_det_from_chol(work.chol_K[j]) +
                  static_cast<double>(n) * std::log(2.0 * M_PI));
  }
  for (int i = 0; i < spec.p; ++i)
    for (int j = 0; j < spec.m; ++j) lj += normal_logpdf(st.H(i, j), 0.0, spec.s(i, j));
  for (int j = 0; j < spec.m; ++j)
    lj += st.b[j] > 0.5 ? std::log(spec.theta[j]) : std::log1p(-spec.theta[j]);
  return lj;
}

struct ChainSummary {
  Eigen::MatrixXd retained_b;      // retained x m
  Eigen::VectorXd activation_freq; // m
  Eigen::MatrixXd H_mean, H_var;   // p x m
  Eigen::MatrixXd X_mean, X_var;   // m x n
  int retained = 0;
};

// Systematic-scan Gibbs: X -> H -> b. Burn-in discarded, every thinning-th
// state retained; the callback sees each retained state in order.
inline ChainSummary run_chain(const Eigen::MatrixXd& Y, const ModelSpec& spec,
                              const Eigen::MatrixXd& inputs, const ChainConfig& cfg,
                              const std::function<void(const GibbsState&)>& on_retained = {}) {
  cfg.validate();
  spec.validate();
  const Eigen::Index n = Y.cols();
  const GibbsWork work = GibbsWork::prepare(spec, inputs);
  Rng rng(cfg.seed);

  GibbsState st;
  {
    auto [draw, y0] = sample_prior(spec, inputs, rng);
    st.X = std::move(draw.X);
    st.H = std::move(draw.H);
    st.b = std::move(draw.b);
  }
  std::vector<int> order(static_cast<std::size_t>(spec.m));
  std::iota(order.begin(), order.end(), 0);

  ChainSummary sum;
  const int kept = (cfg.iterations - cfg.burn_in + cfg.thinning - 1) / cfg.thinning;
  sum.retained_b.resize(kept, spec.m);
  sum.H_mean = Eigen::MatrixXd::Zero(spec.p, spec.m);
  sum.H_var = Eigen::MatrixXd::Zero(spec.p, spec.m);
  sum.X_mean = Eigen::MatrixXd::Zero(spec.m, n);
  sum.X_var = Eigen::MatrixXd::Zero(spec.m, n);

  for (int it = 0; it < cfg.iterations; ++it) {
    try {
      st.X = sample_x(Y, st.H, st.b, spec, work, rng);
      st.H = sample_h(Y, st.X, st.b, spec, rng);
      if (cfg.random_sweep) rng.shuffle(order);
      st.b = sample_b(Y, st.X, st.H, spec, st.b, rng, order);
    } catch (const NotPositiveDefinite& e) {
      std::ostringstream os;
      os << "run_chain: factorisation failure at iteration " << it << ": " << e.what();
      throw NotPositiveDefinite(os.str());
    }
    if (it < cfg.burn_in || (it - cfg.burn_in) % cfg.thinning != 0) continue;
    st.log_joint = log_joint(Y, st, spec, work);
    sum.retained_b.row(sum.retained) = st.b.transpose();
    sum.H_mean += st.H;
    sum.H_var += st.H.cwiseProduct(st.H);
    sum.X_mean += st.X;
    sum.X_var += st.X.cwiseProduct(st.X);
    ++sum.retained;
    if (on_retained) on_retained(st);
  }
  const double r = static_cast<double>(sum.retained);
  sum.retained_b.conservativeResize(sum.retained, spec.m);
  sum.activation_freq = sum.retained_b.colwise().mean().transpose();
  sum.H_mean /= r;
  sum.H_var = (sum.H_var / r - sum.H_mean.cwiseProduct(sum.H_mean)).cwiseMax(0.0);
  sum.X_mean /= r;
  sum.X_var = (sum.X_var / r - sum.X_mean.cwiseProduct(sum.X_mean)).cwiseMax(0.0);
  return sum;
}

// Per-latent GP interpolation x(t*) | x(t) for predictive reconstruction from
// chain states.
class LatentConditional {
 public:
  LatentConditional(const ModelSpec& spec, const GibbsWork& work,
                    const Eigen::MatrixXd& train_inputs, const Eigen::MatrixXd& star_inputs) {
    const Eigen::Index ns = star_inputs.rows();
    for (int j = 0; j < spec.m; ++j) {
      const Eigen::MatrixXd Ksc =
          gram(spec.kernels[j], star_inputs.col(spec.input_column(j)),
               train_inputs.col(spec.input_column(j)));
      const Eigen::MatrixXd Kss =
          gram(spec.kernels[j], star_inputs.col(spec.input_column(j)));
      Eigen::MatrixXd A = chol_solve(work.chol_K[j], Ksc.transpose()).transpose();
      Eigen::MatrixXd Schur = Kss - A * Ksc.transpose();
      Schur = 0.5 * (Schur + Schur.transpose()).eval();
      auto chol = chol_jitter(Schur);
      A_.push_back(std::move(A));
      L_.push_back(std::move(chol.L));
      (void)ns;
    }
  }

  // Draw x*(t*) rows given chain X.
  Eigen::MatrixXd draw(const Eigen::MatrixXd& X, Rng& rng) const {
    const int m = static_cast<int>(A_.size());
    Eigen::MatrixXd Xs(m, A_[0].rows());
    for (int j = 0; j < m; ++j)
      Xs.row(j) = (A_[j] * X.row(j).transpose() + L_[j] * rng.normal_vector(L_[j].rows()))
                      .transpose();
    return Xs;
  }

 private:
  std::vector<Eigen::MatrixXd> A_;
  std::vector<Eigen::MatrixXd> L_;
};

}  // namespace gpalps
