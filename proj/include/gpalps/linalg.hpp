#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "gpalps/errors.hpp"

namespace gpalps {

inline constexpr double kJitterStart = 1e-10;
inline constexpr double kJitterCap = 1e-4;

struct CholResult {
  Eigen::MatrixXd L;   // lower-triangular factor of M + jitter*I
  double jitter = 0.0;
};

// Cholesky with a geometric jitter ladder: 0, 1e-10, 1e-9, ..., 1e-4.
inline CholResult chol_jitter(const Eigen::MatrixXd& M, double sym_tol = 1e-8) {
  if (M.rows() != M.cols()) throw std::invalid_argument("chol_jitter: matrix not square");
  const double asym = (M - M.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= sym_tol)) {
    std::ostringstream os;
    os << "chol_jitter: matrix not symmetric (max |M - M^T| = " << asym << ")";
    throw std::invalid_argument(os.str());
  }
  const Eigen::Index n = M.rows();
  double jitter = 0.0;
  for (;;) {
    Eigen::MatrixXd A = M;
    if (jitter > 0.0) A.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() == Eigen::Success) {
      // Eigen's LLT can report success on borderline-indefinite inputs;
      // reject non-finite or non-positive pivots explicitly.
      Eigen::MatrixXd L = llt.matrixL();
      bool ok = L.allFinite();
      for (Eigen::Index i = 0; ok && i < n; ++i) ok = L(i, i) > 0.0;
      if (ok) return {std::move(L), jitter};
    }
    if (jitter == 0.0)
      jitter = kJitterStart;
    else if (jitter * 10.0 <= kJitterCap)
      jitter *= 10.0;
    else {
      std::ostringstream os;
      os << "chol_jitter: not positive definite at jitter cap " << kJitterCap;
      throw NotPositiveDefinite(os.str());
    }
  }
}

// Solve (L L^T) x = B given the lower factor.
inline Eigen::MatrixXd chol_solve(const Eigen::MatrixXd& L, const Eigen::MatrixXd& B) {
  Eigen::MatrixXd y = L.triangularView<Eigen::Lower>().solve(B);
  return L.triangularView<Eigen::Lower>().transpose().solve(y);
}

inline Eigen::MatrixXd solve_lower(const Eigen::MatrixXd& L, const Eigen::MatrixXd& B) {
  return L.triangularView<Eigen::Lower>().solve(B);
}

inline Eigen::MatrixXd solve_lower_t(const Eigen::MatrixXd& L, const Eigen::MatrixXd& B) {
  return L.triangularView<Eigen::Lower>().transpose().solve(B);
}

inline double log_det_from_chol(const Eigen::MatrixXd& L) {
  return 2.0 * L.diagonal().array().log().sum();
}

inline void require_finite(const Eigen::MatrixXd& M, const char* what) {
  if (!M.allFinite()) throw NumericalError(std::string("non-finite values in ") + what);
}

}  // namespace gpalps
