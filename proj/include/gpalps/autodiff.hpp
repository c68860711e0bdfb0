#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "gpalps/errors.hpp"
#include "gpalps/linalg.hpp"

// Minimal reverse-mode tape over dense matrices. Every node value is an
// Eigen::MatrixXd (scalars are 1x1); the op set is just what the ELBO needs.
// Elementwise binary ops broadcast a 1x1 operand against any shape.
namespace gpalps::ad {

using Mat = Eigen::MatrixXd;

enum class Op {
  Const, Param,
  Add, Sub, CMul, CDiv,
  AddC, MulC,
  MatMul, Transpose,
  Exp, Log, Sqrt, Square, Sin, Cos, Sigmoid, Softplus, Neg,
  Sum, RowSum, ColSum, Trace, DiagVec, DiagMat,
  VStack,
  SolvePsd, LogDetPsd,
  OuterDiff, TrilSoftplusDiag, MaxC,
};

struct Node {
  Op op;
  int a = -1;
  int b = -1;
  std::vector<int> rest;  // VStack blocks
  double c = 0.0;
  Mat value;
  Mat adjoint;
  bool seen = false;
  std::shared_ptr<Eigen::LLT<Mat>> llt;  // SolvePsd / LogDetPsd factor cache
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;
  bool valid() const { return tape != nullptr && idx >= 0; }
};

namespace detail {
inline double softplus(double x) { return (x > 0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

class Tape {
 public:
  const Mat& val(Var v) const { return nodes_[v.idx].value; }
  double scalar(Var v) const { return nodes_[v.idx].value(0, 0); }

  // Gradient of the last backward() target w.r.t. a leaf (zero if untouched).
  Mat grad(Var v) const {
    const Node& n = nodes_[v.idx];
    if (n.seen) return n.adjoint;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

  void clear() {
    nodes_.clear();
    factor_cache_.clear();
  }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Mat v) { return emit_leaf(Op::Const, std::move(v)); }
  Var constant(double x) { return emit_leaf(Op::Const, Mat::Constant(1, 1, x)); }
  Var param(Mat v) { return emit_leaf(Op::Param, std::move(v)); }

  Var add(Var x, Var y) { return emit_bcast(Op::Add, x, y); }
  Var sub(Var x, Var y) { return emit_bcast(Op::Sub, x, y); }
  Var cmul(Var x, Var y) { return emit_bcast(Op::CMul, x, y); }
  Var cdiv(Var x, Var y) { return emit_bcast(Op::CDiv, x, y); }

  Var add_c(Var x, double c) { return emit1(Op::AddC, x, Mat((val(x).array() + c).matrix()), c); }
  Var mul_c(Var x, double c) { return emit1(Op::MulC, x, val(x) * c, c); }

  Var matmul(Var x, Var y) {
    if (val(x).cols() != val(y).rows()) throw NumericalError("tape matmul: shape mismatch");
    return emit2(Op::MatMul, x, y, val(x) * val(y));
  }
  Var transpose(Var x) { return emit1(Op::Transpose, x, val(x).transpose()); }

  Var exp(Var x) { return emit1(Op::Exp, x, Mat(val(x).array().exp().matrix())); }
  Var log(Var x) { return emit1(Op::Log, x, Mat(val(x).array().log().matrix())); }
  Var sqrt(Var x) { return emit1(Op::Sqrt, x, Mat(val(x).array().sqrt().matrix())); }
  Var square(Var x) { return emit1(Op::Square, x, Mat(val(x).array().square().matrix())); }
  Var sin(Var x) { return emit1(Op::Sin, x, Mat(val(x).array().sin().matrix())); }
  Var cos(Var x) { return emit1(Op::Cos, x, Mat(val(x).array().cos().matrix())); }
  Var neg(Var x) { return emit1(Op::Neg, x, -val(x)); }
  Var sigmoid(Var x) {
    return emit1(Op::Sigmoid, x, val(x).unaryExpr([](double t) { return detail::sigmoid(t); }));
  }
  Var softplus(Var x) {
    return emit1(Op::Softplus, x, val(x).unaryExpr([](double t) { return detail::softplus(t); }));
  }

  Var sum(Var x) { return emit1(Op::Sum, x, Mat::Constant(1, 1, val(x).sum())); }
  Var rowsum(Var x) { return emit1(Op::RowSum, x, val(x).rowwise().sum()); }
  Var colsum(Var x) { return emit1(Op::ColSum, x, val(x).colwise().sum()); }
  Var trace(Var x) { return emit1(Op::Trace, x, Mat::Constant(1, 1, val(x).trace())); }
  Var diagvec(Var x) { return emit1(Op::DiagVec, x, val(x).diagonal()); }
  Var diagmat(Var x) {
    Mat d = Mat::Zero(val(x).size(), val(x).size());
    d.diagonal() = Eigen::Map<const Eigen::VectorXd>(val(x).data(), val(x).size());
    return emit1(Op::DiagMat, x, std::move(d));
  }

  Var vstack(const std::vector<Var>& blocks) {
    if (blocks.empty()) throw NumericalError("tape vstack: empty");
    Eigen::Index rows = 0;
    const Eigen::Index cols = val(blocks[0]).cols();
    for (Var b : blocks) rows += val(b).rows();
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (Var b : blocks) {
      out.middleRows(r, val(b).rows()) = val(b);
      r += val(b).rows();
    }
    Node n;
    n.op = Op::VStack;
    n.value = std::move(out);
    for (Var b : blocks) n.rest.push_back(b.idx);
    return push(std::move(n));
  }

  // (M + jitter I)^{-1} B, factor cached for the backward pass. base_jitter is
  // always applied; the escalation ladder only engages if the factorisation fails.
  Var solve_psd(Var m, Var b, double base_jitter = 0.0) {
    auto llt = factor_for(m, base_jitter);
    Node n;
    n.op = Op::SolvePsd;
    n.a = m.idx;
    n.b = b.idx;
    n.llt = llt;
    n.value = llt->solve(val(b));
    return push(std::move(n));
  }

  Var logdet_psd(Var m, double base_jitter = 0.0) {
    auto llt = factor_for(m, base_jitter);
    const Mat& L = llt->matrixLLT();
    double ld = 0.0;
    for (Eigen::Index i = 0; i < L.rows(); ++i) ld += 2.0 * std::log(L(i, i));
    Node n;
    n.op = Op::LogDetPsd;
    n.a = m.idx;
    n.llt = llt;
    n.value = Mat::Constant(1, 1, ld);
    return push(std::move(n));
  }

  // D(i,k) = a_i - b_k for column vectors a (n x 1), b (k x 1).
  Var outer_diff(Var a, Var b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    Mat d = av * Mat::Ones(1, bv.rows()) - Mat::Ones(av.rows(), 1) * bv.transpose();
    return emit2(Op::OuterDiff, a, b, std::move(d));
  }

  // Lower-triangular factor: strict lower part of P, softplus on the diagonal.
  Var tril_softplus_diag(Var p) {
    Mat L = val(p).template triangularView<Eigen::StrictlyLower>();
    for (Eigen::Index i = 0; i < L.rows(); ++i)
      L(i, i) = detail::softplus(val(p)(i, i));
    return emit1(Op::TrilSoftplusDiag, p, std::move(L));
  }

  Var max_c(Var x, double c) { return emit1(Op::MaxC, x, Mat(val(x).array().max(c).matrix()), c); }

  void backward(Var root) {
    if (val(root).size() != 1) throw NumericalError("tape backward: root must be scalar");
    for (auto& n : nodes_) n.seen = false;
    Node& r = nodes_[root.idx];
    r.adjoint = Mat::Ones(1, 1);
    r.seen = true;
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.seen) continue;
      propagate(n);
    }
  }

 private:
  std::vector<Node> nodes_;
  std::map<std::pair<int, double>, std::shared_ptr<Eigen::LLT<Mat>>> factor_cache_;

  // One factorisation per (node, jitter); repeated solves against the same
  // matrix reuse it.
  std::shared_ptr<Eigen::LLT<Mat>> factor_for(Var m, double base_jitter) {
    const auto key = std::make_pair(m.idx, base_jitter);
    auto it = factor_cache_.find(key);
    if (it != factor_cache_.end()) return it->second;
    auto llt = factor(val(m), base_jitter);
    factor_cache_.emplace(key, llt);
    return llt;
  }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  Var emit_leaf(Op op, Mat v) {
    Node n;
    n.op = op;
    n.value = std::move(v);
    return push(std::move(n));
  }

  Var emit1(Op op, Var a, Mat v, double c = 0.0) {
    Node n;
    n.op = op;
    n.a = a.idx;
    n.c = c;
    n.value = std::move(v);
    return push(std::move(n));
  }

  Var emit2(Op op, Var a, Var b, Mat v) {
    Node n;
    n.op = op;
    n.a = a.idx;
    n.b = b.idx;
    n.value = std::move(v);
    return push(std::move(n));
  }

  Var emit_bcast(Op op, Var x, Var y) {
    const Mat& a = val(x);
    const Mat& b = val(y);
    Mat v;
    if (a.size() == 1 && b.size() != 1) {
      const double s = a(0, 0);
      switch (op) {
        case Op::Add: v = (b.array() + s).matrix(); break;
        case Op::Sub: v = (s - b.array()).matrix(); break;
        case Op::CMul: v = s * b; break;
        case Op::CDiv: v = (s / b.array()).matrix(); break;
        default: throw NumericalError("tape: bad broadcast op");
      }
    } else if (b.size() == 1 && a.size() != 1) {
      const double s = b(0, 0);
      switch (op) {
        case Op::Add: v = (a.array() + s).matrix(); break;
        case Op::Sub: v = (a.array() - s).matrix(); break;
        case Op::CMul: v = a * s; break;
        case Op::CDiv: v = a / s; break;
        default: throw NumericalError("tape: bad broadcast op");
      }
    } else {
      if (a.rows() != b.rows() || a.cols() != b.cols())
        throw NumericalError("tape: elementwise shape mismatch");
      switch (op) {
        case Op::Add: v = a + b; break;
        case Op::Sub: v = a - b; break;
        case Op::CMul: v = a.cwiseProduct(b); break;
        case Op::CDiv: v = a.cwiseQuotient(b); break;
        default: throw NumericalError("tape: bad broadcast op");
      }
    }
    return emit2(op, x, y, std::move(v));
  }

  std::shared_ptr<Eigen::LLT<Mat>> factor(const Mat& m, double base_jitter) {
    Mat A = 0.5 * (m + m.transpose());
    if (base_jitter > 0.0) A.diagonal().array() += base_jitter;
    double jitter = 0.0;
    for (;;) {
      Mat B = A;
      if (jitter > 0.0) B.diagonal().array() += jitter;
      auto llt = std::make_shared<Eigen::LLT<Mat>>(B);
      if (llt->info() == Eigen::Success) return llt;
      if (jitter == 0.0)
        jitter = kJitterStart;
      else if (jitter * 10.0 <= kJitterCap)
        jitter *= 10.0;
      else
        throw NotPositiveDefinite("tape: matrix not positive definite at jitter cap");
    }
  }

  // Add g into the adjoint of node idx, collapsing to 1x1 if it was broadcast.
  void accum(int idx, const Mat& g) {
    if (idx < 0) return;
    Node& n = nodes_[idx];
    if (n.op == Op::Const) return;  // constants never need adjoints
    Mat add;
    if (n.value.size() == 1 && g.size() != 1)
      add = Mat::Constant(1, 1, g.sum());
    else
      add = g;
    if (!n.seen) {
      n.adjoint = std::move(add);
      n.seen = true;
    } else {
      n.adjoint += add;
    }
  }

  void propagate(Node& n) {
    const Mat& g = n.adjoint;
    switch (n.op) {
      case Op::Const:
      case Op::Param:
        break;
      case Op::Add:
        accum(n.a, g);
        accum(n.b, g);
        break;
      case Op::Sub:
        accum(n.a, g);
        accum(n.b, -g);
        break;
      case Op::CMul: {
        const Mat& a = nodes_[n.a].value;
        const Mat& b = nodes_[n.b].value;
        if (a.size() == 1 && b.size() != 1) {
          accum(n.a, Mat::Constant(1, 1, g.cwiseProduct(b).sum()));
          accum(n.b, a(0, 0) * g);
        } else if (b.size() == 1 && a.size() != 1) {
          accum(n.a, b(0, 0) * g);
          accum(n.b, Mat::Constant(1, 1, g.cwiseProduct(a).sum()));
        } else {
          accum(n.a, g.cwiseProduct(b));
          accum(n.b, g.cwiseProduct(a));
        }
        break;
      }
      case Op::CDiv: {
        const Mat& a = nodes_[n.a].value;
        const Mat& b = nodes_[n.b].value;
        if (a.size() == 1 && b.size() != 1) {
          // y = s / B
          accum(n.a, Mat::Constant(1, 1, g.cwiseQuotient(b).sum()));
          accum(n.b, -g.cwiseProduct(n.value).cwiseQuotient(b));
        } else if (b.size() == 1 && a.size() != 1) {
          const double s = b(0, 0);
          accum(n.a, g / s);
          accum(n.b, Mat::Constant(1, 1, -g.cwiseProduct(n.value).sum() / s));
        } else {
          accum(n.a, g.cwiseQuotient(b));
          accum(n.b, -g.cwiseProduct(n.value).cwiseQuotient(b));
        }
        break;
      }
      case Op::AddC:
        accum(n.a, g);
        break;
      case Op::MulC:
        accum(n.a, n.c * g);
        break;
      case Op::MatMul:
        accum(n.a, g * nodes_[n.b].value.transpose());
        accum(n.b, nodes_[n.a].value.transpose() * g);
        break;
      case Op::Transpose:
        accum(n.a, g.transpose());
        break;
      case Op::Exp:
        accum(n.a, g.cwiseProduct(n.value));
        break;
      case Op::Log:
        accum(n.a, g.cwiseQuotient(nodes_[n.a].value));
        break;
      case Op::Sqrt:
        accum(n.a, (0.5 * g.array() / n.value.array()).matrix());
        break;
      case Op::Square:
        accum(n.a, 2.0 * g.cwiseProduct(nodes_[n.a].value));
        break;
      case Op::Sin:
        accum(n.a, g.cwiseProduct(nodes_[n.a].value.array().cos().matrix()));
        break;
      case Op::Cos:
        accum(n.a, -g.cwiseProduct(nodes_[n.a].value.array().sin().matrix()));
        break;
      case Op::Sigmoid:
        accum(n.a, (g.array() * n.value.array() * (1.0 - n.value.array())).matrix());
        break;
      case Op::Softplus:
        accum(n.a, (g.array() * nodes_[n.a].value.unaryExpr([](double t) {
                      return detail::sigmoid(t);
                    }).array()).matrix());
        break;
      case Op::Neg:
        accum(n.a, -g);
        break;
      case Op::Sum:
        accum(n.a, Mat::Constant(nodes_[n.a].value.rows(), nodes_[n.a].value.cols(), g(0, 0)));
        break;
      case Op::RowSum:
        accum(n.a, g * Mat::Ones(1, nodes_[n.a].value.cols()));
        break;
      case Op::ColSum:
        accum(n.a, Mat::Ones(nodes_[n.a].value.rows(), 1) * g);
        break;
      case Op::Trace: {
        Mat d = Mat::Zero(nodes_[n.a].value.rows(), nodes_[n.a].value.cols());
        d.diagonal().setConstant(g(0, 0));
        accum(n.a, d);
        break;
      }
      case Op::DiagVec: {
        Mat d = Mat::Zero(nodes_[n.a].value.rows(), nodes_[n.a].value.cols());
        d.diagonal() = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
        accum(n.a, d);
        break;
      }
      case Op::DiagMat: {
        const Mat& a = nodes_[n.a].value;
        Mat d(a.rows(), a.cols());
        Eigen::Map<Eigen::VectorXd>(d.data(), d.size()) = g.diagonal();
        accum(n.a, d);
        break;
      }
      case Op::VStack: {
        Eigen::Index r = 0;
        for (int child : n.rest) {
          const Eigen::Index rows = nodes_[child].value.rows();
          accum(child, g.middleRows(r, rows));
          r += rows;
        }
        break;
      }
      case Op::SolvePsd: {
        // Y = A^{-1} B  =>  Bbar = A^{-1} G, Abar = -Bbar Y^T
        Mat bbar = n.llt->solve(g);
        accum(n.b, bbar);
        accum(n.a, -bbar * n.value.transpose());
        break;
      }
      case Op::LogDetPsd: {
        const Eigen::Index k = nodes_[n.a].value.rows();
        Mat inv = n.llt->solve(Mat::Identity(k, k));
        accum(n.a, g(0, 0) * inv);
        break;
      }
      case Op::OuterDiff: {
        accum(n.a, g.rowwise().sum());
        accum(n.b, -g.colwise().sum().transpose());
        break;
      }
      case Op::TrilSoftplusDiag: {
        const Mat& p = nodes_[n.a].value;
        Mat d = Mat::Zero(p.rows(), p.cols());
        d.template triangularView<Eigen::StrictlyLower>() = g;
        for (Eigen::Index i = 0; i < p.rows(); ++i)
          d(i, i) = g(i, i) * detail::sigmoid(p(i, i));
        accum(n.a, d);
        break;
      }
      case Op::MaxC: {
        const Mat& a = nodes_[n.a].value;
        accum(n.a, (g.array() * (a.array() > n.c).cast<double>()).matrix());
        break;
      }
    }
  }
};

// Operator sugar (elementwise semantics; use Tape::matmul for products).
inline Var operator+(Var x, Var y) { return x.tape->add(x, y); }
inline Var operator-(Var x, Var y) { return x.tape->sub(x, y); }
inline Var operator*(Var x, Var y) { return x.tape->cmul(x, y); }
inline Var operator/(Var x, Var y) { return x.tape->cdiv(x, y); }
inline Var operator+(Var x, double c) { return x.tape->add_c(x, c); }
inline Var operator+(double c, Var x) { return x.tape->add_c(x, c); }
inline Var operator-(Var x, double c) { return x.tape->add_c(x, -c); }
inline Var operator-(double c, Var x) { return x.tape->add_c(x.tape->neg(x), c); }
inline Var operator*(Var x, double c) { return x.tape->mul_c(x, c); }
inline Var operator*(double c, Var x) { return x.tape->mul_c(x, c); }
inline Var operator/(Var x, double c) { return x.tape->mul_c(x, 1.0 / c); }
inline Var operator-(Var x) { return x.tape->neg(x); }

inline Var dot(Var a, Var b) { return a.tape->sum(a.tape->cmul(a, b)); }

}  // namespace gpalps::ad
