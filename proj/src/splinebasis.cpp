#include "smoothfit/splinebasis.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "smoothfit/errors.hpp"

namespace smoothfit {

PenaltyCore make_penalty(const Mat& S) {
  PenaltyCore out;
  out.matrix = 0.5 * (S + S.transpose());
  const int k = static_cast<int>(S.rows());
  if (k == 0) return out;
  Eigen::SelfAdjointEigenSolver<Mat> es(out.matrix, Eigen::EigenvaluesOnly);
  const Vec& ev = es.eigenvalues();
  double mx = ev.cwiseAbs().maxCoeff();
  int r = 0;
  if (mx > 0)
    for (int i = 0; i < k; ++i)
      if (ev[i] > kKernelTol * mx) ++r;
  out.rank = r;
  out.kernel_dim = k - r;
  return out;
}

Vec equispaced_knots(double lo, double hi, int k, int degree) {
  const int nk = k + degree + 1;
  const int nint = k - degree;  // intervals spanning [lo, hi]
  const double h = (hi - lo) / nint;
  Vec t(nk);
  for (int j = 0; j < nk; ++j) t[j] = lo + (j - degree) * h;
  // pin the range ends exactly so boundary observations never fall outside
  t[degree] = lo;
  t[k] = hi;
  return t;
}

// Non-zero basis values at x in span j (Piegl & Tiller, BasisFuns).
static void basis_funs(int j, double x, int p, const Vec& t, double* N, double* left,
                       double* right) {
  N[0] = 1.0;
  for (int r = 1; r <= p; ++r) {
    left[r] = x - t[j + 1 - r];
    right[r] = t[j + r] - x;
    double saved = 0.0;
    for (int q = 0; q < r; ++q) {
      double tmp = N[q] / (right[q + 1] + left[r - q]);
      N[q] = saved + right[q + 1] * tmp;
      saved = left[r - q] * tmp;
    }
    N[r] = saved;
  }
}

Mat bspline_eval(const Vec& x, const Vec& knots, int degree, bool clamp, int* n_clamped) {
  const int k = static_cast<int>(knots.size()) - degree - 1;
  if (k < degree + 1) throw SpecError("bspline_eval: knot vector too short for degree");
  const double lo = knots[degree], hi = knots[k];
  const double slack = 1e-12 * std::max(1.0, hi - lo);
  Mat B = Mat::Zero(x.size(), k);
  std::vector<double> N(degree + 1), left(degree + 1), right(degree + 1);
  int nclamp = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double xi = x[i];
    if (!std::isfinite(xi)) throw DomainError("bspline_eval: non-finite covariate at row " +
                                              std::to_string(i));
    if (xi < lo - slack || xi > hi + slack) {
      if (!clamp)
        throw DomainError("bspline_eval: value " + std::to_string(xi) + " at row " +
                          std::to_string(i) + " outside knot range [" + std::to_string(lo) +
                          ", " + std::to_string(hi) + "]");
      ++nclamp;
    }
    xi = std::clamp(xi, lo, hi);
    // span j with t_j <= x < t_{j+1}, restricted to [degree, k-1]
    auto it = std::upper_bound(knots.data() + degree, knots.data() + k, xi);
    int j = static_cast<int>(it - knots.data()) - 1;
    j = std::clamp(j, degree, k - 1);
    basis_funs(j, xi, degree, knots, N.data(), left.data(), right.data());
    for (int q = 0; q <= degree; ++q) B(i, j - degree + q) = N[q];
  }
  if (n_clamped) *n_clamped = nclamp;
  return B;
}

BasisBlock bspline_basis(const Vec& x, int k, int degree) {
  if (degree < 0) throw SpecError("bspline_basis: negative degree");
  if (k < degree + 1)
    throw SpecError("bspline_basis: k=" + std::to_string(k) + " < degree+1=" +
                    std::to_string(degree + 1));
  if (x.size() == 0) throw SpecError("bspline_basis: empty covariate");
  if (!x.allFinite()) throw SpecError("bspline_basis: non-finite covariate");
  double lo = x.minCoeff(), hi = x.maxCoeff();
  if (!(lo < hi)) throw SpecError("bspline_basis: covariate has zero range");
  BasisBlock b;
  b.knots = equispaced_knots(lo, hi, k, degree);
  b.degree = degree;
  b.values = bspline_eval(x, b.knots, degree);
  return b;
}

PenaltyCore difference_penalty(int k, int m) {
  if (m < 1) throw SpecError("difference_penalty: order must be >= 1");
  if (m >= k)
    throw SpecError("difference_penalty: order " + std::to_string(m) + " >= k=" +
                    std::to_string(k));
  Mat D = Mat::Identity(k, k);
  for (int o = 0; o < m; ++o) {
    Mat Dn(D.rows() - 1, k);
    for (int i = 0; i < Dn.rows(); ++i) Dn.row(i) = D.row(i + 1) - D.row(i);
    D = Dn;
  }
  PenaltyCore p;
  p.matrix = D.transpose() * D;
  p.rank = k - m;
  p.kernel_dim = m;
  return p;
}

Mat row_kronecker(const std::vector<Mat>& blocks) {
  Mat out = blocks.front();
  for (size_t b = 1; b < blocks.size(); ++b) {
    const Mat& B = blocks[b];
    if (B.rows() != out.rows()) throw SpecError("row_kronecker: mismatched row counts");
    Mat next(out.rows(), out.cols() * B.cols());
    for (Eigen::Index a = 0; a < out.cols(); ++a)
      next.middleCols(a * B.cols(), B.cols()) = B.array().colwise() * out.col(a).array();
    out.swap(next);
  }
  return out;
}

static Mat kron(const Mat& A, const Mat& B) {
  Mat K(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return K;
}

std::pair<BasisBlock, std::vector<PenaltyCore>> tensor_product(
    const std::vector<std::pair<BasisBlock, PenaltyCore>>& marginals) {
  if (marginals.size() < 2) throw SpecError("tensor_product: need at least two marginals");
  const auto n = marginals.front().first.values.rows();
  std::vector<Mat> blocks;
  BasisBlock out;
  for (const auto& [b, p] : marginals) {
    if (b.values.rows() != n) throw SpecError("tensor_product: mismatched row counts");
    if (p.matrix.rows() != b.values.cols())
      throw SpecError("tensor_product: penalty size does not match basis");
    blocks.push_back(b.values);
    out.degree = std::max(out.degree, b.degree);
    out.covariate_names.insert(out.covariate_names.end(), b.covariate_names.begin(),
                               b.covariate_names.end());
  }
  out.values = row_kronecker(blocks);
  std::vector<PenaltyCore> pens;
  for (size_t j = 0; j < marginals.size(); ++j) {
    Mat S = Mat::Identity(1, 1);
    for (size_t i = 0; i < marginals.size(); ++i) {
      const auto kk = marginals[i].first.values.cols();
      S = kron(S, i == j ? marginals[i].second.matrix : Mat(Mat::Identity(kk, kk)));
    }
    pens.push_back(make_penalty(S));
  }
  return {out, pens};
}

Mat sumtozero_basis(const Mat& X) {
  const auto k = X.cols();
  if (k < 2) throw SpecError("sumtozero: basis needs at least two columns");
  Vec c = X.colwise().sum().transpose();
  Eigen::HouseholderQR<Mat> qr(c);
  Mat Q = qr.householderQ() * Mat::Identity(k, k);
  return Q.rightCols(k - 1);
}

Absorbed absorb_sumtozero(const BasisBlock& X, const PenaltyCore& S) {
  Absorbed a;
  a.Z = sumtozero_basis(X.values);
  a.basis = X;
  a.basis.values = X.values * a.Z;
  a.penalty = make_penalty(a.Z.transpose() * S.matrix * a.Z);
  return a;
}

ReparamResult demmler_reinsch(const BasisBlock& X, const PenaltyCore& S) {
  const auto k = X.values.cols();
  Mat XtX = X.values.transpose() * X.values;
  Eigen::LLT<Mat> llt(XtX);
  if (llt.info() != Eigen::Success)
    throw NumericError("demmler_reinsch: X'X is not positive definite; reduce the basis");
  Mat L = llt.matrixL();
  // M = L^{-1} S L^{-T}
  Mat tmp = L.triangularView<Eigen::Lower>().solve(S.matrix);
  Mat M = L.triangularView<Eigen::Lower>().solve(tmp.transpose());
  M = 0.5 * (M + M.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(M);
  Vec ev = es.eigenvalues().reverse();
  Mat U = es.eigenvectors().rowwise().reverse();
  const double mx = ev.size() ? std::max(ev[0], 0.0) : 0.0;
  ReparamResult r;
  r.kernel_dim = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] <= kKernelTol * mx) {
      ev[i] = 0.0;
      ++r.kernel_dim;
    }
  }
  r.S_tilde = ev;
  r.P = L.transpose().triangularView<Eigen::Upper>().solve(U);
  r.X_tilde = X.values * r.P;
  for (int n = 0; n < r.kernel_dim; ++n) {
    Mat Psi = Mat::Zero(k, k);
    Psi(k - r.kernel_dim + n, k - r.kernel_dim + n) = 1.0;
    PenaltyCore pc;
    pc.matrix = Psi;
    pc.rank = 1;
    pc.kernel_dim = static_cast<int>(k) - 1;
    r.extra_penalties.push_back(pc);
  }
  return r;
}

std::vector<PenaltyCore> randomize_smooth(const ReparamResult& r) {
  std::vector<PenaltyCore> out;
  PenaltyCore main;
  main.matrix = r.S_tilde.asDiagonal();
  main.rank = static_cast<int>(r.S_tilde.size()) - r.kernel_dim;
  main.kernel_dim = r.kernel_dim;
  out.push_back(main);
  for (const auto& p : r.extra_penalties) out.push_back(p);
  return out;
}

}  // namespace smoothfit
