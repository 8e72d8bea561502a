#pragma once

#include <string>
#include <utility>
#include <vector>

#include "smoothfit/types.hpp"

namespace smoothfit {

struct BasisBlock {
  Mat values;  // N x k
  Vec knots;
  int degree = 0;
  std::vector<std::string> covariate_names;
};

struct PenaltyCore {
  Mat matrix;  // k x k, symmetric PSD
  int kernel_dim = 0;
  int rank = 0;
};

struct ReparamResult {
  Mat X_tilde;
  Vec S_tilde;  // diagonal, decreasing, trailing kernel zeros
  Mat P;        // beta = P * beta_tilde
  std::vector<PenaltyCore> extra_penalties;  // unit-diagonal Psi^n, one per kernel direction
  int kernel_dim = 0;
};

struct Absorbed {
  BasisBlock basis;
  PenaltyCore penalty;
  Mat Z;  // k x (k-1), beta = Z * beta_bar
};

// Relative eigenvalue cut used for kernel detection everywhere in this module.
inline constexpr double kKernelTol = 1e-10;

// Rank/kernel bookkeeping for an arbitrary symmetric PSD matrix.
PenaltyCore make_penalty(const Mat& S);

// Knots for k basis functions of the given degree over [lo, hi]: equally spaced,
// `degree` padding knots on each side.
Vec equispaced_knots(double lo, double hi, int k, int degree);

// Evaluate the B-spline basis on fixed knots. Points outside [knots[degree], knots[k]]
// throw DomainError unless clamp is set, in which case they are moved to the boundary
// and counted in *n_clamped.
Mat bspline_eval(const Vec& x, const Vec& knots, int degree, bool clamp = false,
                 int* n_clamped = nullptr);

BasisBlock bspline_basis(const Vec& x, int k, int degree);

PenaltyCore difference_penalty(int k, int m);

std::pair<BasisBlock, std::vector<PenaltyCore>> tensor_product(
    const std::vector<std::pair<BasisBlock, PenaltyCore>>& marginals);

// Row-wise Kronecker product of the given blocks (first block varies slowest).
Mat row_kronecker(const std::vector<Mat>& blocks);

// Null space basis of the column-sum constraint 1'X.
Mat sumtozero_basis(const Mat& X);

Absorbed absorb_sumtozero(const BasisBlock& X, const PenaltyCore& S);

ReparamResult demmler_reinsch(const BasisBlock& X, const PenaltyCore& S);

std::vector<PenaltyCore> randomize_smooth(const ReparamResult& r);

}  // namespace smoothfit
