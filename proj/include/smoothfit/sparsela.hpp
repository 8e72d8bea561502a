#pragma once

#include <memory>
#include <vector>

#include "smoothfit/types.hpp"

namespace smoothfit {

// perm[k] = original index placed at position k, i.e. (P A P')_{ij} = A_{perm[i], perm[j]}.
IVec fill_reducing_permutation(const SpMat& A);

// Symbolic analysis of P A P' for a fixed sparsity pattern. Reused across refactorizations
// whose pattern is unchanged (H + S_lambda keeps its pattern across lambda iterations).
struct CholSymbolic {
  int n = 0;
  IVec perm, pinv;
  std::vector<int> parent;  // elimination tree
  std::vector<int> Lp;      // column pointers of L
  long long pattern_key = 0;
};

std::shared_ptr<const CholSymbolic> chol_analyze(const SpMat& A, const IVec* perm = nullptr);

struct CholeskyFactor {
  SpMat L;  // lower triangular, diagonal stored first in each column
  IVec perm;
  IVec pinv;  // pinv[perm[k]] = k
  double logdet = 0.0;
  std::shared_ptr<const CholSymbolic> symbolic;

  int n() const { return static_cast<int>(L.rows()); }
  // x = A^{-1} b
  Vec solve(const Vec& b) const;
  Mat solve(const Mat& B) const;
  // L^{-1} P b
  Vec half_solve(const Vec& b) const;
  // P' L^{-T} z
  Vec half_solve_transpose(const Vec& z) const;
  // L L' = P A P' reconstructed in original ordering (dense, for tests)
  Mat reconstruct() const;
  double density() const;  // nnz(L) / n^2
};

// Throws IndefiniteError(k) on a non-positive pivot k (permuted index).
CholeskyFactor pivoted_cholesky(const SpMat& A,
                                std::shared_ptr<const CholSymbolic> sym = nullptr);

struct QRFactor {
  SpMat R;                 // upper triangular on retained columns, permuted order
  IVec perm;               // positions -> retained-column index
  std::vector<int> kept;   // original column indices retained
  std::vector<int> dropped;
  Vec qtb;                 // rotated right-hand side (size of kept)
  double rss = 0.0;        // residual sum of squares of the stacked system
  bool has_rhs = false;

  // Solution on retained columns (in `kept` order); requires a right-hand side.
  Vec solve_kept() const;
  // Cholesky-style view: L = R', same permutation, of X'X + S on kept columns.
  CholeskyFactor as_cholesky() const;
};

inline constexpr double kHeathTol = 1e-7;

// QR of the stacked [X; E'] with E E' = S_lambda. Columns with |R_jj| < tol * max|R_ii| are
// dropped and the reduced system refactored. rhs (length rows(X)) is optional.
QRFactor penalized_qr(const SpMat& X, const SpMat& E, const Vec* rhs = nullptr,
                      double tol = kHeathTol);

// Cline/LINPACK-style estimate of the 2-norm condition number of A = L L'.
double condition_estimate(const CholeskyFactor& f);
double condition_estimate(const QRFactor& f);

SpMat invert_lower(const SpMat& L);

// Forward solve L x = b in place, skipping leading zeros of b starting at `start`.
void lower_solve_inplace(const SpMat& L, double* x, int start = 0);
void lower_transpose_solve_inplace(const SpMat& L, double* x);

// tr(A^{-1} S) with S = D D' : || L^{-1} P D ||_F^2, solving only non-zero columns of D.
double trace_inv_form(const CholeskyFactor& f, const SpMat& D);

struct LURank {
  Mat LU;       // packed unit-lower L and upper U
  IVec piv;     // row permutation
  bool structurally_singular = false;
  int perturbed_pivots = 0;
  double sigma_min = 0.0;
  Vec v;        // approximate right singular vector for sigma_min
};

// Dense partial-pivot LU with tiny-pivot perturbation, then inverse iteration for the
// smallest singular pair of the symmetric matrix A.
LURank stable_lu_rank(const SpMat& A);

// Helpers shared by the solver modules.
SpMat sparse_from_dense(const Mat& M, double droptol = 0.0);
bool is_symmetric(const SpMat& A, double tol = 1e-12);

}  // namespace smoothfit
