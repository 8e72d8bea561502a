#pragma once

#include <memory>
#include <string>
#include <vector>

#include "smoothfit/design.hpp"
#include "smoothfit/families.hpp"
#include "smoothfit/sparsela.hpp"
#include "smoothfit/types.hpp"

namespace smoothfit {

inline constexpr double kRhoMin = -12.0;
inline constexpr double kRhoMax = 12.0;
inline constexpr double kQuadFloor = 1e-14;
inline constexpr double kPhiFloor = 1e-12;

enum class LambdaControl { none, gradient_check };
enum class SolveMethod { cholesky, qr };

struct EFSControl {
  int max_outer = 200;
  int max_inner = 1;
  double tol = 1e-7;
  LambdaControl control_lambda = LambdaControl::gradient_check;
  SolveMethod method = SolveMethod::cholesky;
  bool stabilize = true;              // GSMM: block transform + diagonal preconditioning
  bool retest_unidentifiable = false; // re-run detection every outer iteration
  bool foster = false;                // LU/Foster elimination instead of pivoted QR
  bool restrict_subblock = true;      // only test parametric / kernel-carrying columns
  double cond_threshold = 1e10;
  int max_newton = 100;
};

// Cholesky of A = T D^{-1} C D^{-1} T' where C = D T' A T D is factored with a fill-reducing
// permutation. With T = I and D = I this is a plain sparse Cholesky of A.
class HFactor {
 public:
  HFactor() = default;
  static HFactor plain(const SpMat& A, std::shared_ptr<const CholSymbolic> sym = nullptr);
  // T (orthogonal, may be empty for identity) and diagonal preconditioning.
  static HFactor stabilized(const SpMat& A, const SpMat& T, bool precondition,
                            std::shared_ptr<const CholSymbolic> sym = nullptr);
  static HFactor from_cholesky(CholeskyFactor f);

  int n() const { return chol_.n(); }
  bool empty() const { return chol_.n() == 0; }
  Vec solve(const Vec& b) const;
  Mat solve(const Mat& B) const;
  double logdet() const;
  // tr(A^{-1} R R')
  double trace_inv(const SpMat& R) const;
  // x with cov(x) = A^{-1} when z ~ N(0, I)
  Vec half_inverse_apply(const Vec& z) const;
  // L^{-1} P D T' b, so that b' A^{-1} b = ||half_solve(b)||^2
  Vec half_solve(const Vec& b) const;
  double density() const { return chol_.density(); }
  double condition() const;
  const CholeskyFactor& chol() const { return chol_; }
  bool zero_diag_flag() const { return zero_diag_; }

 private:
  CholeskyFactor chol_;
  SpMat T_;
  Vec d_;  // preconditioner diagonal (empty: identity)
  bool zero_diag_ = false;
};

class CompactRep;

struct FitState {
  std::string kind;            // additive | gam | gsmm
  Vec beta;                    // length N_p, dropped coefficients are zero
  Vec lambda;
  double phi = 1.0;
  bool has_phi = false;
  std::vector<int> kept, dropped;
  PenaltyAlgebra pen;          // restricted to kept coefficients
  HFactor factor;              // A = Hll + S_lambda + eps_H I on kept coefficients
  SpMat Hll;                   // X'WX (AM/GAM) or negative log-likelihood Hessian (GSMM)
  double eps_H = 0.0;
  Vec trA, trS, quad;          // tr(A^{-1}S^r), tr(S^- S^r), beta'S^r beta
  Vec grad_rho;                // dV/drho
  double edf = 0.0;
  Vec term_edf;
  double reml = 0.0;
  double llk = 0.0;
  double penalized_llk = 0.0;
  double pen_deviance = 0.0;
  Mat eta;                     // internal row order, N x n_params
  Vec mu;                      // AM/GAM response scale
  Vec w, z;                    // AM/GAM working weights and pseudo-data
  int N = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> flags;
  std::vector<double> pen_dev_trace;  // accepted penalized deviance per outer iteration
  std::shared_ptr<const CompactRep> hessian_rep;  // L-qEFS fits: compact approximation of Hll

  Vec beta_kept() const { return beta(kept); }
};

// Penalized normal equations (X'WX + S) beta = X'W r.
struct PenalizedSolve {
  Vec beta;                    // on kept columns
  HFactor factor;
  std::vector<int> kept, dropped;
};
PenalizedSolve solve_penalized(const SpMat& X, const Vec& response, const Vec& w, const SpMat& S,
                               SolveMethod method, const SpMat* E = nullptr);

// New lambda from the EFS update, clamped; *flag set when the quadratic form vanished.
double efs_update(double lambda, double tr_S, double tr_A, double quad, double phi,
                  bool* flag = nullptr);
// The increment new_lambda - lambda.
double efs_step(double lambda, double tr_S, double tr_A, double quad, double phi,
                bool* flag = nullptr);
double clamp_lambda(double lambda);

// V = llk - b'S b/(2 phi) + (logdet+(S) - r_S log phi)/2 - (logdet(A) - n log phi)/2
double reml_value(double llk, double pen_quad, double logdet_S, int rank_S, double logdet_A,
                  int n_coef, double phi);
// dV/drho_r = lambda_r (-q_r/(2 phi) + tr_S/2 - tr_A/2)
Vec reml_grad_rho(const Vec& lambda, const Vec& quad, const Vec& trS, const Vec& trA, double phi);
// (||sqrt(W)(z - X beta)||^2 + beta'S beta) / (N - M_p), floored.
double estimate_phi(double pen_rss, int N, int M_p);

FitState fit_additive(const PenalizedDesign& d, const Vec& y, const EFSControl& c = {});
FitState fit_gam(const PenalizedDesign& d, const Vec& y, const ExponentialFamily& fam,
                 const LinkFunction& link, const EFSControl& c = {});
// PIRLS at fixed lambda; returns a complete state (no lambda iteration).
FitState refit_gam_at(const PenalizedDesign& d, const Vec& y, const ExponentialFamily& fam,
                      const LinkFunction& link, const Vec& lambda, const EFSControl& c = {},
                      const std::vector<int>* kept = nullptr);

// ------------------------------------------------------------------ general smooth models

struct NewtonResult {
  Vec beta;        // kept coordinates
  HFactor factor;
  SpMat H;         // negative llk Hessian at beta
  Vec grad;        // llk gradient at beta
  double eps_H = 0.0;
  double max_eps = 0.0;
  double pen_llk = 0.0;
  int iterations = 0;
};

NewtonResult newton_beta(const GeneralFamily& fam, const PenaltyAlgebra& pen,
                         const std::vector<int>& kept, const Vec& lambda, const Vec& beta0_kept,
                         const EFSControl& c = {});

// Raises eps until tr(S^- S^r) >= tr(A^{-1} S^r) for every r. Returns the new eps and factor.
double make_efs_safe(const SpMat& H, const PenaltyAlgebra& pen, const Vec& lambda, double eps,
                     HFactor* factor, const EFSControl& c = {});

// Factor of H + S_lambda + eps I in the (optionally) stabilized parameterization.
HFactor factor_penalized(const SpMat& H, const PenaltyAlgebra& pen, const Vec& lambda,
                         double eps, const EFSControl& c = {},
                         std::shared_ptr<const CholSymbolic> sym = nullptr);

// Local indices (into pen's coefficients) to drop.
std::vector<int> detect_unidentifiable(const SpMat& H, const PenaltyAlgebra& pen,
                                       const EFSControl& c = {});

FitState fit_gsmm(const PenalizedDesign& d, const GeneralFamily& fam, const EFSControl& c = {},
                  const Vec* beta0 = nullptr);
FitState refit_gsmm_at(const PenalizedDesign& d, const GeneralFamily& fam, const Vec& lambda,
                       const EFSControl& c = {}, const Vec* beta0 = nullptr,
                       const std::vector<int>* kept = nullptr);

// General-family view of a design: coxph, gaussian_ls, gamma_ls, or an exponential family
// with fixed unit scale. Rows follow the design's internal order (coxph re-sorts by time
// internally).
std::unique_ptr<GeneralFamily> general_family_for(const PenalizedDesign& d,
                                                  const DataTable& data);

// Per-term effective degrees of freedom from a finished state.
Vec term_edf(const PenalizedDesign& d, const FitState& s);

}  // namespace smoothfit
