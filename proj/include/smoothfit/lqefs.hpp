#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>

#include "smoothfit/design.hpp"
#include "smoothfit/families.hpp"
#include "smoothfit/solver_efs.hpp"
#include "smoothfit/sparsela.hpp"
#include "smoothfit/types.hpp"

namespace smoothfit {

struct UpdatePair {
  Vec s;   // step
  Vec nu;  // change of the negative gradient along s
};

enum class CompactKind { bfgs_inverse, bfgs_hessian, sr1_inverse, sr1_hessian, psd_projected };

// base * I + outer * inner * outer'. Hessian kinds use base = 1/gamma, inverse kinds base = gamma.
// gamma follows the newest pair (s'nu/nu'nu; s's/s'nu for sr1_inverse) unless fixed_gamma > 0.
class CompactRep {
 public:
  CompactRep() = default;
  CompactRep(CompactKind kind, int n, int max_pairs, double fixed_gamma = 0.0);

  CompactKind kind() const { return kind_; }
  int n() const { return n_; }
  int max_pairs() const { return max_pairs_; }
  int size() const { return static_cast<int>(queue_.size()); }
  double gamma() const { return gamma_; }
  double base() const { return base_; }
  const Mat& outer() const { return outer_; }
  const Mat& inner() const { return inner_; }
  const std::deque<UpdatePair>& queue() const { return queue_; }

  Vec matvec(const Vec& a) const;
  Mat dense() const;  // tests only
  // Doubles held by the queue, cross products and outer/inner blocks.
  long storage() const;

  static CompactRep projected(int n, double base, Mat P, Vec sigma);

 private:
  friend CompactRep compact_push(const CompactRep&, const UpdatePair&, bool*);
  void rebuild();

  CompactKind kind_ = CompactKind::bfgs_inverse;
  int n_ = 0;
  int max_pairs_ = 0;
  std::deque<UpdatePair> queue_;
  Mat StY_, StS_, YtY_;  // cross products of the queue, updated incrementally
  double gamma_ = 1.0;
  double fixed_gamma_ = 0.0;
  double base_ = 1.0;
  Mat outer_, inner_;
  Mat mid_;  // SR1: inner = mid^{-1}
};

inline constexpr double kCurvatureSkip = 1e-10;
inline constexpr double kSr1Skip = 1e-8;

// New rep with the pair appended (oldest pair discarded when full). *skipped is set when the
// pair fails the curvature (BFGS) or denominator (SR1) guard; the input is then returned.
CompactRep compact_push(const CompactRep& rep, const UpdatePair& pair, bool* skipped = nullptr);
Vec compact_matvec(const CompactRep& rep, const Vec& a);

// Nearest (Frobenius) positive semi-definite matrix of a compact rep via a thin QR of the
// outer block and an eigendecomposition of R inner R'.
CompactRep implicit_nearest_psd(const CompactRep& rep, bool* changed = nullptr);

// (H + S_lambda)^{-1} for a Hessian-kind rep H = base I + Q C Q':
// [H0]^{-1} - M A^{-1} N with H0 = base I + S_lambda, M = H0^{-1} Q, A = I + C Q' M, N = C M'.
class PenalizedInverseRep {
 public:
  PenalizedInverseRep() = default;
  PenalizedInverseRep(const CompactRep& h, const SpMat& S_lambda);
  int n() const { return h0_.n(); }
  Vec matvec(const Vec& x) const;
  // tr((H + S_lambda)^{-1} D D')
  double trace(const SpMat& D) const;
  const HFactor& h0() const { return h0_; }
  long storage() const { return M_.size() + C_.size() + Ainv_.size(); }

 private:
  HFactor h0_;
  Mat M_, C_, Ainv_;
};

PenalizedInverseRep penalized_inverse(const CompactRep& h, const SpMat& S_lambda);
double compact_trace_penalty(const PenalizedInverseRep& inv, const SpMat& D);

// Cholesky of H + S_lambda from the stacked QR of [K'; E'Q'] with K K' = base I + S_lambda and
// E E' = C. Negative eigenvalues of C are removed afterwards by rank-one downdates.
CholeskyFactor cholesky_of_compact(const CompactRep& h, const SpMat& S_lambda);

// ------------------------------------------------------------------ line searches

inline constexpr double kWolfeC1 = 1e-4;
inline constexpr double kWolfeC2 = 0.9;
inline constexpr int kArmijoMaxEval = 30;

using Objective = std::function<double(const Vec&)>;
using Gradient = std::function<Vec(const Vec&)>;

struct LineSearchResult {
  double alpha = 0.0;
  double f = 0.0;
  Vec grad;  // at x + alpha d (Wolfe only)
  int evaluations = 0;
};

// Maximization. Both throw SpecError when d is not an ascent direction; an empty optional
// signals that no acceptable step was found.
std::optional<LineSearchResult> wolfe_search(const Objective& f, const Gradient& grad,
                                             const Vec& x, const Vec& d, double f0,
                                             const Vec& g0, int max_eval = 40);
std::optional<LineSearchResult> armijo_search(const Objective& f, const Vec& x, const Vec& d,
                                              double f0, const Vec& g0,
                                              int max_eval = kArmijoMaxEval);

// ------------------------------------------------------------------ L-qEFS

// t_r = (tr(S^- S^r) - tr(V' S^r)) - beta' S^r beta for the current and the last accepted
// inverse; returns true when the current one is used (ties keep the current one).
bool qefs_accept(const Vec& trS, const Vec& trA_current, const Vec& trA_last, const Vec& quad);

enum class QNUpdate { sr1, bfgs };

struct LQEFSControl {
  int n_v = 30;
  int n_i = 100;           // phase-1 iterations are bounded by n_i - n_v
  QNUpdate update = QNUpdate::sr1;
  LambdaControl control_lambda = LambdaControl::none;
  int max_outer = 100;
  double tol = 1e-6;       // relative change of the penalized log-likelihood
  double rho_tol = 1e-2;   // max change of log lambda between outer iterations
  int phase2_cap_factor = 5;
  int init_gradient_steps = 5;
  std::uint64_t seed = 0;
};

struct LQEFSStats {
  long peak_storage = 0;   // doubles held by compact reps and the Woodbury blocks
  int phase1_steps = 0;
  int phase2_steps = 0;
  int gradient_fallbacks = 0;
  int restarts = 0;
  int kept_last_inverse = 0;
};

FitState lqefs_fit(const PenalizedDesign& d, const GeneralFamily& fam,
                   const LQEFSControl& c = {}, const Vec* beta0 = nullptr,
                   LQEFSStats* stats = nullptr);

}  // namespace smoothfit
