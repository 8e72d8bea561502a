#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smoothfit/design.hpp"
#include "smoothfit/families.hpp"
#include "smoothfit/solver_efs.hpp"
#include "smoothfit/types.hpp"

namespace smoothfit {

// Thresholds for V^rho: a log-lambda is dropped when both |dV/drho_r| and |d2V/drho_r^2| fall
// below kRhoDropRel * max(1, |V|); the retained block gets a ridge of kRhoRidgeRel * max diag.
inline constexpr double kRhoDropRel = 1e-5;
inline constexpr double kRhoRidgeRel = 1e-8;
inline constexpr int kDefaultSamples = 250;
inline constexpr double kTProposalDf = 4.0;
inline constexpr double kMinEss = 10.0;

// Everything a refit at a new lambda needs. Exactly one of the three model kinds is used,
// chosen from FitState::kind: additive (design + y), gam (design + y + fam + link),
// gsmm / lqefs (design + general).
struct ModelRef {
  const PenalizedDesign* design = nullptr;
  const Vec* y = nullptr;  // internal row order
  const ExponentialFamily* fam = nullptr;
  const LinkFunction* link = nullptr;
  const GeneralFamily* general = nullptr;
};

// Hessian of the REML criterion over rho = log(lambda) with H treated as fixed (exact for
// Gaussian additive models). phi is held at fit.phi.
Mat reml_hessian_rho(const FitState& fit);

// d beta-hat / d rho_r = -lambda_r A^{-1} S^r beta-hat, N_p x N_lambda (zero rows for dropped
// coefficients).
Mat dbeta_drho(const FitState& fit);

struct RhoPosterior {
  Vec rho_hat;
  Mat V_rho;                  // N_lambda x N_lambda, zero rows/cols on dropped dims
  std::vector<int> dropped_dims;
  double regularization_added = 0.0;
  Mat hessian;                // d2V/drho drho' before regularization
  std::vector<std::string> flags;
};

RhoPosterior rho_posterior(const FitState& fit);

// Conditional covariance V = phi A^{-1}, N_p x N_p (zero on dropped coefficients).
Mat conditional_cov(const FitState& fit);
// V^J = J V^rho J'.
Mat vj_correction(const FitState& fit, const RhoPosterior& post);
// V + V^J.
Mat vcorr_pql(const FitState& fit, const RhoPosterior& post);

enum class AicVariant { conventional, pql_corrected, mc_gaussian, mc_general };
std::string aic_variant_name(AicVariant v);
AicVariant aic_variant_from_name(const std::string& s);

struct AicReport {
  double llk = 0.0;
  double tau = 0.0;        // tr(V H)
  double tau_prime = 0.0;  // corrected edf (equals tau for the conventional variant)
  AicVariant variant = AicVariant::conventional;
  double caic = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
  double ess = 0.0;        // effective sample size of the MC weights
  std::vector<std::string> flags;

  double edf_used() const { return variant == AicVariant::conventional ? tau : tau_prime; }
};

// Conventional or PQL-corrected cAIC. The corrected variant computes V^rho from the fit.
AicReport caic(const FitState& fit, AicVariant variant = AicVariant::conventional);

// tr(V^J H): the PQL correction to the edf.
double tau_correction_pql(const FitState& fit, const RhoPosterior& post);

struct MCOptions {
  int n_samples = kDefaultSamples;
  std::uint64_t seed = 0;
  bool lower_bound = true;
  int threads = 1;
};

// Monte Carlo tau' for Gaussian additive models: equal weights over rho_r ~ N(rho-hat, V^rho).
AicReport mc_tau_gaussian(const FitState& fit, const MCOptions& o = {});
AicReport mc_tau_gaussian(const FitState& fit, const RhoPosterior& post, const MCOptions& o = {});

enum class Proposal { normal, t };
enum class RhoPrior { proposal, uniform_box };

struct MCGeneralOptions : MCOptions {
  Proposal proposal = Proposal::normal;
  RhoPrior prior = RhoPrior::proposal;
  bool hessian_at_mean = false;  // re-evaluate H at the weighted mean of the refit betas
};

// Importance-weighted Monte Carlo tau' for any supported model.
AicReport mc_tau_general(const FitState& fit, const ModelRef& model,
                         const MCGeneralOptions& o = {});
AicReport mc_tau_general(const FitState& fit, const ModelRef& model, const RhoPosterior& post,
                         const MCGeneralOptions& o = {});

// Per-sample quantities used by the MC estimators (exposed for tests).
struct RhoSample {
  Vec rho;
  Vec beta;          // full length
  double reml = 0.0;
  double log_w = 0.0;  // log prior - log proposal (before adding V)
  double trace = 0.0;  // tr([V]^rho H)
};

// Weighted three-term estimate from samples; weights are normalized internally from
// reml + log_w. *ess receives the effective sample size.
double tau_from_samples(const std::vector<RhoSample>& samples, const SpMat& H, double phi,
                        double* ess = nullptr, Vec* beta_mean = nullptr);

// Refit at lambda with everything else as in `fit`; reml uses phi fixed at fit.phi for
// additive models.
FitState refit_at(const FitState& fit, const ModelRef& model, const Vec& lambda);

// n draws (columns) from N(beta-hat, V).
Mat sample_beta_conditional(const FitState& fit, int n, std::uint64_t seed);

struct CredibleIntervals {
  Vec center, half_width, lower, upper;
  bool approximate = false;  // L-qEFS fits
};

// Intervals for X_pred beta (X_pred has N_p columns) at the given level.
CredibleIntervals credible_intervals(const FitState& fit, const SpMat& X_pred, double level = 0.95);

}  // namespace smoothfit
