#pragma once

#include <functional>
#include <string>
#include <vector>

#include "smoothfit/types.hpp"

namespace smoothfit {

enum class LinkKind { identity, log, logit, inverse };

struct LinkFunction {
  LinkKind kind = LinkKind::identity;

  static LinkFunction from_name(const std::string& name);
  std::string name() const;
  double g(double mu) const;
  double ginv(double eta) const;
  double dg(double mu) const;  // g'(mu)
};

enum class FamilyKind { gaussian, gamma, binomial, poisson, inverse_gaussian };

inline constexpr double kMuFloor = 1e-8;

struct ExponentialFamily {
  FamilyKind kind = FamilyKind::gaussian;

  static ExponentialFamily from_name(const std::string& name);
  std::string name() const;
  bool has_scale() const;
  double variance(double mu) const;
  double log_density(double y, double mu, double phi) const;
  double unit_deviance(double y, double mu) const;
  LinkFunction default_link() const;
  // Throws SpecError naming the row when y is outside the family's support.
  void check_response(const Vec& y) const;
  double initial_mu(double y) const;
};

// Clamp mu into the valid domain for (family, link). Sets *clamped when moved.
double clamp_mu(double mu, const ExponentialFamily& fam, const LinkFunction& link,
                bool* clamped = nullptr);

struct PseudoData {
  Vec z, w;
  int n_clamped = 0;
};

PseudoData pseudo_data(const Vec& y, const Vec& mu, const LinkFunction& link,
                       const ExponentialFamily& fam);

// ------------------------------------------------------------------ GAMLSS

enum class LSFamily { gaussian_ls, gamma_ls };

LSFamily ls_family_from_name(const std::string& name);
std::string ls_family_name(LSFamily f);

// Per-observation partials of the log-density w.r.t. the two linear predictors.
// GaussianLS: (mu, log sigma). GammaLS: (log mu, log phi).
struct GamlssPartials {
  Mat d1;   // N x 2 first partials
  Mat d2;   // N x 2 pure second partials
  Mat d12;  // N x 1 mixed partials, identically zero (expected cross information)
};

double gamlss_llk(LSFamily fam, const Vec& y, const Mat& eta);
GamlssPartials gamlss_partials(LSFamily fam, const Vec& y, const Mat& eta);

struct GsmmDerivs {
  Vec grad;
  SpMat H;  // negative Hessian of the log-likelihood, block diagonal over parameters
};

GsmmDerivs assemble_gsmm_derivs(const GamlssPartials& p, const std::vector<SpMat>& X_blocks);

// ------------------------------------------------------------------ Cox PH

struct SurvivalData {
  Vec t;         // recorded times, non-increasing
  IVec delta;    // event indicators
  Vec unique_times;
  IVec counts;   // r_l: events at unique_times[l]
  std::vector<int> group_start;  // first index of each tie group (size groups + 1)

  SurvivalData() = default;
  // Validates ordering; throws SpecError when t is not sorted non-increasing.
  SurvivalData(const Vec& t, const IVec& delta);
  // Sorts (t, delta) non-increasing. order[i] is the input row placed at position i.
  static SurvivalData sorted(const Vec& t, const IVec& delta, std::vector<int>* order);
  int n() const { return static_cast<int>(t.size()); }
};

double coxph_llk(const SurvivalData& d, const Vec& eta);
Vec coxph_grad(const SurvivalData& d, const Vec& eta, const SpMat& X);
// Negative Hessian of the partial log-likelihood (dense, PSD).
Mat coxph_hess(const SurvivalData& d, const Vec& eta, const SpMat& X);

// ------------------------------------------------------------------ general families

// Central finite-difference gradient, step 1e-6 * (1 + |beta_j|).
Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& beta);

class GeneralFamily {
 public:
  virtual ~GeneralFamily() = default;
  virtual std::string name() const = 0;
  virtual int n_coef() const = 0;
  virtual double llk(const Vec& beta) const = 0;
  virtual bool has_grad() const { return true; }
  virtual Vec grad(const Vec& beta) const;  // defaults to finite differences
  virtual bool has_hessian() const { return true; }
  virtual SpMat neg_hessian(const Vec& beta) const = 0;
  // Linear predictors (N x n_params) for reporting.
  virtual Mat eta(const Vec& beta) const = 0;
};

class CoxFamily : public GeneralFamily {
 public:
  CoxFamily(SurvivalData data, SpMat X);
  std::string name() const override { return "coxph"; }
  int n_coef() const override { return static_cast<int>(X_.cols()); }
  double llk(const Vec& beta) const override;
  Vec grad(const Vec& beta) const override;
  SpMat neg_hessian(const Vec& beta) const override;
  Mat eta(const Vec& beta) const override { return X_ * beta; }
  const SurvivalData& data() const { return data_; }

 private:
  SurvivalData data_;
  SpMat X_;
};

class GamlssFamily : public GeneralFamily {
 public:
  GamlssFamily(LSFamily fam, Vec y, std::vector<SpMat> X_blocks);
  std::string name() const override { return ls_family_name(fam_); }
  int n_coef() const override { return n_coef_; }
  double llk(const Vec& beta) const override;
  Vec grad(const Vec& beta) const override;
  SpMat neg_hessian(const Vec& beta) const override;
  Mat eta(const Vec& beta) const override;

 private:
  LSFamily fam_;
  Vec y_;
  std::vector<SpMat> X_;
  int n_coef_ = 0;
};

// Exponential-family model with fixed scale; Hessian is the Fisher information X'WX/phi.
class GlmFamily : public GeneralFamily {
 public:
  GlmFamily(ExponentialFamily fam, LinkFunction link, Vec y, SpMat X, double phi = 1.0);
  std::string name() const override { return fam_.name(); }
  int n_coef() const override { return static_cast<int>(X_.cols()); }
  double llk(const Vec& beta) const override;
  Vec grad(const Vec& beta) const override;
  SpMat neg_hessian(const Vec& beta) const override;
  Mat eta(const Vec& beta) const override { return X_ * beta; }

 private:
  ExponentialFamily fam_;
  LinkFunction link_;
  Vec y_;
  SpMat X_;
  double phi_;
};

// Wraps another family and hides its gradient and/or Hessian (for gradient-free fitting).
class RestrictedFamily : public GeneralFamily {
 public:
  RestrictedFamily(const GeneralFamily& base, bool expose_grad, bool expose_hessian)
      : base_(base), grad_(expose_grad), hess_(expose_hessian) {}
  std::string name() const override { return base_.name(); }
  int n_coef() const override { return base_.n_coef(); }
  double llk(const Vec& beta) const override { return base_.llk(beta); }
  bool has_grad() const override { return grad_; }
  Vec grad(const Vec& beta) const override;
  bool has_hessian() const override { return hess_; }
  SpMat neg_hessian(const Vec& beta) const override;
  Mat eta(const Vec& beta) const override { return base_.eta(beta); }

 private:
  const GeneralFamily& base_;
  bool grad_, hess_;
};

}  // namespace smoothfit
