#include "smoothfit/families.hpp"

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <cmath>
#include <numeric>
#include <string>

#include "smoothfit/errors.hpp"
#include "smoothfit/sparsela.hpp"

namespace smoothfit {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;

double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }

double log_add_exp(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}
}  // namespace

// ------------------------------------------------------------------ links

LinkFunction LinkFunction::from_name(const std::string& name) {
  if (name == "identity") return {LinkKind::identity};
  if (name == "log") return {LinkKind::log};
  if (name == "logit") return {LinkKind::logit};
  if (name == "inverse") return {LinkKind::inverse};
  throw SpecError("unknown link '" + name + "'");
}

std::string LinkFunction::name() const {
  switch (kind) {
    case LinkKind::identity: return "identity";
    case LinkKind::log: return "log";
    case LinkKind::logit: return "logit";
    case LinkKind::inverse: return "inverse";
  }
  return "?";
}

double LinkFunction::g(double mu) const {
  switch (kind) {
    case LinkKind::identity: return mu;
    case LinkKind::log: return std::log(mu);
    case LinkKind::logit: return std::log(mu / (1.0 - mu));
    case LinkKind::inverse: return 1.0 / mu;
  }
  return mu;
}

double LinkFunction::ginv(double eta) const {
  switch (kind) {
    case LinkKind::identity: return eta;
    case LinkKind::log: return std::exp(eta);
    case LinkKind::logit:
      return eta >= 0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
    case LinkKind::inverse: return 1.0 / eta;
  }
  return eta;
}

double LinkFunction::dg(double mu) const {
  switch (kind) {
    case LinkKind::identity: return 1.0;
    case LinkKind::log: return 1.0 / mu;
    case LinkKind::logit: return 1.0 / (mu * (1.0 - mu));
    case LinkKind::inverse: return -1.0 / (mu * mu);
  }
  return 1.0;
}

// ------------------------------------------------------------------ exponential families

ExponentialFamily ExponentialFamily::from_name(const std::string& name) {
  if (name == "gaussian") return {FamilyKind::gaussian};
  if (name == "gamma") return {FamilyKind::gamma};
  if (name == "binomial") return {FamilyKind::binomial};
  if (name == "poisson") return {FamilyKind::poisson};
  if (name == "inverse_gaussian") return {FamilyKind::inverse_gaussian};
  throw SpecError("unknown family '" + name + "'");
}

std::string ExponentialFamily::name() const {
  switch (kind) {
    case FamilyKind::gaussian: return "gaussian";
    case FamilyKind::gamma: return "gamma";
    case FamilyKind::binomial: return "binomial";
    case FamilyKind::poisson: return "poisson";
    case FamilyKind::inverse_gaussian: return "inverse_gaussian";
  }
  return "?";
}

bool ExponentialFamily::has_scale() const {
  return kind != FamilyKind::binomial && kind != FamilyKind::poisson;
}

double ExponentialFamily::variance(double mu) const {
  switch (kind) {
    case FamilyKind::gaussian: return 1.0;
    case FamilyKind::gamma: return mu * mu;
    case FamilyKind::binomial: return mu * (1.0 - mu);
    case FamilyKind::poisson: return mu;
    case FamilyKind::inverse_gaussian: return mu * mu * mu;
  }
  return 1.0;
}

double ExponentialFamily::log_density(double y, double mu, double phi) const {
  switch (kind) {
    case FamilyKind::gaussian: return -0.5 * (y - mu) * (y - mu) / phi - 0.5 * (kLog2Pi + std::log(phi));
    case FamilyKind::gamma: {
      const double th = 1.0 / phi;
      return th * std::log(th * y / mu) - th * y / mu - std::log(y) - std::lgamma(th);
    }
    case FamilyKind::binomial: return xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu);
    case FamilyKind::poisson: return xlogy(y, mu) - mu - std::lgamma(y + 1.0);
    case FamilyKind::inverse_gaussian:
      return -0.5 * (kLog2Pi + std::log(phi) + 3.0 * std::log(y)) -
             (y - mu) * (y - mu) / (2.0 * phi * mu * mu * y);
  }
  return 0.0;
}

double ExponentialFamily::unit_deviance(double y, double mu) const {
  switch (kind) {
    case FamilyKind::gaussian: return (y - mu) * (y - mu);
    case FamilyKind::gamma: return 2.0 * (-std::log(y / mu) + (y - mu) / mu);
    case FamilyKind::binomial:
      return 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu)));
    case FamilyKind::poisson: return 2.0 * (xlogy(y, y / mu) - (y - mu));
    case FamilyKind::inverse_gaussian: return (y - mu) * (y - mu) / (mu * mu * y);
  }
  return 0.0;
}

LinkFunction ExponentialFamily::default_link() const {
  switch (kind) {
    case FamilyKind::gaussian: return {LinkKind::identity};
    case FamilyKind::gamma: return {LinkKind::log};
    case FamilyKind::binomial: return {LinkKind::logit};
    case FamilyKind::poisson: return {LinkKind::log};
    case FamilyKind::inverse_gaussian: return {LinkKind::log};
  }
  return {LinkKind::identity};
}

void ExponentialFamily::check_response(const Vec& y) const {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double v = y[i];
    bool ok = std::isfinite(v);
    switch (kind) {
      case FamilyKind::gaussian: break;
      case FamilyKind::gamma:
      case FamilyKind::inverse_gaussian: ok = ok && v > 0; break;
      case FamilyKind::binomial: ok = ok && v >= 0 && v <= 1; break;
      case FamilyKind::poisson: ok = ok && v >= 0; break;
    }
    if (!ok)
      throw SpecError(name() + " family: response " + std::to_string(v) + " at row " +
                      std::to_string(i) + " outside the family's support");
  }
}

double ExponentialFamily::initial_mu(double y) const {
  switch (kind) {
    case FamilyKind::gaussian: return y;
    case FamilyKind::gamma:
    case FamilyKind::inverse_gaussian: return std::max(y, kMuFloor);
    case FamilyKind::binomial: return (y + 0.5) / 2.0;
    case FamilyKind::poisson: return y + 0.1;
  }
  return y;
}

double clamp_mu(double mu, const ExponentialFamily& fam, const LinkFunction& link, bool* clamped) {
  double lo = -INFINITY, hi = INFINITY;
  if (link.kind == LinkKind::logit || fam.kind == FamilyKind::binomial) {
    lo = kMuFloor;
    hi = 1.0 - kMuFloor;
  } else if (link.kind == LinkKind::log || fam.kind != FamilyKind::gaussian) {
    lo = kMuFloor;
  }
  double m = std::clamp(mu, lo, hi);
  if (clamped) *clamped = (m != mu);
  return m;
}

PseudoData pseudo_data(const Vec& y, const Vec& mu, const LinkFunction& link,
                       const ExponentialFamily& fam) {
  if (y.size() != mu.size()) throw SpecError("pseudo_data: y and mu lengths differ");
  PseudoData pd;
  pd.z.resize(y.size());
  pd.w.resize(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    bool c = false;
    const double m = clamp_mu(mu[i], fam, link, &c);
    if (c) ++pd.n_clamped;
    const double d = link.dg(m);
    pd.z[i] = link.g(m) + d * (y[i] - m);
    pd.w[i] = 1.0 / (d * d * fam.variance(m));
  }
  return pd;
}

// ------------------------------------------------------------------ GAMLSS

LSFamily ls_family_from_name(const std::string& name) {
  if (name == "gaussian_ls") return LSFamily::gaussian_ls;
  if (name == "gamma_ls") return LSFamily::gamma_ls;
  throw SpecError("unknown location-scale family '" + name + "'");
}

std::string ls_family_name(LSFamily f) {
  return f == LSFamily::gaussian_ls ? "gaussian_ls" : "gamma_ls";
}

static void check_eta(const Vec& y, const Mat& eta) {
  if (eta.rows() != y.size() || eta.cols() != 2)
    throw SpecError("gamlss: expected N x 2 linear predictors");
  for (Eigen::Index i = 0; i < eta.rows(); ++i)
    if (!std::isfinite(eta(i, 0)) || !std::isfinite(eta(i, 1)))
      throw DomainError("gamlss: non-finite linear predictor at observation " + std::to_string(i));
}

double gamlss_llk(LSFamily fam, const Vec& y, const Mat& eta) {
  check_eta(y, eta);
  double s = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (fam == LSFamily::gaussian_ls) {
      const double mu = eta(i, 0), ls = eta(i, 1), r = (y[i] - mu) * std::exp(-ls);
      s += -0.5 * r * r - ls - 0.5 * kLog2Pi;
    } else {
      if (!(y[i] > 0)) throw DomainError("gamma_ls: non-positive response at observation " + std::to_string(i));
      const double mu = std::exp(eta(i, 0)), th = std::exp(-eta(i, 1));
      s += th * std::log(th * y[i] / mu) - th * y[i] / mu - std::log(y[i]) - std::lgamma(th);
    }
  }
  return s;
}

GamlssPartials gamlss_partials(LSFamily fam, const Vec& y, const Mat& eta) {
  check_eta(y, eta);
  const auto n = y.size();
  GamlssPartials p;
  p.d1.resize(n, 2);
  p.d2.resize(n, 2);
  p.d12 = Mat::Zero(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (fam == LSFamily::gaussian_ls) {
      const double mu = eta(i, 0), is2 = std::exp(-2.0 * eta(i, 1)), r = y[i] - mu;
      p.d1(i, 0) = r * is2;
      p.d1(i, 1) = r * r * is2 - 1.0;
      p.d2(i, 0) = -is2;
      p.d2(i, 1) = -2.0 * r * r * is2;
    } else {
      if (!(y[i] > 0)) throw DomainError("gamma_ls: non-positive response at observation " + std::to_string(i));
      const double mu = std::exp(eta(i, 0)), th = std::exp(-eta(i, 1));
      const double a = std::log(th * y[i] / mu) + 1.0 - y[i] / mu - boost::math::digamma(th);
      p.d1(i, 0) = th * (y[i] / mu - 1.0);
      p.d2(i, 0) = -th * y[i] / mu;
      p.d1(i, 1) = -th * a;
      p.d2(i, 1) = th * a + th - th * th * boost::math::trigamma(th);
    }
  }
  return p;
}

GsmmDerivs assemble_gsmm_derivs(const GamlssPartials& p, const std::vector<SpMat>& X_blocks) {
  if (static_cast<Eigen::Index>(X_blocks.size()) != p.d1.cols())
    throw SpecError("assemble_gsmm_derivs: one model matrix per parameter required");
  int total = 0;
  for (const auto& X : X_blocks) {
    if (X.rows() != p.d1.rows()) throw SpecError("assemble_gsmm_derivs: row count mismatch");
    total += static_cast<int>(X.cols());
  }
  GsmmDerivs out;
  out.grad.resize(total);
  std::vector<Triplet> t;
  int off = 0;
  for (size_t m = 0; m < X_blocks.size(); ++m) {
    const SpMat& X = X_blocks[m];
    out.grad.segment(off, X.cols()) = X.transpose() * p.d1.col(m);
    Vec w = -p.d2.col(m);
    SpMat B = SpMat(X.transpose() * w.asDiagonal() * X);
    for (int j = 0; j < B.outerSize(); ++j)
      for (SpMat::InnerIterator it(B, j); it; ++it) t.emplace_back(off + it.row(), off + j, it.value());
    off += static_cast<int>(X.cols());
  }
  out.H.resize(total, total);
  out.H.setFromTriplets(t.begin(), t.end());
  return out;
}

// ------------------------------------------------------------------ Cox PH

SurvivalData::SurvivalData(const Vec& tt, const IVec& dd) : t(tt), delta(dd) {
  if (t.size() != delta.size()) throw SpecError("SurvivalData: times and events differ in length");
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) throw SpecError("SurvivalData: non-finite time at row " + std::to_string(i));
    if (delta[i] != 0 && delta[i] != 1)
      throw SpecError("SurvivalData: event indicator must be 0/1 at row " + std::to_string(i));
    if (i > 0 && t[i] > t[i - 1])
      throw SpecError("SurvivalData: times must be sorted non-increasing (row " + std::to_string(i) + ")");
  }
  std::vector<double> ut;
  std::vector<int> cnt;
  for (int i = 0; i < static_cast<int>(t.size()); ++i) {
    if (i == 0 || t[i] != t[i - 1]) {
      group_start.push_back(i);
      ut.push_back(t[i]);
      cnt.push_back(0);
    }
    cnt.back() += delta[i];
  }
  group_start.push_back(static_cast<int>(t.size()));
  unique_times = Eigen::Map<Vec>(ut.data(), ut.size());
  counts = Eigen::Map<IVec>(cnt.data(), cnt.size());
}

SurvivalData SurvivalData::sorted(const Vec& t, const IVec& delta, std::vector<int>* order) {
  std::vector<int> o(t.size());
  std::iota(o.begin(), o.end(), 0);
  std::stable_sort(o.begin(), o.end(), [&](int a, int b) { return t[a] > t[b]; });
  Vec ts(t.size());
  IVec ds(t.size());
  for (size_t i = 0; i < o.size(); ++i) {
    ts[i] = t[o[i]];
    ds[i] = delta[o[i]];
  }
  if (order) *order = o;
  return SurvivalData(ts, ds);
}

double coxph_llk(const SurvivalData& d, const Vec& eta) {
  if (eta.size() != d.n()) throw SpecError("coxph_llk: eta length mismatch");
  double llk = 0.0, lse = -INFINITY;
  const size_t ng = d.group_start.size() - 1;
  for (size_t g = 0; g < ng; ++g) {
    double ev = 0.0;
    for (int i = d.group_start[g]; i < d.group_start[g + 1]; ++i) {
      lse = log_add_exp(lse, eta[i]);
      if (d.delta[i]) ev += eta[i];
    }
    if (d.counts[g] > 0) llk += ev - d.counts[g] * lse;
  }
  return llk;
}

Vec coxph_grad(const SurvivalData& d, const Vec& eta, const SpMat& X) {
  if (eta.size() != d.n() || X.rows() != d.n()) throw SpecError("coxph_grad: dimension mismatch");
  const int p = static_cast<int>(X.cols());
  Eigen::SparseMatrix<double, Eigen::RowMajor> Xr = X;
  const double m = eta.maxCoeff();
  Vec g = Vec::Zero(p), S1 = Vec::Zero(p);
  double S0 = 0.0;
  const size_t ng = d.group_start.size() - 1;
  for (size_t grp = 0; grp < ng; ++grp) {
    for (int i = d.group_start[grp]; i < d.group_start[grp + 1]; ++i) {
      const double e = std::exp(eta[i] - m);
      S0 += e;
      for (decltype(Xr)::InnerIterator it(Xr, i); it; ++it) {
        S1[it.col()] += e * it.value();
        if (d.delta[i]) g[it.col()] += it.value();
      }
    }
    if (d.counts[grp] > 0) g -= d.counts[grp] * S1 / S0;
  }
  return g;
}

Mat coxph_hess(const SurvivalData& d, const Vec& eta, const SpMat& X) {
  if (eta.size() != d.n() || X.rows() != d.n()) throw SpecError("coxph_hess: dimension mismatch");
  const int p = static_cast<int>(X.cols());
  Eigen::SparseMatrix<double, Eigen::RowMajor> Xr = X;
  const double m = eta.maxCoeff();
  Mat H = Mat::Zero(p, p), S2 = Mat::Zero(p, p);
  Vec S1 = Vec::Zero(p);
  double S0 = 0.0;
  const size_t ng = d.group_start.size() - 1;
  for (size_t grp = 0; grp < ng; ++grp) {
    for (int i = d.group_start[grp]; i < d.group_start[grp + 1]; ++i) {
      const double e = std::exp(eta[i] - m);
      S0 += e;
      for (decltype(Xr)::InnerIterator a(Xr, i); a; ++a) {
        S1[a.col()] += e * a.value();
        for (decltype(Xr)::InnerIterator b(Xr, i); b; ++b) S2(a.col(), b.col()) += e * a.value() * b.value();
      }
    }
    if (d.counts[grp] > 0) H += d.counts[grp] * (S2 / S0 - S1 * S1.transpose() / (S0 * S0));
  }
  return 0.5 * (H + H.transpose());
}

// ------------------------------------------------------------------ general families

Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& beta) {
  Vec g(beta.size()), b = beta;
  for (Eigen::Index j = 0; j < beta.size(); ++j) {
    const double h = 1e-6 * (1.0 + std::abs(beta[j]));
    b[j] = beta[j] + h;
    const double fp = f(b);
    b[j] = beta[j] - h;
    const double fm = f(b);
    b[j] = beta[j];
    g[j] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Vec GeneralFamily::grad(const Vec& beta) const {
  return fd_gradient([this](const Vec& b) { return llk(b); }, beta);
}

CoxFamily::CoxFamily(SurvivalData data, SpMat X) : data_(std::move(data)), X_(std::move(X)) {
  if (X_.rows() != data_.n()) throw SpecError("CoxFamily: design rows differ from survival data");
}

double CoxFamily::llk(const Vec& beta) const { return coxph_llk(data_, X_ * beta); }
Vec CoxFamily::grad(const Vec& beta) const { return coxph_grad(data_, X_ * beta, X_); }
SpMat CoxFamily::neg_hessian(const Vec& beta) const {
  return sparse_from_dense(coxph_hess(data_, X_ * beta, X_));
}

GamlssFamily::GamlssFamily(LSFamily fam, Vec y, std::vector<SpMat> X_blocks)
    : fam_(fam), y_(std::move(y)), X_(std::move(X_blocks)) {
  if (X_.size() != 2) throw SpecError("GamlssFamily: two model matrices required");
  for (const auto& X : X_) {
    if (X.rows() != y_.size()) throw SpecError("GamlssFamily: row count mismatch");
    n_coef_ += static_cast<int>(X.cols());
  }
}

Mat GamlssFamily::eta(const Vec& beta) const {
  Mat e(y_.size(), 2);
  int off = 0;
  for (int m = 0; m < 2; ++m) {
    e.col(m) = X_[m] * beta.segment(off, X_[m].cols());
    off += static_cast<int>(X_[m].cols());
  }
  return e;
}

double GamlssFamily::llk(const Vec& beta) const { return gamlss_llk(fam_, y_, eta(beta)); }
Vec GamlssFamily::grad(const Vec& beta) const {
  return assemble_gsmm_derivs(gamlss_partials(fam_, y_, eta(beta)), X_).grad;
}
SpMat GamlssFamily::neg_hessian(const Vec& beta) const {
  return assemble_gsmm_derivs(gamlss_partials(fam_, y_, eta(beta)), X_).H;
}

GlmFamily::GlmFamily(ExponentialFamily fam, LinkFunction link, Vec y, SpMat X, double phi)
    : fam_(fam), link_(link), y_(std::move(y)), X_(std::move(X)), phi_(phi) {
  fam_.check_response(y_);
}

double GlmFamily::llk(const Vec& beta) const {
  Vec e = X_ * beta;
  double s = 0.0;
  for (Eigen::Index i = 0; i < e.size(); ++i)
    s += fam_.log_density(y_[i], clamp_mu(link_.ginv(e[i]), fam_, link_), phi_);
  return s;
}

Vec GlmFamily::grad(const Vec& beta) const {
  Vec e = X_ * beta, r(e.size());
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    const double mu = clamp_mu(link_.ginv(e[i]), fam_, link_);
    r[i] = (y_[i] - mu) / (phi_ * fam_.variance(mu) * link_.dg(mu));
  }
  return X_.transpose() * r;
}

SpMat GlmFamily::neg_hessian(const Vec& beta) const {
  Vec e = X_ * beta, mu(e.size());
  for (Eigen::Index i = 0; i < e.size(); ++i) mu[i] = link_.ginv(e[i]);
  PseudoData pd = pseudo_data(y_, mu, link_, fam_);
  Vec w = pd.w / phi_;
  return SpMat(X_.transpose() * w.asDiagonal() * X_);
}

Vec RestrictedFamily::grad(const Vec& beta) const {
  if (grad_) return base_.grad(beta);
  return fd_gradient([this](const Vec& b) { return base_.llk(b); }, beta);
}

SpMat RestrictedFamily::neg_hessian(const Vec& beta) const {
  if (!hess_) throw SpecError(base_.name() + ": Hessian not available for this fit");
  return base_.neg_hessian(beta);
}

}  // namespace smoothfit
