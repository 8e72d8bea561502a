#include "smoothfit/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <random>
#include <thread>

#include <boost/math/distributions/normal.hpp>

#include "smoothfit/errors.hpp"
#include "smoothfit/lqefs.hpp"

namespace smoothfit {

namespace {

bool is_additive(const FitState& f) { return f.kind == "additive"; }

void add_flag(std::vector<std::string>& flags, const std::string& f) {
  if (std::find(flags.begin(), flags.end(), f) == flags.end()) flags.push_back(f);
}

SpMat cols_of(const SpMat& X, const std::vector<int>& cols) {
  SpMat out(X.rows(), static_cast<Eigen::Index>(cols.size()));
  std::vector<Triplet> t;
  for (size_t j = 0; j < cols.size(); ++j)
    for (SpMat::InnerIterator it(X, cols[j]); it; ++it)
      t.emplace_back(it.row(), static_cast<int>(j), it.value());
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

// Negative log-likelihood Hessian on kept coefficients (compact approximation for L-qEFS).
SpMat hessian_kept(const FitState& fit) {
  if (fit.Hll.rows() > 0) return fit.Hll;
  if (fit.hessian_rep) return sparse_from_dense(fit.hessian_rep->dense());
  throw SpecError("fit carries no log-likelihood Hessian");
}

// G_r = half_solve(D^r) so that D^j' A^{-1} D^l = G_j' G_l.
std::vector<Mat> half_roots(const FitState& fit) {
  std::vector<Mat> G(fit.pen.n_lambda());
  for (int r = 0; r < fit.pen.n_lambda(); ++r) {
    Mat D(fit.pen.root_r(r));
    G[r].resize(D.rows(), D.cols());
    for (Eigen::Index c = 0; c < D.cols(); ++c) G[r].col(c) = fit.factor.half_solve(D.col(c));
  }
  return G;
}

template <class F>
void parallel_for(int n, int threads, F&& body) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex m;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < n; i += threads) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(m);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// Cholesky-style square root of a PSD matrix via its eigendecomposition.
// Symmetric root U sqrt(L) U'. Unique, so a shared posterior block maps z the same way
// whatever other dimensions the model carries.
Mat psd_sqrt(const Mat& V) {
  Eigen::SelfAdjointEigenSolver<Mat> es(V);
  Vec e = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * e.asDiagonal() * es.eigenvectors().transpose();
}

// q x n standard normals drawn one lambda dimension at a time, so that two models sharing
// their leading smoothing parameters get the same draws on those dimensions.
Mat standard_normals(int q, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Mat Z(q, n);
  for (int i = 0; i < q; ++i)
    for (int s = 0; s < n; ++s) Z(i, s) = nd(rng);
  return Z;
}

Vec clamp_rho(Vec rho) {
  for (Eigen::Index i = 0; i < rho.size(); ++i) rho[i] = std::clamp(rho[i], kRhoMin, kRhoMax);
  return rho;
}

// tr(A^{-1} H) for a factor of A and sparse H.
double trace_inv_times(const HFactor& F, const SpMat& H) {
  double s = 0.0;
  const Mat Hd(H);
  for (Eigen::Index j = 0; j < Hd.cols(); ++j) s += F.solve(Vec(Hd.col(j)))[j];
  return s;
}

}  // namespace

Mat reml_hessian_rho(const FitState& fit) {
  const PenaltyAlgebra& pen = fit.pen;
  const int q = pen.n_lambda();
  if (fit.factor.empty()) throw NumericError("reml_hessian_rho: fit has no factor");
  const double phi = fit.phi;
  const Vec& lam = fit.lambda;
  const Vec b = fit.beta_kept();
  const int n = pen.n_coef();

  Mat Sb(n, q), J(n, q);
  for (int r = 0; r < q; ++r) {
    Sb.col(r) = pen.S_r(r) * b;
    J.col(r) = -lam[r] * fit.factor.solve(Vec(Sb.col(r)));
  }
  if (!J.allFinite()) throw NumericError("reml_hessian_rho: singular penalized Hessian");
  const auto G = half_roots(fit);
  Vec trA(q);
  for (int r = 0; r < q; ++r) trA[r] = G[r].squaredNorm();
  const Vec trS = pen.trace_Sinv_Sr(lam);
  const Mat trSS = pen.trace_Sinv_pairs(lam);
  const Vec quad = pen.quads(b);

  Mat H(q, q);
  for (int j = 0; j < q; ++j) {
    for (int l = j; l < q; ++l) {
      const double g = j == l ? 1.0 : 0.0;
      // A J_l = -lambda_l S^l beta
      const double JAJ = -lam[l] * J.col(j).dot(Sb.col(l));
      const double trAA = (G[j].transpose() * G[l]).squaredNorm();
      double v = -g * lam[l] * quad[l] / (2.0 * phi) - JAJ / phi -
                 lam[j] * Sb.col(j).dot(J.col(l)) / phi - lam[l] * Sb.col(l).dot(J.col(j)) / phi;
      v -= 0.5 * (g * lam[l] * trA[l] - lam[j] * lam[l] * trAA);
      v += 0.5 * (g * lam[l] * trS[l] - lam[j] * lam[l] * trSS(j, l));
      H(j, l) = H(l, j) = v;
    }
  }
  return H;
}

Mat dbeta_drho(const FitState& fit) {
  const int q = fit.pen.n_lambda();
  const Vec b = fit.beta_kept();
  Mat J = Mat::Zero(fit.beta.size(), q);
  for (int r = 0; r < q; ++r) {
    Vec c = -fit.lambda[r] * fit.factor.solve(Vec(fit.pen.S_r(r) * b));
    for (size_t i = 0; i < fit.kept.size(); ++i) J(fit.kept[i], r) = c[i];
  }
  return J;
}

RhoPosterior rho_posterior(const FitState& fit) {
  RhoPosterior p;
  const int q = fit.pen.n_lambda();
  p.rho_hat = fit.lambda.array().log().matrix();
  p.hessian = reml_hessian_rho(fit);
  p.V_rho = Mat::Zero(q, q);
  if (q == 0) return p;
  const double thr = kRhoDropRel * std::max(1.0, std::abs(fit.reml));
  std::vector<int> keep;
  for (int r = 0; r < q; ++r) {
    if (std::abs(fit.grad_rho[r]) < thr && std::abs(p.hessian(r, r)) < thr)
      p.dropped_dims.push_back(r);
    else
      keep.push_back(r);
  }
  if (keep.empty()) return p;
  Mat M = -p.hessian(keep, keep);
  const double md = M.diagonal().cwiseAbs().maxCoeff();
  p.regularization_added = kRhoRidgeRel * (md > 0 ? md : 1.0);
  M.diagonal().array() += p.regularization_added;
  Eigen::SelfAdjointEigenSolver<Mat> es(M);
  Vec inv(es.eigenvalues().size());
  for (Eigen::Index i = 0; i < inv.size(); ++i) {
    const double e = es.eigenvalues()[i];
    if (e > 0) {
      inv[i] = 1.0 / e;
    } else {
      inv[i] = 0.0;
      add_flag(p.flags, "vrho_not_negative_definite");
    }
  }
  Mat Vk = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  Vk = 0.5 * (Vk + Vk.transpose());
  p.V_rho(keep, keep) = Vk;
  if (!is_additive(fit)) add_flag(p.flags, "pql_approximation");
  return p;
}

Mat conditional_cov(const FitState& fit) {
  const int n = static_cast<int>(fit.kept.size());
  Mat Ak = fit.factor.solve(Mat(Mat::Identity(n, n)));
  Mat V = Mat::Zero(fit.beta.size(), fit.beta.size());
  V(fit.kept, fit.kept) = fit.phi * 0.5 * (Ak + Ak.transpose());
  return V;
}

Mat vj_correction(const FitState& fit, const RhoPosterior& post) {
  const Mat J = dbeta_drho(fit);
  return J * post.V_rho * J.transpose();
}

Mat vcorr_pql(const FitState& fit, const RhoPosterior& post) {
  return conditional_cov(fit) + vj_correction(fit, post);
}

double tau_correction_pql(const FitState& fit, const RhoPosterior& post) {
  if (post.V_rho.size() == 0) return 0.0;
  const Mat J = dbeta_drho(fit)(fit.kept, Eigen::all);
  const SpMat H = hessian_kept(fit);
  const Mat K = J.transpose() * (H * J);
  return (post.V_rho.cwiseProduct(K)).sum() / fit.phi;
}

std::string aic_variant_name(AicVariant v) {
  switch (v) {
    case AicVariant::conventional: return "conventional";
    case AicVariant::pql_corrected: return "pql_corrected";
    case AicVariant::mc_gaussian: return "mc_gaussian";
    case AicVariant::mc_general: return "mc_general";
  }
  return "conventional";
}

AicVariant aic_variant_from_name(const std::string& s) {
  if (s == "conventional") return AicVariant::conventional;
  if (s == "pql_corrected" || s == "pql") return AicVariant::pql_corrected;
  if (s == "mc_gaussian") return AicVariant::mc_gaussian;
  if (s == "mc_general") return AicVariant::mc_general;
  throw SpecError("unknown cAIC variant '" + s + "'");
}

namespace {

AicReport base_report(const FitState& fit, AicVariant v) {
  AicReport r;
  r.llk = fit.llk;
  r.tau = fit.edf;
  r.tau_prime = fit.edf;
  r.variant = v;
  return r;
}

void finish(AicReport& r) { r.caic = -2.0 * r.llk + 2.0 * r.edf_used(); }

}  // namespace

AicReport caic(const FitState& fit, AicVariant variant) {
  if (variant == AicVariant::mc_gaussian || variant == AicVariant::mc_general)
    throw SpecError("caic: Monte Carlo variants need mc_tau_gaussian / mc_tau_general");
  AicReport r = base_report(fit, variant);
  if (variant == AicVariant::pql_corrected) {
    RhoPosterior post = rho_posterior(fit);
    r.tau_prime = r.tau + tau_correction_pql(fit, post);
    r.flags = post.flags;
  }
  if (fit.hessian_rep) add_flag(r.flags, "approximate_hessian");
  finish(r);
  return r;
}

AicReport mc_tau_gaussian(const FitState& fit, const MCOptions& o) {
  return mc_tau_gaussian(fit, rho_posterior(fit), o);
}

AicReport mc_tau_gaussian(const FitState& fit, const RhoPosterior& post, const MCOptions& o) {
  if (o.n_samples < 1) throw SpecError("mc_tau_gaussian: n_samples must be positive");
  if (fit.Hll.rows() == 0) throw SpecError("mc_tau_gaussian: fit has no exact Hessian");
  AicReport rep = base_report(fit, AicVariant::mc_gaussian);
  rep.n_samples = o.n_samples;
  rep.seed = o.seed;
  rep.flags = post.flags;
  if (!is_additive(fit)) add_flag(rep.flags, "vrho_pql_proposal");
  const double corr = tau_correction_pql(fit, post);
  const int q = fit.pen.n_lambda();
  const Mat C = psd_sqrt(post.V_rho);

  std::mt19937_64 rng(o.seed);
  const Mat Z = standard_normals(q, o.n_samples, rng);
  std::vector<Vec> rhos(o.n_samples);
  for (int s = 0; s < o.n_samples; ++s) rhos[s] = clamp_rho(post.rho_hat + C * Z.col(s));

  const int n = static_cast<int>(fit.kept.size());
  std::vector<SpMat> roots;
  for (int r = 0; r < q; ++r) roots.push_back(fit.pen.root_r(r));
  SpMat A0 = fit.Hll + fit.pen.S_lambda(fit.lambda);
  if (fit.eps_H > 0) {
    SpMat I(n, n);
    I.setIdentity();
    A0 += fit.eps_H * I;
  }
  auto sym = chol_analyze(A0);
  std::vector<double> tr(o.n_samples);
  parallel_for(o.n_samples, o.threads, [&](int s) {
    const Vec lam = rhos[s].array().exp().matrix();
    SpMat A = fit.Hll + fit.pen.S_lambda(lam);
    if (fit.eps_H > 0) {
      SpMat I(n, n);
      I.setIdentity();
      A += fit.eps_H * I;
    }
    HFactor F = HFactor::plain(A, sym);
    double t = n;
    for (int r = 0; r < q; ++r) t -= lam[r] * F.trace_inv(roots[r]);
    if (fit.eps_H > 0) {
      SpMat I(n, n);
      I.setIdentity();
      t -= fit.eps_H * F.trace_inv(I);
    }
    tr[s] = t;
  });
  double mean = 0.0;
  for (double t : tr) mean += t;
  mean /= o.n_samples;
  rep.tau_prime = mean + corr;
  if (o.lower_bound) rep.tau_prime = std::max(rep.tau_prime, rep.tau + corr);
  rep.ess = o.n_samples;
  finish(rep);
  return rep;
}

FitState refit_at(const FitState& fit, const ModelRef& model, const Vec& lambda) {
  if (!model.design) throw SpecError("refit_at: model has no design");
  const PenalizedDesign& d = *model.design;
  if (lambda.size() != d.N_lambda) throw SpecError("refit_at: wrong number of lambdas");
  if (is_additive(fit)) {
    if (!model.y) throw SpecError("refit_at: additive refit needs the response");
    const Vec& y = *model.y;
    const SpMat X = cols_of(d.X_blocks[0], fit.kept);
    FitState s;
    s.kind = fit.kind;
    s.N = fit.N;
    s.lambda = lambda;
    s.kept = fit.kept;
    s.dropped = fit.dropped;
    s.pen = fit.pen;
    s.Hll = fit.Hll;
    s.phi = fit.phi;
    s.has_phi = true;
    s.factor = HFactor::plain(SpMat(fit.Hll + fit.pen.S_lambda(lambda)));
    const Vec bk = s.factor.solve(Vec(X.transpose() * y));
    s.beta = Vec::Zero(fit.beta.size());
    s.beta(fit.kept) = bk;
    const Vec res = y - X * bk;
    const int n = static_cast<int>(fit.kept.size());
    s.quad = fit.pen.quads(bk);
    s.trS = fit.pen.trace_Sinv_Sr(lambda);
    s.trA.resize(d.N_lambda);
    for (int r = 0; r < d.N_lambda; ++r) s.trA[r] = s.factor.trace_inv(fit.pen.root_r(r));
    s.grad_rho = reml_grad_rho(lambda, s.quad, s.trS, s.trA, s.phi);
    s.edf = n - lambda.dot(s.trA);
    s.llk = -0.5 * s.N * std::log(2.0 * M_PI * s.phi) - res.squaredNorm() / (2.0 * s.phi);
    const double pq = s.quad.dot(lambda);
    s.penalized_llk = s.llk - pq / (2.0 * s.phi);
    s.reml = reml_value(s.llk, pq, fit.pen.logdet_plus(lambda), fit.pen.rank(),
                        s.factor.logdet(), n, s.phi);
    s.converged = true;
    return s;
  }
  if (fit.kind == "gam") {
    if (!model.y || !model.fam || !model.link)
      throw SpecError("refit_at: GAM refit needs response, family and link");
    return refit_gam_at(d, *model.y, *model.fam, *model.link, lambda, {}, &fit.kept);
  }
  if (!model.general) throw SpecError("refit_at: general smooth refit needs a family");
  return refit_gsmm_at(d, *model.general, lambda, {}, &fit.beta, &fit.kept);
}

double tau_from_samples(const std::vector<RhoSample>& samples, const SpMat& H, double phi,
                        double* ess, Vec* beta_mean) {
  if (samples.empty()) throw SpecError("tau_from_samples: no samples");
  const size_t m = samples.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& s : samples) mx = std::max(mx, s.reml + s.log_w);
  if (!std::isfinite(mx)) throw NumericError("tau_from_samples: every sample has zero weight");
  Vec w(m);
  for (size_t r = 0; r < m; ++r) w[r] = std::exp(samples[r].reml + samples[r].log_w - mx);
  w /= w.sum();
  if (ess) *ess = 1.0 / w.squaredNorm();
  const Eigen::Index p = samples[0].beta.size();
  Vec bbar = Vec::Zero(p);
  double t1 = 0.0;
  for (size_t r = 0; r < m; ++r) {
    if (w[r] == 0.0) continue;
    bbar += w[r] * samples[r].beta;
    t1 += w[r] * samples[r].trace;
  }
  // The two beta terms, written as one weighted covariance: zero when all betas coincide.
  double t2 = 0.0;
  for (size_t r = 0; r < m; ++r) {
    if (w[r] == 0.0) continue;
    const Vec d = samples[r].beta - bbar;
    t2 += w[r] * d.dot(H * d);
  }
  if (beta_mean) *beta_mean = bbar;
  return t1 + t2 / phi;
}

AicReport mc_tau_general(const FitState& fit, const ModelRef& model, const MCGeneralOptions& o) {
  return mc_tau_general(fit, model, rho_posterior(fit), o);
}

AicReport mc_tau_general(const FitState& fit, const ModelRef& model, const RhoPosterior& post,
                         const MCGeneralOptions& o) {
  if (o.n_samples < 1) throw SpecError("mc_tau_general: n_samples must be positive");
  AicReport rep = base_report(fit, AicVariant::mc_general);
  rep.n_samples = o.n_samples;
  rep.seed = o.seed;
  rep.flags = post.flags;
  const double corr = tau_correction_pql(fit, post);
  const int q = fit.pen.n_lambda();
  std::vector<int> keep;
  for (int r = 0; r < q; ++r)
    if (std::find(post.dropped_dims.begin(), post.dropped_dims.end(), r) == post.dropped_dims.end())
      keep.push_back(r);
  const int k = static_cast<int>(keep.size());
  const Mat C = k ? psd_sqrt(post.V_rho(keep, keep)) : Mat();

  std::mt19937_64 rng(o.seed);
  const Mat Z = standard_normals(q, o.n_samples, rng);
  std::chi_squared_distribution<double> chi(kTProposalDf);
  std::vector<RhoSample> samples(o.n_samples);
  std::vector<char> inside(o.n_samples, 1);
  for (int si = 0; si < o.n_samples; ++si) {
    RhoSample& s = samples[si];
    const Vec z = Z(keep, si);
    double scale = 1.0, logq = -0.5 * z.squaredNorm();
    if (o.proposal == Proposal::t) {
      scale = std::sqrt(chi(rng) / kTProposalDf);
      const double delta = z.squaredNorm() / (scale * scale);
      logq = -0.5 * (kTProposalDf + k) * std::log1p(delta / kTProposalDf);
    }
    s.rho = post.rho_hat;
    if (k) s.rho(keep) += C * z / scale;
    s.log_w = o.prior == RhoPrior::proposal ? 0.0 : -logq;
  }
  for (int i = 0; i < o.n_samples; ++i) {
    if (o.prior != RhoPrior::uniform_box) break;
    const Vec& r = samples[i].rho;
    if ((r.array() < kRhoMin).any() || (r.array() > kRhoMax).any()) {
      inside[i] = 0;
      samples[i].log_w = -std::numeric_limits<double>::infinity();
    }
  }

  std::vector<HFactor> factors(o.n_samples);
  std::vector<double> edf(o.n_samples, 0.0);
  parallel_for(o.n_samples, o.threads, [&](int i) {
    if (!inside[i]) {
      samples[i].beta = fit.beta;
      samples[i].reml = 0.0;
      return;
    }
    FitState s = refit_at(fit, model, clamp_rho(samples[i].rho).array().exp().matrix());
    samples[i].beta = s.beta;
    samples[i].reml = s.reml;
    factors[i] = std::move(s.factor);
    edf[i] = s.edf;
  });

  SpMat H = hessian_kept(fit);
  const bool same_H = is_additive(fit);
  Vec bbar;
  // First pass fixes the weights and the weighted mean.
  auto traces = [&](const SpMat& Hk, bool reuse) {
    parallel_for(o.n_samples, o.threads, [&](int i) {
      if (!inside[i]) return;
      samples[i].trace = reuse ? edf[i] : trace_inv_times(factors[i], Hk);
    });
  };
  traces(H, same_H);
  double ess = 0.0;
  auto kept_samples = [&] {
    std::vector<RhoSample> v;
    for (int i = 0; i < o.n_samples; ++i) {
      RhoSample s = samples[i];
      s.beta = s.beta(fit.kept).eval();
      v.push_back(std::move(s));
    }
    return v;
  };
  double tau = tau_from_samples(kept_samples(), H, fit.phi, &ess, &bbar);
  if (o.hessian_at_mean && !same_H) {
    Vec full = Vec::Zero(fit.beta.size());
    full(fit.kept) = bbar;
    if (model.general) {
      SpMat Hf = model.general->neg_hessian(full);
      H = sparse_from_dense(Mat(Mat(Hf)(fit.kept, fit.kept)));
    } else if (model.design && model.y && model.fam && model.link) {
      const SpMat X = cols_of(model.design->X_blocks[0], fit.kept);
      Vec eta = X * bbar, mu(eta.size());
      for (Eigen::Index i = 0; i < eta.size(); ++i)
        mu[i] = clamp_mu(model.link->ginv(eta[i]), *model.fam, *model.link);
      PseudoData pd = pseudo_data(*model.y, mu, *model.link, *model.fam);
      H = SpMat(X.transpose() * pd.w.asDiagonal() * X);
    } else {
      throw SpecError("mc_tau_general: Hessian at the mean needs the model");
    }
    traces(H, false);
    tau = tau_from_samples(kept_samples(), H, fit.phi, &ess, &bbar);
    add_flag(rep.flags, "hessian_at_posterior_mean");
  }
  rep.ess = ess;
  if (ess < kMinEss) add_flag(rep.flags, "low_effective_sample_size");
  rep.tau_prime = tau;
  if (o.lower_bound) rep.tau_prime = std::max(rep.tau_prime, rep.tau + corr);
  finish(rep);
  return rep;
}

Mat sample_beta_conditional(const FitState& fit, int n, std::uint64_t seed) {
  if (n < 0) throw SpecError("sample_beta_conditional: negative sample count");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  const int p = static_cast<int>(fit.kept.size());
  const double sp = std::sqrt(fit.phi);
  Mat out(fit.beta.size(), n);
  Vec z(p);
  for (int s = 0; s < n; ++s) {
    for (int i = 0; i < p; ++i) z[i] = nd(rng);
    out.col(s) = fit.beta;
    Vec x = fit.factor.half_inverse_apply(z);
    for (int i = 0; i < p; ++i) out(fit.kept[i], s) += sp * x[i];
  }
  return out;
}

CredibleIntervals credible_intervals(const FitState& fit, const SpMat& X_pred, double level) {
  if (!(level > 0.0 && level < 1.0)) throw SpecError("credible_intervals: level must be in (0,1)");
  if (X_pred.cols() != fit.beta.size())
    throw SpecError("credible_intervals: prediction matrix has the wrong number of columns");
  CredibleIntervals ci;
  ci.approximate = fit.kind == "lqefs" || static_cast<bool>(fit.hessian_rep);
  ci.center = X_pred * fit.beta;
  const Eigen::Index m = X_pred.rows();
  ci.half_width.resize(m);
  const double zq = boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);
  const SpMat XkT = SpMat(cols_of(X_pred, fit.kept).transpose());
  constexpr Eigen::Index kBlock = 256;
  for (Eigen::Index b0 = 0; b0 < m; b0 += kBlock) {
    const Eigen::Index nb = std::min(kBlock, m - b0);
    const Mat blk(XkT.middleCols(b0, nb));
    for (Eigen::Index j = 0; j < nb; ++j) {
      const double v = fit.phi * fit.factor.half_solve(Vec(blk.col(j))).squaredNorm();
      ci.half_width[b0 + j] = zq * std::sqrt(std::max(v, 0.0));
    }
  }
  ci.lower = ci.center - ci.half_width;
  ci.upper = ci.center + ci.half_width;
  return ci;
}

}  // namespace smoothfit
