#include "smoothfit/solver_efs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "smoothfit/errors.hpp"

namespace smoothfit {

// ------------------------------------------------------------------ HFactor

HFactor HFactor::plain(const SpMat& A, std::shared_ptr<const CholSymbolic> sym) {
  HFactor f;
  f.chol_ = pivoted_cholesky(A, std::move(sym));
  return f;
}

HFactor HFactor::from_cholesky(CholeskyFactor c) {
  HFactor f;
  f.chol_ = std::move(c);
  return f;
}

HFactor HFactor::stabilized(const SpMat& A, const SpMat& T, bool precondition,
                            std::shared_ptr<const CholSymbolic> sym) {
  HFactor f;
  SpMat At = A;
  if (T.size()) {
    f.T_ = T;
    At = SpMat(T.transpose() * A * T);
  }
  if (precondition) {
    f.d_.resize(At.rows());
    Vec diag = At.diagonal();
    for (Eigen::Index i = 0; i < diag.size(); ++i) {
      if (diag[i] != 0.0 && std::isfinite(diag[i])) {
        f.d_[i] = 1.0 / std::sqrt(std::abs(diag[i]));
      } else {
        f.d_[i] = 1.0;
        f.zero_diag_ = true;
      }
    }
    At = f.d_.asDiagonal() * At * f.d_.asDiagonal();
  }
  f.chol_ = pivoted_cholesky(At, std::move(sym));
  return f;
}

Vec HFactor::solve(const Vec& b) const {
  Vec y = T_.size() ? Vec(T_.transpose() * b) : b;
  if (d_.size()) y = y.cwiseProduct(d_);
  Vec x = chol_.solve(y);
  if (d_.size()) x = x.cwiseProduct(d_);
  return T_.size() ? Vec(T_ * x) : x;
}

Mat HFactor::solve(const Mat& B) const {
  Mat X(B.rows(), B.cols());
  for (Eigen::Index j = 0; j < B.cols(); ++j) X.col(j) = solve(Vec(B.col(j)));
  return X;
}

double HFactor::logdet() const {
  double ld = chol_.logdet;
  if (d_.size()) ld -= 2.0 * d_.array().log().sum();
  return ld;
}

double HFactor::trace_inv(const SpMat& R) const {
  if (R.cols() == 0) return 0.0;
  SpMat Rt = T_.size() ? SpMat(T_.transpose() * R) : R;
  if (d_.size()) Rt = d_.asDiagonal() * Rt;
  return trace_inv_form(chol_, Rt);
}

Vec HFactor::half_inverse_apply(const Vec& z) const {
  Vec x = chol_.half_solve_transpose(z);
  if (d_.size()) x = x.cwiseProduct(d_);
  return T_.size() ? Vec(T_ * x) : x;
}

Vec HFactor::half_solve(const Vec& b) const {
  Vec y = T_.size() ? Vec(T_.transpose() * b) : b;
  if (d_.size()) y = y.cwiseProduct(d_);
  return chol_.half_solve(y);
}

double HFactor::condition() const { return condition_estimate(chol_); }

// ------------------------------------------------------------------ small pieces

namespace {

SpMat select_cols(const SpMat& X, const std::vector<int>& cols) {
  std::vector<Triplet> tr;
  for (size_t j = 0; j < cols.size(); ++j)
    for (SpMat::InnerIterator it(X, cols[j]); it; ++it) tr.emplace_back(it.row(), j, it.value());
  SpMat out(X.rows(), cols.size());
  out.setFromTriplets(tr.begin(), tr.end());
  return out;
}

SpMat select_sym(const SpMat& A, const std::vector<int>& keep) {
  if (static_cast<int>(keep.size()) == A.rows()) return A;
  std::vector<int> loc(A.rows(), -1);
  for (size_t i = 0; i < keep.size(); ++i) loc[keep[i]] = static_cast<int>(i);
  std::vector<Triplet> tr;
  for (size_t j = 0; j < keep.size(); ++j)
    for (SpMat::InnerIterator it(A, keep[j]); it; ++it)
      if (loc[it.row()] >= 0) tr.emplace_back(loc[it.row()], j, it.value());
  SpMat out(keep.size(), keep.size());
  out.setFromTriplets(tr.begin(), tr.end());
  return out;
}

SpMat speye(int n, double v) {
  SpMat I(n, n);
  std::vector<Triplet> tr;
  for (int i = 0; i < n; ++i) tr.emplace_back(i, i, v);
  I.setFromTriplets(tr.begin(), tr.end());
  return I;
}

std::vector<SpMat> all_roots(const PenaltyAlgebra& pen) {
  std::vector<SpMat> r;
  for (int i = 0; i < pen.n_lambda(); ++i) r.push_back(pen.root_r(i));
  return r;
}

Vec traces_A(const HFactor& F, const std::vector<SpMat>& roots) {
  Vec t(roots.size());
  for (size_t r = 0; r < roots.size(); ++r) t[r] = F.trace_inv(roots[r]);
  return t;
}

double max_abs(const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

std::vector<int> iota_vec(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

double clamp_lambda(double lambda) {
  const double lo = std::exp(kRhoMin), hi = std::exp(kRhoMax);
  if (!(lambda > lo)) return lo;  // also catches NaN
  return std::min(lambda, hi);
}

double efs_update(double lambda, double tr_S, double tr_A, double quad, double phi, bool* flag) {
  if (quad <= kQuadFloor) {
    if (flag) *flag = true;
    return std::exp(kRhoMax);
  }
  return clamp_lambda(lambda * (tr_S - tr_A) * phi / quad);
}

double efs_step(double lambda, double tr_S, double tr_A, double quad, double phi, bool* flag) {
  return efs_update(lambda, tr_S, tr_A, quad, phi, flag) - lambda;
}

double reml_value(double llk, double pen_quad, double logdet_S, int rank_S, double logdet_A,
                  int n_coef, double phi) {
  const double lp = std::log(phi);
  return llk - pen_quad / (2.0 * phi) + 0.5 * (logdet_S - rank_S * lp) -
         0.5 * (logdet_A - n_coef * lp);
}

Vec reml_grad_rho(const Vec& lambda, const Vec& quad, const Vec& trS, const Vec& trA,
                  double phi) {
  return lambda.cwiseProduct(-quad / (2.0 * phi) + 0.5 * trS - 0.5 * trA);
}

double estimate_phi(double pen_rss, int N, int M_p) {
  if (N - M_p <= 0) throw NumericError("estimate_phi: no residual degrees of freedom");
  const double phi = pen_rss / (N - M_p);
  if (!(phi >= 0.0) || !std::isfinite(phi)) throw NumericError("estimate_phi: invalid scale");
  return std::max(phi, kPhiFloor);
}

PenalizedSolve solve_penalized(const SpMat& X, const Vec& response, const Vec& w, const SpMat& S,
                               SolveMethod method, const SpMat* E) {
  if (X.rows() != response.size() || w.size() != response.size())
    throw SpecError("solve_penalized: dimension mismatch");
  if (S.rows() != X.cols()) throw SpecError("solve_penalized: penalty dimension mismatch");
  PenalizedSolve out;
  if (method == SolveMethod::cholesky) {
    SpMat A = SpMat(X.transpose() * w.asDiagonal() * X) + S;
    out.factor = HFactor::plain(A);
    out.beta = out.factor.solve(Vec(X.transpose() * w.cwiseProduct(response)));
    out.kept = iota_vec(static_cast<int>(X.cols()));
    return out;
  }
  SpMat Eroot;
  if (E) {
    Eroot = *E;
  } else {
    Eroot = sparse_from_dense(psd_root(Mat(S)));
  }
  Vec sw = w.cwiseSqrt();
  SpMat Xw = sw.asDiagonal() * X;
  Vec rhs = sw.cwiseProduct(response);
  QRFactor q = penalized_qr(Xw, Eroot, &rhs);
  if (q.kept.empty()) throw SpecError("solve_penalized: every column was dropped");
  out.beta = q.solve_kept();
  out.factor = HFactor::from_cholesky(q.as_cholesky());
  out.kept = q.kept;
  out.dropped = q.dropped;
  return out;
}

Vec term_edf(const PenalizedDesign& d, const FitState& s) {
  Vec e(d.terms.size());
  std::vector<char> keep(d.N_p, 0);
  for (int k : s.kept) keep[k] = 1;
  for (size_t t = 0; t < d.terms.size(); ++t) {
    const auto& ti = d.terms[t];
    double v = 0.0;
    for (int j = ti.col_begin; j < ti.col_end; ++j) v += keep[j];
    for (int r : ti.lambda_idx) v -= s.lambda[r] * s.trA[r];
    e[t] = v;
  }
  return e;
}

// ------------------------------------------------------------------ AM / GAM

namespace {

struct LinModel {
  const PenalizedDesign& d;
  const Vec& y;
  ExponentialFamily fam;
  LinkFunction link;
  bool gauss_id = false;
  SolveMethod method = SolveMethod::cholesky;
  std::vector<int> kept;
  SpMat Xfull, X;
  PenaltyAlgebra pen;
  std::vector<SpMat> roots;
  std::shared_ptr<const CholSymbolic> sym;
  std::vector<std::string> flags;

  LinModel(const PenalizedDesign& dd, const Vec& yy, ExponentialFamily f, LinkFunction l)
      : d(dd), y(yy), fam(f), link(l) {
    gauss_id = fam.kind == FamilyKind::gaussian && link.kind == LinkKind::identity;
    Xfull = d.X();
    restrict_to(iota_vec(d.N_p));
  }

  void restrict_to(const std::vector<int>& k) {
    kept = k;
    X = static_cast<int>(k.size()) == d.N_p ? Xfull : select_cols(Xfull, k);
    pen = PenaltyAlgebra(d, k);
    roots = all_roots(pen);
    sym.reset();
  }

  Vec full(const Vec& bk) const {
    Vec b = Vec::Zero(d.N_p);
    b(kept) = bk;
    return b;
  }

  Vec mean(const Vec& eta, int* nclamp = nullptr) const {
    Vec mu(eta.size());
    int nc = 0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      bool c = false;
      mu[i] = gauss_id ? eta[i] : clamp_mu(link.ginv(eta[i]), fam, link, &c);
      nc += c;
    }
    if (nclamp) *nclamp = nc;
    return mu;
  }

  double deviance(const Vec& eta) const {
    Vec mu = mean(eta);
    double s = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) s += fam.unit_deviance(y[i], mu[i]);
    return s;
  }

  double pen_deviance(const Vec& bk, const SpMat& S) const {
    return deviance(X * bk) + bk.dot(S * bk);
  }

  double loglik(const Vec& eta, double phi) const {
    Vec mu = mean(eta);
    double s = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) s += fam.log_density(y[i], mu[i], phi);
    return s;
  }

  Vec initial_eta() const {
    Vec eta(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i)
      eta[i] = gauss_id ? y[i] : link.g(clamp_mu(fam.initial_mu(y[i]), fam, link));
    return eta;
  }

  void working(const Vec& eta, Vec* z, Vec* w, int* nclamp) const {
    if (gauss_id) {
      *z = y;
      *w = Vec::Ones(y.size());
      *nclamp = 0;
      return;
    }
    Vec mu = mean(eta);
    PseudoData pd = pseudo_data(y, mu, link, fam);
    *z = pd.z;
    *w = pd.w;
    *nclamp = pd.n_clamped;
  }

  int M_p() const { return pen.null_dim(); }
};

struct Inner {
  Vec beta;       // kept
  HFactor F;
  SpMat XtWX;
  Vec z, w;
  double pdev = 0.0;  // true penalized deviance
  int n_clamped = 0;
};

struct Solved {
  Vec beta;
  HFactor F;
};

Solved solve_lin(LinModel& m, const SpMat& XtWX, const Vec& z, const Vec& w, const Vec& lambda) {
  SpMat S = m.pen.S_lambda(lambda);
  Solved s;
  if (m.method == SolveMethod::qr) {
    SpMat E = m.pen.E_lambda(lambda);
    Vec sw = w.cwiseSqrt();
    SpMat Xw = sw.asDiagonal() * m.X;
    Vec rhs = sw.cwiseProduct(z);
    QRFactor q = penalized_qr(Xw, E, &rhs);
    if (q.dropped.empty()) {
      s.beta = q.solve_kept();
      s.F = HFactor::from_cholesky(q.as_cholesky());
      return s;
    }
    if (std::find(m.flags.begin(), m.flags.end(), "qr_fallback_cholesky") == m.flags.end())
      m.flags.push_back("qr_fallback_cholesky");
  }
  SpMat A = XtWX + S;
  if (!m.sym) m.sym = chol_analyze(A);
  s.F = HFactor::plain(A, m.sym);
  s.beta = s.F.solve(Vec(m.X.transpose() * w.cwiseProduct(z)));
  return s;
}

Inner pirls(LinModel& m, const Vec& lambda, const Vec* beta0, int max_inner, double tol) {
  SpMat S = m.pen.S_lambda(lambda);
  Vec bcur;
  double pcur = std::numeric_limits<double>::infinity();
  Vec eta;
  if (beta0 && beta0->size()) {
    bcur = *beta0;
    pcur = m.pen_deviance(bcur, S);
    eta = m.X * bcur;
  } else {
    eta = m.initial_eta();
  }
  Inner out;
  for (int it = 0; it < std::max(1, max_inner); ++it) {
    Vec z, w;
    int nc = 0;
    m.working(eta, &z, &w, &nc);
    SpMat XtWX = m.X.transpose() * w.asDiagonal() * m.X;
    Solved s = solve_lin(m, XtWX, z, w, lambda);
    Vec bn = s.beta;
    double pn = m.pen_deviance(bn, S);
    if (!m.gauss_id && bcur.size()) {
      for (int h = 0; h < 30 && !(std::isfinite(pn) && pn <= pcur * (1 + 1e-12)); ++h) {
        bn = 0.5 * (bn + bcur);
        pn = m.pen_deviance(bn, S);
      }
    }
    if (!bn.allFinite()) throw NumericError("PIRLS produced non-finite coefficients");
    const bool conv = bcur.size() && std::abs(pn - pcur) <= tol * std::abs(pn);
    out = {bn, s.F, XtWX, z, w, pn, nc};
    bcur = bn;
    pcur = pn;
    eta = m.X * bcur;
    if (m.gauss_id || conv) break;
  }
  return out;
}

double working_pen_rss(const LinModel& m, const Vec& beta, const Vec& z, const Vec& w,
                       const Vec& lambda) {
  Vec r = z - m.X * beta;
  return r.dot(w.cwiseProduct(r)) + m.pen.quads(beta).dot(lambda);
}

FitState finalize_lin(LinModel& m, const Vec& lambda, const Inner& in, const std::string& kind) {
  FitState s;
  s.kind = kind;
  s.N = static_cast<int>(m.y.size());
  s.lambda = lambda;
  s.kept = m.kept;
  std::vector<char> k(m.d.N_p, 0);
  for (int i : m.kept) k[i] = 1;
  for (int i = 0; i < m.d.N_p; ++i)
    if (!k[i]) s.dropped.push_back(i);
  s.pen = m.pen;
  s.factor = in.F;
  s.Hll = in.XtWX;
  s.beta = m.full(in.beta);
  s.has_phi = m.fam.has_scale();
  s.phi = s.has_phi ? estimate_phi(working_pen_rss(m, in.beta, in.z, in.w, lambda), s.N, m.M_p())
                     : 1.0;
  s.quad = m.pen.quads(in.beta);
  s.trS = m.pen.trace_Sinv_Sr(lambda);
  s.trA = traces_A(in.F, m.roots);
  s.grad_rho = reml_grad_rho(lambda, s.quad, s.trS, s.trA, s.phi);
  const int n = static_cast<int>(m.kept.size());
  s.edf = n - lambda.dot(s.trA);
  Vec eta = m.X * in.beta;
  s.eta = eta;
  s.mu = m.mean(eta);
  s.w = in.w;
  s.z = in.z;
  s.llk = m.loglik(eta, s.phi);
  const double pq = s.quad.dot(lambda);
  s.penalized_llk = s.llk - pq / (2.0 * s.phi);
  s.pen_deviance = in.pdev;
  s.reml = reml_value(s.llk, pq, m.pen.logdet_plus(lambda), m.pen.rank(), in.F.logdet(), n, s.phi);
  s.term_edf = term_edf(m.d, s);
  if (in.n_clamped > 0) s.flags.push_back("mu_clamped:" + std::to_string(in.n_clamped));
  for (const auto& f : m.flags) s.flags.push_back(f);
  return s;
}

void init_qr_drop(LinModel& m, const EFSControl& c) {
  if (c.method != SolveMethod::qr) return;
  m.method = SolveMethod::qr;
  Vec z, w;
  int nc;
  m.working(m.initial_eta(), &z, &w, &nc);
  Vec lam = Vec::Ones(m.d.N_lambda);
  Vec sw = w.cwiseSqrt();
  Vec rhs = sw.cwiseProduct(z);
  QRFactor q = penalized_qr(SpMat(sw.asDiagonal() * m.X), m.pen.E_lambda(lam), &rhs);
  if (q.kept.empty()) throw SpecError("every coefficient is unidentifiable");
  if (!q.dropped.empty()) {
    std::vector<int> k;
    for (int j : q.kept) k.push_back(m.kept[j]);
    std::sort(k.begin(), k.end());
    m.restrict_to(k);
  }
}

FitState fit_linearized(const PenalizedDesign& d, const Vec& y, const ExponentialFamily& fam,
                        const LinkFunction& link, const EFSControl& c, const std::string& kind) {
  if (d.n_params != 1) throw SpecError("fit_gam: model has more than one linear predictor");
  if (y.size() != d.N) throw SpecError("response length does not match the design");
  if (c.max_inner < 1 || !(c.tol > 0)) throw SpecError("invalid EFS control");
  fam.check_response(y);
  LinModel m(d, y, fam, link);
  init_qr_drop(m, c);
  const int N = d.N;
  Vec lambda = Vec::Ones(d.N_lambda);
  Vec beta;
  std::vector<double> trace;
  std::vector<std::string> flags;
  bool converged = false;
  int it = 0;
  double prev = std::numeric_limits<double>::infinity();
  int rejected = 0;
  Inner in;
  for (it = 1; it <= c.max_outer; ++it) {
    in = pirls(m, lambda, beta.size() ? &beta : nullptr, c.max_inner, c.tol);
    beta = in.beta;
    trace.push_back(in.pdev);
    if (d.N_lambda == 0) {
      converged = true;
      break;
    }
    if (it > 1 && std::abs(in.pdev - prev) <= c.tol * std::abs(in.pdev)) {
      converged = true;
      break;
    }
    prev = in.pdev;
    const double phi = fam.has_scale()
                           ? estimate_phi(working_pen_rss(m, beta, in.z, in.w, lambda), N, m.M_p())
                           : 1.0;
    Vec q = m.pen.quads(beta);
    Vec trS = m.pen.trace_Sinv_Sr(lambda);
    Vec trA = traces_A(in.F, m.roots);
    Vec delta(d.N_lambda);
    for (int r = 0; r < d.N_lambda; ++r) {
      bool fl = false;
      delta[r] = efs_step(lambda[r], trS[r], trA[r], q[r], phi, &fl);
      if (fl) {
        const std::string f = "lambda_upper:" + d.lambda_labels[r];
        if (std::find(flags.begin(), flags.end(), f) == flags.end()) flags.push_back(f);
      }
    }
    if (c.control_lambda == LambdaControl::gradient_check && it > 1) {
      bool ok = false;
      for (int h = 0; h <= 10; ++h) {
        Vec lt = lambda + delta;
        Solved st = solve_lin(m, in.XtWX, in.z, in.w, lt);
        const double pt = fam.has_scale() ? estimate_phi(working_pen_rss(m, st.beta, in.z, in.w, lt),
                                                         N, m.M_p())
                                          : 1.0;
        Vec g = reml_grad_rho(lt, m.pen.quads(st.beta), m.pen.trace_Sinv_Sr(lt),
                              traces_A(st.F, m.roots), pt)
                    .cwiseQuotient(lt);
        if (g.dot(delta) >= 0.0) {
          ok = true;
          break;
        }
        delta *= 0.5;
      }
      if (!ok) {
        delta.setZero();
        ++rejected;
      }
    }
    for (int r = 0; r < d.N_lambda; ++r) lambda[r] = clamp_lambda(lambda[r] + delta[r]);
  }
  if (it > c.max_outer) it = c.max_outer;
  in = pirls(m, lambda, &beta, c.max_inner, c.tol);
  FitState s = finalize_lin(m, lambda, in, kind);
  s.iterations = it;
  s.converged = converged;
  s.pen_dev_trace = trace;
  for (const auto& f : flags) s.flags.push_back(f);
  if (rejected) s.flags.push_back("lambda_step_rejected:" + std::to_string(rejected));
  return s;
}

}  // namespace

FitState fit_additive(const PenalizedDesign& d, const Vec& y, const EFSControl& c) {
  return fit_linearized(d, y, ExponentialFamily{FamilyKind::gaussian},
                        LinkFunction{LinkKind::identity}, c, "additive");
}

FitState fit_gam(const PenalizedDesign& d, const Vec& y, const ExponentialFamily& fam,
                 const LinkFunction& link, const EFSControl& c) {
  return fit_linearized(d, y, fam, link, c, "gam");
}

FitState refit_gam_at(const PenalizedDesign& d, const Vec& y, const ExponentialFamily& fam,
                      const LinkFunction& link, const Vec& lambda, const EFSControl& c,
                      const std::vector<int>* kept) {
  if (lambda.size() != d.N_lambda) throw SpecError("refit: wrong number of lambdas");
  LinModel m(d, y, fam, link);
  if (kept) m.restrict_to(*kept);
  Inner in = pirls(m, lambda, nullptr, m.gauss_id ? 1 : std::max(c.max_inner, 100), c.tol * 1e-3);
  FitState s = finalize_lin(m, lambda, in, m.gauss_id ? "additive" : "gam");
  s.converged = true;
  return s;
}

// ------------------------------------------------------------------ general smooth models

HFactor factor_penalized(const SpMat& H, const PenaltyAlgebra& pen, const Vec& lambda, double eps,
                         const EFSControl& c, std::shared_ptr<const CholSymbolic> sym) {
  const int n = static_cast<int>(H.rows());
  SpMat A = H + pen.S_lambda(lambda) + speye(n, eps);
  if (!c.stabilize) return HFactor::plain(A, std::move(sym));
  return HFactor::stabilized(A, pen.block_transform(), true, std::move(sym));
}

namespace {

double ridge_scale(const SpMat& H, const PenaltyAlgebra& pen, const Vec& lambda) {
  double s = H.norm();
  if (!(s > 0)) s = pen.S_lambda(lambda).norm();
  return s > 0 ? s : 1.0;
}

HFactor factor_with_ridge(const SpMat& H, const PenaltyAlgebra& pen, const Vec& lambda,
                          const EFSControl& c, double* eps) {
  const double scale = ridge_scale(H, pen, lambda);
  double e = 0.0;
  for (;;) {
    try {
      HFactor F = factor_penalized(H, pen, lambda, e, c);
      *eps = e;
      return F;
    } catch (const IndefiniteError&) {
      e = e == 0.0 ? 1e-8 * scale : 10.0 * e;
      if (e > 1e4 * scale)
        throw NumericError(
            "penalized Hessian remains indefinite at the ridge cap; drop or reparameterize "
            "the offending terms");
    }
  }
}

}  // namespace

NewtonResult newton_beta(const GeneralFamily& fam, const PenaltyAlgebra& pen,
                         const std::vector<int>& kept, const Vec& lambda, const Vec& beta0_kept,
                         const EFSControl& c) {
  const int n = static_cast<int>(kept.size());
  if (beta0_kept.size() != n) throw SpecError("newton_beta: start vector has wrong length");
  if (!fam.has_hessian()) throw SpecError("newton_beta: family provides no Hessian");
  const int np = fam.n_coef();
  SpMat S = pen.S_lambda(lambda);
  auto full = [&](const Vec& bk) {
    Vec b = Vec::Zero(np);
    b(kept) = bk;
    return b;
  };
  auto penllk = [&](const Vec& bk) { return fam.llk(full(bk)) - 0.5 * bk.dot(S * bk); };
  auto grad = [&](const Vec& bk) { return Vec(fam.grad(full(bk))(kept)); };
  auto hess = [&](const Vec& bk) { return select_sym(fam.neg_hessian(full(bk)), kept); };

  NewtonResult r;
  Vec beta = beta0_kept;
  double L = penllk(beta);
  if (!std::isfinite(L)) throw NumericError("newton_beta: log-likelihood not finite at start");
  int it = 0;
  for (it = 0; it < c.max_newton; ++it) {
    Vec g = grad(beta);
    SpMat H = hess(beta);
    Vec gp = g - S * beta;
    double eps = 0.0;
    HFactor F = factor_with_ridge(H, pen, lambda, c, &eps);
    r.max_eps = std::max(r.max_eps, eps);
    Vec step = F.solve(gp);
    bool accepted = false;
    Vec bt;
    double Lt = L;
    for (int h = 0; h < 40; ++h) {
      bt = beta + step;
      Lt = penllk(bt);
      if (std::isfinite(Lt) && Lt >= L) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const double change = Lt - L;
    beta = bt;
    L = Lt;
    if (change <= 1e-13 * (1.0 + std::abs(L)) ||
        max_abs(step) <= 1e-11 * (1.0 + max_abs(beta)))
      break;
  }
  r.iterations = it + 1;
  r.beta = beta;
  r.pen_llk = L;
  r.grad = grad(beta);
  r.H = hess(beta);
  r.factor = factor_with_ridge(r.H, pen, lambda, c, &r.eps_H);
  r.max_eps = std::max(r.max_eps, r.eps_H);
  return r;
}

double make_efs_safe(const SpMat& H, const PenaltyAlgebra& pen, const Vec& lambda, double eps,
                     HFactor* factor, const EFSControl& c) {
  const Vec trS = pen.trace_Sinv_Sr(lambda);
  const auto roots = all_roots(pen);
  const double scale = ridge_scale(H, pen, lambda);
  for (;;) {
    Vec trA = traces_A(*factor, roots);
    bool bad = false;
    for (int r = 0; r < trS.size(); ++r)
      if (trS[r] - trA[r] < -1e-10 * trS[r]) bad = true;
    if (!bad) return eps;
    eps = eps == 0.0 ? 1e-8 * scale : 10.0 * eps;
    if (eps > 1e4 * scale) throw NumericError("make_efs_safe: ridge cap reached");
    *factor = factor_penalized(H, pen, lambda, eps, c);
  }
}

std::vector<int> detect_unidentifiable(const SpMat& H, const PenaltyAlgebra& pen,
                                       const EFSControl& c) {
  const int n = static_cast<int>(H.rows());
  SpMat HS = H;
  const double hn = H.norm();
  if (hn > 0) HS = HS / hn;
  SpMat B = pen.balanced();
  const double bn = B.norm();
  if (bn > 0) HS += B / bn;

  std::vector<int> cols;
  if (c.restrict_subblock) {
    std::vector<char> cand(n, 1);
    auto mask = pen.penalized_mask();
    for (int i = 0; i < n; ++i) cand[i] = !mask[i];
    for (const auto& g : pen.groups())
      if (static_cast<int>(g.cols.size()) > g.U.cols())
        for (int j : g.cols) cand[j] = 1;
    for (int i = 0; i < n; ++i)
      if (cand[i]) cols.push_back(i);
  } else {
    cols = iota_vec(n);
  }
  if (cols.empty()) return {};
  Mat sub = Mat(HS)(cols, cols);
  std::vector<int> drop;
  std::vector<int> live = iota_vec(static_cast<int>(cols.size()));

  if (c.foster) {
    const double tol = 1e-7 * sub.norm();
    int rounds = 0;
    for (; rounds < 10 && !live.empty(); ++rounds) {
      Mat cur = sub(live, live);
      LURank lu = stable_lu_rank(sparse_from_dense(cur));
      if (!lu.structurally_singular && lu.sigma_min > tol) break;
      Eigen::Index j;
      lu.v.cwiseAbs().maxCoeff(&j);
      drop.push_back(cols[live[j]]);
      live.erase(live.begin() + j);
    }
    if (rounds < 10 || live.empty()) {
      std::sort(drop.begin(), drop.end());
      return drop;
    }
    // too many eliminations: fall through to pivoted QR on what is left
  }
  Mat cur = sub(live, live);
  Eigen::ColPivHouseholderQR<Mat> qr(cur);
  qr.setThreshold(1e-7);
  const auto rk = qr.rank();
  const auto& P = qr.colsPermutation().indices();
  for (Eigen::Index k = rk; k < P.size(); ++k) drop.push_back(cols[live[P[k]]]);
  std::sort(drop.begin(), drop.end());
  return drop;
}

namespace {

FitState finalize_gsmm(const PenalizedDesign& d, const GeneralFamily& fam,
                       const PenaltyAlgebra& pen, const std::vector<int>& kept, const Vec& lambda,
                       const NewtonResult& nr) {
  FitState s;
  s.kind = "gsmm";
  s.N = d.N;
  s.lambda = lambda;
  s.kept = kept;
  std::vector<char> k(d.N_p, 0);
  for (int i : kept) k[i] = 1;
  for (int i = 0; i < d.N_p; ++i)
    if (!k[i]) s.dropped.push_back(i);
  s.pen = pen;
  s.factor = nr.factor;
  s.Hll = nr.H;
  s.eps_H = nr.eps_H;
  s.beta = Vec::Zero(d.N_p);
  s.beta(kept) = nr.beta;
  s.phi = 1.0;
  s.has_phi = false;
  const auto roots = all_roots(pen);
  s.quad = pen.quads(nr.beta);
  s.trS = pen.trace_Sinv_Sr(lambda);
  s.trA = traces_A(nr.factor, roots);
  s.grad_rho = reml_grad_rho(lambda, s.quad, s.trS, s.trA, 1.0);
  const int n = static_cast<int>(kept.size());
  s.edf = n - lambda.dot(s.trA);
  if (nr.eps_H > 0) s.edf -= nr.eps_H * nr.factor.trace_inv(speye(n, 1.0));
  s.eta.resize(d.N, d.n_params);
  for (int p = 0; p < d.n_params; ++p)
    s.eta.col(p) = d.X_blocks[p] * s.beta.segment(d.param_offsets[p],
                                                   d.param_offsets[p + 1] - d.param_offsets[p]);
  s.llk = fam.llk(s.beta);
  s.penalized_llk = nr.pen_llk;
  s.pen_deviance = -2.0 * nr.pen_llk;
  s.reml = reml_value(s.llk, s.quad.dot(lambda), pen.logdet_plus(lambda), pen.rank(),
                      nr.factor.logdet(), n, 1.0);
  s.term_edf = term_edf(d, s);
  if (nr.eps_H > 0) s.flags.push_back("eps_H_positive");
  return s;
}

std::vector<int> remove_local(const std::vector<int>& kept, const std::vector<int>& drop_local) {
  std::vector<char> dm(kept.size(), 0);
  for (int j : drop_local) dm[j] = 1;
  std::vector<int> out;
  for (size_t i = 0; i < kept.size(); ++i)
    if (!dm[i]) out.push_back(kept[i]);
  return out;
}

Vec remove_entries(const Vec& v, const std::vector<int>& drop_local) {
  std::vector<char> dm(v.size(), 0);
  for (int j : drop_local) dm[j] = 1;
  std::vector<int> idx;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (!dm[i]) idx.push_back(static_cast<int>(i));
  return v(idx);
}

}  // namespace

FitState fit_gsmm(const PenalizedDesign& d, const GeneralFamily& fam, const EFSControl& c,
                  const Vec* beta0) {
  if (fam.n_coef() != d.N_p) throw SpecError("family and design disagree on coefficient count");
  if (!(c.tol > 0)) throw SpecError("invalid EFS control");
  std::vector<int> kept = iota_vec(d.N_p);
  PenaltyAlgebra pen(d);
  Vec lambda = Vec::Ones(d.N_lambda);
  Vec bk = beta0 ? Vec((*beta0)(kept)) : Vec(Vec::Zero(d.N_p));
  bool tested = false;
  std::vector<std::string> flags;
  std::vector<double> trace;
  double prev = std::numeric_limits<double>::infinity();
  Vec prev_beta;
  bool converged = false;
  int it = 0, rejected = 0;

  auto drop_and_restrict = [&](const SpMat& H) {
    auto drop = detect_unidentifiable(H, pen, c);
    tested = true;
    if (drop.empty()) return false;
    std::string msg = "dropped:";
    for (size_t i = 0; i < drop.size(); ++i)
      msg += (i ? "," : "") + std::to_string(kept[drop[i]]);
    flags.push_back(msg);
    bk = remove_entries(bk, drop);
    kept = remove_local(kept, drop);
    pen = PenaltyAlgebra(d, kept);
    prev_beta.resize(0);
    return true;
  };

  NewtonResult nr;
  for (it = 1; it <= c.max_outer; ++it) {
    try {
      nr = newton_beta(fam, pen, kept, lambda, bk, c);
    } catch (const NumericError&) {
      if (tested && !c.retest_unidentifiable) throw;
      Vec b = Vec::Zero(d.N_p);
      b(kept) = bk;
      if (!drop_and_restrict(select_sym(fam.neg_hessian(b), kept))) throw;
      nr = newton_beta(fam, pen, kept, lambda, bk, c);
    }
    if ((!tested || c.retest_unidentifiable) &&
        (nr.eps_H > 0 || nr.factor.condition() > c.cond_threshold)) {
      bk = nr.beta;
      if (drop_and_restrict(nr.H)) nr = newton_beta(fam, pen, kept, lambda, bk, c);
    }
    bk = nr.beta;
    const double eps = make_efs_safe(nr.H, pen, lambda, nr.eps_H, &nr.factor, c);
    const double pdev = -2.0 * nr.pen_llk;
    trace.push_back(pdev);
    if (d.N_lambda == 0) {
      converged = true;
      break;
    }
    if (it > 1 && std::abs(pdev - prev) <= c.tol * std::abs(pdev) && prev_beta.size() == bk.size() &&
        max_abs(bk - prev_beta) <= c.tol * (1.0 + max_abs(bk))) {
      converged = true;
      break;
    }
    prev = pdev;
    prev_beta = bk;
    const auto roots = all_roots(pen);
    Vec q = pen.quads(bk);
    Vec trS = pen.trace_Sinv_Sr(lambda);
    Vec trA = traces_A(nr.factor, roots);
    Vec delta(d.N_lambda);
    for (int r = 0; r < d.N_lambda; ++r) {
      bool fl = false;
      delta[r] = efs_step(lambda[r], trS[r], trA[r], q[r], 1.0, &fl);
      if (fl) {
        const std::string f = "lambda_upper:" + d.lambda_labels[r];
        if (std::find(flags.begin(), flags.end(), f) == flags.end()) flags.push_back(f);
      }
    }
    if (c.control_lambda == LambdaControl::gradient_check && it > 1) {
      // quadratic model of the log-likelihood around beta-hat
      Vec rhs = nr.grad + nr.H * bk;
      bool ok = false;
      for (int h = 0; h <= 10; ++h) {
        Vec lt = lambda + delta;
        HFactor Ft = factor_penalized(nr.H, pen, lt, eps, c);
        Vec b = Ft.solve(rhs);
        Vec g = reml_grad_rho(lt, pen.quads(b), pen.trace_Sinv_Sr(lt), traces_A(Ft, roots), 1.0)
                    .cwiseQuotient(lt);
        if (g.dot(delta) >= 0.0) {
          ok = true;
          break;
        }
        delta *= 0.5;
      }
      if (!ok) {
        delta.setZero();
        ++rejected;
      }
    }
    for (int r = 0; r < d.N_lambda; ++r) lambda[r] = clamp_lambda(lambda[r] + delta[r]);
  }
  if (it > c.max_outer) it = c.max_outer;
  nr = newton_beta(fam, pen, kept, lambda, bk, c);
  FitState s = finalize_gsmm(d, fam, pen, kept, lambda, nr);
  s.iterations = it;
  s.converged = converged;
  s.pen_dev_trace = trace;
  for (const auto& f : flags) s.flags.push_back(f);
  if (rejected) s.flags.push_back("lambda_step_rejected:" + std::to_string(rejected));
  return s;
}

FitState refit_gsmm_at(const PenalizedDesign& d, const GeneralFamily& fam, const Vec& lambda,
                       const EFSControl& c, const Vec* beta0, const std::vector<int>* kept) {
  std::vector<int> k = kept ? *kept : iota_vec(d.N_p);
  PenaltyAlgebra pen(d, k);
  Vec bk = beta0 ? Vec((*beta0)(k)) : Vec(Vec::Zero(k.size()));
  NewtonResult nr = newton_beta(fam, pen, k, lambda, bk, c);
  FitState s = finalize_gsmm(d, fam, pen, k, lambda, nr);
  s.converged = true;
  return s;
}

std::unique_ptr<GeneralFamily> general_family_for(const PenalizedDesign& d,
                                                  const DataTable& data) {
  const std::string& fam = d.spec.family;
  const Vec y = d.response(data);
  if (fam == "coxph") {
    if (d.n_params != 1) throw SpecError("coxph takes a single linear predictor");
    for (const auto& t : d.terms)
      if (t.spec.kind == TermKind::intercept)
        throw SpecError("coxph models must not contain an intercept");
    if (d.spec.event.empty()) throw SpecError("coxph models need an event column");
    const Vec ev = d.to_internal(data.num(d.spec.event));
    IVec delta(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      if (ev[i] != 0.0 && ev[i] != 1.0)
        throw SpecError("event column must be 0/1 (row " + std::to_string(d.row_order[i]) + ")");
      delta[i] = static_cast<int>(ev[i]);
    }
    std::vector<int> order;
    SurvivalData sd = SurvivalData::sorted(y, delta, &order);
    std::vector<Triplet> tr;
    std::vector<int> pos(order.size());
    for (size_t i = 0; i < order.size(); ++i) pos[order[i]] = static_cast<int>(i);
    const SpMat& X = d.X_blocks[0];
    for (int j = 0; j < X.outerSize(); ++j)
      for (SpMat::InnerIterator it(X, j); it; ++it) tr.emplace_back(pos[it.row()], j, it.value());
    SpMat Xs(X.rows(), X.cols());
    Xs.setFromTriplets(tr.begin(), tr.end());
    return std::make_unique<CoxFamily>(std::move(sd), std::move(Xs));
  }
  if (fam == "gaussian_ls" || fam == "gamma_ls") {
    if (d.n_params != 2) throw SpecError(fam + " needs n_params = 2");
    return std::make_unique<GamlssFamily>(ls_family_from_name(fam), y, d.X_blocks);
  }
  if (d.n_params != 1) throw SpecError("family " + fam + " takes a single linear predictor");
  ExponentialFamily ef = ExponentialFamily::from_name(fam);
  LinkFunction link = d.spec.link.empty() ? ef.default_link() : LinkFunction::from_name(d.spec.link);
  ef.check_response(y);
  return std::make_unique<GlmFamily>(ef, link, y, d.X_blocks[0], 1.0);
}

}  // namespace smoothfit
