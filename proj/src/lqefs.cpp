#include "smoothfit/lqefs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "smoothfit/errors.hpp"

namespace smoothfit {

namespace {

bool inverse_kind(CompactKind k) {
  return k == CompactKind::bfgs_inverse || k == CompactKind::sr1_inverse;
}
bool sr1_kind(CompactKind k) {
  return k == CompactKind::sr1_inverse || k == CompactKind::sr1_hessian;
}

void drop_first(Mat& M) {
  const Eigen::Index m = M.rows() - 1;
  M = Mat(M.bottomRightCorner(m, m));
}

SpMat identity_scaled(int n, double v) {
  SpMat I(n, n);
  I.setIdentity();
  return I * v;
}

}  // namespace

CompactRep::CompactRep(CompactKind kind, int n, int max_pairs, double fixed_gamma)
    : kind_(kind), n_(n), max_pairs_(max_pairs), fixed_gamma_(fixed_gamma) {
  if (n < 0 || max_pairs < 1) throw SpecError("CompactRep: invalid dimensions");
  if (fixed_gamma < 0.0 || !std::isfinite(fixed_gamma)) throw SpecError("CompactRep: invalid base");
  if (fixed_gamma > 0.0) gamma_ = fixed_gamma;
  if (kind == CompactKind::psd_projected) throw SpecError("CompactRep: use projected()");
  rebuild();
}

CompactRep CompactRep::projected(int n, double base, Mat P, Vec sigma) {
  CompactRep r;
  r.kind_ = CompactKind::psd_projected;
  r.n_ = n;
  r.max_pairs_ = static_cast<int>(P.cols());
  r.base_ = base;
  r.gamma_ = 1.0 / base;
  r.inner_ = sigma.asDiagonal();
  r.outer_ = std::move(P);
  return r;
}

void CompactRep::rebuild() {
  const int m = size();
  base_ = inverse_kind(kind_) ? gamma_ : 1.0 / gamma_;
  if (m == 0) {
    outer_ = Mat::Zero(n_, 0);
    inner_ = Mat::Zero(0, 0);
    return;
  }
  Mat S(n_, m), Y(n_, m);
  for (int j = 0; j < m; ++j) {
    S.col(j) = queue_[j].s;
    Y.col(j) = queue_[j].nu;
  }
  Mat R = StY_.triangularView<Eigen::Upper>();
  Mat L = StY_.triangularView<Eigen::StrictlyLower>();
  Vec D = StY_.diagonal();
  const double g = gamma_, sig = 1.0 / gamma_;
  switch (kind_) {
    case CompactKind::bfgs_inverse: {
      Mat Rinv = R.triangularView<Eigen::Upper>().solve(Mat::Identity(m, m));
      outer_.resize(n_, 2 * m);
      outer_ << S, g * Y;
      inner_ = Mat::Zero(2 * m, 2 * m);
      Mat mid = D.asDiagonal();
      mid += g * YtY_;
      inner_.topLeftCorner(m, m) = Rinv.transpose() * mid * Rinv;
      inner_.topRightCorner(m, m) = -Rinv.transpose();
      inner_.bottomLeftCorner(m, m) = -Rinv;
      break;
    }
    case CompactKind::bfgs_hessian: {
      outer_.resize(n_, 2 * m);
      outer_ << sig * S, Y;
      Mat mid(2 * m, 2 * m);
      mid << sig * StS_, L, L.transpose(), Mat((-D).asDiagonal());
      inner_ = -mid.fullPivLu().inverse();
      break;
    }
    case CompactKind::sr1_inverse: {
      outer_ = S - g * Y;
      Mat mid = R + R.transpose();
      mid -= Mat(D.asDiagonal());
      mid -= g * YtY_;
      inner_ = mid.fullPivLu().inverse();
      mid_ = mid;
      break;
    }
    case CompactKind::sr1_hessian: {
      outer_ = Y - sig * S;
      Mat mid = L + L.transpose();
      mid += Mat(D.asDiagonal());
      mid -= sig * StS_;
      inner_ = mid.fullPivLu().inverse();
      mid_ = mid;
      break;
    }
    case CompactKind::psd_projected:
      break;
  }
}

Vec CompactRep::matvec(const Vec& a) const {
  if (a.size() != n_) throw SpecError("compact_matvec: dimension mismatch");
  Vec out = base_ * a;
  if (outer_.cols()) out.noalias() += outer_ * (inner_ * (outer_.transpose() * a));
  return out;
}

Mat CompactRep::dense() const {
  Mat M = base_ * Mat::Identity(n_, n_);
  if (outer_.cols()) M += outer_ * inner_ * outer_.transpose();
  return M;
}

long CompactRep::storage() const {
  const long m = size();
  return 2 * m * n_ + 3 * m * m + static_cast<long>(outer_.size() + inner_.size());
}

CompactRep compact_push(const CompactRep& rep, const UpdatePair& pair, bool* skipped) {
  if (skipped) *skipped = false;
  if (rep.kind_ == CompactKind::psd_projected)
    throw SpecError("compact_push: projected representations hold no queue");
  if (pair.s.size() != rep.n_ || pair.nu.size() != rep.n_)
    throw SpecError("compact_push: dimension mismatch");
  auto skip = [&]() {
    if (skipped) *skipped = true;
    return rep;
  };
  if (!pair.s.allFinite() || !pair.nu.allFinite()) return skip();
  const double sn = pair.s.dot(pair.nu), ns = pair.s.norm(), nn = pair.nu.norm();
  if (ns == 0.0 || nn == 0.0) return skip();
  if (!sr1_kind(rep.kind_) && !(sn > kCurvatureSkip * ns * nn)) return skip();

  CompactRep out = rep;
  if (out.size() == out.max_pairs_) {
    out.queue_.pop_front();
    drop_first(out.StY_);
    drop_first(out.StS_);
    drop_first(out.YtY_);
  }
  const int m = out.size();
  out.StY_.conservativeResize(m + 1, m + 1);
  out.StS_.conservativeResize(m + 1, m + 1);
  out.YtY_.conservativeResize(m + 1, m + 1);
  for (int j = 0; j < m; ++j) {
    const auto& q = out.queue_[j];
    out.StY_(m, j) = pair.s.dot(q.nu);
    out.StY_(j, m) = q.s.dot(pair.nu);
    out.StS_(m, j) = out.StS_(j, m) = pair.s.dot(q.s);
    out.YtY_(m, j) = out.YtY_(j, m) = pair.nu.dot(q.nu);
  }
  out.StY_(m, m) = sn;
  out.StS_(m, m) = ns * ns;
  out.YtY_(m, m) = nn * nn;
  out.queue_.push_back(pair);
  // With s'nu/nu'nu the newest SR1 inverse denominator vanishes identically, so the SR1
  // inverse takes the other spectral scale.
  double g = out.kind_ == CompactKind::sr1_inverse ? ns * ns / sn : sn / (nn * nn);
  if (!(g > 0.0) || !std::isfinite(g)) g = 1.0;  // negative curvature: identity base
  out.gamma_ = out.fixed_gamma_ > 0.0 ? out.fixed_gamma_ : g;
  out.rebuild();
  if (!out.inner_.allFinite()) return skip();

  if (sr1_kind(out.kind_)) {
    // SR1 denominator of the newest pair against the recursion over the older ones.
    const bool inv = out.kind_ == CompactKind::sr1_inverse;
    const Vec& a = inv ? pair.nu : pair.s;
    const Vec& b = inv ? pair.s : pair.nu;
    Vec r = b - out.base_ * a;
    if (m > 0) {
      Mat Up = out.outer_.leftCols(m);
      // older pairs in the same base: leading block of the middle matrix
      Eigen::FullPivLU<Mat> lu(Mat(out.mid_.topLeftCorner(m, m)));
      if (!lu.isInvertible()) return skip();
      r -= Up * lu.solve(Vec(Up.transpose() * a));
    }
    const double den = r.dot(a);
    if (!(std::abs(den) > kSr1Skip * a.norm() * r.norm())) return skip();
  }
  return out;
}

Vec compact_matvec(const CompactRep& rep, const Vec& a) { return rep.matvec(a); }

CompactRep implicit_nearest_psd(const CompactRep& rep, bool* changed) {
  if (changed) *changed = false;
  const int n = rep.n();
  const Mat& Q = rep.outer();
  const double base = rep.base();
  if (!(base > 0.0)) throw NumericError("implicit_nearest_psd: base must be positive");
  if (Q.cols() == 0) return CompactRep::projected(n, base, Mat::Zero(n, 0), Vec());
  const int k = static_cast<int>(std::min<Eigen::Index>(n, Q.cols()));
  Eigen::HouseholderQR<Mat> qr(Q);
  Mat Q1 = qr.householderQ() * Mat::Identity(n, k);
  Mat R1 = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  Mat inner = R1 * rep.inner() * R1.transpose();
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(inner);
  Vec sig = es.eigenvalues();
  const double scale = std::max(base, sig.cwiseAbs().maxCoeff());
  const double lift = 16.0 * std::numeric_limits<double>::epsilon() * scale;
  for (int l = 0; l < k; ++l) {
    if (sig[l] + base < 0.0) {
      sig[l] = -base + lift;
      if (changed) *changed = true;
    }
  }
  return CompactRep::projected(n, base, Q1 * es.eigenvectors(), sig);
}

// ------------------------------------------------------------------ penalized inverse

PenalizedInverseRep::PenalizedInverseRep(const CompactRep& h, const SpMat& S_lambda) {
  if (inverse_kind(h.kind()))
    throw SpecError("penalized_inverse: needs a Hessian representation");
  const int n = h.n();
  if (S_lambda.rows() != n || S_lambda.cols() != n)
    throw SpecError("penalized_inverse: penalty dimension mismatch");
  const double base = h.base() > 0.0 ? h.base() : 1.0;
  SpMat H0 = identity_scaled(n, base) + S_lambda;
  h0_ = HFactor::plain(H0);
  const Mat& Q = h.outer();
  C_ = h.inner();
  M_ = Q.cols() ? h0_.solve(Q) : Mat::Zero(n, 0);
  const Eigen::Index m = Q.cols();
  if (m) {
    Mat A = Mat::Identity(m, m) + C_ * (Q.transpose() * M_);
    Eigen::FullPivLU<Mat> lu(A);
    if (!lu.isInvertible()) throw NumericError("penalized_inverse: Woodbury core is singular");
    Ainv_ = lu.inverse();
  } else {
    Ainv_ = Mat::Zero(0, 0);
  }
}

Vec PenalizedInverseRep::matvec(const Vec& x) const {
  Vec out = h0_.solve(x);
  if (M_.cols()) out.noalias() -= M_ * (Ainv_ * (C_ * (M_.transpose() * x)));
  return out;
}

double PenalizedInverseRep::trace(const SpMat& D) const {
  if (D.cols() == 0) return 0.0;
  double t = h0_.trace_inv(D);
  if (M_.cols()) {
    Mat G = M_.transpose() * D;
    t -= (Ainv_ * C_ * (G * G.transpose())).trace();
  }
  return t;
}

PenalizedInverseRep penalized_inverse(const CompactRep& h, const SpMat& S_lambda) {
  return PenalizedInverseRep(h, S_lambda);
}

double compact_trace_penalty(const PenalizedInverseRep& inv, const SpMat& D) {
  return inv.trace(D);
}

// ------------------------------------------------------------------ Cholesky of a compact rep

CholeskyFactor cholesky_of_compact(const CompactRep& h, const SpMat& S_lambda) {
  if (inverse_kind(h.kind()))
    throw SpecError("cholesky_of_compact: needs a Hessian representation");
  const int n = h.n();
  const double base = h.base() > 0.0 ? h.base() : 1.0;
  CholeskyFactor f0 = pivoted_cholesky(identity_scaled(n, base) + S_lambda);
  if (h.outer().cols() == 0) return f0;

  // K' = L' P so that K K' = H0
  Eigen::PermutationMatrix<Eigen::Dynamic> P(n);
  for (int k = 0; k < n; ++k) P.indices()[f0.perm[k]] = k;
  SpMat Kt = SpMat(f0.L.transpose()) * P;

  Mat C = h.inner();
  C = 0.5 * (C + C.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(C);
  std::vector<int> pos, neg;
  const double tiny = 1e-14 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  for (int l = 0; l < C.rows(); ++l) {
    if (es.eigenvalues()[l] > tiny) pos.push_back(l);
    else if (es.eigenvalues()[l] < -tiny) neg.push_back(l);
  }
  Mat Ep(C.rows(), pos.size());
  for (size_t j = 0; j < pos.size(); ++j)
    Ep.col(j) = es.eigenvectors().col(pos[j]) * std::sqrt(es.eigenvalues()[pos[j]]);
  QRFactor qr = penalized_qr(Kt, sparse_from_dense(h.outer() * Ep), nullptr, 0.0);
  if (static_cast<int>(qr.kept.size()) != n)
    throw NumericError("cholesky_of_compact: stacked QR lost rank");
  CholeskyFactor f = qr.as_cholesky();
  if (neg.empty()) return f;

  // Remove the negative part by rank-one downdates of the dense factor (permuted order).
  Mat L = Mat(f.L);
  for (int k = 0; k < n; ++k)
    if (L(k, k) < 0) L.col(k) = -L.col(k);
  for (int l : neg) {
    Vec v = h.outer() * es.eigenvectors().col(l) * std::sqrt(-es.eigenvalues()[l]);
    Vec w(n);
    for (int k = 0; k < n; ++k) w[k] = v[f.perm[k]];
    for (int k = 0; k < n; ++k) {
      const double r2 = L(k, k) * L(k, k) - w[k] * w[k];
      if (!(r2 > 0.0))
        throw IndefiniteError(k, "cholesky_of_compact: approximation is not positive definite");
      const double r = std::sqrt(r2), c = r / L(k, k), s = w[k] / L(k, k);
      L(k, k) = r;
      for (int i = k + 1; i < n; ++i) {
        L(i, k) = (L(i, k) - s * w[i]) / c;
        w[i] = c * w[i] - s * L(i, k);
      }
    }
  }
  f.L = sparse_from_dense(Mat(L.triangularView<Eigen::Lower>()));
  f.L.makeCompressed();
  f.logdet = 2.0 * L.diagonal().array().log().sum();
  f.symbolic = nullptr;
  return f;
}

// ------------------------------------------------------------------ line searches

std::optional<LineSearchResult> armijo_search(const Objective& f, const Vec& x, const Vec& d,
                                              double f0, const Vec& g0, int max_eval) {
  const double slope = g0.dot(d);
  if (!(slope > 0.0)) throw SpecError("armijo_search: direction is not an ascent direction");
  LineSearchResult r;
  double a = 1.0;
  for (int e = 0; e < max_eval; ++e, a *= 0.5) {
    const double fa = f(x + a * d);
    ++r.evaluations;
    if (std::isfinite(fa) && fa >= f0 + kWolfeC1 * a * slope) {
      r.alpha = a;
      r.f = fa;
      return r;
    }
  }
  return std::nullopt;
}

std::optional<LineSearchResult> wolfe_search(const Objective& f, const Gradient& grad,
                                             const Vec& x, const Vec& d, double f0,
                                             const Vec& g0, int max_eval) {
  const double slope0 = g0.dot(d);
  if (!(slope0 > 0.0)) throw SpecError("wolfe_search: direction is not an ascent direction");
  LineSearchResult r;
  struct Pt {
    double a, f, slope;
    Vec g;
  };
  auto eval = [&](double a) {
    Pt p{a, f(x + a * d), 0.0, Vec()};
    ++r.evaluations;
    if (std::isfinite(p.f)) {
      p.g = grad(x + a * d);
      p.slope = p.g.dot(d);
    }
    return p;
  };
  auto sufficient = [&](const Pt& p) {
    return std::isfinite(p.f) && p.f >= f0 + kWolfeC1 * p.a * slope0;
  };
  auto curvature = [&](const Pt& p) { return std::abs(p.slope) <= kWolfeC2 * slope0; };
  auto done = [&](const Pt& p) {
    r.alpha = p.a;
    r.f = p.f;
    r.grad = p.g;
    return std::optional<LineSearchResult>(r);
  };

  Pt lo{0.0, f0, slope0, g0};
  Pt hi{};
  bool bracketed = false;
  double a = 1.0;
  while (r.evaluations < max_eval) {
    Pt p = eval(a);
    if (!sufficient(p) || (p.f <= lo.f && lo.a > 0)) {
      hi = p;
      bracketed = true;
      break;
    }
    if (curvature(p)) return done(p);
    if (p.slope <= 0.0) {
      hi = lo;
      lo = p;
      bracketed = true;
      break;
    }
    lo = p;
    a *= 2.0;
  }
  if (!bracketed) return std::nullopt;
  // zoom between lo (satisfies sufficient increase) and hi
  while (r.evaluations < max_eval) {
    double at;
    if (std::isfinite(hi.f)) {
      // maximizer of the quadratic through lo (value, slope) and hi (value)
      const double da = hi.a - lo.a;
      const double den = 2.0 * (hi.f - lo.f - lo.slope * da);
      at = den != 0.0 ? lo.a - lo.slope * da * da / den : 0.5 * (lo.a + hi.a);
    } else {
      at = 0.5 * (lo.a + hi.a);
    }
    const double a0 = std::min(lo.a, hi.a), a1 = std::max(lo.a, hi.a);
    const double margin = 0.1 * (a1 - a0);
    if (!(at > a0 + margin && at < a1 - margin)) at = 0.5 * (lo.a + hi.a);
    Pt p = eval(at);
    if (!sufficient(p) || p.f <= lo.f) {
      hi = p;
    } else {
      if (curvature(p)) return done(p);
      if (p.slope * (hi.a - lo.a) <= 0.0) hi = lo;
      lo = p;
    }
    if (std::abs(hi.a - lo.a) < 1e-14 * std::max(1.0, lo.a)) break;
  }
  return std::nullopt;
}

// ------------------------------------------------------------------ L-qEFS

bool qefs_accept(const Vec& trS, const Vec& trA_current, const Vec& trA_last, const Vec& quad) {
  if (trA_last.size() == 0) return true;
  const Vec t = trS - trA_current - quad;
  const Vec ts = trS - trA_last - quad;
  return !(ts.cwiseAbs().mean() < t.cwiseAbs().mean());
}

namespace {

struct Traces {
  Vec trA;
  PenalizedInverseRep inv;
};

Traces traces_for(const CompactRep& h, const SpMat& S, const std::vector<SpMat>& roots) {
  Traces t{Vec(roots.size()), PenalizedInverseRep(h, S)};
  for (size_t r = 0; r < roots.size(); ++r) t.trA[r] = t.inv.trace(roots[r]);
  return t;
}

}  // namespace

FitState lqefs_fit(const PenalizedDesign& d, const GeneralFamily& fam, const LQEFSControl& c,
                   const Vec* beta0, LQEFSStats* stats_out) {
  if (fam.n_coef() != d.N_p) throw SpecError("family and design disagree on coefficient count");
  if (c.n_v < 1 || c.n_i < 1 || !(c.tol > 0) || c.max_outer < 1)
    throw SpecError("invalid L-qEFS control");
  const int n = d.N_p;
  PenaltyAlgebra pen(d);
  std::vector<SpMat> roots;
  for (int r = 0; r < d.N_lambda; ++r) roots.push_back(pen.root_r(r));
  Vec lambda = Vec::Ones(d.N_lambda);
  SpMat S = pen.S_lambda(lambda);
  LQEFSStats st;
  std::vector<std::string> flags;

  auto llk = [&](const Vec& b) { return fam.llk(b); };
  auto grad = [&](const Vec& b) { return fam.grad(b); };
  auto Lpen = [&](const Vec& b) { return fam.llk(b) - 0.5 * b.dot(S * b); };
  auto Gpen = [&](const Vec& b) { return Vec(fam.grad(b) - S * b); };

  Vec beta = beta0 ? *beta0 : Vec(Vec::Zero(n));
  if (beta.size() != n) throw SpecError("lqefs_fit: start vector has the wrong length");

  // Gradient steps from the start; shrink towards a random draw when they fail.
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> nd;
  auto shrink = [&]() {
    Vec z(n);
    for (int j = 0; j < n; ++j) z[j] = nd(rng);
    beta = 0.5 * (beta + z);
    ++st.restarts;
  };
  for (int ok = 0, tries = 0; ok < c.init_gradient_steps && tries < 200; ++tries) {
    const double f0 = Lpen(beta);
    if (!std::isfinite(f0)) {
      if (st.restarts >= 20) throw NumericError("lqefs_fit: no finite starting point");
      shrink();
      ok = 0;
      continue;
    }
    const Vec g0 = Gpen(beta);
    if (g0.norm() <= 1e-12 * (1.0 + std::abs(f0))) break;
    const Vec dir = g0 / std::max(1.0, g0.cwiseAbs().maxCoeff());
    auto r = armijo_search(Lpen, beta, dir, f0, g0);
    if (r) {
      beta += r->alpha * dir;
      ++ok;
    } else {
      if (st.restarts >= 20) break;
      shrink();
      ok = 0;
    }
  }

  const CompactKind hk =
      c.update == QNUpdate::sr1 ? CompactKind::sr1_hessian : CompactKind::bfgs_hessian;
  const CompactKind ik =
      c.update == QNUpdate::sr1 ? CompactKind::sr1_inverse : CompactKind::bfgs_inverse;
  CompactRep Hq(hk, n, c.n_v), Iq(ik, n, c.n_v);  // persist across lambda updates
  std::optional<CompactRep> H_last;
  CompactRep H_use(hk, n, c.n_v);
  auto search = [&](const Objective& f, const Gradient& g, const Vec& x, const Vec& dir,
                    double f0, const Vec& g0) {
    return c.update == QNUpdate::bfgs ? wolfe_search(f, g, x, dir, f0, g0)
                                      : armijo_search(f, x, dir, f0, g0);
  };
  auto track = [&](long extra) {
    st.peak_storage = std::max(st.peak_storage, Hq.storage() + Iq.storage() +
                                                    H_use.storage() + extra +
                                                    (H_last ? H_last->storage() : 0L));
  };

  std::vector<double> trace;
  double prev = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  int it = 0;
  for (; it < c.max_outer; ++it) {
    S = pen.S_lambda(lambda);

    // Phase 1: L-BFGS on the penalized log-likelihood.
    {
      CompactRep V(CompactKind::bfgs_inverse, n, c.n_v);
      double f = Lpen(beta);
      Vec g = Gpen(beta);
      const int p1 = std::max(1, c.n_i - c.n_v);
      for (int i = 0; i < p1; ++i) {
        if (g.norm() <= 1e-12 * (1.0 + std::abs(f))) break;
        Vec dir = V.matvec(g);
        if (!(g.dot(dir) > 0.0)) {
          dir = g;
          V = CompactRep(CompactKind::bfgs_inverse, n, c.n_v);
        }
        auto r = wolfe_search(Lpen, Gpen, beta, dir, f, g);
        if (!r) {
          ++st.gradient_fallbacks;
          dir = g;
          r = wolfe_search(Lpen, Gpen, beta, dir, f, g);
          if (!r) break;
        }
        const Vec s = r->alpha * dir;
        beta += s;
        V = compact_push(V, {s, g - r->grad});
        track(V.storage());
        const bool small = std::abs(r->f - f) < 1e-6 * (1.0 + std::abs(f));
        f = r->f;
        g = r->grad;
        ++st.phase1_steps;
        if (small) break;
      }
    }

    // Phase 2: indirect updates collecting curvature of the log-likelihood near beta.
    const int p2max = std::max(c.n_v, c.phase2_cap_factor * c.n_v);
    for (int i = 0; i < p2max; ++i) {
      const Vec g1 = grad(beta);
      const double fu = llk(beta);
      bool moved = false;
      {
        const CompactRep Iuse = c.update == QNUpdate::sr1 ? implicit_nearest_psd(Iq) : Iq;
        Vec dir = Iuse.matvec(g1);
        if (!(g1.dot(dir) > 0.0)) dir = g1;
        std::optional<LineSearchResult> r;
        if (g1.norm() > 0) r = search(llk, grad, beta, dir, fu, g1);
        if ((!r || (r->alpha * dir).norm() <= 1e-14 * (1.0 + beta.norm())) && g1.norm() > 0) {
          ++st.gradient_fallbacks;
          dir = g1 / std::max(1.0, g1.cwiseAbs().maxCoeff());
          r = search(llk, grad, beta, dir, fu, g1);
        }
        if (r) {
          const Vec s = r->alpha * dir;
          const Vec g2 = r->grad.size() ? r->grad : grad(beta + s);
          const UpdatePair p{s, g1 - g2};
          Hq = compact_push(Hq, p);
          Iq = compact_push(Iq, p);
        }
      }
      H_use = c.update == QNUpdate::sr1 ? implicit_nearest_psd(Hq) : Hq;
      PenalizedInverseRep Vp(H_use, S);
      const Vec gp = g1 - S * beta;
      const double fp = fu - 0.5 * beta.dot(S * beta);
      double fnew = fp;
      if (gp.norm() > 1e-12 * (1.0 + std::abs(fp))) {
        Vec dir = Vp.matvec(gp);
        if (!(gp.dot(dir) > 0.0)) dir = gp;
        auto r = search(Lpen, Gpen, beta, dir, fp, gp);
        if (!r) {
          ++st.gradient_fallbacks;
          dir = gp / std::max(1.0, gp.cwiseAbs().maxCoeff());
          r = search(Lpen, Gpen, beta, dir, fp, gp);
        }
        if (r) {
          beta += r->alpha * dir;
          fnew = r->f;
          moved = true;
        }
      }
      ++st.phase2_steps;
      track(Vp.storage());
      if (i + 1 >= c.n_v && std::abs(fnew - fp) <= c.tol * (1.0 + std::abs(fp))) break;
      if (!moved && i + 1 >= c.n_v) break;
    }
    H_use = c.update == QNUpdate::sr1 ? implicit_nearest_psd(Hq) : Hq;

    // Lambda update from the current or the last accepted approximation.
    const Vec quad = pen.quads(beta);
    const Vec trS = pen.trace_Sinv_Sr(lambda);
    Traces cur = traces_for(H_use, S, roots);
    Vec trA = cur.trA;
    if (H_last) {
      Traces last = traces_for(*H_last, S, roots);
      if (!qefs_accept(trS, cur.trA, last.trA, quad)) {
        trA = last.trA;
        H_use = *H_last;
        ++st.kept_last_inverse;
      } else {
        H_last = H_use;
      }
    } else {
      H_last = H_use;
    }

    const double Lcur = Lpen(beta);
    trace.push_back(-2.0 * Lcur);
    Vec lnew(d.N_lambda);
    bool zero_quad = false;
    for (int r = 0; r < d.N_lambda; ++r) {
      bool flag = false;
      lnew[r] = efs_update(lambda[r], trS[r], trA[r], quad[r], 1.0, &flag);
      zero_quad = zero_quad || flag;
    }
    if (zero_quad && std::find(flags.begin(), flags.end(), "lambda_upper_zero_quad") == flags.end())
      flags.push_back("lambda_upper_zero_quad");
    Vec drho = (lnew.array().log() - lambda.array().log()).matrix();

    if (c.control_lambda == LambdaControl::gradient_check && d.N_lambda > 0) {
      bool accepted = false;
      for (int h = 0; h <= 10; ++h) {
        const Vec lt = (lambda.array().log() + drho.array()).exp().matrix();
        const SpMat St = pen.S_lambda(lt);
        PenalizedInverseRep Vt(H_use, St);
        const Vec bt = beta + Vt.matvec(Vec(grad(beta) - St * beta));
        Vec trAt(d.N_lambda);
        for (int r = 0; r < d.N_lambda; ++r) trAt[r] = Vt.trace(roots[r]);
        const Vec gr = reml_grad_rho(lt, pen.quads(bt), pen.trace_Sinv_Sr(lt), trAt, 1.0);
        if (gr.dot(drho) >= 0.0) {
          accepted = true;
          break;
        }
        drho *= 0.5;
      }
      if (!accepted) {
        flags.push_back("lambda_step_rejected");
        converged = true;
        break;
      }
    }

    const bool small_l = std::isfinite(prev) && std::abs(Lcur - prev) <= c.tol * (1.0 + std::abs(Lcur));
    if (small_l && drho.cwiseAbs().maxCoeff() <= c.rho_tol) {
      converged = true;
      break;
    }
    prev = Lcur;
    lambda = (lambda.array().log() + drho.array()).exp().matrix();
    for (int r = 0; r < d.N_lambda; ++r) lambda[r] = clamp_lambda(lambda[r]);
  }

  // Final state at the accepted approximation.
  S = pen.S_lambda(lambda);
  const CompactRep Hfin = H_last ? *H_last : H_use;
  FitState s;
  s.kind = "lqefs";
  s.N = d.N;
  s.lambda = lambda;
  for (int j = 0; j < n; ++j) s.kept.push_back(j);
  s.pen = pen;
  s.factor = HFactor::from_cholesky(cholesky_of_compact(Hfin, S));
  s.hessian_rep = std::make_shared<const CompactRep>(Hfin);
  s.beta = beta;
  s.phi = 1.0;
  s.has_phi = false;
  s.quad = pen.quads(beta);
  s.trS = pen.trace_Sinv_Sr(lambda);
  s.trA.resize(d.N_lambda);
  for (int r = 0; r < d.N_lambda; ++r) s.trA[r] = s.factor.trace_inv(roots[r]);
  s.grad_rho = reml_grad_rho(lambda, s.quad, s.trS, s.trA, 1.0);
  s.edf = n - lambda.dot(s.trA);
  s.eta.resize(d.N, d.n_params);
  for (int p = 0; p < d.n_params; ++p)
    s.eta.col(p) = d.X_blocks[p] * beta.segment(d.param_offsets[p],
                                                d.param_offsets[p + 1] - d.param_offsets[p]);
  s.llk = fam.llk(beta);
  s.penalized_llk = s.llk - 0.5 * beta.dot(S * beta);
  s.pen_deviance = -2.0 * s.penalized_llk;
  s.reml = reml_value(s.llk, s.quad.dot(lambda), pen.logdet_plus(lambda), pen.rank(),
                      s.factor.logdet(), n, 1.0);
  s.term_edf = term_edf(d, s);
  s.iterations = it + (converged ? 1 : 0);
  s.converged = converged;
  flags.push_back("approximate_hessian");
  s.flags = flags;
  s.pen_dev_trace = trace;
  if (stats_out) *stats_out = st;
  return s;
}

}  // namespace smoothfit
