#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "compact_oracle.hpp"
#include "oracles.hpp"
#include "smoothfit/errors.hpp"
#include "smoothfit/lqefs.hpp"
#include "smoothfit/simulate.hpp"

using namespace smoothfit;

using namespace oracle;

TEST_CASE("compact_push: one BFGS step equals the textbook update") {
  std::mt19937_64 rng(1);
  const int n = 8;
  auto p = random_pairs(n, 1, rng)[0];
  CompactRep r(CompactKind::bfgs_inverse, n, 5);
  r = compact_push(r, p);
  REQUIRE(r.size() == 1);
  const double g = p.s.dot(p.nu) / p.nu.squaredNorm();
  const double rho = 1.0 / p.s.dot(p.nu);
  Mat V = Mat::Identity(n, n) - rho * p.nu * p.s.transpose();
  Mat H = V.transpose() * (g * Mat::Identity(n, n)) * V + rho * p.s * p.s.transpose();
  CHECK((r.dense() - H).cwiseAbs().maxCoeff() <= 1e-12 * H.cwiseAbs().maxCoeff());
}

TEST_CASE("compact_push: the window keeps the newest pairs") {
  std::mt19937_64 rng(2);
  const int n = 12, nv = 4;
  auto pairs = random_pairs(n, nv + 3, rng);
  for (auto kind : {CompactKind::bfgs_inverse, CompactKind::bfgs_hessian, CompactKind::sr1_inverse,
                    CompactKind::sr1_hessian}) {
    CompactRep r(kind, n, nv);
    for (const auto& p : pairs) r = compact_push(r, p);
    REQUIRE(r.size() == nv);
    CHECK((r.queue().front().s - pairs[3].s).norm() == 0.0);
    CHECK(rel_fro(r.dense(), dense_of(r)) <= 1e-8);
  }
}

TEST_CASE("compact_push: degenerate pairs are skipped") {
  const int n = 5;
  Vec s = Vec::LinSpaced(n, 1.0, 2.0);
  // s = nu with unit base: the SR1 denominator vanishes
  for (auto kind : {CompactKind::sr1_hessian, CompactKind::sr1_inverse}) {
    CompactRep r(kind, n, 3, 1.0);
    bool skipped = false;
    r = compact_push(r, {s, s}, &skipped);
    CHECK(skipped);
    CHECK(r.size() == 0);
  }
  // negative curvature is refused by BFGS
  CompactRep b(CompactKind::bfgs_inverse, n, 3);
  bool skipped = false;
  b = compact_push(b, {s, Vec(-s)}, &skipped);
  CHECK(skipped);
  CHECK(b.size() == 0);
  CHECK_THROWS_AS(compact_push(b, {Vec::Ones(n + 1), Vec::Ones(n + 1)}), SpecError);
}

TEST_CASE("compact_matvec") {
  std::mt19937_64 rng(3);
  const int n = 40;
  Vec a = oracle::random_vector(n, rng);
  CompactRep e(CompactKind::bfgs_inverse, n, 5);
  CHECK((compact_matvec(e, a) - e.gamma() * a).norm() == 0.0);

  auto pairs = random_pairs(n, 5, rng);
  CompactRep H(CompactKind::bfgs_hessian, n, 5), V(CompactKind::bfgs_inverse, n, 5);
  for (const auto& p : pairs) {
    H = compact_push(H, p);
    V = compact_push(V, p);
  }
  for (const CompactRep* r : {&H, &V}) {
    Vec dense = dense_of(*r) * a;
    CHECK(oracle::rel_err(compact_matvec(*r, a), dense) <= 1e-10);
  }
  // dual BFGS representations are mutual inverses
  CHECK(oracle::rel_err(V.matvec(H.matvec(a)), a) <= 1e-8);
}

TEST_CASE("secant conditions") {
  std::mt19937_64 rng(4);
  const int n = 30;
  auto pairs = random_pairs(n, 10, rng, 0.05);
  CompactRep b(CompactKind::bfgs_hessian, n, 6), si(CompactKind::sr1_inverse, n, 6),
      sh(CompactKind::sr1_hessian, n, 6);
  for (const auto& p : pairs) {
    b = compact_push(b, p);
    sh = compact_push(sh, p);
    si = compact_push(si, p);
    CHECK(oracle::rel_err(b.matvec(p.s), p.nu) <= 1e-8);
    CHECK(oracle::rel_err(sh.matvec(p.s), p.nu) <= 1e-8);
    CHECK(oracle::rel_err(si.matvec(p.nu), p.s) <= 1e-8);
  }
  // on an exact quadratic SR1 satisfies every secant equation in the window
  CompactRep q(CompactKind::sr1_hessian, n, 6);
  for (const auto& p : random_pairs(n, 9, rng)) q = compact_push(q, p);
  for (const auto& p : q.queue()) CHECK(oracle::rel_err(q.matvec(p.s), p.nu) <= 1e-8);
}

TEST_CASE("penalized_inverse") {
  std::mt19937_64 rng(5);
  const int n = 30;
  SpMat S = random_penalty(n, rng, true);
  CompactRep e(CompactKind::sr1_hessian, n, 6);
  auto pe = penalized_inverse(e, S);
  Vec x = oracle::random_vector(n, rng);
  Mat H0 = e.base() * Mat::Identity(n, n) + Mat(S);
  CHECK(oracle::rel_err(pe.matvec(x), Vec(H0.ldlt().solve(x))) <= 1e-10);

  CompactRep h(CompactKind::sr1_hessian, n, 6);
  for (const auto& p : random_pairs(n, 6, rng, 0.1)) h = compact_push(h, p);
  auto hp = implicit_nearest_psd(h);
  auto pi = penalized_inverse(hp, S);
  Mat dense = hp.dense() + Mat(S);
  CHECK(oracle::rel_err(pi.matvec(x), Vec(dense.lu().solve(x))) <= 1e-8);
  CHECK(oracle::rel_err(Vec(dense * pi.matvec(x)), x) <= 1e-8);

  // S = 0 with an SPD BFGS Hessian: agrees with the dual inverse representation
  CompactRep B(CompactKind::bfgs_hessian, n, 6), V(CompactKind::bfgs_inverse, n, 6);
  for (const auto& p : random_pairs(n, 6, rng)) {
    B = compact_push(B, p);
    V = compact_push(V, p);
  }
  auto pb = penalized_inverse(B, SpMat(n, n));
  CHECK(oracle::rel_err(pb.matvec(x), V.matvec(x)) <= 1e-8);
  CHECK_THROWS_AS(penalized_inverse(V, S), SpecError);
}

TEST_CASE("implicit_nearest_psd") {
  std::mt19937_64 rng(6);
  const int n = 20;
  // already PSD: unchanged as a matrix
  CompactRep b(CompactKind::bfgs_hessian, n, 5);
  for (const auto& p : random_pairs(n, 5, rng)) b = compact_push(b, p);
  bool changed = true;
  auto bp = implicit_nearest_psd(b, &changed);
  CHECK_FALSE(changed);
  CHECK(rel_fro(bp.dense(), b.dense()) <= 1e-10);

  // constructed rep with eigenvalue -0.5
  Mat P = Mat(Eigen::HouseholderQR<Mat>(oracle::random_matrix(n, 3, rng)).householderQ())
              .leftCols(3);
  Vec sig(3);
  sig << -1.5, 0.5, 2.0;
  auto r = CompactRep::projected(n, 1.0, P, sig);
  auto rp = implicit_nearest_psd(r, &changed);
  CHECK(changed);
  CHECK(rel_fro(rp.dense(), nearest_psd_dense(r.dense())) <= 1e-8);
  Eigen::SelfAdjointEigenSolver<Mat> es(rp.dense());
  CHECK(es.eigenvalues().minCoeff() >= 0.0);
}

TEST_CASE("compact_trace_penalty") {
  std::mt19937_64 rng(7);
  const int n = 30;
  // empty queue, diagonal penalty: sum s_i / (1/gamma + lambda s_i)
  Vec sv = oracle::random_vector(n, rng).cwiseAbs();
  SpMat Sr = sparse_from_dense(Mat(sv.asDiagonal()));
  SpMat Dr = sparse_from_dense(Mat(sv.cwiseSqrt().asDiagonal()));
  const double lam = 2.5;
  CompactRep e(CompactKind::sr1_hessian, n, 4);
  auto pe = penalized_inverse(e, lam * Sr);
  double closed = 0.0;
  for (int i = 0; i < n; ++i) closed += sv[i] / (e.base() + lam * sv[i]);
  CHECK(compact_trace_penalty(pe, Dr) == doctest::Approx(closed).epsilon(1e-12));
  CHECK(compact_trace_penalty(pe, SpMat(n, 0)) == 0.0);

  CompactRep h(CompactKind::sr1_hessian, n, 8);
  for (const auto& p : random_pairs(n, 8, rng, 0.1)) h = compact_push(h, p);
  auto hp = implicit_nearest_psd(h);
  Mat B = oracle::random_matrix(n, 4, rng);
  SpMat D = sparse_from_dense(B);
  auto pi = penalized_inverse(hp, lam * Sr);
  const double dense = (Mat(hp.dense() + lam * Mat(Sr)).lu().solve(B * B.transpose())).trace();
  CHECK(std::abs(compact_trace_penalty(pi, D) - dense) <= 1e-8 * std::abs(dense));
}

TEST_CASE("cholesky_of_compact") {
  std::mt19937_64 rng(8);
  const int n = 25;
  SpMat S = random_penalty(n, rng, false);
  CompactRep e(CompactKind::sr1_hessian, n, 5);
  auto fe = cholesky_of_compact(e, S);
  Mat H0 = e.base() * Mat::Identity(n, n) + Mat(S);
  CHECK(rel_fro(fe.reconstruct(), H0) <= 1e-10);

  for (auto kind : {CompactKind::sr1_hessian, CompactKind::bfgs_hessian}) {
    CompactRep h(kind, n, 6);
    for (const auto& p : random_pairs(n, 6, rng, 0.05)) h = compact_push(h, p);
    CompactRep hp = kind == CompactKind::sr1_hessian ? implicit_nearest_psd(h) : h;
    auto f = cholesky_of_compact(hp, S);
    Mat dense = hp.dense() + Mat(S);
    CHECK(rel_fro(f.reconstruct(), dense) <= 1e-8);
    const double ld = Eigen::LDLT<Mat>(dense).vectorD().array().log().sum();
    CHECK(std::abs(f.logdet - ld) <= 1e-8 * std::max(1.0, std::abs(ld)));
  }
}

TEST_CASE("randomized compact-representation corpus") {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 30; ++rep) {
    std::uniform_int_distribution<int> dn(5, 50), dm(1, 10);
    const int n = dn(rng), nv = std::min(dm(rng), n);
    auto pairs = random_pairs(n, nv + 2, rng, 0.02);
    for (auto kind : {CompactKind::bfgs_inverse, CompactKind::bfgs_hessian,
                      CompactKind::sr1_inverse, CompactKind::sr1_hessian}) {
      CompactRep r(kind, n, nv);
      for (const auto& p : pairs) r = compact_push(r, p);
      CHECK(rel_fro(r.dense(), dense_of(r)) <= 1e-8);
    }
  }
}

// ------------------------------------------------------------------ line searches

TEST_CASE("line searches") {
  // f(x) = -0.5 (x - 3)' A (x - 3)
  Mat A(2, 2);
  A << 2.0, 0.5, 0.5, 1.0;
  Vec c(2);
  c << 3.0, -1.0;
  Objective f = [&](const Vec& x) { return -0.5 * (x - c).dot(A * (x - c)); };
  Gradient g = [&](const Vec& x) { return Vec(-A * (x - c)); };
  Vec x0 = Vec::Zero(2);
  Vec newton = A.ldlt().solve(g(x0));
  auto w = wolfe_search(f, g, x0, newton, f(x0), g(x0));
  REQUIRE(w);
  CHECK(w->alpha == 1.0);
  auto a = armijo_search(f, x0, newton, f(x0), g(x0));
  REQUIRE(a);
  CHECK(a->alpha == 1.0);
  CHECK_THROWS_AS(wolfe_search(f, g, x0, Vec(-newton), f(x0), g(x0)), SpecError);
  CHECK_THROWS_AS(armijo_search(f, x0, Vec(-newton), f(x0), g(x0)), SpecError);

  // 1-D concave objective, poorly scaled direction: explicit Wolfe inequalities
  Objective h = [](const Vec& x) { return std::log(x[0]) - 0.01 * x[0]; };
  Gradient hg = [](const Vec& x) { return Vec::Constant(1, 1.0 / x[0] - 0.01); };
  Vec y0 = Vec::Constant(1, 1.0);
  Vec d = Vec::Constant(1, 500.0);
  auto r = wolfe_search(h, hg, y0, d, h(y0), hg(y0));
  REQUIRE(r);
  const double slope0 = hg(y0).dot(d);
  const Vec y1 = y0 + r->alpha * d;
  CHECK(h(y1) >= h(y0) + kWolfeC1 * r->alpha * slope0);
  CHECK(std::abs(hg(y1).dot(d)) <= kWolfeC2 * slope0);
}

// ------------------------------------------------------------------ qefs_accept

TEST_CASE("qefs_accept") {
  Vec trS(2), trA(2), q(2);
  trS << 5.0, 3.0;
  trA << 3.0, 2.0;
  q << 1.0, 0.5;
  CHECK(qefs_accept(trS, trA, trA, q));
  Vec eq = trS - q;  // last rep at exact equilibrium
  CHECK_FALSE(qefs_accept(trS, trA, eq, q));
  CHECK(qefs_accept(trS, trA, Vec(), q));
  std::mt19937_64 rng(10);
  for (int i = 0; i < 50; ++i) {
    Vec a = oracle::random_vector(3, rng), b = oracle::random_vector(3, rng);
    Vec s3 = oracle::random_vector(3, rng), q3 = oracle::random_vector(3, rng);
    const double tc = (s3 - a - q3).cwiseAbs().sum() / 3, tl = (s3 - b - q3).cwiseAbs().sum() / 3;
    CHECK(qefs_accept(s3, a, b, q3) == !(tl < tc));
  }
}

// ------------------------------------------------------------------ L-qEFS fits

TEST_CASE("L-qEFS on a one-smooth Gaussian model") {
  std::mt19937_64 rng(11);
  auto sd = sim::additive(200, "gaussian", 2.0, rng);
  ModelSpec spec;
  spec.response = "y";
  TermSpec ic, sm;
  ic.kind = TermKind::intercept;
  sm.kind = TermKind::smooth;
  sm.covariates = {"v"};
  sm.k = {10};
  spec.terms = {ic, sm};
  auto d = build_design(spec, sd.data);
  Vec y = d.response(sd.data);
  // gaussian log-likelihood at the AM scale estimate, so that lambda matches the AM scaling
  auto am = fit_additive(d, y);
  GlmFamily fam(ExponentialFamily{FamilyKind::gaussian}, LinkFunction{LinkKind::identity}, y,
                d.X_blocks[0], am.phi);
  LQEFSStats st;
  auto q = lqefs_fit(d, fam, {}, nullptr, &st);
  CHECK(q.beta.allFinite());
  // fixed-scale likelihood: lambda is relative to X'X/phi
  CHECK(std::abs(std::log(q.lambda[0] * am.phi) - std::log(am.lambda[0])) <= 0.5);
  Vec truth = d.to_internal(sd.eta);
  const double mse_q = (q.eta.col(0) - truth).squaredNorm(), mse_a = (am.eta.col(0) - truth).squaredNorm();
  CHECK(mse_q <= 2.0 * mse_a);
  // storage stays O(N_p N_V)
  CHECK(st.peak_storage <= 40L * d.N_p * 30);
  // EFS-definedness of the final traces
  for (int r = 0; r < d.N_lambda; ++r) CHECK(q.trS[r] >= q.trA[r] - 1e-10);
}

TEST_CASE("L-qEFS on Cox data tracks the exact-Hessian fit") {
  std::mt19937_64 rng(12);
  auto sd = sim::coxph(500, rng);
  auto d = build_design(sim::coxph_spec(10), sd.data);
  auto fam = general_family_for(d, sd.data);
  auto exact = fit_gsmm(d, *fam, {});
  for (auto upd : {QNUpdate::sr1, QNUpdate::bfgs}) {
    LQEFSControl c;
    c.update = upd;
    auto q = lqefs_fit(d, *fam, c);
    Vec a = q.eta.col(0).array() - q.eta.col(0).mean();
    Vec b = exact.eta.col(0).array() - exact.eta.col(0).mean();
    CHECK(a.dot(b) / (a.norm() * b.norm()) >= 0.98);
  }
}

TEST_CASE("L-qEFS works from finite-difference gradients") {
  struct LlkOnly : GeneralFamily {
    const GeneralFamily& f;
    explicit LlkOnly(const GeneralFamily& g) : f(g) {}
    std::string name() const override { return "llk_only"; }
    int n_coef() const override { return f.n_coef(); }
    double llk(const Vec& b) const override { return f.llk(b); }
    bool has_grad() const override { return false; }
    SpMat neg_hessian(const Vec& b) const override { return f.neg_hessian(b); }
    Mat eta(const Vec& b) const override { return f.eta(b); }
  };
  std::mt19937_64 rng(13);
  auto sd = sim::coxph(200, rng);
  auto d = build_design(sim::coxph_spec(8), sd.data);
  auto fam = general_family_for(d, sd.data);
  LlkOnly lo(*fam);
  auto a = lqefs_fit(d, *fam);
  auto b = lqefs_fit(d, lo);
  Vec ea = a.eta.col(0).array() - a.eta.col(0).mean();
  Vec eb = b.eta.col(0).array() - b.eta.col(0).mean();
  CHECK(ea.dot(eb) / (ea.norm() * eb.norm()) >= 0.98);
  // deterministic given the seed
  auto b2 = lqefs_fit(d, lo);
  CHECK((b.beta - b2.beta).norm() == 0.0);
}
