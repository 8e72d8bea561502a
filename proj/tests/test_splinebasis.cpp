#include <doctest.h>

#include "oracles.hpp"
#include "smoothfit/errors.hpp"
#include "smoothfit/splinebasis.hpp"

using namespace smoothfit;

TEST_CASE("degree 0 indicator basis") {
  Vec x(3);
  x << 0.0, 0.25, 1.0;
  auto b = bspline_basis(x, 2, 0);
  CHECK(b.values(1, 0) == 1.0);
  CHECK(b.values(1, 1) == 0.0);
}

TEST_CASE("partition of unity for degrees 0-3") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-3, 5);
  for (int deg = 0; deg <= 3; ++deg) {
    Vec x(200);
    for (int i = 0; i < x.size(); ++i) x[i] = u(rng);
    auto b = bspline_basis(x, 12, deg);
    for (int i = 0; i < x.size(); ++i) {
      CHECK(std::abs(b.values.row(i).sum() - 1.0) <= 1e-12);
      int nz = 0;
      for (int j = 0; j < 12; ++j) {
        CHECK(b.values(i, j) >= -1e-15);
        CHECK(b.values(i, j) <= 1 + 1e-15);
        if (b.values(i, j) != 0.0) ++nz;
      }
      CHECK(nz <= deg + 1);
    }
  }
}

TEST_CASE("cubic basis matches Cox-de Boor recursion") {
  Vec x = Vec::LinSpaced(101, -1.0, 1.0);
  auto b = bspline_basis(x, 10, 3);
  double worst = 0;
  for (int i = 0; i < x.size(); ++i)
    for (int j = 0; j < 10; ++j)
      worst = std::max(worst, std::abs(b.values(i, j) - oracle::cox_de_boor(j, 3, x[i], b.knots, 10)));
  CHECK(worst <= 1e-12);
}

TEST_CASE("basis errors") {
  Vec x = Vec::LinSpaced(5, 0, 1);
  CHECK_THROWS_AS(bspline_basis(x, 3, 3), SpecError);
  auto b = bspline_basis(x, 6, 3);
  Vec out(1);
  out << 1.5;
  CHECK_THROWS_AS(bspline_eval(out, b.knots, 3), DomainError);
  int nclamp = 0;
  Mat c = bspline_eval(out, b.knots, 3, true, &nclamp);
  CHECK(nclamp == 1);
  CHECK(std::abs(c.row(0).sum() - 1.0) < 1e-12);
}

TEST_CASE("difference penalty") {
  auto p = difference_penalty(3, 1);
  Mat expect(3, 3);
  expect << 1, -1, 0, -1, 2, -1, 0, -1, 1;
  CHECK((p.matrix - expect).norm() == 0.0);
  Vec ones = Vec::Ones(3);
  CHECK(std::abs(ones.dot(p.matrix * ones)) < 1e-14);
  auto p2 = difference_penalty(10, 2);
  CHECK(make_penalty(p2.matrix).rank == 8);
  CHECK(p2.rank == 8);
  CHECK_THROWS_AS(difference_penalty(4, 4), SpecError);
  for (int k = 4; k < 15; ++k)
    for (int m = 1; m < k && m < 4; ++m) CHECK(make_penalty(difference_penalty(k, m).matrix).rank == k - m);
}

TEST_CASE("tensor product") {
  Vec x = Vec::LinSpaced(40, 0, 1), z(40);
  for (int i = 0; i < 40; ++i) z[i] = std::sin(3.0 * i);
  auto bx = bspline_basis(x, 5, 3), bz = bspline_basis(z, 5, 3);
  auto [tb, pens] = tensor_product({{bx, difference_penalty(5, 2)}, {bz, difference_penalty(5, 2)}});
  CHECK(tb.values.cols() == 25);
  CHECK(pens.size() == 2);
  // constant along direction 1: coefficients depend only on the direction-2 index
  std::mt19937_64 rng(3);
  Vec c2 = oracle::random_vector(5, rng);
  Vec beta(25);
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b) beta[a * 5 + b] = c2[b];
  CHECK(std::abs(beta.dot(pens[0].matrix * beta)) <= 1e-10 * beta.squaredNorm());
  CHECK(beta.dot(pens[1].matrix * beta) > 1e-3);

  BasisBlock one;
  one.values = Mat::Ones(40, 1);
  PenaltyCore zero;
  zero.matrix = Mat::Zero(1, 1);
  auto [tb2, pens2] = tensor_product({{one, zero}, {bx, difference_penalty(5, 2)}});
  CHECK((tb2.values - bx.values).norm() == 0.0);

  BasisBlock shorter = bz;
  shorter.values = bz.values.topRows(10);
  CHECK_THROWS_AS(tensor_product({{bx, difference_penalty(5, 2)}, {shorter, difference_penalty(5, 2)}}),
                  SpecError);
}

TEST_CASE("sum-to-zero absorption") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  Vec x(60);
  for (int i = 0; i < 60; ++i) x[i] = u(rng);
  auto b = bspline_basis(x, 10, 3);
  auto a = absorb_sumtozero(b, difference_penalty(10, 2));
  CHECK(a.basis.values.cols() == 9);
  CHECK(a.basis.values.colwise().sum().cwiseAbs().maxCoeff() <= 1e-10);
  CHECK(a.penalty.kernel_dim == 1);

  // unpenalized least squares: intercept + constrained basis spans the same space
  Vec y(60);
  for (int i = 0; i < 60; ++i) y[i] = std::sin(6 * x[i]) + 0.1 * std::cos(40 * x[i]);
  Vec f_full = b.values * b.values.colPivHouseholderQr().solve(y);
  Mat Xc(60, 10);
  Xc << Vec::Ones(60), a.basis.values;
  Vec f_con = Xc * Xc.colPivHouseholderQr().solve(y);
  CHECK((f_full - f_con).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("Demmler-Reinsch reparameterization") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 10; ++rep) {
    Vec x(80);
    for (int i = 0; i < 80; ++i) x[i] = u(rng);
    auto b = bspline_basis(x, 8, 3);
    auto S = difference_penalty(8, 1 + rep % 2);
    auto r = demmler_reinsch(b, S);
    Mat I = r.X_tilde.transpose() * r.X_tilde;
    CHECK((I - Mat::Identity(8, 8)).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(r.kernel_dim == 1 + rep % 2);
    for (int i = 1; i < 8; ++i) CHECK(r.S_tilde[i] <= r.S_tilde[i - 1]);
    // quadratic form preserved
    Vec beta = oracle::random_vector(8, rng);
    Vec bt = r.P.lu().solve(beta);
    double q1 = beta.dot(S.matrix * beta), q2 = bt.dot(r.S_tilde.asDiagonal() * bt);
    CHECK(std::abs(q1 - q2) <= 1e-8 * std::max(1.0, std::abs(q1)));
    // penalized fit preserved
    Vec y = oracle::random_vector(80, rng);
    double lam = 0.7;
    Vec f1 = b.values * (b.values.transpose() * b.values + lam * S.matrix).ldlt().solve(b.values.transpose() * y);
    Mat St = r.S_tilde.asDiagonal();
    Vec f2 = r.X_tilde * (r.X_tilde.transpose() * r.X_tilde + lam * St).ldlt().solve(r.X_tilde.transpose() * y);
    CHECK((f1 - f2).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("randomize_smooth") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  Vec x(50);
  for (int i = 0; i < 50; ++i) x[i] = u(rng);
  auto b = bspline_basis(x, 10, 3);
  auto r = demmler_reinsch(b, difference_penalty(10, 1));
  auto pens = randomize_smooth(r);
  REQUIRE(pens.size() == 2);
  CHECK(pens[1].matrix(9, 9) == 1.0);
  CHECK(pens[1].matrix.sum() == 1.0);
  Mat tot = pens[0].matrix + pens[1].matrix;
  Eigen::SelfAdjointEigenSolver<Mat> es(tot);
  CHECK(es.eigenvalues().minCoeff() > 0);
  // positive at any strictly positive weights
  Mat tot2 = 1e-3 * pens[0].matrix + 5.0 * pens[1].matrix;
  CHECK(Eigen::SelfAdjointEigenSolver<Mat>(tot2).eigenvalues().minCoeff() > 0);

  // level indicators with identity penalty: plain ridge on every coefficient
  Mat Xl = Mat::Zero(12, 4);
  for (int i = 0; i < 12; ++i) Xl(i, i % 4) = 1.0;
  BasisBlock bl;
  bl.values = Xl;
  PenaltyCore id;
  id.matrix = Mat::Identity(4, 4);
  id.rank = 4;
  auto rl = demmler_reinsch(bl, id);
  auto pl = randomize_smooth(rl);
  CHECK(pl.size() == 1);
  Mat Pinv = rl.P.inverse();
  Mat back = Pinv.transpose() * pl[0].matrix * Pinv;
  CHECK((back - Mat::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-10);
}
