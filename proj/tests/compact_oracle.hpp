#pragma once
// Dense quasi-Newton recursions and projections used as oracles for the compact representations.

#include <deque>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "oracles.hpp"
#include "smoothfit/lqefs.hpp"
#include "smoothfit/sparsela.hpp"

namespace oracle {

using namespace smoothfit;

// Dense textbook recursions from a fixed base, applied over the pairs in queue order.
inline Mat dense_bfgs_inverse(const std::deque<UpdatePair>& q, double gamma, int n) {
  Mat H = gamma * Mat::Identity(n, n);
  for (const auto& p : q) {
    const double rho = 1.0 / p.s.dot(p.nu);
    Mat V = Mat::Identity(n, n) - rho * p.nu * p.s.transpose();
    H = V.transpose() * H * V + rho * p.s * p.s.transpose();
  }
  return H;
}

inline Mat dense_bfgs_hessian(const std::deque<UpdatePair>& q, double gamma, int n) {
  Mat B = Mat::Identity(n, n) / gamma;
  for (const auto& p : q) {
    Vec Bs = B * p.s;
    B += -Bs * Bs.transpose() / p.s.dot(Bs) + p.nu * p.nu.transpose() / p.nu.dot(p.s);
  }
  return B;
}

inline Mat dense_sr1(const std::deque<UpdatePair>& q, double base, int n, bool inverse) {
  Mat B = base * Mat::Identity(n, n);
  for (const auto& p : q) {
    const Vec& a = inverse ? p.nu : p.s;
    const Vec& b = inverse ? p.s : p.nu;
    Vec r = b - B * a;
    B += r * r.transpose() / r.dot(a);
  }
  return B;
}

inline Mat dense_of(const CompactRep& r) {
  const int n = r.n();
  switch (r.kind()) {
    case CompactKind::bfgs_inverse: return dense_bfgs_inverse(r.queue(), r.gamma(), n);
    case CompactKind::bfgs_hessian: return dense_bfgs_hessian(r.queue(), r.gamma(), n);
    case CompactKind::sr1_inverse: return dense_sr1(r.queue(), r.gamma(), n, true);
    case CompactKind::sr1_hessian: return dense_sr1(r.queue(), 1.0 / r.gamma(), n, false);
    default: return r.dense();
  }
}

// Pairs from a random SPD quadratic with mild non-quadratic noise in nu.
inline std::vector<UpdatePair> random_pairs(int n, int m, std::mt19937_64& rng, double noise = 0.0,
                                     bool spd = true) {
  Mat A = spd ? random_spd(n, rng) : Mat(random_matrix(n, n, rng));
  if (!spd) A = 0.5 * (A + A.transpose());
  std::vector<UpdatePair> out;
  for (int i = 0; i < m; ++i) {
    Vec s = random_vector(n, rng);
    Vec nu = A * s + noise * random_vector(n, rng);
    out.push_back({s, nu});
  }
  return out;
}

inline double rel_fro(const Mat& a, const Mat& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

inline Mat nearest_psd_dense(const Mat& M) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (M + M.transpose()));
  Vec e = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * e.asDiagonal() * es.eigenvectors().transpose();
}

inline SpMat random_penalty(int n, std::mt19937_64& rng, bool diagonal) {
  if (diagonal) {
    Vec v = random_vector(n, rng).cwiseAbs();
    for (int i = 0; i < n / 3; ++i) v[i] = 0.0;  // unpenalized block
    return sparse_from_dense(Mat(v.asDiagonal()));
  }
  Mat B = random_matrix(n, n / 2, rng);
  return sparse_from_dense(B * B.transpose());
}


}  // namespace oracle
