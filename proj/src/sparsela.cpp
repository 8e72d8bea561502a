#include "smoothfit/sparsela.hpp"

#include <Eigen/OrderingMethods>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "smoothfit/errors.hpp"

namespace smoothfit {

namespace {

IVec invert_perm(const IVec& p) {
  IVec q(p.size());
  for (int k = 0; k < p.size(); ++k) q[p[k]] = k;
  return q;
}

long long pattern_hash(const SpMat& A) {
  // FNV-style over the compressed index arrays
  unsigned long long h = 1469598103934665603ULL;
  auto mix = [&](long long v) {
    h ^= static_cast<unsigned long long>(v) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  };
  mix(A.rows());
  mix(A.cols());
  for (int j = 0; j <= A.outerSize(); ++j) mix(A.outerIndexPtr()[j]);
  for (int p = 0; p < A.nonZeros(); ++p) mix(A.innerIndexPtr()[p]);
  return static_cast<long long>(h);
}

// Upper triangle of P A P' in compressed columns; A must be stored fully symmetric.
struct UpperCSC {
  int n = 0;
  std::vector<int> p, i;
  std::vector<double> x;
};

UpperCSC permuted_upper(const SpMat& A, const IVec& pinv) {
  const int n = static_cast<int>(A.rows());
  UpperCSC C;
  C.n = n;
  std::vector<int> cnt(n + 1, 0);
  for (int j = 0; j < n; ++j)
    for (SpMat::InnerIterator it(A, j); it; ++it) {
      int a = pinv[it.row()], b = pinv[j];
      if (a <= b) ++cnt[b + 1];
    }
  for (int j = 0; j < n; ++j) cnt[j + 1] += cnt[j];
  C.p = cnt;
  C.i.resize(cnt[n]);
  C.x.resize(cnt[n]);
  std::vector<int> pos(cnt.begin(), cnt.end() - 1);
  for (int j = 0; j < n; ++j)
    for (SpMat::InnerIterator it(A, j); it; ++it) {
      int a = pinv[it.row()], b = pinv[j];
      if (a <= b) {
        int q = pos[b]++;
        C.i[q] = a;
        C.x[q] = it.value();
      }
    }
  return C;
}

std::vector<int> etree_upper(const UpperCSC& C) {
  std::vector<int> parent(C.n, -1), ancestor(C.n, -1);
  for (int k = 0; k < C.n; ++k) {
    for (int p = C.p[k]; p < C.p[k + 1]; ++p) {
      int i = C.i[p];
      while (i != -1 && i < k) {
        int inext = ancestor[i];
        ancestor[i] = k;
        if (inext == -1) parent[i] = k;
        i = inext;
      }
    }
  }
  return parent;
}

// Pattern of row k of L (excluding the diagonal) into s[top..n-1]; returns top.
int ereach(const UpperCSC& C, int k, const std::vector<int>& parent, std::vector<int>& s,
           std::vector<int>& mark, int stamp) {
  int top = C.n;
  mark[k] = stamp;
  for (int p = C.p[k]; p < C.p[k + 1]; ++p) {
    int i = C.i[p];
    if (i > k) continue;
    int len = 0;
    for (; mark[i] != stamp; i = parent[i]) {
      s[len++] = i;
      mark[i] = stamp;
    }
    while (len > 0) s[--top] = s[--len];
  }
  return top;
}

std::vector<std::vector<int>> column_structure(const UpperCSC& C, const std::vector<int>& parent) {
  std::vector<std::vector<int>> cols(C.n);
  std::vector<int> s(C.n), mark(C.n, -1);
  for (int k = 0; k < C.n; ++k) {
    cols[k].push_back(k);
    int top = ereach(C, k, parent, s, mark, k);
    for (int t = top; t < C.n; ++t) cols[s[t]].push_back(k);
  }
  return cols;
}

}  // namespace

SpMat sparse_from_dense(const Mat& M, double droptol) {
  std::vector<Triplet> t;
  for (Eigen::Index j = 0; j < M.cols(); ++j)
    for (Eigen::Index i = 0; i < M.rows(); ++i)
      if (std::abs(M(i, j)) > droptol) t.emplace_back(i, j, M(i, j));
  SpMat S(M.rows(), M.cols());
  S.setFromTriplets(t.begin(), t.end());
  return S;
}

bool is_symmetric(const SpMat& A, double tol) {
  if (A.rows() != A.cols()) return false;
  SpMat D = A - SpMat(A.transpose());
  double mx = 0, ref = 0;
  for (int j = 0; j < D.outerSize(); ++j)
    for (SpMat::InnerIterator it(D, j); it; ++it) mx = std::max(mx, std::abs(it.value()));
  for (int j = 0; j < A.outerSize(); ++j)
    for (SpMat::InnerIterator it(A, j); it; ++it) ref = std::max(ref, std::abs(it.value()));
  return mx <= tol * std::max(1.0, ref);
}

IVec fill_reducing_permutation(const SpMat& A) {
  if (A.rows() != A.cols()) throw SpecError("fill_reducing_permutation: matrix not square");
  const int n = static_cast<int>(A.rows());
  if (n == 0) return IVec();
  SpMat pat = A;
  pat.prune(0.0);
  Eigen::AMDOrdering<int> amd;
  Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> P;
  amd(pat, P);
  // indices()[k] is the original index eliminated k-th
  return P.indices();
}

std::shared_ptr<const CholSymbolic> chol_analyze(const SpMat& A, const IVec* perm) {
  if (A.rows() != A.cols()) throw SpecError("chol_analyze: matrix not square");
  auto sym = std::make_shared<CholSymbolic>();
  sym->n = static_cast<int>(A.rows());
  sym->perm = perm ? *perm : fill_reducing_permutation(A);
  if (sym->perm.size() != sym->n) throw SpecError("chol_analyze: permutation size mismatch");
  sym->pinv = invert_perm(sym->perm);
  sym->pattern_key = pattern_hash(A);
  UpperCSC C = permuted_upper(A, sym->pinv);
  sym->parent = etree_upper(C);
  std::vector<int> count(sym->n, 1), s(sym->n), mark(sym->n, -1);
  for (int k = 0; k < sym->n; ++k) {
    int top = ereach(C, k, sym->parent, s, mark, k);
    for (int t = top; t < sym->n; ++t) ++count[s[t]];
  }
  sym->Lp.assign(sym->n + 1, 0);
  for (int j = 0; j < sym->n; ++j) sym->Lp[j + 1] = sym->Lp[j] + count[j];
  return sym;
}

CholeskyFactor pivoted_cholesky(const SpMat& A, std::shared_ptr<const CholSymbolic> sym) {
  if (A.rows() != A.cols()) throw SpecError("pivoted_cholesky: matrix not square");
  if (!sym || sym->n != A.rows() || sym->pattern_key != pattern_hash(A)) sym = chol_analyze(A);
  const int n = sym->n;
  UpperCSC C = permuted_upper(A, sym->pinv);
  const auto& Lp = sym->Lp;
  const int nnz = Lp[n];
  std::vector<int> Li(nnz), c(Lp.begin(), Lp.end() - 1), s(n), mark(n, -1);
  std::vector<double> Lx(nnz), x(n, 0.0);
  double logdet = 0.0;
  for (int k = 0; k < n; ++k) {
    int top = ereach(C, k, sym->parent, s, mark, k);
    x[k] = 0.0;
    for (int p = C.p[k]; p < C.p[k + 1]; ++p)
      if (C.i[p] <= k) x[C.i[p]] += C.x[p];
    double d = x[k];
    x[k] = 0.0;
    for (; top < n; ++top) {
      int i = s[top];
      double lki = x[i] / Lx[Lp[i]];
      x[i] = 0.0;
      for (int p = Lp[i] + 1; p < c[i]; ++p) x[Li[p]] -= Lx[p] * lki;
      d -= lki * lki;
      int p = c[i]++;
      Li[p] = k;
      Lx[p] = lki;
    }
    if (!(d > 0.0))
      throw IndefiniteError(k, "pivoted_cholesky: non-positive pivot at position " +
                                   std::to_string(k) + " (original index " +
                                   std::to_string(sym->perm[k]) + ")");
    int p = c[k]++;
    Li[p] = k;
    Lx[p] = std::sqrt(d);
    logdet += std::log(d);
  }
  CholeskyFactor f;
  f.L.resize(n, n);
  f.L.resizeNonZeros(nnz);
  std::copy(Lp.begin(), Lp.end(), f.L.outerIndexPtr());
  std::copy(Li.begin(), Li.end(), f.L.innerIndexPtr());
  std::copy(Lx.begin(), Lx.end(), f.L.valuePtr());
  f.perm = sym->perm;
  f.pinv = sym->pinv;
  f.logdet = logdet;
  f.symbolic = sym;
  return f;
}

void lower_solve_inplace(const SpMat& L, double* x, int start) {
  const int n = static_cast<int>(L.cols());
  const int* Lp = L.outerIndexPtr();
  const int* Li = L.innerIndexPtr();
  const double* Lx = L.valuePtr();
  for (int j = start; j < n; ++j) {
    if (x[j] == 0.0) continue;
    x[j] /= Lx[Lp[j]];
    const double xj = x[j];
    for (int p = Lp[j] + 1; p < Lp[j + 1]; ++p) x[Li[p]] -= Lx[p] * xj;
  }
}

void lower_transpose_solve_inplace(const SpMat& L, double* x) {
  const int n = static_cast<int>(L.cols());
  const int* Lp = L.outerIndexPtr();
  const int* Li = L.innerIndexPtr();
  const double* Lx = L.valuePtr();
  for (int j = n - 1; j >= 0; --j) {
    double s = x[j];
    for (int p = Lp[j] + 1; p < Lp[j + 1]; ++p) s -= Lx[p] * x[Li[p]];
    x[j] = s / Lx[Lp[j]];
  }
}

Vec CholeskyFactor::half_solve(const Vec& b) const {
  const int nn = n();
  Vec y(nn);
  for (int k = 0; k < nn; ++k) y[k] = b[perm[k]];
  lower_solve_inplace(L, y.data());
  return y;
}

Vec CholeskyFactor::half_solve_transpose(const Vec& z) const {
  const int nn = n();
  Vec y = z;
  lower_transpose_solve_inplace(L, y.data());
  Vec x(nn);
  for (int k = 0; k < nn; ++k) x[perm[k]] = y[k];
  return x;
}

Vec CholeskyFactor::solve(const Vec& b) const { return half_solve_transpose(half_solve(b)); }

Mat CholeskyFactor::solve(const Mat& B) const {
  Mat X(B.rows(), B.cols());
  for (Eigen::Index j = 0; j < B.cols(); ++j) X.col(j) = solve(Vec(B.col(j)));
  return X;
}

Mat CholeskyFactor::reconstruct() const {
  Mat Ld = Mat(L);
  Mat LLt = Ld * Ld.transpose();
  const int nn = n();
  Mat A(nn, nn);
  for (int i = 0; i < nn; ++i)
    for (int j = 0; j < nn; ++j) A(perm[i], perm[j]) = LLt(i, j);
  return A;
}

double CholeskyFactor::density() const {
  const double nn = n();
  return nn > 0 ? static_cast<double>(L.nonZeros()) / (nn * nn) : 0.0;
}

// ---------------------------------------------------------------- penalized QR

namespace {

struct RowGivensQR {
  int n = 0;
  std::vector<std::vector<int>> pat;     // pattern of R row k (columns >= k, ascending)
  std::vector<std::vector<double>> val;  // aligned values
  std::vector<char> live;
  std::vector<double> qtb;
  std::vector<int> parent;
  double rss = 0.0;
  std::vector<double> w;
  std::vector<int> slot;  // position of column j inside the current R row's pattern

  void add_row(const std::vector<std::pair<int, double>>& entries, double c) {
    if (entries.empty()) {
      rss += c * c;
      return;
    }
    int k = n;
    for (auto& [j, v] : entries) {
      w[j] += v;
      k = std::min(k, j);
    }
    while (k != -1) {
      auto& pk = pat[k];
      auto& vk = val[k];
      if (!live[k]) {
        for (size_t t = 0; t < pk.size(); ++t) {
          vk[t] = w[pk[t]];
          w[pk[t]] = 0.0;
        }
        qtb[k] = c;
        live[k] = 1;
        return;
      }
      const double a = vk[0], b = w[k];
      if (b != 0.0) {
        const double r = std::hypot(a, b);
        const double cs = a / r, sn = b / r;
        for (size_t t = 0; t < pk.size(); ++t) {
          const int j = pk[t];
          const double rv = vk[t], wv = w[j];
          vk[t] = cs * rv + sn * wv;
          w[j] = -sn * rv + cs * wv;
        }
        const double qk = qtb[k];
        qtb[k] = cs * qk + sn * c;
        c = -sn * qk + cs * c;
      }
      w[k] = 0.0;
      k = parent[k];
    }
    rss += c * c;
  }
};

struct QRPass {
  RowGivensQR g;
  IVec perm, pinv;
};

QRPass qr_pass(const SpMat& X, const SpMat& E, const Vec* rhs) {
  const int n = static_cast<int>(X.cols());
  SpMat Xa = X.cwiseAbs();
  SpMat Ea = E.cwiseAbs();
  SpMat pattern = SpMat(Xa.transpose() * Xa) + SpMat(Ea * Ea.transpose());
  for (int j = 0; j < n; ++j) pattern.coeffRef(j, j) += 1.0;  // keep every diagonal present
  pattern.makeCompressed();
  QRPass out;
  out.perm = fill_reducing_permutation(pattern);
  out.pinv = invert_perm(out.perm);
  UpperCSC C = permuted_upper(pattern, out.pinv);
  auto& g = out.g;
  g.n = n;
  g.parent = etree_upper(C);
  g.pat = column_structure(C, g.parent);
  g.val.resize(n);
  for (int k = 0; k < n; ++k) g.val[k].assign(g.pat[k].size(), 0.0);
  g.live.assign(n, 0);
  g.qtb.assign(n, 0.0);
  g.w.assign(n, 0.0);

  Eigen::SparseMatrix<double, Eigen::RowMajor> Xr = X;
  std::vector<std::pair<int, double>> row;
  for (int i = 0; i < Xr.rows(); ++i) {
    row.clear();
    for (decltype(Xr)::InnerIterator it(Xr, i); it; ++it)
      if (it.value() != 0.0) row.emplace_back(out.pinv[it.col()], it.value());
    g.add_row(row, rhs ? (*rhs)[i] : 0.0);
  }
  for (int j = 0; j < E.cols(); ++j) {
    row.clear();
    for (SpMat::InnerIterator it(E, j); it; ++it)
      if (it.value() != 0.0) row.emplace_back(out.pinv[it.row()], it.value());
    g.add_row(row, 0.0);
  }
  return out;
}

}  // namespace

QRFactor penalized_qr(const SpMat& X, const SpMat& E, const Vec* rhs, double tol) {
  if (E.rows() != X.cols()) throw SpecError("penalized_qr: E must have one row per column of X");
  if (rhs && rhs->size() != X.rows()) throw SpecError("penalized_qr: rhs length mismatch");
  std::vector<int> kept(X.cols());
  std::iota(kept.begin(), kept.end(), 0);
  std::vector<int> dropped;
  SpMat Xc = X, Ec = E;
  for (int pass = 0; pass < 20; ++pass) {
    if (kept.empty()) throw SpecError("penalized_qr: all columns dropped as non-identifiable");
    QRPass q = qr_pass(Xc, Ec, rhs);
    const int n = q.g.n;
    double mx = 0.0;
    for (int k = 0; k < n; ++k)
      if (q.g.live[k]) mx = std::max(mx, std::abs(q.g.val[k][0]));
    std::vector<int> drop_local;
    for (int k = 0; k < n; ++k) {
      double d = q.g.live[k] ? std::abs(q.g.val[k][0]) : 0.0;
      if (!(d >= tol * mx) || mx == 0.0) drop_local.push_back(q.perm[k]);
    }
    if (drop_local.empty()) {
      QRFactor f;
      std::vector<Triplet> t;
      f.qtb.resize(n);
      for (int k = 0; k < n; ++k) {
        const double sgn = q.g.val[k][0] < 0 ? -1.0 : 1.0;
        for (size_t s = 0; s < q.g.pat[k].size(); ++s)
          if (q.g.val[k][s] != 0.0 || s == 0) t.emplace_back(k, q.g.pat[k][s], sgn * q.g.val[k][s]);
        f.qtb[k] = sgn * q.g.qtb[k];
      }
      f.R.resize(n, n);
      f.R.setFromTriplets(t.begin(), t.end());
      f.perm = q.perm;
      f.kept = kept;
      std::sort(dropped.begin(), dropped.end());
      f.dropped = dropped;
      f.rss = q.g.rss;
      f.has_rhs = rhs != nullptr;
      return f;
    }
    std::sort(drop_local.begin(), drop_local.end());
    std::vector<int> keep_local;
    std::vector<int> new_kept;
    for (int j = 0, d = 0; j < n; ++j) {
      if (d < static_cast<int>(drop_local.size()) && drop_local[d] == j) {
        dropped.push_back(kept[j]);
        ++d;
      } else {
        keep_local.push_back(j);
        new_kept.push_back(kept[j]);
      }
    }
    kept = new_kept;
    if (kept.empty()) throw SpecError("penalized_qr: all columns dropped as non-identifiable");
    SpMat sel(n, keep_local.size());
    std::vector<Triplet> t;
    for (size_t c = 0; c < keep_local.size(); ++c) t.emplace_back(keep_local[c], c, 1.0);
    sel.setFromTriplets(t.begin(), t.end());
    Xc = Xc * sel;
    Ec = SpMat(sel.transpose()) * Ec;
  }
  throw NumericError("penalized_qr: rank detection did not settle");
}

Vec QRFactor::solve_kept() const {
  if (!has_rhs) throw SpecError("QRFactor::solve_kept: factor built without right-hand side");
  Vec y = qtb;
  R.triangularView<Eigen::Upper>().solveInPlace(y);
  Vec x(y.size());
  for (int k = 0; k < y.size(); ++k) x[perm[k]] = y[k];
  return x;
}

CholeskyFactor QRFactor::as_cholesky() const {
  CholeskyFactor f;
  f.L = SpMat(R.transpose());
  f.L.makeCompressed();
  f.perm = perm;
  f.pinv = invert_perm(perm);
  double ld = 0.0;
  for (int k = 0; k < R.rows(); ++k) ld += 2.0 * std::log(std::abs(f.L.valuePtr()[f.L.outerIndexPtr()[k]]));
  f.logdet = ld;
  return f;
}

// ---------------------------------------------------------------- condition estimate

double condition_estimate(const CholeskyFactor& f) {
  const int n = f.n();
  if (n == 0) return 1.0;
  const SpMat& L = f.L;
  // largest eigenvalue of L L' by power iteration
  Vec x(n);
  for (int i = 0; i < n; ++i) x[i] = 1.0 + 0.01 * ((i * 7919) % 13);
  x.normalize();
  double amax = 0.0;
  for (int it = 0; it < 50; ++it) {
    Vec y = L * (L.transpose() * x);
    double nrm = y.norm();
    if (nrm == 0.0) break;
    double prev = amax;
    amax = nrm;
    x = y / nrm;
    if (it > 3 && std::abs(amax - prev) <= 1e-8 * amax) break;
  }
  // Cline/LINPACK start: forward solve with +/-1 right-hand side chosen for growth
  Vec r = Vec::Zero(n), w(n);
  const int* Lp = L.outerIndexPtr();
  const int* Li = L.innerIndexPtr();
  const double* Lx = L.valuePtr();
  for (int j = 0; j < n; ++j) {
    double e = r[j] >= 0 ? 1.0 : -1.0;
    w[j] = (e + r[j]) / Lx[Lp[j]];
    for (int p = Lp[j] + 1; p < Lp[j + 1]; ++p) r[Li[p]] -= Lx[p] * w[j];
  }
  Vec z = w;
  lower_transpose_solve_inplace(L, z.data());
  double ainv = 0.0;
  z.normalize();
  for (int it = 0; it < 50; ++it) {
    Vec y = z;
    lower_solve_inplace(L, y.data());
    lower_transpose_solve_inplace(L, y.data());
    double nrm = y.norm();
    if (!std::isfinite(nrm)) return std::numeric_limits<double>::infinity();
    double prev = ainv;
    ainv = nrm;
    z = y / nrm;
    if (it > 3 && std::abs(ainv - prev) <= 1e-8 * ainv) break;
  }
  return amax * ainv;
}

double condition_estimate(const QRFactor& f) { return condition_estimate(f.as_cholesky()); }

SpMat invert_lower(const SpMat& L) {
  const int n = static_cast<int>(L.rows());
  for (int j = 0; j < n; ++j) {
    const int p = L.outerIndexPtr()[j];
    if (p == L.outerIndexPtr()[j + 1] || L.innerIndexPtr()[p] != j || L.valuePtr()[p] == 0.0)
      throw NumericError("invert_lower: zero diagonal at " + std::to_string(j));
  }
  std::vector<Triplet> t;
  std::vector<double> x(n);
  for (int j = 0; j < n; ++j) {
    std::fill(x.begin(), x.end(), 0.0);
    x[j] = 1.0;
    lower_solve_inplace(L, x.data(), j);
    for (int i = j; i < n; ++i)
      if (x[i] != 0.0) t.emplace_back(i, j, x[i]);
  }
  SpMat Li(n, n);
  Li.setFromTriplets(t.begin(), t.end());
  return Li;
}

double trace_inv_form(const CholeskyFactor& f, const SpMat& D) {
  const int n = f.n();
  if (D.rows() != n) throw SpecError("trace_inv_form: root has wrong row count");
  std::vector<double> x(n);
  double tr = 0.0;
  for (int c = 0; c < D.outerSize(); ++c) {
    int start = n;
    bool any = false;
    for (SpMat::InnerIterator it(D, c); it; ++it) {
      if (it.value() == 0.0) continue;
      if (!any) std::fill(x.begin(), x.end(), 0.0);
      any = true;
      int k = f.pinv[it.row()];
      x[k] = it.value();
      start = std::min(start, k);
    }
    if (!any) continue;
    lower_solve_inplace(f.L, x.data(), start);
    for (int i = start; i < n; ++i) tr += x[i] * x[i];
  }
  return tr;
}

// ---------------------------------------------------------------- LU rank tool

LURank stable_lu_rank(const SpMat& As) {
  if (As.rows() != As.cols()) throw SpecError("stable_lu_rank: matrix not square");
  const int n = static_cast<int>(As.rows());
  LURank out;
  out.LU = Mat(As);
  out.piv.resize(n);
  for (int i = 0; i < n; ++i) out.piv[i] = i;
  Mat& A = out.LU;
  const double anorm = n ? A.cwiseAbs().maxCoeff() : 0.0;
  if (anorm == 0.0) out.structurally_singular = true;
  const double tiny = std::numeric_limits<double>::epsilon() * std::max(anorm, 1e-300);
  for (int k = 0; k < n; ++k) {
    int p = k;
    double best = std::abs(A(k, k));
    for (int i = k + 1; i < n; ++i)
      if (std::abs(A(i, k)) > best) {
        best = std::abs(A(i, k));
        p = i;
      }
    if (best == 0.0 && As.col(k).nonZeros() == 0) out.structurally_singular = true;
    if (p != k) {
      A.row(k).swap(A.row(p));
      std::swap(out.piv[k], out.piv[p]);
    }
    if (std::abs(A(k, k)) < tiny) {
      A(k, k) = A(k, k) < 0 ? -tiny : tiny;
      ++out.perturbed_pivots;
    }
    for (int i = k + 1; i < n; ++i) {
      A(i, k) /= A(k, k);
      const double m = A(i, k);
      if (m != 0.0) A.row(i).tail(n - k - 1) -= m * A.row(k).tail(n - k - 1);
    }
  }
  auto lu_solve = [&](const Vec& b) {
    Vec y(n);
    for (int i = 0; i < n; ++i) y[i] = b[out.piv[i]];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < i; ++j) y[i] -= A(i, j) * y[j];
    for (int i = n - 1; i >= 0; --i) {
      for (int j = i + 1; j < n; ++j) y[i] -= A(i, j) * y[j];
      y[i] /= A(i, i);
    }
    return y;
  };
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * std::sin(1.0 + i);
  v.normalize();
  double growth = 0.0;
  for (int it = 0; it < 100 && n > 0; ++it) {
    Vec x = lu_solve(v);
    double nrm = x.norm();
    if (!std::isfinite(nrm) || nrm == 0.0) break;
    Vec vn = x / nrm;
    if (vn.dot(v) < 0) vn = -vn;
    double change = (vn - v).norm();
    v = vn;
    growth = nrm;
    if (change < 1e-12) break;
  }
  out.v = v;
  out.sigma_min = growth > 0 ? 1.0 / growth : 0.0;
  return out;
}

}  // namespace smoothfit
