#include "smoothfit/design.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <set>

#include <Eigen/Eigenvalues>

#include "smoothfit/errors.hpp"

namespace smoothfit {

// ------------------------------------------------------------------ DataTable

const Vec& DataTable::num(const std::string& name) const {
  auto it = numeric.find(name);
  if (it == numeric.end()) {
    if (!has(name)) throw SpecError("unknown column '" + name + "'");
    throw SpecError("column '" + name + "' is not numeric");
  }
  return it->second;
}

const std::vector<std::string>& DataTable::factor(const std::string& name) const {
  auto it = text.find(name);
  if (it == text.end()) throw SpecError("unknown column '" + name + "'");
  return it->second;
}

static std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void DataTable::add_numeric(const std::string& name, const Vec& v) {
  if (nrows == 0 && names.empty()) nrows = static_cast<int>(v.size());
  if (v.size() != nrows) throw SpecError("column '" + name + "' has wrong length");
  if (!has(name)) names.push_back(name);
  numeric[name] = v;
  std::vector<std::string> t(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) t[i] = fmt_num(v[i]);
  text[name] = std::move(t);
}

void DataTable::add_factor(const std::string& name, const std::vector<std::string>& v) {
  if (nrows == 0 && names.empty()) nrows = static_cast<int>(v.size());
  if (static_cast<int>(v.size()) != nrows)
    throw SpecError("column '" + name + "' has wrong length");
  if (!has(name)) names.push_back(name);
  text[name] = v;
  numeric.erase(name);
}

DataTable DataTable::subset(const std::vector<int>& rows) const {
  DataTable out;
  out.names = names;
  out.nrows = static_cast<int>(rows.size());
  for (const auto& [name, col] : text) {
    std::vector<std::string> c(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) c[i] = col[rows[i]];
    out.text[name] = std::move(c);
  }
  for (const auto& [name, col] : numeric) {
    Vec c(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) c[i] = col[rows[i]];
    out.numeric[name] = std::move(c);
  }
  return out;
}

// ------------------------------------------------------------------ names

TermKind term_kind_from_name(const std::string& s) {
  if (s == "intercept") return TermKind::intercept;
  if (s == "linear") return TermKind::linear;
  if (s == "smooth") return TermKind::smooth;
  if (s == "tensor") return TermKind::tensor;
  if (s == "factor_smooth") return TermKind::factor_smooth;
  if (s == "random_smooth") return TermKind::random_smooth;
  if (s == "random_intercept") return TermKind::random_intercept;
  throw SpecError("unknown term kind '" + s + "'");
}

std::string term_kind_name(TermKind k) {
  switch (k) {
    case TermKind::intercept: return "intercept";
    case TermKind::linear: return "linear";
    case TermKind::smooth: return "smooth";
    case TermKind::tensor: return "tensor";
    case TermKind::factor_smooth: return "factor_smooth";
    case TermKind::random_smooth: return "random_smooth";
    case TermKind::random_intercept: return "random_intercept";
  }
  return "?";
}

namespace {

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

std::string default_label(const TermSpec& t) {
  const std::string cov = join(t.covariates, ",");
  switch (t.kind) {
    case TermKind::intercept: return "(Intercept)";
    case TermKind::linear: return cov;
    case TermKind::smooth:
      return t.by_factor.empty() ? "s(" + cov + ")" : "s(" + cov + "):" + t.by_factor;
    case TermKind::tensor: return "te(" + cov + ")";
    case TermKind::factor_smooth: return "fs(" + cov + "|" + t.by_factor + ")";
    case TermKind::random_smooth: return "rs(" + cov + "|" + t.by_factor + ")";
    case TermKind::random_intercept: return "re(" + t.by_factor + ")";
  }
  return "?";
}

int category(TermKind k) {
  switch (k) {
    case TermKind::intercept:
    case TermKind::linear: return 0;
    case TermKind::smooth:
    case TermKind::tensor: return 1;
    default: return 2;
  }
}

bool is_factor_term(const TermSpec& t) {
  return t.kind == TermKind::factor_smooth || t.kind == TermKind::random_smooth ||
         t.kind == TermKind::random_intercept ||
         (t.kind == TermKind::smooth && !t.by_factor.empty());
}

int k_for(const TermSpec& t, size_t j) {
  if (t.k.empty()) return 10;
  return t.k.size() > j ? t.k[j] : t.k.back();
}

const Vec& checked_covariate(const DataTable& d, const std::string& name, const std::string& term) {
  try {
    const Vec& v = d.num(name);
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i]))
        throw SpecError("non-finite value in column '" + name + "' at row " + std::to_string(i));
    return v;
  } catch (const SpecError& e) {
    throw SpecError("term " + term + ": " + e.what());
  }
}

// Evaluate a marginal basis, recording which rows fell outside the knot range.
Mat eval_marginal(const Vec& x, const Vec& knots, int degree, bool clamp,
                  std::vector<char>* clamped) {
  const int k = static_cast<int>(knots.size()) - degree - 1;
  if (clamped) {
    const double lo = knots[degree], hi = knots[k];
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (x[i] < lo || x[i] > hi) (*clamped)[i] = 1;
  }
  return bspline_eval(x, knots, degree, clamp);
}

// Dense per-row basis of a term before distribution across factor levels.
Mat core_basis(const TermInfo& ti, const DataTable& d, bool clamp, std::vector<char>* clamped) {
  const TermSpec& t = ti.spec;
  const int n = d.nrows;
  switch (t.kind) {
    case TermKind::intercept: return Mat::Ones(n, 1);
    case TermKind::linear: {
      Mat M(n, t.covariates.size());
      for (size_t j = 0; j < t.covariates.size(); ++j)
        M.col(j) = checked_covariate(d, t.covariates[j], ti.label);
      return M;
    }
    case TermKind::random_intercept: return Mat::Ones(n, 1);
    case TermKind::tensor: {
      std::vector<Mat> marg;
      for (size_t j = 0; j < t.covariates.size(); ++j)
        marg.push_back(eval_marginal(checked_covariate(d, t.covariates[j], ti.label),
                                     ti.knots[j], t.degree, clamp, clamped));
      Mat B = row_kronecker(marg);
      return ti.Z.size() ? Mat(B * ti.Z) : B;
    }
    default: {
      Mat B = eval_marginal(checked_covariate(d, t.covariates[0], ti.label), ti.knots[0],
                            t.degree, clamp, clamped);
      if (ti.P.size()) return B * ti.P;
      return ti.Z.size() ? Mat(B * ti.Z) : B;
    }
  }
}

std::vector<int> level_codes(const TermInfo& ti, const DataTable& d) {
  const auto& f = d.factor(ti.spec.by_factor);
  std::map<std::string, int> idx;
  for (size_t i = 0; i < ti.levels.size(); ++i) idx[ti.levels[i]] = static_cast<int>(i);
  std::vector<int> out(f.size());
  for (size_t i = 0; i < f.size(); ++i) {
    auto it = idx.find(f[i]);
    if (it == idx.end())
      throw SpecError("term " + ti.label + ": unknown level '" + f[i] + "' of factor '" +
                      ti.spec.by_factor + "'");
    out[i] = it->second;
  }
  return out;
}

// Triplets for one term, rows in table order, columns relative to the parameter block.
void term_triplets(const TermInfo& ti, int col0, const DataTable& d, bool clamp,
                   std::vector<char>* clamped, std::vector<Triplet>& out) {
  Mat C = core_basis(ti, d, clamp, clamped);
  const int n = d.nrows;
  if (!is_factor_term(ti.spec)) {
    for (int j = 0; j < C.cols(); ++j)
      for (int i = 0; i < n; ++i)
        if (C(i, j) != 0.0) out.emplace_back(i, col0 + j, C(i, j));
    return;
  }
  const auto lev = level_codes(ti, d);
  for (int i = 0; i < n; ++i) {
    const int l = lev[i];
    if (ti.n_offsets > 0 && l > 0) out.emplace_back(i, col0 + l - 1, 1.0);
    const int base = col0 + ti.n_offsets + l * ti.cols_per_level;
    for (int j = 0; j < C.cols(); ++j)
      if (C(i, j) != 0.0) out.emplace_back(i, base + j, C(i, j));
  }
}

}  // namespace

Mat psd_root(const Mat& S, int* rank) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (S + S.transpose()));
  const Vec& ev = es.eigenvalues();
  const double mx = ev.size() ? std::max(ev.cwiseAbs().maxCoeff(), 0.0) : 0.0;
  std::vector<int> keep;
  for (Eigen::Index i = ev.size() - 1; i >= 0; --i)
    if (mx > 0 && ev[i] > kKernelTol * mx) keep.push_back(static_cast<int>(i));
  Mat D(S.rows(), keep.size());
  for (size_t j = 0; j < keep.size(); ++j)
    D.col(j) = es.eigenvectors().col(keep[j]) * std::sqrt(ev[keep[j]]);
  if (rank) *rank = static_cast<int>(keep.size());
  return D;
}

SpMat embed_penalty(const PenaltyCore& core, int offset, int N_p) {
  const auto k = core.matrix.rows();
  if (core.matrix.cols() != k) throw SpecError("embed_penalty: penalty is not square");
  if (offset < 0 || offset + k > N_p)
    throw SpecError("embed_penalty: block [" + std::to_string(offset) + ", " +
                    std::to_string(offset + k) + ") exceeds " + std::to_string(N_p) + " columns");
  std::vector<Triplet> tr;
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index i = 0; i < k; ++i)
      if (core.matrix(i, j) != 0.0) tr.emplace_back(offset + i, offset + j, core.matrix(i, j));
  SpMat S(N_p, N_p);
  S.setFromTriplets(tr.begin(), tr.end());
  return S;
}

// ------------------------------------------------------------------ build_design

PenalizedDesign build_design(const ModelSpec& spec_in, const DataTable& data_in) {
  if (data_in.nrows <= 0) throw SpecError("empty data");
  if (spec_in.terms.empty()) throw SpecError("model has no terms");
  if (spec_in.n_params < 1) throw SpecError("n_params must be positive");

  PenalizedDesign d;
  d.spec = spec_in;
  d.n_params = spec_in.n_params;
  for (auto& t : d.spec.terms) {
    if (t.parameter_index < 0 || t.parameter_index >= d.n_params)
      throw SpecError("term " + default_label(t) + ": parameter_index out of range");
    if (t.label.empty()) t.label = default_label(t);
    if (t.kind == TermKind::random_smooth || t.kind == TermKind::random_intercept)
      t.constrained = false;
    const bool needs_cov = t.kind != TermKind::intercept && t.kind != TermKind::random_intercept;
    if (needs_cov && t.covariates.empty()) throw SpecError("term " + t.label + ": no covariates");
    if (t.kind == TermKind::tensor && t.covariates.size() < 2)
      throw SpecError("term " + t.label + ": tensor needs two or more covariates");
    if ((t.kind == TermKind::smooth || t.kind == TermKind::random_smooth ||
         t.kind == TermKind::factor_smooth) && t.covariates.size() != 1)
      throw SpecError("term " + t.label + ": expects exactly one covariate");
    if (is_factor_term(t) && t.by_factor.empty())
      throw SpecError("term " + t.label + ": by_factor is required");
    if (is_factor_term(t) && !data_in.has(t.by_factor))
      throw SpecError("term " + t.label + ": unknown column '" + t.by_factor + "'");
    for (const auto& c : t.covariates)
      if (!data_in.has(c)) throw SpecError("term " + t.label + ": unknown column '" + c + "'");
  }
  std::stable_sort(d.spec.terms.begin(), d.spec.terms.end(),
                   [](const TermSpec& a, const TermSpec& b) {
                     if (a.parameter_index != b.parameter_index)
                       return a.parameter_index < b.parameter_index;
                     return category(a.kind) < category(b.kind);
                   });

  // Row order: stable sort by the first factor used by any factor term.
  const int n = data_in.nrows;
  d.N = n;
  d.row_order.resize(n);
  std::iota(d.row_order.begin(), d.row_order.end(), 0);
  for (const auto& t : d.spec.terms)
    if (is_factor_term(t)) {
      const auto& f = data_in.factor(t.by_factor);
      std::stable_sort(d.row_order.begin(), d.row_order.end(),
                       [&](int a, int b) { return f[a] < f[b]; });
      break;
    }
  const DataTable data = data_in.subset(d.row_order);

  // Term metadata.
  std::vector<std::vector<Triplet>> trip(d.n_params);
  std::vector<int> pcols(d.n_params, 0);
  int n_lambda = 0;
  struct LocalPen { int term; int col_off; int lambda; const Mat* S; const Mat* D; int rank; };
  std::vector<std::unique_ptr<std::pair<Mat, Mat>>> pen_store;  // (S, root) shared by level blocks
  std::vector<int> pen_rank;
  std::vector<LocalPen> local;

  for (size_t ti_idx = 0; ti_idx < d.spec.terms.size(); ++ti_idx) {
    const TermSpec& t = d.spec.terms[ti_idx];
    TermInfo ti;
    ti.spec = t;
    ti.label = t.label;
    ti.param = t.parameter_index;
    std::vector<PenaltyCore> pens;   // local penalties of one level block (or whole term)
    bool per_level = is_factor_term(t);
    bool shared_lambda = t.kind != TermKind::smooth;   // by-smooths get a lambda per level

    if (per_level) {
      std::set<std::string> lv(data.factor(t.by_factor).begin(), data.factor(t.by_factor).end());
      ti.levels.assign(lv.begin(), lv.end());
      if (ti.levels.empty()) throw SpecError("term " + t.label + ": factor has no levels");
    }

    switch (t.kind) {
      case TermKind::intercept:
      case TermKind::linear:
        break;
      case TermKind::random_intercept:
        ti.cols_per_level = 1;
        break;
      case TermKind::tensor: {
        std::vector<std::pair<BasisBlock, PenaltyCore>> marg;
        for (size_t j = 0; j < t.covariates.size(); ++j) {
          const Vec& x = checked_covariate(data, t.covariates[j], t.label);
          BasisBlock b = bspline_basis(x, k_for(t, j), t.degree);
          ti.knots.push_back(b.knots);
          marg.emplace_back(b, difference_penalty(k_for(t, j), t.penalty_order));
        }
        auto [B, tp] = tensor_product(marg);
        if (t.constrained) {
          ti.Z = sumtozero_basis(B.values);
          for (auto& p : tp) p = make_penalty(ti.Z.transpose() * p.matrix * ti.Z);
        }
        pens = tp;
        break;
      }
      case TermKind::random_smooth: {
        const Vec& x = checked_covariate(data, t.covariates[0], t.label);
        BasisBlock b = bspline_basis(x, k_for(t, 0), t.degree);
        ti.knots.push_back(b.knots);
        ReparamResult r = demmler_reinsch(b, difference_penalty(k_for(t, 0), t.penalty_order));
        ti.P = r.P;
        pens = randomize_smooth(r);
        ti.cols_per_level = static_cast<int>(r.P.cols());
        break;
      }
      default: {  // smooth / factor_smooth
        const Vec& x = checked_covariate(data, t.covariates[0], t.label);
        BasisBlock b = bspline_basis(x, k_for(t, 0), t.degree);
        ti.knots.push_back(b.knots);
        PenaltyCore S = difference_penalty(k_for(t, 0), t.penalty_order);
        if (t.constrained) {
          Absorbed a = absorb_sumtozero(b, S);
          ti.Z = a.Z;
          S = a.penalty;
        }
        pens = {S};
        ti.cols_per_level = static_cast<int>(S.matrix.rows());
        if (per_level) ti.n_offsets = static_cast<int>(ti.levels.size()) - 1;
        break;
      }
    }

    const int p = ti.param;
    const int col0 = pcols[p];
    int width = 0;
    if (t.kind == TermKind::intercept) width = 1;
    else if (t.kind == TermKind::linear) width = static_cast<int>(t.covariates.size());
    else if (t.kind == TermKind::tensor) width = static_cast<int>(pens[0].matrix.rows());
    else if (t.kind == TermKind::smooth && !per_level) width = ti.cols_per_level;
    else width = ti.n_offsets + static_cast<int>(ti.levels.size()) * ti.cols_per_level;
    ti.col_begin = col0;
    ti.col_end = col0 + width;

    // Penalties.
    if (t.kind == TermKind::random_intercept) {
      // one unit block per level, all on the same lambda
      pens = {make_penalty(Mat::Identity(1, 1))};
    }
    if (!pens.empty()) {
      const int nl = static_cast<int>(per_level ? ti.levels.size() : 1);
      int lam_base = n_lambda;
      const int lam_per = static_cast<int>(pens.size());
      if (shared_lambda || !per_level) {
        for (int j = 0; j < lam_per; ++j) {
          ti.lambda_idx.push_back(n_lambda++);
          std::string lab = t.label;
          if (t.kind == TermKind::random_smooth)
            lab += j == 0 ? "[main]" : "[null" + std::to_string(j) + "]";
          else if (lam_per > 1)
            lab += "[" + std::to_string(j + 1) + "]";
          d.lambda_labels.push_back(lab);
        }
      } else {
        for (int l = 0; l < nl; ++l)
          for (int j = 0; j < lam_per; ++j) {
            ti.lambda_idx.push_back(n_lambda++);
            d.lambda_labels.push_back(t.label + "[" + ti.levels[l] + "]");
          }
      }
      std::vector<const std::pair<Mat, Mat>*> roots;
      std::vector<int> ranks;
      for (const auto& pc : pens) {
        int rk = 0;
        Mat D = psd_root(pc.matrix, &rk);
        pen_store.push_back(std::make_unique<std::pair<Mat, Mat>>(pc.matrix, std::move(D)));
        roots.push_back(pen_store.back().get());
        ranks.push_back(rk);
      }
      for (int l = 0; l < nl; ++l)
        for (int j = 0; j < lam_per; ++j) {
          const int lam = (shared_lambda || !per_level) ? lam_base + j : lam_base + l * lam_per + j;
          local.push_back({static_cast<int>(ti_idx), ti.n_offsets + l * ti.cols_per_level, lam,
                           &roots[j]->first, &roots[j]->second, ranks[j]});
        }
      Mat tot = Mat::Zero(pens[0].matrix.rows(), pens[0].matrix.cols());
      for (const auto& pc : pens) tot += pc.matrix / std::max(pc.matrix.norm(), 1e-300);
      ti.kernel_dim = make_penalty(tot).kernel_dim * nl + ti.n_offsets;
    } else {
      ti.kernel_dim = width;
    }

    term_triplets(ti, col0, data, false, nullptr, trip[p]);
    pcols[p] += width;
    d.terms.push_back(std::move(ti));
  }

  d.param_offsets.assign(d.n_params + 1, 0);
  for (int p = 0; p < d.n_params; ++p) {
    d.param_offsets[p + 1] = d.param_offsets[p] + pcols[p];
    SpMat X(n, pcols[p]);
    X.setFromTriplets(trip[p].begin(), trip[p].end());
    d.X_blocks.push_back(std::move(X));
  }
  d.N_p = d.param_offsets.back();
  d.N_lambda = n_lambda;
  for (auto& ti : d.terms) {
    ti.col_begin += d.param_offsets[ti.param];
    ti.col_end += d.param_offsets[ti.param];
  }
  for (const auto& lp : local) {
    PenaltyBlock pb;
    pb.lambda_idx = lp.lambda;
    pb.term = lp.term;
    pb.S = *lp.S;
    pb.D = *lp.D;
    pb.rank = lp.rank;
    const int start = d.terms[lp.term].col_begin + lp.col_off;
    pb.cols.resize(pb.S.rows());
    std::iota(pb.cols.begin(), pb.cols.end(), start);
    d.lambda_map.push_back(lp.lambda);
    d.penalties.push_back(std::move(pb));
  }
  return d;
}

SpMat PenalizedDesign::X() const {
  if (n_params == 1) return X_blocks[0];
  std::vector<Triplet> tr;
  for (int p = 0; p < n_params; ++p)
    for (int j = 0; j < X_blocks[p].outerSize(); ++j)
      for (SpMat::InnerIterator it(X_blocks[p], j); it; ++it)
        tr.emplace_back(p * N + it.row(), param_offsets[p] + j, it.value());
  SpMat M(N * n_params, N_p);
  M.setFromTriplets(tr.begin(), tr.end());
  return M;
}

SpMat PenalizedDesign::embedded(int r) const {
  const auto& pb = penalties.at(r);
  PenaltyCore c;
  c.matrix = pb.S;
  return embed_penalty(c, pb.cols.front(), N_p);
}

SpMat PenalizedDesign::S_r(int lam) const {
  SpMat S(N_p, N_p);
  for (size_t r = 0; r < penalties.size(); ++r)
    if (penalties[r].lambda_idx == lam) S += embedded(static_cast<int>(r));
  return S;
}

SpMat PenalizedDesign::S_lambda(const Vec& lambda) const {
  if (lambda.size() != N_lambda) throw SpecError("S_lambda: wrong number of lambdas");
  std::vector<Triplet> tr;
  for (const auto& pb : penalties)
    for (size_t j = 0; j < pb.cols.size(); ++j)
      for (size_t i = 0; i < pb.cols.size(); ++i)
        if (pb.S(i, j) != 0.0)
          tr.emplace_back(pb.cols[i], pb.cols[j], lambda[pb.lambda_idx] * pb.S(i, j));
  SpMat S(N_p, N_p);
  S.setFromTriplets(tr.begin(), tr.end());
  return S;
}

Vec PenalizedDesign::to_internal(const Vec& user) const {
  if (user.size() != N) throw SpecError("to_internal: length mismatch");
  Vec out(N);
  for (int i = 0; i < N; ++i) out[i] = user[row_order[i]];
  return out;
}

Vec PenalizedDesign::to_user(const Vec& internal) const {
  if (internal.size() != N) throw SpecError("to_user: length mismatch");
  Vec out(N);
  for (int i = 0; i < N; ++i) out[row_order[i]] = internal[i];
  return out;
}

Vec PenalizedDesign::response(const DataTable& data) const {
  if (spec.response.empty()) throw SpecError("model has no response column");
  const Vec& y = checked_covariate(data, spec.response, "response");
  return to_internal(y);
}

SpMat balanced_penalty(const PenalizedDesign& d) {
  if (d.penalties.empty()) throw SpecError("balanced_penalty: model has no penalties");
  SpMat B(d.N_p, d.N_p);
  for (int r = 0; r < d.N_lambda; ++r) {
    SpMat S = d.S_r(r);
    const double nf = S.norm();
    if (!(nf > 0.0))
      throw SpecError("balanced_penalty: penalty " + d.lambda_labels[r] + " is zero");
    B += S / nf;
  }
  return B;
}

PredictionMatrices prediction_matrices(const PenalizedDesign& d, const DataTable& data) {
  if (data.nrows <= 0) throw SpecError("empty data");
  PredictionMatrices pm;
  pm.clamped.assign(data.nrows, 0);
  std::vector<std::vector<Triplet>> trip(d.n_params);
  for (const auto& ti : d.terms)
    term_triplets(ti, ti.col_begin - d.param_offsets[ti.param], data, true, &pm.clamped,
                  trip[ti.param]);
  for (int p = 0; p < d.n_params; ++p) {
    SpMat X(data.nrows, d.param_offsets[p + 1] - d.param_offsets[p]);
    X.setFromTriplets(trip[p].begin(), trip[p].end());
    pm.X_blocks.push_back(std::move(X));
  }
  pm.n_clamped = static_cast<int>(std::count(pm.clamped.begin(), pm.clamped.end(), 1));
  return pm;
}

// ------------------------------------------------------------------ PenaltyAlgebra

PenaltyAlgebra::PenaltyAlgebra(const PenalizedDesign& d) {
  std::vector<int> all(d.N_p);
  std::iota(all.begin(), all.end(), 0);
  init(d, all);
}

PenaltyAlgebra::PenaltyAlgebra(const PenalizedDesign& d, const std::vector<int>& keep) {
  init(d, keep);
}

void PenaltyAlgebra::init(const PenalizedDesign& d, const std::vector<int>& keep) {
  keep_ = keep;
  n_ = static_cast<int>(keep.size());
  n_lambda_ = d.N_lambda;
  std::vector<int> loc(d.N_p, -1);
  for (int i = 0; i < n_; ++i) loc.at(keep[i]) = i;

  for (const auto& pb : d.penalties) {
    std::vector<int> pos, cols;
    for (size_t j = 0; j < pb.cols.size(); ++j)
      if (loc[pb.cols[j]] >= 0) {
        pos.push_back(static_cast<int>(j));
        cols.push_back(loc[pb.cols[j]]);
      }
    if (cols.empty()) continue;
    Block b;
    b.lambda_idx = pb.lambda_idx;
    b.cols = cols;
    if (cols.size() == pb.cols.size()) {
      b.S = pb.S;
      b.D = pb.D;
      b.rank = pb.rank;
    } else {
      b.S = pb.S(pos, pos);
      b.D = psd_root(b.S, &b.rank);
    }
    if (b.rank == 0) continue;
    blocks_.push_back(std::move(b));
  }

  std::map<std::vector<int>, int> gid;
  std::vector<int> owner(n_, -1);
  for (size_t bi = 0; bi < blocks_.size(); ++bi) {
    auto it = gid.find(blocks_[bi].cols);
    if (it == gid.end()) {
      for (int c : blocks_[bi].cols)
        if (owner[c] >= 0)
          throw SpecError("penalty blocks overlap without sharing their column set");
      const int g = static_cast<int>(groups_.size());
      for (int c : blocks_[bi].cols) owner[c] = g;
      gid[blocks_[bi].cols] = g;
      groups_.push_back({{}, blocks_[bi].cols, {}, {}});
      it = gid.find(blocks_[bi].cols);
    }
    groups_[it->second].blocks.push_back(static_cast<int>(bi));
  }
  rank_ = 0;
  for (auto& g : groups_) {
    const int k = static_cast<int>(g.cols.size());
    Mat B = Mat::Zero(k, k);
    for (int bi : g.blocks) B += blocks_[bi].S / blocks_[bi].S.norm();
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (B + B.transpose()));
    const Vec& ev = es.eigenvalues();
    const double mx = ev.maxCoeff();
    std::vector<int> idx;
    for (int i = k - 1; i >= 0; --i)
      if (ev[i] > kKernelTol * mx) idx.push_back(i);
    g.U.resize(k, idx.size());
    for (size_t j = 0; j < idx.size(); ++j) g.U.col(j) = es.eigenvectors().col(idx[j]);
    for (int bi : g.blocks) g.M.push_back(g.U.transpose() * blocks_[bi].S * g.U);
    rank_ += static_cast<int>(idx.size());
  }
}

SpMat PenaltyAlgebra::S_lambda(const Vec& lambda) const {
  std::vector<Triplet> tr;
  for (const auto& b : blocks_) {
    const double l = lambda[b.lambda_idx];
    for (size_t j = 0; j < b.cols.size(); ++j)
      for (size_t i = 0; i < b.cols.size(); ++i)
        if (b.S(i, j) != 0.0) tr.emplace_back(b.cols[i], b.cols[j], l * b.S(i, j));
  }
  SpMat S(n_, n_);
  S.setFromTriplets(tr.begin(), tr.end());
  return S;
}

SpMat PenaltyAlgebra::S_r(int r) const {
  Vec e = Vec::Zero(n_lambda_);
  e[r] = 1.0;
  return S_lambda(e);
}

SpMat PenaltyAlgebra::root_r(int r) const {
  std::vector<Triplet> tr;
  int c0 = 0;
  for (const auto& b : blocks_) {
    if (b.lambda_idx != r) continue;
    for (int j = 0; j < b.D.cols(); ++j)
      for (size_t i = 0; i < b.cols.size(); ++i)
        if (b.D(i, j) != 0.0) tr.emplace_back(b.cols[i], c0 + j, b.D(i, j));
    c0 += static_cast<int>(b.D.cols());
  }
  SpMat D(n_, c0);
  D.setFromTriplets(tr.begin(), tr.end());
  return D;
}

SpMat PenaltyAlgebra::E_lambda(const Vec& lambda) const {
  std::vector<Triplet> tr;
  int c0 = 0;
  for (const auto& b : blocks_) {
    const double s = std::sqrt(lambda[b.lambda_idx]);
    for (int j = 0; j < b.D.cols(); ++j)
      for (size_t i = 0; i < b.cols.size(); ++i)
        if (b.D(i, j) != 0.0) tr.emplace_back(b.cols[i], c0 + j, s * b.D(i, j));
    c0 += static_cast<int>(b.D.cols());
  }
  SpMat E(n_, c0);
  E.setFromTriplets(tr.begin(), tr.end());
  return E;
}

double PenaltyAlgebra::quad(int r, const Vec& beta) const {
  double q = 0.0;
  for (const auto& b : blocks_) {
    if (b.lambda_idx != r) continue;
    Vec v = beta(b.cols);
    q += v.dot(b.S * v);
  }
  return q;
}

Vec PenaltyAlgebra::quads(const Vec& beta) const {
  Vec q = Vec::Zero(n_lambda_);
  for (const auto& b : blocks_) {
    Vec v = beta(b.cols);
    q[b.lambda_idx] += v.dot(b.S * v);
  }
  return q;
}

namespace {
Eigen::LLT<Mat> group_factor(const PenaltyAlgebra::Group& g,
                             const std::vector<PenaltyAlgebra::Block>& blocks, const Vec& lambda) {
  const auto r = g.U.cols();
  Mat C = Mat::Zero(r, r);
  for (size_t m = 0; m < g.blocks.size(); ++m) C += lambda[blocks[g.blocks[m]].lambda_idx] * g.M[m];
  Eigen::LLT<Mat> llt(C);
  if (llt.info() != Eigen::Success)
    throw NumericError("penalty group is not positive definite on its range");
  return llt;
}
}  // namespace

Vec PenaltyAlgebra::trace_Sinv_Sr(const Vec& lambda) const {
  Vec t = Vec::Zero(n_lambda_);
  for (const auto& g : groups_) {
    auto llt = group_factor(g, blocks_, lambda);
    for (size_t m = 0; m < g.blocks.size(); ++m)
      t[blocks_[g.blocks[m]].lambda_idx] += llt.solve(g.M[m]).trace();
  }
  return t;
}

double PenaltyAlgebra::logdet_plus(const Vec& lambda) const {
  double ld = 0.0;
  for (const auto& g : groups_) {
    auto llt = group_factor(g, blocks_, lambda);
    ld += 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
  }
  return ld;
}

Mat PenaltyAlgebra::trace_Sinv_pairs(const Vec& lambda) const {
  Mat T = Mat::Zero(n_lambda_, n_lambda_);
  for (const auto& g : groups_) {
    auto llt = group_factor(g, blocks_, lambda);
    std::vector<Mat> CM;
    for (const auto& M : g.M) CM.push_back(llt.solve(M));
    for (size_t a = 0; a < CM.size(); ++a)
      for (size_t b = 0; b < CM.size(); ++b)
        T(blocks_[g.blocks[a]].lambda_idx, blocks_[g.blocks[b]].lambda_idx) +=
            (CM[a].cwiseProduct(CM[b].transpose())).sum();
  }
  return T;
}

SpMat PenaltyAlgebra::block_transform() const {
  std::vector<Triplet> tr;
  std::vector<char> done(n_, 0);
  for (const auto& g : groups_) {
    const int k = static_cast<int>(g.cols.size());
    Mat B = Mat::Zero(k, k);
    for (int bi : g.blocks) B += blocks_[bi].S / blocks_[bi].S.norm();
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (B + B.transpose()));
    Mat Q = es.eigenvectors().rowwise().reverse();
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < k; ++i)
        if (Q(i, j) != 0.0) tr.emplace_back(g.cols[i], g.cols[j], Q(i, j));
    for (int c : g.cols) done[c] = 1;
  }
  for (int i = 0; i < n_; ++i)
    if (!done[i]) tr.emplace_back(i, i, 1.0);
  SpMat T(n_, n_);
  T.setFromTriplets(tr.begin(), tr.end());
  return T;
}

SpMat PenaltyAlgebra::balanced() const {
  SpMat B(n_, n_);
  for (int r = 0; r < n_lambda_; ++r) {
    SpMat S = S_r(r);
    const double nf = S.norm();
    if (nf > 0.0) B += S / nf;
  }
  return B;
}

std::vector<char> PenaltyAlgebra::penalized_mask() const {
  std::vector<char> m(n_, 0);
  for (const auto& b : blocks_)
    for (int c : b.cols) m[c] = 1;
  return m;
}

}  // namespace smoothfit
