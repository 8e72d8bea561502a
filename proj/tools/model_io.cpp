#include "model_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <boost/math/distributions/normal.hpp>

#include "smoothfit/errors.hpp"
#include "smoothfit/families.hpp"

namespace smoothfit::cli {

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw SpecError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw SpecError(where + ": unknown key '" + it.key() + "'");
}

template <class T>
T get_or(const json& j, const char* key, T def, const std::string& where) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw SpecError(where + ": key '" + key + "' has the wrong type");
  }
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_of(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

json vec_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v[i]));
  return a;
}
Vec vec_of(const json& j) {
  Vec v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v[i] = num_of(j[i]);
  return v;
}

json mat_json(const Mat& m) {
  json d = json::array();
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) d.push_back(num(m(r, c)));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", d}};
}
Mat mat_of(const json& j) {
  const auto r = j.at("rows").get<Eigen::Index>(), c = j.at("cols").get<Eigen::Index>();
  const json& d = j.at("data");
  if (static_cast<Eigen::Index>(d.size()) != r * c) throw SpecError("artifact: matrix size mismatch");
  Mat m(r, c);
  for (Eigen::Index k = 0; k < r * c; ++k) m(k % r, k / r) = num_of(d[k]);
  return m;
}

json term_spec_json(const TermSpec& t) {
  json j = {{"kind", term_kind_name(t.kind)}};
  if (!t.covariates.empty()) j["covariates"] = t.covariates;
  if (!t.by_factor.empty()) j["by"] = t.by_factor;
  if (!t.k.empty()) j["k"] = t.k;
  j["penalty_order"] = t.penalty_order;
  j["degree"] = t.degree;
  j["parameter"] = t.parameter_index;
  j["constrained"] = t.constrained;
  if (!t.label.empty()) j["label"] = t.label;
  return j;
}

TermSpec term_spec_of(const json& j, const std::string& where) {
  check_keys(j, {"kind", "covariates", "by", "k", "penalty_order", "degree", "parameter",
                 "constrained", "label"},
             where);
  TermSpec t;
  if (!j.contains("kind")) throw SpecError(where + ": missing 'kind'");
  t.kind = term_kind_from_name(get_or<std::string>(j, "kind", "", where));
  t.covariates = get_or<std::vector<std::string>>(j, "covariates", {}, where);
  t.by_factor = get_or<std::string>(j, "by", "", where);
  if (j.contains("k") && j.at("k").is_number_integer())
    t.k = {j.at("k").get<int>()};
  else
    t.k = get_or<std::vector<int>>(j, "k", {}, where);
  t.penalty_order = get_or<int>(j, "penalty_order", 2, where);
  t.degree = get_or<int>(j, "degree", 3, where);
  t.parameter_index = get_or<int>(j, "parameter", 0, where);
  t.constrained = get_or<bool>(j, "constrained", true, where);
  t.label = get_or<std::string>(j, "label", "", where);
  return t;
}

json term_info_json(const TermInfo& t) {
  json knots = json::array();
  for (const auto& k : t.knots) knots.push_back(vec_json(k));
  return {{"spec", term_spec_json(t.spec)},
          {"label", t.label},
          {"param", t.param},
          {"col_begin", t.col_begin},
          {"col_end", t.col_end},
          {"knots", knots},
          {"Z", mat_json(t.Z)},
          {"P", mat_json(t.P)},
          {"levels", t.levels},
          {"cols_per_level", t.cols_per_level},
          {"n_offsets", t.n_offsets},
          {"lambda_idx", t.lambda_idx},
          {"kernel_dim", t.kernel_dim}};
}

TermInfo term_info_of(const json& j) {
  TermInfo t;
  t.spec = term_spec_of(j.at("spec"), "artifact term");
  t.label = j.at("label").get<std::string>();
  t.param = j.at("param").get<int>();
  t.col_begin = j.at("col_begin").get<int>();
  t.col_end = j.at("col_end").get<int>();
  for (const auto& k : j.at("knots")) t.knots.push_back(vec_of(k));
  t.Z = mat_of(j.at("Z"));
  t.P = mat_of(j.at("P"));
  t.levels = j.at("levels").get<std::vector<std::string>>();
  t.cols_per_level = j.at("cols_per_level").get<int>();
  t.n_offsets = j.at("n_offsets").get<int>();
  t.lambda_idx = j.at("lambda_idx").get<std::vector<int>>();
  t.kernel_dim = j.at("kernel_dim").get<int>();
  return t;
}

json aic_json(const AicReport& r) {
  return {{"variant", aic_variant_name(r.variant)},
          {"llk", num(r.llk)},
          {"tau", num(r.tau)},
          {"tau_prime", num(r.tau_prime)},
          {"caic", num(r.caic)},
          {"n_samples", r.n_samples},
          {"seed", r.seed},
          {"ess", num(r.ess)},
          {"flags", r.flags}};
}

AicReport aic_of(const json& j) {
  AicReport r;
  r.variant = aic_variant_from_name(j.at("variant").get<std::string>());
  r.llk = num_of(j.at("llk"));
  r.tau = num_of(j.at("tau"));
  r.tau_prime = num_of(j.at("tau_prime"));
  r.caic = num_of(j.at("caic"));
  r.n_samples = j.at("n_samples").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ess = num_of(j.at("ess"));
  r.flags = j.at("flags").get<std::vector<std::string>>();
  return r;
}

}  // namespace

ModelSpec spec_from_json(const json& j) {
  check_keys(j, {"response", "event", "family", "link", "n_params", "terms"}, "spec");
  ModelSpec s;
  if (!j.contains("response")) throw SpecError("spec: missing 'response'");
  s.response = get_or<std::string>(j, "response", "", "spec");
  s.event = get_or<std::string>(j, "event", "", "spec");
  s.family = get_or<std::string>(j, "family", "gaussian", "spec");
  s.link = get_or<std::string>(j, "link", "", "spec");
  s.n_params = get_or<int>(j, "n_params", 1, "spec");
  if (!j.contains("terms") || !j.at("terms").is_array() || j.at("terms").empty())
    throw SpecError("spec: 'terms' must be a non-empty array");
  int i = 0;
  for (const auto& t : j.at("terms"))
    s.terms.push_back(term_spec_of(t, "spec term " + std::to_string(i++)));
  return s;
}

json spec_to_json(const ModelSpec& s) {
  json j = {{"response", s.response}, {"family", s.family}, {"link", s.link},
            {"n_params", s.n_params}};
  if (!s.event.empty()) j["event"] = s.event;
  json terms = json::array();
  for (const auto& t : s.terms) terms.push_back(term_spec_json(t));
  j["terms"] = terms;
  return j;
}

ModelSpec read_spec_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw SpecError("cannot open spec file '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw SpecError("spec file '" + path + "': " + e.what());
  }
  return spec_from_json(j);
}

std::string response_hash(const Vec& y) {
  std::uint64_t h = 1469598103934665603ull;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double v = y[i];
    const auto* b = reinterpret_cast<const unsigned char*>(&v);
    for (size_t k = 0; k < sizeof v; ++k) {
      h ^= b[k];
      h *= 1099511628211ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Artifact make_artifact(const PenalizedDesign& d, const FitState& fit, const EngineOptions& o,
                       const Vec& y_user) {
  Artifact a;
  a.options = o;
  a.spec = d.spec;
  if (a.spec.link.empty() && a.spec.family != "coxph" && a.spec.family != "gaussian_ls" &&
      a.spec.family != "gamma_ls")
    a.spec.link = ExponentialFamily::from_name(a.spec.family).default_link().name();
  a.n = d.N;
  a.response_hash = response_hash(y_user);
  a.N_p = d.N_p;
  a.n_params = d.n_params;
  a.param_offsets = d.param_offsets;
  a.terms = d.terms;
  a.lambda_labels = d.lambda_labels;
  a.kind = fit.kind;
  a.beta = fit.beta;
  a.lambda = fit.lambda;
  a.grad_rho = fit.grad_rho;
  a.term_edf = fit.term_edf;
  a.phi = fit.phi;
  a.has_phi = fit.has_phi;
  a.edf = fit.edf;
  a.reml = fit.reml;
  a.llk = fit.llk;
  a.iterations = fit.iterations;
  a.converged = fit.converged;
  a.flags = fit.flags;
  a.kept = fit.kept;
  a.dropped = fit.dropped;
  const int n = static_cast<int>(fit.kept.size());
  a.V_half.resize(n, n);
  for (int j = 0; j < n; ++j) a.V_half.col(j) = fit.factor.half_solve(Vec(Vec::Unit(n, j)));
  return a;
}

json artifact_to_json(const Artifact& a) {
  json terms = json::array();
  for (const auto& t : a.terms) terms.push_back(term_info_json(t));
  json aic = json::array();
  for (const auto& r : a.aic) aic.push_back(aic_json(r));
  return {{"format", kArtifactFormat},
          {"version", a.version},
          {"engine",
           {{"name", a.options.engine},
            {"nv", a.options.nv},
            {"max_inner", a.options.max_inner},
            {"tol", a.options.tol},
            {"seed", a.options.seed}}},
          {"spec", spec_to_json(a.spec)},
          {"data", {{"n", a.n}, {"response_hash", a.response_hash}}},
          {"design",
           {{"N_p", a.N_p},
            {"n_params", a.n_params},
            {"param_offsets", a.param_offsets},
            {"lambda_labels", a.lambda_labels},
            {"terms", terms}}},
          {"fit",
           {{"kind", a.kind},
            {"beta", vec_json(a.beta)},
            {"lambda", vec_json(a.lambda)},
            {"grad_rho", vec_json(a.grad_rho)},
            {"phi", num(a.phi)},
            {"has_phi", a.has_phi},
            {"edf", num(a.edf)},
            {"term_edf", vec_json(a.term_edf)},
            {"reml", num(a.reml)},
            {"llk", num(a.llk)},
            {"iterations", a.iterations},
            {"converged", a.converged},
            {"flags", a.flags},
            {"kept", a.kept},
            {"dropped", a.dropped}}},
          {"covariance", {{"half", mat_json(a.V_half)}}},
          {"aic", aic}};
}

Artifact artifact_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != kArtifactFormat)
      throw SpecError("not a smoothfit fit artifact");
    Artifact a;
    a.version = j.at("version").get<int>();
    if (a.version != kArtifactVersion)
      throw SpecError("unsupported artifact version " + std::to_string(a.version));
    const json& e = j.at("engine");
    a.options.engine = e.at("name").get<std::string>();
    a.options.nv = e.at("nv").get<int>();
    a.options.max_inner = e.at("max_inner").get<int>();
    a.options.tol = e.at("tol").get<double>();
    a.options.seed = e.at("seed").get<std::uint64_t>();
    a.spec = spec_from_json(j.at("spec"));
    a.n = j.at("data").at("n").get<int>();
    a.response_hash = j.at("data").at("response_hash").get<std::string>();
    const json& d = j.at("design");
    a.N_p = d.at("N_p").get<int>();
    a.n_params = d.at("n_params").get<int>();
    a.param_offsets = d.at("param_offsets").get<std::vector<int>>();
    a.lambda_labels = d.at("lambda_labels").get<std::vector<std::string>>();
    for (const auto& t : d.at("terms")) a.terms.push_back(term_info_of(t));
    const json& f = j.at("fit");
    a.kind = f.at("kind").get<std::string>();
    a.beta = vec_of(f.at("beta"));
    a.lambda = vec_of(f.at("lambda"));
    a.grad_rho = vec_of(f.at("grad_rho"));
    a.phi = num_of(f.at("phi"));
    a.has_phi = f.at("has_phi").get<bool>();
    a.edf = num_of(f.at("edf"));
    a.term_edf = vec_of(f.at("term_edf"));
    a.reml = num_of(f.at("reml"));
    a.llk = num_of(f.at("llk"));
    a.iterations = f.at("iterations").get<int>();
    a.converged = f.at("converged").get<bool>();
    a.flags = f.at("flags").get<std::vector<std::string>>();
    a.kept = f.at("kept").get<std::vector<int>>();
    a.dropped = f.at("dropped").get<std::vector<int>>();
    a.V_half = mat_of(j.at("covariance").at("half"));
    for (const auto& r : j.at("aic")) a.aic.push_back(aic_of(r));
    if (a.beta.size() != a.N_p || a.V_half.rows() != static_cast<Eigen::Index>(a.kept.size()))
      throw SpecError("artifact: inconsistent dimensions");
    return a;
  } catch (const json::exception& e) {
    throw SpecError(std::string("malformed artifact: ") + e.what());
  }
}

std::string artifact_text(const Artifact& a) { return artifact_to_json(a).dump(1) + "\n"; }

void save_artifact(const std::string& path, const Artifact& a) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw SpecError("cannot write artifact '" + path + "'");
  f << artifact_text(a);
}

Artifact load_artifact(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw SpecError("cannot open artifact '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw SpecError("artifact '" + path + "': " + e.what());
  }
  return artifact_from_json(j);
}

PenalizedDesign prediction_design(const Artifact& a) {
  PenalizedDesign d;
  d.spec = a.spec;
  d.N_p = a.N_p;
  d.n_params = a.n_params;
  d.param_offsets = a.param_offsets;
  d.terms = a.terms;
  d.N_lambda = static_cast<int>(a.lambda.size());
  d.lambda_labels = a.lambda_labels;
  return d;
}

double mean_from_eta(const ModelSpec& spec, double eta) {
  if (spec.family == "coxph" || spec.family == "gamma_ls") return std::exp(eta);
  if (spec.family == "gaussian_ls") return eta;
  const auto fam = ExponentialFamily::from_name(spec.family);
  const auto link = spec.link.empty() ? fam.default_link() : LinkFunction::from_name(spec.link);
  return link.ginv(eta);
}

Prediction predict(const Artifact& a, const DataTable& data, double level) {
  if (!(level > 0.0 && level < 1.0)) throw SpecError("predict: level must be in (0,1)");
  Prediction p;
  p.approximate = a.kind == "lqefs";
  const int m = data.nrows, q = a.n_params;
  p.eta.resize(m, q);
  p.eta_lower.resize(m, q);
  p.eta_upper.resize(m, q);
  p.mu.resize(m);
  p.mu_lower.resize(m);
  p.mu_upper.resize(m);
  p.clamped.assign(m, 0);
  if (m == 0) return p;

  const PenalizedDesign d = prediction_design(a);
  const PredictionMatrices pm = prediction_matrices(d, data);
  p.clamped = pm.clamped;
  p.n_clamped = pm.n_clamped;
  const double zq = boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);

  std::vector<int> loc(a.N_p, -1);
  for (size_t i = 0; i < a.kept.size(); ++i) loc[a.kept[i]] = static_cast<int>(i);
  for (int k = 0; k < q; ++k) {
    const int off = a.param_offsets[k];
    const SpMat& Xk = pm.X_blocks[k];
    p.eta.col(k) = Xk * a.beta.segment(off, Xk.cols());
    // rows of X restricted to kept coefficients, mapped into V_half's column space
    std::vector<Triplet> tr;
    for (int j = 0; j < Xk.outerSize(); ++j) {
      if (loc[off + j] < 0) continue;
      for (SpMat::InnerIterator it(Xk, j); it; ++it) tr.emplace_back(loc[off + j], it.row(), it.value());
    }
    SpMat XkT(a.kept.size(), m);
    XkT.setFromTriplets(tr.begin(), tr.end());
    const Mat HX = a.V_half * XkT;
    for (int i = 0; i < m; ++i) {
      const double hw = zq * std::sqrt(std::max(a.phi * HX.col(i).squaredNorm(), 0.0));
      p.eta_lower(i, k) = p.eta(i, k) - hw;
      p.eta_upper(i, k) = p.eta(i, k) + hw;
    }
  }
  for (int i = 0; i < m; ++i) {
    p.mu[i] = mean_from_eta(a.spec, p.eta(i, 0));
    const double lo = mean_from_eta(a.spec, p.eta_lower(i, 0));
    const double hi = mean_from_eta(a.spec, p.eta_upper(i, 0));
    p.mu_lower[i] = std::min(lo, hi);
    p.mu_upper[i] = std::max(lo, hi);
  }
  return p;
}

}  // namespace smoothfit::cli
