#include "smoothfit/simulate.hpp"

#include <cmath>

#include "smoothfit/errors.hpp"

namespace smoothfit::sim {

double f0(double u) { return 2.0 * std::sin(M_PI * u); }
double f1(double u) { return std::exp(2.0 * u); }
double f2(double u) {
  return 0.2 * std::pow(u, 11) * std::pow(10.0 * (1.0 - u), 6) +
         10.0 * std::pow(10.0 * u, 3) * std::pow(1.0 - u, 10);
}
double f3(double) { return 0.0; }

namespace {

// Map the additive signal onto each family's linear-predictor scale.
double family_eta(const std::string& family, double f) {
  if (family == "gaussian") return f;
  if (family == "binomial") return (f - 5.0) / 3.0;
  if (family == "gamma" || family == "poisson") return f / 7.0;
  throw SpecError("simulation: unsupported family '" + family + "'");
}

double draw_response(const std::string& family, double eta, double phi, std::mt19937_64& rng) {
  if (family == "gaussian") return std::normal_distribution<double>(eta, std::sqrt(phi))(rng);
  if (family == "binomial") {
    const double p = 1.0 / (1.0 + std::exp(-eta));
    return std::bernoulli_distribution(p)(rng) ? 1.0 : 0.0;
  }
  if (family == "gamma") {
    const double mu = std::exp(eta);
    return std::gamma_distribution<double>(1.0 / phi, mu * phi)(rng);
  }
  if (family == "poisson") return std::poisson_distribution<int>(std::exp(eta))(rng);
  throw SpecError("simulation: unsupported family '" + family + "'");
}

struct Covariates {
  Vec v, w, x, z;
};

Covariates draw_covariates(int n, double corr, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Covariates c{Vec(n), Vec(n), Vec(n), Vec(n)};
  for (int i = 0; i < n; ++i) {
    const double shared = u(rng);
    auto mix = [&](double own) { return (1.0 - corr) * own + corr * shared; };
    c.v[i] = mix(u(rng));
    c.w[i] = mix(u(rng));
    c.x[i] = mix(u(rng));
    c.z[i] = mix(u(rng));
  }
  return c;
}

double to_u(double x) { return 0.5 * (x + 1.0); }

void put_covariates(DataTable& d, const Covariates& c) {
  d.add_numeric("v", c.v);
  d.add_numeric("w", c.w);
  d.add_numeric("x", c.x);
  d.add_numeric("z", c.z);
}

TermSpec smooth(const std::string& cov, int k) {
  TermSpec t;
  t.kind = TermKind::smooth;
  t.covariates = {cov};
  t.k = {k};
  return t;
}

TermSpec intercept() {
  TermSpec t;
  t.kind = TermKind::intercept;
  return t;
}

}  // namespace

SimData additive(int n, const std::string& family, double phi, std::mt19937_64& rng, double corr,
                 double effect_x) {
  if (n <= 0) throw SpecError("simulation: n must be positive");
  Covariates c = draw_covariates(n, corr, rng);
  SimData s;
  s.eta.resize(n);
  Vec y(n);
  for (int i = 0; i < n; ++i) {
    const double f = f0(to_u(c.v[i])) + f1(to_u(c.w[i])) + effect_x * f2(to_u(c.x[i])) +
                     f3(to_u(c.z[i]));
    s.eta[i] = family_eta(family, f);
    y[i] = draw_response(family, s.eta[i], phi, rng);
  }
  s.data.add_numeric("y", y);
  put_covariates(s.data, c);
  return s;
}

SimData random_smooths(int n_per_subject, int subjects, const std::string& family, double phi,
                       std::mt19937_64& rng) {
  const int n = n_per_subject * subjects;
  SimData s = additive(n, family, phi, rng);
  std::normal_distribution<double> nd;
  // subject curves: random combinations of a sine, a cosine and a slope over v
  Mat a(subjects, 3);
  for (int j = 0; j < subjects; ++j)
    for (int m = 0; m < 3; ++m) a(j, m) = 0.5 * nd(rng);
  std::vector<std::string> sub(n);
  Vec y(n);
  const Vec& v = s.data.num("v");
  for (int i = 0; i < n; ++i) {
    const int j = i / n_per_subject;
    sub[i] = "s" + std::to_string(j + 100).substr(1);
    const double u = to_u(v[i]);
    const double fs = a(j, 0) * std::sin(2 * M_PI * u) + a(j, 1) * std::cos(2 * M_PI * u) +
                      a(j, 2) * (2 * u - 1);
    s.eta[i] += family == "gaussian" ? fs : fs / 3.0;
    y[i] = draw_response(family, s.eta[i], phi, rng);
  }
  s.data.add_numeric("y", y);
  s.data.add_factor("s", sub);
  return s;
}

SimData random_intercepts(int n, int levels, double e, const std::string& family, double phi,
                          std::mt19937_64& rng) {
  SimData s = additive(n, family, phi, rng);
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec b(levels);
  for (int l = 0; l < levels; ++l) b[l] = e * nd(rng);
  std::vector<std::string> f(n);
  Vec y(n);
  for (int i = 0; i < n; ++i) {
    const int l = i % levels;
    f[i] = "g" + std::to_string(l + 100).substr(1);
    s.eta[i] += b[l];
    y[i] = draw_response(family, s.eta[i], phi, rng);
  }
  s.data.add_numeric("y", y);
  s.data.add_factor("s", f);
  return s;
}

SimData coxph(int n, std::mt19937_64& rng, double phi_t, double censor) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), u01(0.0, 1.0);
  SimData s;
  Vec x(n), t(n), ev(n);
  s.eta.resize(n);
  for (int i = 0; i < n; ++i) {
    x[i] = u(rng);
    s.eta[i] = f0(to_u(x[i]));
    double U = u01(rng);
    while (U <= 0.0) U = u01(rng);
    t[i] = std::pow(-10.0 * std::log(U) * std::exp(-s.eta[i]), phi_t);
    ev[i] = 1.0;
    if (censor > 0.0 && u01(rng) < censor) {
      t[i] *= u01(rng);
      ev[i] = 0.0;
    }
  }
  s.data.add_numeric("t", t);
  s.data.add_numeric("event", ev);
  s.data.add_numeric("x", x);
  return s;
}

SimData gaussian_ls(int n, std::mt19937_64& rng) {
  Covariates c = draw_covariates(n, 0.0, rng);
  SimData s;
  s.eta.resize(n);
  s.eta2.resize(n);
  Vec y(n);
  for (int i = 0; i < n; ++i) {
    s.eta[i] = f0(to_u(c.v[i])) + f1(to_u(c.w[i]));
    s.eta2[i] = 0.5 * f0(to_u(c.x[i])) - 0.2;
    y[i] = std::normal_distribution<double>(s.eta[i], std::exp(s.eta2[i]))(rng);
  }
  s.data.add_numeric("y", y);
  put_covariates(s.data, c);
  return s;
}

ModelSpec additive_spec(int k, bool include_x) {
  ModelSpec m;
  m.response = "y";
  m.terms = {intercept(), smooth("v", k), smooth("w", k)};
  if (include_x) m.terms.push_back(smooth("x", k));
  m.terms.push_back(smooth("z", k));
  return m;
}

ModelSpec random_smooth_spec(int k) {
  ModelSpec m = additive_spec(k);
  TermSpec t;
  t.kind = TermKind::random_smooth;
  t.covariates = {"v"};
  t.by_factor = "s";
  t.k = {k};
  m.terms.push_back(t);
  return m;
}

ModelSpec random_intercept_spec(int k, bool include_re) {
  ModelSpec m = additive_spec(k);
  if (include_re) {
    TermSpec t;
    t.kind = TermKind::random_intercept;
    t.by_factor = "s";
    m.terms.push_back(t);
  }
  return m;
}

ModelSpec coxph_spec(int k) {
  ModelSpec m;
  m.response = "t";
  m.event = "event";
  m.family = "coxph";
  m.terms = {smooth("x", k)};
  return m;
}

std::uint64_t replicate_seed(std::uint64_t master, int replicate) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(replicate)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace smoothfit::sim
