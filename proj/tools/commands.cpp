#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "csv.hpp"
#include "engine.hpp"
#include "model_io.hpp"
#include "smoothfit/errors.hpp"
#include "studies.hpp"

namespace smoothfit::cli {

namespace {

struct Options {
  std::string data, spec, engine, family, link, out, fit, study;
  std::vector<std::string> fits, specs, variants;
  std::vector<double> effects;
  int nv = 30, max_inner = 1, nr = kDefaultSamples, replicates = 5, n = 0;
  double tol = 0.0, level = 0.95;
  std::uint64_t seed = 0;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<AicVariant> parse_variants(const std::vector<std::string>& names) {
  std::vector<AicVariant> v;
  for (const auto& s : names) {
    const AicVariant a = aic_variant_from_name(s);
    for (AicVariant b : v)
      if (a == b) throw SpecError("cAIC variant '" + s + "' requested twice");
    v.push_back(a);
  }
  return v;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

EngineOptions engine_options(const Options& o) {
  EngineOptions e;
  e.engine = o.engine;
  e.nv = o.nv;
  e.max_inner = o.max_inner;
  e.tol = o.tol;
  e.seed = o.seed;
  return e;
}

ModelSpec load_spec(const std::string& path, const Options& o) {
  ModelSpec s = read_spec_file(path);
  if (!o.family.empty()) s.family = o.family;
  if (!o.link.empty()) s.link = o.link;
  return s;
}

std::vector<std::string> coef_names(const Artifact& a) {
  std::vector<std::string> names(a.N_p);
  for (const auto& t : a.terms) {
    const int w = t.col_end - t.col_begin;
    for (int j = t.col_begin; j < t.col_end; ++j)
      names[j] = w == 1 ? t.label : t.label + "." + std::to_string(j - t.col_begin + 1);
  }
  return names;
}

void print_summary(std::ostream& os, const FitJob& job, const Artifact& a) {
  const auto& f = job.fit;
  os << "engine      " << a.options.engine << " (" << f.kind << ")\n"
     << "family      " << a.spec.family << (a.spec.link.empty() ? "" : "/" + a.spec.link) << "\n"
     << "N           " << a.n << "\n"
     << "coefficients " << a.N_p << " (" << f.dropped.size() << " dropped)\n"
     << "converged   " << (f.converged ? "yes" : "no") << " after " << f.iterations
     << " iterations\n"
     << "REML        " << fmt("%.6f", f.reml) << "\n"
     << "log-lik     " << fmt("%.6f", f.llk) << "\n"
     << "phi         " << fmt("%.6g", f.phi) << (f.has_phi ? "" : " (fixed)") << "\n"
     << "edf         " << fmt("%.4f", f.edf) << "\n";
  os << "term                     edf\n";
  for (size_t t = 0; t < a.terms.size(); ++t) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "  %-22s %8.4f\n", a.terms[t].label.c_str(),
                  t < static_cast<size_t>(f.term_edf.size()) ? f.term_edf[t] : std::nan(""));
    os << buf;
  }
  os << "smoothing parameters\n";
  for (int r = 0; r < f.lambda.size(); ++r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-22s lambda %.6g  dV/drho %.3g\n",
                  r < static_cast<int>(a.lambda_labels.size()) ? a.lambda_labels[r].c_str() : "?",
                  f.lambda[r], r < f.grad_rho.size() ? f.grad_rho[r] : std::nan(""));
    os << buf;
  }
  if (!f.dropped.empty()) {
    const auto names = coef_names(a);
    os << "dropped coefficients:";
    for (int j : f.dropped) os << " " << names[j];
    os << "\n";
  }
  for (const auto& r : a.aic)
    os << "cAIC " << aic_variant_name(r.variant) << ": " << fmt("%.4f", r.caic)
       << " (edf " << fmt("%.4f", r.edf_used()) << ")\n";
  if (!f.flags.empty()) {
    os << "flags:";
    for (const auto& s : f.flags) os << " " << s;
    os << "\n";
  }
}

int cmd_fit(const Options& o, std::ostream& out, std::ostream& err) {
  const DataTable data = read_csv_file(o.data);
  const ModelSpec spec = load_spec(o.spec, o);
  FitJob job = run_fit(spec, data, engine_options(o));
  AicRequest req;
  req.variants = parse_variants(o.variants.empty()
                                    ? std::vector<std::string>{"conventional", "pql_corrected"}
                                    : o.variants);
  req.n_samples = o.nr;
  req.seed = o.seed;
  req.threads = worker_count();
  Artifact a = make_artifact(job.design, job.fit, job.options, job.y_user);
  a.aic = compute_aic(job, req);
  if (!o.out.empty()) save_artifact(o.out, a);
  print_summary(out, job, a);
  if (!job.fit.converged) {
    err << "error: the fit did not converge after " << job.fit.iterations
        << " iterations; try a larger --tol, a smaller basis, or another --engine\n";
    return kExitNumeric;
  }
  return kExitOk;
}

void check_columns(const Artifact& a, const DataTable& d) {
  for (const auto& t : a.terms) {
    for (const auto& c : t.spec.covariates)
      if (!d.has(c)) throw SpecError("prediction data lacks column '" + c + "' (term " + t.label + ")");
    if (!t.spec.by_factor.empty() && !d.has(t.spec.by_factor))
      throw SpecError("prediction data lacks column '" + t.spec.by_factor + "' (term " + t.label + ")");
  }
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream& err) {
  const Artifact a = load_artifact(o.fit);
  const DataTable data = read_csv_file(o.data);
  check_columns(a, data);
  const Prediction p = predict(a, data, o.level);
  CsvTable t;
  const int q = a.n_params;
  auto nm = [&](const std::string& base, int k) {
    return q == 1 ? base : base + "_" + std::to_string(k + 1);
  };
  for (int k = 0; k < q; ++k)
    for (const char* s : {"eta", "eta_lower", "eta_upper"}) t.header.push_back(nm(s, k));
  t.header.insert(t.header.end(), {"mu", "mu_lower", "mu_upper", "clamped"});
  for (int i = 0; i < data.nrows; ++i) {
    std::vector<std::string> r;
    for (int k = 0; k < q; ++k) {
      r.push_back(fmt_double(p.eta(i, k)));
      r.push_back(fmt_double(p.eta_lower(i, k)));
      r.push_back(fmt_double(p.eta_upper(i, k)));
    }
    r.push_back(fmt_double(p.mu[i]));
    r.push_back(fmt_double(p.mu_lower[i]));
    r.push_back(fmt_double(p.mu_upper[i]));
    r.push_back(p.clamped[i] ? "1" : "0");
    t.rows.push_back(std::move(r));
  }
  if (o.out.empty())
    write_csv(out, t);
  else
    write_csv_file(o.out, t);
  if (p.n_clamped > 0)
    err << "warning: " << p.n_clamped
        << " row(s) had covariates outside the training range and were clamped\n";
  if (p.approximate) err << "note: intervals use the quasi-Newton Hessian approximation\n";
  return kExitOk;
}

struct AicEntry {
  std::string name;
  int n = 0;
  std::string hash;
  std::vector<AicReport> reports;
};

int cmd_aic(const Options& o, std::ostream& out, std::ostream&) {
  std::vector<AicEntry> entries;
  std::vector<AicVariant> variants;
  if (!o.fits.empty()) {
    if (!o.specs.empty()) throw SpecError("aic: use either --fit or --spec, not both");
    std::vector<Artifact> arts;
    for (const auto& f : o.fits) arts.push_back(load_artifact(f));
    if (o.variants.empty()) {
      for (const auto& r : arts[0].aic) variants.push_back(r.variant);
    } else {
      variants = parse_variants(o.variants);
    }
    for (size_t i = 0; i < arts.size(); ++i) {
      const Artifact& a = arts[i];
      if (a.n != arts[0].n)
        throw SpecError("aic: mismatched N (" + std::to_string(a.n) + " in " + o.fits[i] +
                        ", " + std::to_string(arts[0].n) + " in " + o.fits[0] + ")");
      if (a.response_hash != arts[0].response_hash)
        throw SpecError("aic: " + o.fits[i] + " was fitted to a different response vector");
      AicEntry e{o.fits[i], a.n, a.response_hash, {}};
      for (AicVariant v : variants) {
        bool found = false;
        for (const auto& r : a.aic)
          if (r.variant == v) {
            e.reports.push_back(r);
            found = true;
          }
        if (!found)
          throw SpecError("aic: " + o.fits[i] + " does not contain variant " +
                          aic_variant_name(v) + "; refit with --aic-variant " +
                          aic_variant_name(v));
      }
      entries.push_back(std::move(e));
    }
  } else {
    if (o.specs.empty() || o.data.empty())
      throw SpecError("aic: give --fit artifacts, or --data with one or more --spec files");
    variants = parse_variants(o.variants.empty()
                                  ? std::vector<std::string>{"conventional", "pql_corrected"}
                                  : o.variants);
    const DataTable data = read_csv_file(o.data);
    AicRequest req;
    req.variants = variants;
    req.n_samples = o.nr;
    req.seed = o.seed;
    req.threads = worker_count();
    for (const auto& sp : o.specs) {
      FitJob job = run_fit(load_spec(sp, o), data, engine_options(o));
      if (!entries.empty() && job.design.N != entries[0].n)
        throw SpecError("aic: mismatched N between " + sp + " and " + entries[0].name);
      entries.push_back({sp, job.design.N, response_hash(job.y_user), compute_aic(job, req)});
      if (entries.back().hash != entries[0].hash)
        throw SpecError("aic: " + sp + " uses a different response vector");
    }
  }

  CsvTable t;
  t.header = {"model", "n", "llk", "tau"};
  for (AicVariant v : variants) {
    const std::string s = aic_variant_name(v);
    t.header.insert(t.header.end(), {"tau_prime_" + s, "caic_" + s, "delta_" + s, "preferred_" + s});
  }
  const size_t nv = variants.size();
  std::vector<double> best(nv, std::numeric_limits<double>::infinity());
  for (const auto& e : entries)
    for (size_t v = 0; v < nv; ++v) best[v] = std::min(best[v], e.reports[v].caic);
  for (const auto& e : entries) {
    std::vector<std::string> r = {e.name, std::to_string(e.n), fmt_double(e.reports[0].llk),
                                  fmt_double(e.reports[0].tau)};
    for (size_t v = 0; v < nv; ++v) {
      const auto& rep = e.reports[v];
      r.push_back(fmt_double(rep.edf_used()));
      r.push_back(fmt_double(rep.caic));
      r.push_back(fmt_double(rep.caic - best[v]));
      r.push_back(rep.caic == best[v] ? "1" : "0");
    }
    t.rows.push_back(std::move(r));
  }
  if (o.out.empty())
    write_csv(out, t);
  else
    write_csv_file(o.out, t);
  return kExitOk;
}

int cmd_sample(const Options& o, std::ostream& out, std::ostream&) {
  if (o.nr < 1) throw SpecError("--nr must be positive");
  const Artifact a = load_artifact(o.fit);
  const auto names = coef_names(a);
  CsvTable t;
  t.header = {"draw"};
  t.header.insert(t.header.end(), names.begin(), names.end());
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> nd;
  const int k = static_cast<int>(a.kept.size());
  const double sphi = std::sqrt(a.phi);
  for (int s = 0; s < o.nr; ++s) {
    Vec z(k);
    for (int i = 0; i < k; ++i) z[i] = nd(rng);
    Vec b = a.beta;
    b(a.kept) += sphi * (a.V_half.transpose() * z);
    std::vector<std::string> r = {std::to_string(s + 1)};
    for (int j = 0; j < a.N_p; ++j) r.push_back(fmt_double(b[j]));
    t.rows.push_back(std::move(r));
  }
  if (o.out.empty())
    write_csv(out, t);
  else
    write_csv_file(o.out, t);
  return kExitOk;
}

int cmd_simulate(const Options& o, std::ostream& out, std::ostream&) {
  StudyConfig c;
  c.study = o.study;
  c.replicates = o.replicates;
  c.n = o.n;
  c.seed = o.seed;
  c.effects = o.effects;
  c.engines = split_commas(o.engine);
  c.variants = parse_variants(o.variants);
  c.n_samples = o.nr;
  c.threads = worker_count();
  const StudyResult r = run_study(c);
  if (o.out.empty()) {
    write_csv(out, r.metrics);
    return kExitOk;
  }
  write_csv_file(o.out, r.metrics);
  write_csv_file(o.out + ".summary.csv", r.summary);
  write_csv_file(o.out + ".timing.csv", r.timing);
  write_csv(out, r.summary);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Penalized spline regression with REML smoothing parameter estimation",
               "smoothfit"};
  app.require_subcommand(1);
  Options o;

  auto engine_opts = [&](CLI::App* s) {
    s->add_option("--engine", o.engine, "am | gam | gsmm | lqefs (default from the family)");
    s->add_option("--family", o.family, "override the spec's family");
    s->add_option("--link", o.link, "override the spec's link");
    s->add_option("--nv", o.nv, "quasi-Newton memory for lqefs")->capture_default_str();
    s->add_option("--max-inner", o.max_inner, "inner Newton/PIRLS steps per outer iteration")
        ->capture_default_str();
    s->add_option("--tol", o.tol, "convergence tolerance (0: engine default)");
  };

  auto* fit = app.add_subcommand("fit", "fit a model and write a fit artifact");
  fit->add_option("--data", o.data, "training CSV")->required();
  fit->add_option("--spec", o.spec, "model spec (JSON)")->required();
  engine_opts(fit);
  fit->add_option("--seed", o.seed, "seed (lqefs start, MC cAIC)");
  fit->add_option("--out", o.out, "artifact path");
  fit->add_option("--aic-variant", o.variants, "cAIC variants to store")->delimiter(',');
  fit->add_option("--nr", o.nr, "Monte Carlo samples for MC cAIC")->capture_default_str();

  auto* pred = app.add_subcommand("predict", "predict from a fit artifact");
  pred->add_option("--fit", o.fit, "fit artifact")->required();
  pred->add_option("--data", o.data, "CSV with the covariates")->required();
  pred->add_option("--out", o.out, "output CSV (default stdout)");
  pred->add_option("--level", o.level, "credible level")->capture_default_str();

  auto* aic = app.add_subcommand("aic", "compare models by conditional AIC");
  aic->add_option("--fit", o.fits, "fit artifacts");
  aic->add_option("--spec", o.specs, "model specs to fit on --data");
  aic->add_option("--data", o.data, "training CSV (with --spec)");
  engine_opts(aic);
  aic->add_option("--aic-variant", o.variants,
                  "conventional, pql_corrected, mc_gaussian, mc_general")
      ->delimiter(',');
  aic->add_option("--nr", o.nr, "Monte Carlo samples")->capture_default_str();
  aic->add_option("--seed", o.seed, "seed");
  aic->add_option("--out", o.out, "output CSV (default stdout)");

  auto* smp = app.add_subcommand("sample", "draw coefficients from the conditional posterior");
  smp->add_option("--fit", o.fit, "fit artifact")->required();
  smp->add_option("--nr", o.nr, "number of draws")->capture_default_str();
  smp->add_option("--seed", o.seed, "seed");
  smp->add_option("--out", o.out, "output CSV (default stdout)");

  auto* sim = app.add_subcommand("simulate", "run a simulation study");
  sim->add_option("--study", o.study, "s1 | s2 | s4 | s5")->required();
  sim->add_option("--replicates", o.replicates, "replicates")->capture_default_str();
  sim->add_option("--n", o.n, "observations per replicate (0: study default)");
  sim->add_option("--seed", o.seed, "master seed");
  sim->add_option("--engine", o.engine, "engines for s1/s2, comma separated");
  sim->add_option("--aic-variant", o.variants, "variants for s4/s5")->delimiter(',');
  sim->add_option("--nr", o.nr, "Monte Carlo samples")->capture_default_str();
  sim->add_option("--effect", o.effects, "effect sizes for s4/s5")->delimiter(',');
  sim->add_option("--out", o.out, "metrics CSV; .summary.csv and .timing.csv are written next to it");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }

  try {
    if (*fit) return cmd_fit(o, out, err);
    if (*pred) return cmd_predict(o, out, err);
    if (*aic) return cmd_aic(o, out, err);
    if (*smp) return cmd_sample(o, out, err);
    if (*sim) return cmd_simulate(o, out, err);
  } catch (const IndefiniteError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const SpecError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace smoothfit::cli
