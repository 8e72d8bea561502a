#include "engine.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include "smoothfit/errors.hpp"

namespace smoothfit::cli {

bool is_exponential_family(const std::string& family) {
  return family == "gaussian" || family == "gamma" || family == "binomial" ||
         family == "poisson" || family == "inverse_gaussian";
}

namespace {

bool gaussian_identity(const ModelSpec& s) {
  return s.family == "gaussian" && (s.link.empty() || s.link == "identity");
}

}  // namespace

std::string resolve_engine(const ModelSpec& spec, const std::string& requested) {
  const bool expf = is_exponential_family(spec.family);
  if (!expf && spec.family != "coxph" && spec.family != "gaussian_ls" && spec.family != "gamma_ls")
    throw SpecError("unknown family '" + spec.family + "'");
  if (requested.empty()) return gaussian_identity(spec) ? "am" : expf ? "gam" : "gsmm";
  if (requested == "am") {
    if (!gaussian_identity(spec))
      throw SpecError("engine am requires family gaussian with the identity link (got " +
                      spec.family + (spec.link.empty() ? "" : "/" + spec.link) + ")");
  } else if (requested == "gam") {
    if (!expf) throw SpecError("engine gam requires an exponential family (got " + spec.family + ")");
  } else if (requested != "gsmm" && requested != "lqefs") {
    throw SpecError("unknown engine '" + requested + "' (am, gam, gsmm, lqefs)");
  }
  return requested;
}

ModelRef FitJob::model() const {
  ModelRef m;
  m.design = &design;
  m.y = &y;
  m.fam = fam ? &*fam : nullptr;
  m.link = link ? &*link : nullptr;
  m.general = general.get();
  return m;
}

FitJob run_fit(const ModelSpec& spec, const DataTable& data, EngineOptions o) {
  o.engine = resolve_engine(spec, o.engine);
  if (o.nv < 1) throw SpecError("--nv must be positive");
  if (o.max_inner < 1) throw SpecError("--max-inner must be positive");
  if (o.tol < 0) throw SpecError("--tol must be non-negative");
  FitJob job;
  job.options = o;
  job.design = build_design(spec, data);
  const auto& d = job.design;
  job.y = d.response(data);
  job.y_user = d.to_user(job.y);

  EFSControl c;
  c.max_inner = o.max_inner;
  if (o.tol > 0) c.tol = o.tol;
  const auto t0 = std::chrono::steady_clock::now();
  if (o.engine == "am") {
    job.fit = fit_additive(d, job.y, c);
  } else if (o.engine == "gam") {
    job.fam = ExponentialFamily::from_name(spec.family);
    job.link = spec.link.empty() ? job.fam->default_link() : LinkFunction::from_name(spec.link);
    job.fam->check_response(job.y);
    job.fit = fit_gam(d, job.y, *job.fam, *job.link, c);
  } else {
    job.general = general_family_for(d, data);
    if (o.engine == "gsmm") {
      job.fit = fit_gsmm(d, *job.general, c);
    } else {
      LQEFSControl lc;
      lc.n_v = o.nv;
      lc.seed = o.seed;
      if (o.tol > 0) lc.tol = o.tol;
      job.fit = lqefs_fit(d, *job.general, lc);
    }
  }
  job.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return job;
}

std::vector<AicReport> compute_aic(const FitJob& job, const AicRequest& r) {
  std::vector<AicReport> out;
  for (AicVariant v : r.variants) {
    switch (v) {
      case AicVariant::conventional:
      case AicVariant::pql_corrected:
        out.push_back(caic(job.fit, v));
        break;
      case AicVariant::mc_gaussian: {
        if (job.fit.kind != "additive")
          throw SpecError("cAIC variant mc_gaussian needs a Gaussian additive (am) fit");
        MCOptions m;
        m.n_samples = r.n_samples;
        m.seed = r.seed;
        m.threads = r.threads;
        out.push_back(mc_tau_gaussian(job.fit, m));
        break;
      }
      case AicVariant::mc_general: {
        MCGeneralOptions m;
        m.n_samples = r.n_samples;
        m.seed = r.seed;
        m.threads = r.threads;
        out.push_back(mc_tau_general(job.fit, job.model(), m));
        break;
      }
    }
  }
  return out;
}

int worker_count() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* e = std::getenv("SMOOTHFIT_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(e, &end, 10);
    if (end == e || *end != '\0' || cap < 1)
      throw SpecError("SMOOTHFIT_THREADS must be a positive integer");
    n = std::min<long>(n, cap);
  }
  return n;
}

}  // namespace smoothfit::cli
