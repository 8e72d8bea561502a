#include "studies.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include "smoothfit/errors.hpp"
#include "smoothfit/simulate.hpp"

namespace smoothfit::cli {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <class F>
void run_parallel(int n, int threads, F&& body) {
  threads = std::max(1, std::min(threads, n));
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

Vec eta_user(const FitJob& job) {
  const auto& d = job.design;
  const SpMat& X = d.X_blocks[0];
  return d.to_user(X * job.fit.beta.head(X.cols()));
}

double mse(const Vec& a, const Vec& b) { return (a - b).squaredNorm() / a.size(); }

std::string str(double v) { return fmt_double(v); }

struct FitRow {
  std::vector<std::string> cells;
  double seconds = 0.0;
  std::string engine;
  double mse = kNaN;
};

void run_fit_study(const StudyConfig& c, StudyResult& out) {
  const bool s2 = c.study == "s2";
  std::vector<std::string> engines = c.engines;
  if (engines.empty()) engines = s2 ? std::vector<std::string>{"am"}
                                    : std::vector<std::string>{"am", "gsmm", "lqefs"};
  for (const auto& e : engines) resolve_engine(ModelSpec{}, e);
  const int n = c.n > 0 ? c.n : (s2 ? 1000 : 400);
  if (s2 && n % kSubjects != 0)
    throw SpecError("s2: --n must be a multiple of " + std::to_string(kSubjects));

  const int ne = static_cast<int>(engines.size());
  std::vector<FitRow> rows(c.replicates * ne);
  run_parallel(c.replicates, c.threads, [&](int r) {
    const std::uint64_t seed = sim::replicate_seed(c.seed, r);
    std::mt19937_64 rng(seed);
    sim::SimData sd = s2 ? sim::random_smooths(n / kSubjects, kSubjects, "gaussian", 2.0, rng)
                         : sim::additive(n, "gaussian", 2.0, rng);
    const ModelSpec spec = s2 ? sim::random_smooth_spec(c.k) : sim::additive_spec(c.k);
    for (int e = 0; e < ne; ++e) {
      FitRow& row = rows[r * ne + e];
      row.engine = engines[e];
      EngineOptions o;
      o.engine = engines[e];
      o.seed = seed;
      std::string status = "ok";
      double m = kNaN, edf = kNaN, dens = kNaN;
      int it = 0;
      bool conv = false;
      try {
        FitJob job = run_fit(spec, sd.data, o);
        m = mse(eta_user(job), sd.eta);
        edf = job.fit.edf;
        it = job.fit.iterations;
        conv = job.fit.converged;
        dens = job.fit.factor.density();
        row.seconds = job.seconds;
      } catch (const NumericError& ex) {
        status = std::string("numeric_error: ") + ex.what();
      }
      row.mse = m;
      row.cells = {c.study, std::to_string(r), std::to_string(seed), engines[e],
                   std::to_string(n), str(m), str(edf), std::to_string(it),
                   conv ? "1" : "0", str(dens), status};
    }
  });
  out.metrics.header = {"study", "replicate", "seed", "engine", "n", "mse_eta", "edf",
                        "iterations", "converged", "factor_density", "status"};
  out.timing.header = {"study", "replicate", "engine", "seconds"};
  std::map<std::string, std::pair<double, int>> acc;
  for (size_t i = 0; i < rows.size(); ++i) {
    out.metrics.rows.push_back(rows[i].cells);
    out.timing.rows.push_back(
        {c.study, std::to_string(i / ne), rows[i].engine, str(rows[i].seconds)});
    if (std::isfinite(rows[i].mse)) {
      acc[rows[i].engine].first += rows[i].mse;
      acc[rows[i].engine].second += 1;
    }
  }
  out.summary.header = {"study", "engine", "replicates_ok", "mean_mse_eta"};
  for (const auto& e : engines) {
    const auto& a = acc[e];
    out.summary.rows.push_back({c.study, e, std::to_string(a.second),
                                str(a.second ? a.first / a.second : kNaN)});
  }
}

struct SelRow {
  std::vector<double> simple, complex;
  std::vector<int> selected;
  double seconds = 0.0;
  std::string status = "ok";
};

void run_selection_study(const StudyConfig& c, StudyResult& out) {
  const bool s5 = c.study == "s5";
  std::vector<double> effects = c.effects;
  if (effects.empty())
    for (int j = 0; j < 10; ++j) effects.push_back(j / 9.0);
  std::vector<AicVariant> variants = c.variants;
  if (variants.empty())
    variants = {AicVariant::conventional, AicVariant::pql_corrected, AicVariant::mc_gaussian};
  const int n = c.n > 0 ? c.n : 500;
  const int nf = static_cast<int>(effects.size()), nv = static_cast<int>(variants.size());

  std::vector<SelRow> rows(c.replicates * nf);
  run_parallel(c.replicates * nf, c.threads, [&](int idx) {
    const int r = idx / nf, f = idx % nf;
    const std::uint64_t seed = sim::replicate_seed(c.seed, r);
    std::mt19937_64 rng(sim::replicate_seed(seed, f));
    sim::SimData sd =
        s5 ? sim::random_intercepts(n, kRandomInterceptLevels, effects[f], "gaussian", 2.0, rng)
           : sim::additive(n, "gaussian", 2.0, rng, 0.0, effects[f]);
    const ModelSpec simple =
        s5 ? sim::random_intercept_spec(c.k, false) : sim::additive_spec(c.k, false);
    const ModelSpec complex =
        s5 ? sim::random_intercept_spec(c.k, true) : sim::additive_spec(c.k, true);
    SelRow& row = rows[idx];
    AicRequest req;
    req.variants = variants;
    req.n_samples = c.n_samples;
    req.seed = seed;
    EngineOptions o;
    o.engine = "am";
    try {
      FitJob a = run_fit(simple, sd.data, o);
      FitJob b = run_fit(complex, sd.data, o);
      const auto ra = compute_aic(a, req), rb = compute_aic(b, req);
      row.seconds = a.seconds + b.seconds;
      for (int v = 0; v < nv; ++v) {
        row.simple.push_back(ra[v].caic);
        row.complex.push_back(rb[v].caic);
        row.selected.push_back(rb[v].caic < ra[v].caic ? 1 : 0);
      }
    } catch (const NumericError& ex) {
      row.status = std::string("numeric_error: ") + ex.what();
      row.simple.assign(nv, kNaN);
      row.complex.assign(nv, kNaN);
      row.selected.assign(nv, -1);
    }
  });

  out.metrics.header = {"study", "replicate", "seed", "effect", "n"};
  for (AicVariant v : variants) {
    const std::string s = aic_variant_name(v);
    out.metrics.header.insert(out.metrics.header.end(),
                              {"caic_simple_" + s, "caic_complex_" + s, "select_complex_" + s});
  }
  out.metrics.header.push_back("status");
  out.timing.header = {"study", "replicate", "effect", "seconds"};
  out.summary.header = {"study", "effect", "replicates_ok"};
  for (AicVariant v : variants) out.summary.header.push_back("rate_" + aic_variant_name(v));

  std::vector<std::vector<int>> hits(nf, std::vector<int>(nv, 0));
  std::vector<int> ok(nf, 0);
  for (int idx = 0; idx < static_cast<int>(rows.size()); ++idx) {
    const int r = idx / nf, f = idx % nf;
    const SelRow& row = rows[idx];
    std::vector<std::string> cells = {c.study, std::to_string(r),
                                      std::to_string(sim::replicate_seed(c.seed, r)),
                                      str(effects[f]), std::to_string(n)};
    for (int v = 0; v < nv; ++v) {
      cells.push_back(str(row.simple[v]));
      cells.push_back(str(row.complex[v]));
      cells.push_back(std::to_string(row.selected[v]));
    }
    cells.push_back(row.status);
    out.metrics.rows.push_back(std::move(cells));
    out.timing.rows.push_back({c.study, std::to_string(r), str(effects[f]), str(row.seconds)});
    if (row.status == "ok") {
      ++ok[f];
      for (int v = 0; v < nv; ++v) hits[f][v] += row.selected[v];
    }
  }
  for (int f = 0; f < nf; ++f) {
    std::vector<std::string> cells = {c.study, str(effects[f]), std::to_string(ok[f])};
    for (int v = 0; v < nv; ++v)
      cells.push_back(str(ok[f] ? static_cast<double>(hits[f][v]) / ok[f] : kNaN));
    out.summary.rows.push_back(std::move(cells));
  }
}

}  // namespace

StudyResult run_study(StudyConfig c) {
  if (c.replicates < 1) throw SpecError("--replicates must be positive");
  if (c.n < 0) throw SpecError("--n must be positive");
  if (c.n_samples < 1) throw SpecError("--nr must be positive");
  StudyResult out;
  if (c.study == "s1" || c.study == "s2")
    run_fit_study(c, out);
  else if (c.study == "s4" || c.study == "s5")
    run_selection_study(c, out);
  else
    throw SpecError("unknown study '" + c.study + "' (s1, s2, s4, s5)");
  return out;
}

}  // namespace smoothfit::cli
