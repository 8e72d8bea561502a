#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "commands.hpp"
#include "csv.hpp"
#include "doctest.h"
#include "engine.hpp"
#include "model_io.hpp"
#include "smoothfit/errors.hpp"
#include "smoothfit/simulate.hpp"
#include "smoothfit/uncertainty.hpp"
#include "studies.hpp"

using namespace smoothfit;
using namespace smoothfit::cli;
namespace fs = std::filesystem;

namespace {

// removed again at process exit
struct ScratchDir {
  fs::path dir;
  ScratchDir()
      : dir(fs::temp_directory_path() /
            ("smoothfit_cli_" + std::to_string(std::random_device{}()))) {
    fs::create_directories(dir);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
};

fs::path scratch() {
  static ScratchDir s;
  return s.dir;
}

std::string path(const std::string& name) { return (scratch() / name).string(); }

void write_text(const std::string& p, const std::string& s) { std::ofstream(p) << s; }

std::string read_text(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "smoothfit");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write_table(const std::string& p, const DataTable& d) {
  CsvTable t;
  t.header = d.names;
  for (int i = 0; i < d.nrows; ++i) {
    std::vector<std::string> r;
    for (const auto& n : d.names) r.push_back(d.text.at(n)[i]);
    t.rows.push_back(std::move(r));
  }
  write_csv_file(p, t);
}

void write_spec(const std::string& p, const ModelSpec& s) {
  write_text(p, spec_to_json(s).dump(1));
}

CsvTable parse(const std::string& text) {
  std::istringstream in(text);
  CsvTable t;
  std::string line;
  std::getline(in, line);
  std::stringstream h(line);
  for (std::string c; std::getline(h, c, ',');) t.header.push_back(c);
  while (std::getline(in, line)) {
    std::stringstream r(line);
    std::vector<std::string> cells;
    for (std::string c; std::getline(r, c, ',');) cells.push_back(c);
    t.rows.push_back(cells);
  }
  return t;
}

int col(const CsvTable& t, const std::string& name) {
  for (size_t j = 0; j < t.header.size(); ++j)
    if (t.header[j] == name) return static_cast<int>(j);
  FAIL("missing column " << name);
  return -1;
}

// Additive training data and spec on disk.
struct Fixture {
  std::string data, spec;
  sim::SimData sd;
  ModelSpec ms;
};

Fixture additive_fixture(const std::string& tag, int n, std::uint64_t seed, bool with_x = true,
                         double effect_x = 1.0) {
  std::mt19937_64 rng(seed);
  Fixture f;
  f.sd = sim::additive(n, "gaussian", 2.0, rng, 0.0, effect_x);
  f.ms = sim::additive_spec(8, with_x);
  f.data = path(tag + ".csv");
  f.spec = path(tag + ".json");
  write_table(f.data, f.sd.data);
  write_spec(f.spec, f.ms);
  return f;
}

}  // namespace

TEST_CASE("csv reader: numeric and factor columns, errors name the line") {
  std::istringstream ok("a,b,g\n1,2.5,x\n3,-4e-1,y\n");
  DataTable t = read_csv(ok);
  CHECK(t.nrows == 2);
  CHECK(t.num("b")[1] == doctest::Approx(-0.4));
  CHECK(t.factor("g")[1] == "y");
  CHECK_THROWS_AS(t.num("g"), SpecError);

  std::istringstream bad("a,b\n1,2\n3\n");
  try {
    read_csv(bad, "f.csv");
    FAIL("expected an error");
  } catch (const SpecError& e) {
    CHECK(std::string(e.what()).find("f.csv:3") != std::string::npos);
  }
  std::istringstream na("a,b\n1,2\nNA,3\n");
  CHECK_THROWS_WITH_AS(read_csv(na, "g.csv"), doctest::Contains("g.csv:3"), SpecError);
  std::istringstream empty("a,b\n");
  CHECK(read_csv(empty).nrows == 0);
  std::istringstream quoted("a,g\n1,\"p,q\"\n");
  CHECK(read_csv(quoted).factor("g")[0] == "p,q");
  CHECK_THROWS_AS(read_csv(*new std::istringstream("")), SpecError);
}

TEST_CASE("fit: intercept-only Gaussian on y = (1, 2, 3)") {
  write_text(path("tiny.csv"), "y\n1\n2\n3\n");
  write_text(path("tiny.json"), R"({"response": "y", "terms": [{"kind": "intercept"}]})");
  Run r = run({"fit", "--data", path("tiny.csv"), "--spec", path("tiny.json"), "--out",
               path("tiny.fit.json")});
  REQUIRE(r.code == 0);
  Artifact a = load_artifact(path("tiny.fit.json"));
  CHECK(a.beta[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(std::isfinite(a.phi));
  CHECK(a.phi == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.out.find("converged   yes") != std::string::npos);
}

TEST_CASE("input errors exit with code 2") {
  write_text(path("bad.csv"), "y,v\n1,0.1\n2,0.2,9\n");
  write_text(path("tiny.json"), R"({"response": "y", "terms": [{"kind": "intercept"}]})");
  Run r = run({"fit", "--data", path("bad.csv"), "--spec", path("tiny.json")});
  CHECK(r.code == kExitInput);
  CHECK(r.err.find("bad.csv:3") != std::string::npos);

  write_text(path("na.csv"), "y\n1\nNA\n");
  CHECK(run({"fit", "--data", path("na.csv"), "--spec", path("tiny.json")}).code == kExitInput);
  write_text(path("badspec.json"), R"({"response": "y", "terms": [{"kind": "wiggly"}]})");
  write_text(path("tiny.csv"), "y\n1\n2\n3\n");
  CHECK(run({"fit", "--data", path("tiny.csv"), "--spec", path("badspec.json")}).code == kExitInput);
  write_text(path("typo.json"), R"({"response": "y", "termz": []})");
  CHECK(run({"fit", "--data", path("tiny.csv"), "--spec", path("typo.json")}).code == kExitInput);
  CHECK(run({"fit", "--data", path("nope.csv"), "--spec", path("tiny.json")}).code == kExitInput);
  CHECK(run({"fit", "--spec", path("tiny.json")}).code == kExitInput);
  CHECK(run({"frobnicate"}).code == kExitInput);
  // engine incompatible with the family
  CHECK(run({"fit", "--data", path("tiny.csv"), "--spec", path("tiny.json"), "--family",
             "poisson", "--engine", "am"})
            .code == kExitInput);
  CHECK(run({"fit", "--data", path("tiny.csv"), "--spec", path("tiny.json"), "--engine", "xyz"})
            .code == kExitInput);
}

TEST_CASE("refitting the same inputs and seed gives a byte-identical artifact") {
  auto f = additive_fixture("det", 150, 3);
  for (const char* engine : {"am", "lqefs"}) {
    std::vector<std::string> base = {"fit", "--data", f.data, "--spec", f.spec, "--engine",
                                     engine, "--seed", "9", "--aic-variant",
                                     "conventional,pql_corrected,mc_general", "--nr", "40"};
    auto a1 = base, a2 = base;
    a1.insert(a1.end(), {"--out", path("det1.json")});
    a2.insert(a2.end(), {"--out", path("det2.json")});
    REQUIRE(run(a1).code == 0);
    setenv("SMOOTHFIT_THREADS", "1", 1);
    REQUIRE(run(a2).code == 0);
    unsetenv("SMOOTHFIT_THREADS");
    const std::string t1 = read_text(path("det1.json"));
    CHECK(t1 == read_text(path("det2.json")));
    // load -> save is the identity on the text
    CHECK(artifact_text(load_artifact(path("det1.json"))) == t1);
  }
}

TEST_CASE("predict: training rows reproduce fitted values, round trip, interval parity") {
  auto f = additive_fixture("pred", 200, 5);
  EngineOptions o;
  FitJob job = run_fit(f.ms, f.sd.data, o);
  Artifact in_proc = make_artifact(job.design, job.fit, job.options, job.y_user);
  save_artifact(path("pred.fit.json"), in_proc);

  const Prediction p0 = predict(in_proc, f.sd.data);
  const Vec mu_user = job.design.to_user(job.fit.mu);
  CHECK((p0.mu - mu_user).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + mu_user.cwiseAbs().maxCoeff()));

  // fit -> save -> load -> predict equals in-process predict
  const Prediction p1 = predict(load_artifact(path("pred.fit.json")), f.sd.data);
  CHECK((p1.eta - p0.eta).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((p1.eta_upper - p0.eta_upper).cwiseAbs().maxCoeff() <= 1e-12);

  // the same numbers through the command line
  Run r = run({"predict", "--fit", path("pred.fit.json"), "--data", f.data});
  REQUIRE(r.code == 0);
  CsvTable t = parse(r.out);
  REQUIRE(t.rows.size() == 200);
  const int jm = col(t, "mu"), jl = col(t, "eta_lower");
  for (int i = 0; i < 200; ++i) {
    CHECK(std::abs(std::stod(t.rows[i][jm]) - p0.mu[i]) <= 1e-12 * (1 + std::abs(p0.mu[i])));
    CHECK(std::abs(std::stod(t.rows[i][jl]) - p0.eta_lower(i, 0)) <= 1e-12 * (1 + std::abs(p0.eta(i, 0))));
  }

  // half-widths against the library call on the same rows
  const PredictionMatrices pm = prediction_matrices(job.design, f.sd.data);
  const CredibleIntervals ci = credible_intervals(job.fit, pm.X_blocks[0]);
  const Vec hw = (p0.eta_upper.col(0) - p0.eta.col(0));
  CHECK((hw - ci.half_width).cwiseAbs().maxCoeff() <= 1e-12 * ci.half_width.maxCoeff());
  CHECK((p0.eta.col(0) - ci.center).cwiseAbs().maxCoeff() <= 1e-12 * (1 + ci.center.cwiseAbs().maxCoeff()));
}

TEST_CASE("predict: empty table, clamping, missing columns") {
  auto f = additive_fixture("pe", 120, 6);
  REQUIRE(run({"fit", "--data", f.data, "--spec", f.spec, "--out", path("pe.fit.json")}).code == 0);
  write_text(path("empty.csv"), "v,w,x,z\n");
  Run r = run({"predict", "--fit", path("pe.fit.json"), "--data", path("empty.csv")});
  REQUIRE(r.code == 0);
  CHECK(r.out == "eta,eta_lower,eta_upper,mu,mu_lower,mu_upper,clamped\n");

  write_text(path("far.csv"), "v,w,x,z\n0.1,0.2,0.3,0.4\n5,0.2,0.3,0.4\n");
  r = run({"predict", "--fit", path("pe.fit.json"), "--data", path("far.csv")});
  REQUIRE(r.code == 0);
  CsvTable t = parse(r.out);
  const int jc = col(t, "clamped");
  CHECK(t.rows[0][jc] == "0");
  CHECK(t.rows[1][jc] == "1");
  CHECK(r.err.find("clamped") != std::string::npos);

  write_text(path("lack.csv"), "v,w,x\n0.1,0.2,0.3\n");
  r = run({"predict", "--fit", path("pe.fit.json"), "--data", path("lack.csv")});
  CHECK(r.code == kExitInput);
  CHECK(r.err.find("'z'") != std::string::npos);
}

TEST_CASE("aic: identical artifacts, requested variant columns, mismatched N") {
  auto f = additive_fixture("aic", 200, 7);
  REQUIRE(run({"fit", "--data", f.data, "--spec", f.spec, "--out", path("aic1.json"),
               "--aic-variant", "conventional,pql_corrected,mc_gaussian", "--nr", "50"})
              .code == 0);
  Run r = run({"aic", "--fit", path("aic1.json"), "--fit", path("aic1.json")});
  REQUIRE(r.code == 0);
  CsvTable t = parse(r.out);
  REQUIRE(t.rows.size() == 2);
  for (const char* v : {"conventional", "pql_corrected", "mc_gaussian"}) {
    const int j = col(t, std::string("caic_") + v);
    CHECK(t.rows[0][j] == t.rows[1][j]);
    CHECK(std::stod(t.rows[0][col(t, std::string("delta_") + v)]) == 0.0);
  }

  r = run({"aic", "--fit", path("aic1.json"), "--fit", path("aic1.json"), "--aic-variant",
           "pql_corrected"});
  REQUIRE(r.code == 0);
  t = parse(r.out);
  std::vector<std::string> expect = {"model", "n", "llk", "tau", "tau_prime_pql_corrected",
                                     "caic_pql_corrected", "delta_pql_corrected",
                                     "preferred_pql_corrected"};
  CHECK(t.header == expect);
  // variant not stored
  CHECK(run({"aic", "--fit", path("aic1.json"), "--aic-variant", "mc_general"}).code == kExitInput);

  auto g = additive_fixture("aic_small", 150, 7);
  REQUIRE(run({"fit", "--data", g.data, "--spec", g.spec, "--out", path("aic2.json")}).code == 0);
  r = run({"aic", "--fit", path("aic1.json"), "--fit", path("aic2.json"), "--aic-variant",
           "conventional"});
  CHECK(r.code == kExitInput);
  CHECK(r.err.find("mismatched N") != std::string::npos);
}

TEST_CASE("aic: nested zero-effect pair reports both orderings") {
  auto f = additive_fixture("nest", 200, 11, true, 0.0);
  ModelSpec simple = sim::additive_spec(8, false);
  write_spec(path("nest_simple.json"), simple);
  Run r = run({"aic", "--data", f.data, "--spec", path("nest_simple.json"), "--spec", f.spec,
               "--aic-variant", "conventional,pql_corrected"});
  REQUIRE(r.code == 0);
  CsvTable t = parse(r.out);
  REQUIRE(t.rows.size() == 2);
  for (const char* v : {"conventional", "pql_corrected"}) {
    const int j = col(t, std::string("preferred_") + v);
    CHECK((t.rows[0][j] == "1") + (t.rows[1][j] == "1") >= 1);
  }
  // the corrected edf of the larger model is at least its conventional edf
  CHECK(std::stod(t.rows[1][col(t, "tau_prime_pql_corrected")]) >=
        std::stod(t.rows[1][col(t, "tau")]));
}

TEST_CASE("sample: reproducible draws centred on beta") {
  auto f = additive_fixture("smp", 150, 12);
  REQUIRE(run({"fit", "--data", f.data, "--spec", f.spec, "--out", path("smp.fit.json")}).code == 0);
  Run a = run({"sample", "--fit", path("smp.fit.json"), "--nr", "2000", "--seed", "3"});
  Run b = run({"sample", "--fit", path("smp.fit.json"), "--nr", "2000", "--seed", "3"});
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  CsvTable t = parse(a.out);
  const Artifact art = load_artifact(path("smp.fit.json"));
  REQUIRE(static_cast<int>(t.header.size()) == art.N_p + 1);
  // posterior sd of the intercept from the artifact vs the sample sd
  const double v00 = art.phi * art.V_half.col(0).squaredNorm();
  double m = 0, s2 = 0;
  for (const auto& r : t.rows) m += std::stod(r[1]);
  m /= t.rows.size();
  for (const auto& r : t.rows) s2 += std::pow(std::stod(r[1]) - m, 2);
  s2 /= t.rows.size() - 1;
  CHECK(std::abs(m - art.beta[0]) <= 4 * std::sqrt(v00 / 2000));
  CHECK(std::abs(s2 / v00 - 1.0) <= 0.1);
}

TEST_CASE("simulate: s1 smoke run, determinism, thread independence") {
  Run r1 = run({"simulate", "--study", "s1", "--replicates", "5", "--n", "100", "--seed", "2"});
  REQUIRE(r1.code == 0);
  CsvTable t = parse(r1.out);
  REQUIRE(t.rows.size() == 15);
  std::map<std::string, int> per_engine;
  for (const auto& r : t.rows) {
    ++per_engine[r[col(t, "engine")]];
    CHECK(std::isfinite(std::stod(r[col(t, "mse_eta")])));
  }
  CHECK(per_engine["am"] == 5);
  CHECK(per_engine["gsmm"] == 5);
  CHECK(per_engine["lqefs"] == 5);
  setenv("SMOOTHFIT_THREADS", "1", 1);
  Run r2 = run({"simulate", "--study", "s1", "--replicates", "5", "--n", "100", "--seed", "2"});
  unsetenv("SMOOTHFIT_THREADS");
  CHECK(r1.out == r2.out);
  setenv("SMOOTHFIT_THREADS", "0", 1);
  CHECK(run({"simulate", "--study", "s1", "--replicates", "1"}).code == kExitInput);
  unsetenv("SMOOTHFIT_THREADS");
  CHECK(run({"simulate", "--study", "s3"}).code == kExitInput);
}

TEST_CASE("simulate: s5 at e = 0 writes selection rates per variant") {
  Run r = run({"simulate", "--study", "s5", "--replicates", "4", "--n", "200", "--effect", "0",
               "--nr", "40", "--out", path("s5.csv")});
  REQUIRE(r.code == 0);
  CsvTable s = parse(read_text(path("s5.csv.summary.csv")));
  REQUIRE(s.rows.size() == 1);
  for (const char* v : {"conventional", "pql_corrected", "mc_gaussian"}) {
    const double rate = std::stod(s.rows[0][col(s, std::string("rate_") + v)]);
    CHECK(rate >= 0.0);
    CHECK(rate <= 1.0);
  }
  CsvTable m = parse(read_text(path("s5.csv")));
  CHECK(m.rows.size() == 4);
  CHECK(fs::exists(path("s5.csv.timing.csv")));
}

TEST_CASE("general families through the command line") {
  std::mt19937_64 rng(21);
  auto sd = sim::coxph(200, rng);
  write_table(path("cox.csv"), sd.data);
  write_spec(path("cox.json"), sim::coxph_spec(8));
  Run r = run({"fit", "--data", path("cox.csv"), "--spec", path("cox.json"), "--out",
               path("cox.fit.json")});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("gsmm") != std::string::npos);
  r = run({"predict", "--fit", path("cox.fit.json"), "--data", path("cox.csv")});
  REQUIRE(r.code == 0);
  CsvTable t = parse(r.out);
  CHECK(std::stod(t.rows[0][col(t, "mu")]) ==
        doctest::Approx(std::exp(std::stod(t.rows[0][col(t, "eta")]))));
  r = run({"fit", "--data", path("cox.csv"), "--spec", path("cox.json"), "--engine", "lqefs",
           "--nv", "10", "--out", path("cox.lq.json")});
  REQUIRE(r.code == 0);
  r = run({"predict", "--fit", path("cox.lq.json"), "--data", path("cox.csv")});
  CHECK(r.err.find("approximation") != std::string::npos);
  CHECK(run({"fit", "--data", path("cox.csv"), "--spec", path("cox.json"), "--engine", "gam"})
            .code == kExitInput);
}
