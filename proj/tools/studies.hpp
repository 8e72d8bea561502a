#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csv.hpp"
#include "engine.hpp"

namespace smoothfit::cli {

// s1: additive Gaussian fits, MSE of eta per engine.
// s2: Gaussian model with 20-subject random smooths, MSE and factor density.
// s4: smooth-term selection, f(x) scaled by each effect.
// s5: random-intercept selection on a 40-level factor with sd = effect.
struct StudyConfig {
  std::string study;
  int replicates = 5;
  int n = 0;                         // 0: study default
  std::uint64_t seed = 0;
  std::vector<double> effects;       // s4/s5; empty: 10 equidistant values on [0, 1]
  std::vector<std::string> engines;  // s1/s2; empty: study default
  std::vector<AicVariant> variants;  // s4/s5; empty: conventional, pql_corrected, mc_gaussian
  int n_samples = kDefaultSamples;
  int k = 10;
  int threads = 1;
};

struct StudyResult {
  CsvTable metrics;   // deterministic given the config
  CsvTable summary;   // selection rates (s4/s5) or per-engine means (s1/s2)
  CsvTable timing;    // wall-clock seconds per fit
};

StudyResult run_study(StudyConfig c);

inline constexpr int kSubjects = 20;
inline constexpr int kRandomInterceptLevels = 40;

}  // namespace smoothfit::cli
