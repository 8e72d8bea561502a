#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "smoothfit/design.hpp"
#include "smoothfit/types.hpp"

namespace smoothfit::sim {

// Classical test functions on u in [0, 1]; covariates are drawn on [-1, 1] and mapped by
// u = (x + 1) / 2.
double f0(double u);  // 2 sin(pi u)
double f1(double u);  // exp(2u)
double f2(double u);  // 0.2 u^11 (10(1-u))^6 + 10 (10u)^3 (1-u)^10
double f3(double u);  // 0

struct SimData {
  DataTable data;
  Vec eta;      // true linear predictor (user row order)
  Vec eta2;     // second predictor for location-scale data (log sigma), else empty
};

// Four-covariate data v, w, x, z. `corr` in [0,1) mixes a shared uniform into every covariate.
// effect_x scales f(x) (selection studies). family: gaussian | gamma | binomial | poisson.
SimData additive(int n, const std::string& family, double phi, std::mt19937_64& rng,
                 double corr = 0.0, double effect_x = 1.0);

// As `additive` plus subject-specific random smooths of v (factor column "s").
SimData random_smooths(int n_per_subject, int subjects, const std::string& family, double phi,
                       std::mt19937_64& rng);

// As `additive` plus random intercepts b_s ~ N(0, e^2) on a factor with `levels` levels.
SimData random_intercepts(int n, int levels, double e, const std::string& family, double phi,
                          std::mt19937_64& rng);

// Proportional hazards: t = (-10 log U exp(-eta))^phi_t with eta = f0(u_x), optional
// independent uniform censoring at rate `censor` (0: none). Columns t, event, x.
SimData coxph(int n, std::mt19937_64& rng, double phi_t = 0.5, double censor = 0.0);

// Gaussian location-scale: mu = f0(v) + f1(w), log sigma = 0.5 * f0(x) - 0.2.
SimData gaussian_ls(int n, std::mt19937_64& rng);

// Specs matching the simulated data (k basis functions per smooth).
ModelSpec additive_spec(int k = 10, bool include_x = true);
ModelSpec random_smooth_spec(int k = 10);
ModelSpec random_intercept_spec(int k = 10, bool include_re = true);
ModelSpec coxph_spec(int k = 10);

// Per-replicate seed derived from the master seed.
std::uint64_t replicate_seed(std::uint64_t master, int replicate);

}  // namespace smoothfit::sim
