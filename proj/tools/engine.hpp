#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "model_io.hpp"
#include "smoothfit/families.hpp"
#include "smoothfit/lqefs.hpp"
#include "smoothfit/solver_efs.hpp"
#include "smoothfit/uncertainty.hpp"

namespace smoothfit::cli {

bool is_exponential_family(const std::string& family);

// Default engine for a family: am for Gaussian-identity, gam for other exponential
// families, gsmm otherwise. Throws SpecError on an incompatible explicit choice.
std::string resolve_engine(const ModelSpec& spec, const std::string& requested);

// A fitted model together with what refits need.
struct FitJob {
  PenalizedDesign design;
  Vec y;                 // internal row order
  Vec y_user;
  std::optional<ExponentialFamily> fam;
  std::optional<LinkFunction> link;
  std::unique_ptr<GeneralFamily> general;
  FitState fit;
  EngineOptions options;
  double seconds = 0.0;

  ModelRef model() const;
};

FitJob run_fit(const ModelSpec& spec, const DataTable& data, EngineOptions o);

struct AicRequest {
  std::vector<AicVariant> variants;
  int n_samples = kDefaultSamples;
  std::uint64_t seed = 0;
  int threads = 1;
};

std::vector<AicReport> compute_aic(const FitJob& job, const AicRequest& r);

// Worker count: hardware concurrency, capped by SMOOTHFIT_THREADS when set.
int worker_count();

}  // namespace smoothfit::cli
