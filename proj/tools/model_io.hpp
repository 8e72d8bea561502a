#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "smoothfit/design.hpp"
#include "smoothfit/solver_efs.hpp"
#include "smoothfit/uncertainty.hpp"

namespace smoothfit::cli {

using nlohmann::json;

inline constexpr int kArtifactVersion = 1;
inline constexpr const char* kArtifactFormat = "smoothfit-fit";

ModelSpec spec_from_json(const json& j);
json spec_to_json(const ModelSpec& s);
ModelSpec read_spec_file(const std::string& path);

// Engine settings that affect the fit (recorded in the artifact).
struct EngineOptions {
  std::string engine;   // am | gam | gsmm | lqefs
  int nv = 30;
  int max_inner = 1;
  double tol = 0.0;     // 0: engine default
  std::uint64_t seed = 0;
};

// Everything predict and aic need, without the training data.
struct Artifact {
  int version = kArtifactVersion;
  EngineOptions options;
  ModelSpec spec;            // link resolved
  int n = 0;
  std::string response_hash;

  int N_p = 0, n_params = 1;
  std::vector<int> param_offsets;
  std::vector<TermInfo> terms;
  std::vector<std::string> lambda_labels;

  std::string kind;
  Vec beta, lambda, grad_rho, term_edf;
  double phi = 1.0;
  bool has_phi = false;
  double edf = 0.0, reml = 0.0, llk = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> flags;
  std::vector<int> kept, dropped;
  Mat V_half;                // kept x kept, V = phi * V_half' V_half

  std::vector<AicReport> aic;
};

std::string response_hash(const Vec& y);

Artifact make_artifact(const PenalizedDesign& d, const FitState& fit, const EngineOptions& o,
                       const Vec& y_user);

json artifact_to_json(const Artifact& a);
Artifact artifact_from_json(const json& j);
std::string artifact_text(const Artifact& a);
void save_artifact(const std::string& path, const Artifact& a);
Artifact load_artifact(const std::string& path);

// Design skeleton sufficient for prediction_matrices.
PenalizedDesign prediction_design(const Artifact& a);

struct Prediction {
  Mat eta;                 // rows x n_params
  Vec mu;
  Mat eta_lower, eta_upper;
  Vec mu_lower, mu_upper;
  std::vector<char> clamped;
  int n_clamped = 0;
  bool approximate = false;
};

Prediction predict(const Artifact& a, const DataTable& data, double level = 0.95);

// Response-scale mean from the first linear predictor.
double mean_from_eta(const ModelSpec& spec, double eta);

}  // namespace smoothfit::cli
