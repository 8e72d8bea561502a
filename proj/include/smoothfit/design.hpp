#pragma once

#include <map>
#include <string>
#include <vector>

#include "smoothfit/splinebasis.hpp"
#include "smoothfit/types.hpp"

namespace smoothfit {

// In-memory column table. Every column keeps its text cells; columns whose cells all parse
// as finite numbers are also available numerically.
struct DataTable {
  std::vector<std::string> names;
  std::map<std::string, std::vector<std::string>> text;
  std::map<std::string, Vec> numeric;
  int nrows = 0;

  bool has(const std::string& name) const { return text.count(name) > 0; }
  const Vec& num(const std::string& name) const;
  const std::vector<std::string>& factor(const std::string& name) const;
  void add_numeric(const std::string& name, const Vec& v);
  void add_factor(const std::string& name, const std::vector<std::string>& v);
  DataTable subset(const std::vector<int>& rows) const;
};

enum class TermKind { intercept, linear, smooth, tensor, factor_smooth, random_smooth, random_intercept };

TermKind term_kind_from_name(const std::string& s);
std::string term_kind_name(TermKind k);

struct TermSpec {
  TermKind kind = TermKind::intercept;
  std::vector<std::string> covariates;
  std::string by_factor;
  std::vector<int> k;          // basis size per covariate (smooth/tensor/random smooth)
  int penalty_order = 2;
  int degree = 3;
  int parameter_index = 0;
  bool constrained = true;     // sum-to-zero for smooth/tensor/factor_smooth
  std::string label;
};

struct ModelSpec {
  std::string response;
  std::string event;           // coxph only
  std::string family = "gaussian";
  std::string link;            // empty: family default
  int n_params = 1;
  std::vector<TermSpec> terms;
};

// Everything needed to rebuild a term's columns on new data.
struct TermInfo {
  TermSpec spec;
  std::string label;
  int param = 0;
  int col_begin = 0, col_end = 0;       // global coefficient range
  std::vector<Vec> knots;               // per marginal
  Mat Z;                                // sum-to-zero transform, empty if unconstrained
  Mat P;                                // Demmler-Reinsch transform (random smooths)
  std::vector<std::string> levels;      // factor levels (sorted)
  int cols_per_level = 0;
  int n_offsets = 0;                    // treatment-coded level offsets (by-factor smooths)
  std::vector<int> lambda_idx;
  int kernel_dim = 0;                   // unpenalized dimension of the term
};

struct PenaltyBlock {
  int lambda_idx = 0;
  int term = 0;
  std::vector<int> cols;   // global coefficient indices
  Mat S;                   // local penalty
  Mat D;                   // local root, S = D D'
  int rank = 0;
};

struct PenalizedDesign {
  ModelSpec spec;
  int N = 0, N_p = 0, N_lambda = 0, n_params = 1;
  std::vector<SpMat> X_blocks;           // per parameter, internal row order
  std::vector<int> param_offsets;        // n_params + 1
  std::vector<TermInfo> terms;
  std::vector<PenaltyBlock> penalties;
  std::vector<int> lambda_map;           // penalty -> lambda
  std::vector<std::string> lambda_labels;
  std::vector<int> row_order;            // internal row i holds user row row_order[i]

  // Block-diagonal model matrix over all parameters (N*n_params x N_p); for one parameter X_blocks[0].
  SpMat X() const;
  SpMat embedded(int penalty) const;
  SpMat S_r(int lambda_index) const;
  SpMat S_lambda(const Vec& lambda) const;
  Vec to_internal(const Vec& user) const;
  Vec to_user(const Vec& internal) const;
  // Response column in internal row order.
  Vec response(const DataTable& data) const;
};

PenalizedDesign build_design(const ModelSpec& spec, const DataTable& data);

SpMat embed_penalty(const PenaltyCore& core, int offset, int N_p);

SpMat balanced_penalty(const PenalizedDesign& design);

struct PredictionMatrices {
  std::vector<SpMat> X_blocks;   // user row order
  std::vector<char> clamped;     // per row: a covariate was clamped into the knot range
  int n_clamped = 0;
};

PredictionMatrices prediction_matrices(const PenalizedDesign& design, const DataTable& data);

// Symmetric root of a PSD matrix: D (k x rank) with D D' = S.
Mat psd_root(const Mat& S, int* rank = nullptr);

// ------------------------------------------------------------------ penalty algebra

// Penalty structure restricted to a set of retained coefficients. Blocks that share an
// identical column set form a group; generalized inverses and log-determinants are taken
// group-wise on the (lambda-independent) range of the group.
class PenaltyAlgebra {
 public:
  PenaltyAlgebra() = default;
  PenaltyAlgebra(const PenalizedDesign& d, const std::vector<int>& keep);
  explicit PenaltyAlgebra(const PenalizedDesign& d);

  int n_coef() const { return n_; }
  int n_lambda() const { return n_lambda_; }
  int rank() const { return rank_; }
  int null_dim() const { return n_ - rank_; }
  const std::vector<int>& keep() const { return keep_; }

  SpMat S_lambda(const Vec& lambda) const;
  SpMat S_r(int r) const;
  SpMat root_r(int r) const;                 // D^r with D^r D^r' = S^r
  SpMat E_lambda(const Vec& lambda) const;   // E E' = S_lambda
  double quad(int r, const Vec& beta) const; // beta' S^r beta
  Vec quads(const Vec& beta) const;
  Vec trace_Sinv_Sr(const Vec& lambda) const;
  double logdet_plus(const Vec& lambda) const;
  // tr(S^- S^j S^- S^l) for all pairs
  Mat trace_Sinv_pairs(const Vec& lambda) const;
  // Block-orthogonal transform (eigenvectors of each group's balanced sum), identity elsewhere.
  SpMat block_transform() const;
  // Sum of S^r / ||S^r||_F over lambdas with non-zero penalty, restricted to kept columns.
  SpMat balanced() const;
  // True for coefficients carrying any penalty.
  std::vector<char> penalized_mask() const;

  struct Block {
    int lambda_idx;
    std::vector<int> cols;  // local (kept) indices
    Mat S, D;
    int rank;
  };
  struct Group {
    std::vector<int> blocks;
    std::vector<int> cols;
    Mat U;  // cols.size() x rank, orthonormal basis of the group range
    std::vector<Mat> M;  // U' S_b U per member block
  };
  const std::vector<Block>& blocks() const { return blocks_; }
  const std::vector<Group>& groups() const { return groups_; }

 private:
  void init(const PenalizedDesign& d, const std::vector<int>& keep);
  int n_ = 0, n_lambda_ = 0, rank_ = 0;
  std::vector<int> keep_;
  std::vector<Block> blocks_;
  std::vector<Group> groups_;
};

}  // namespace smoothfit
