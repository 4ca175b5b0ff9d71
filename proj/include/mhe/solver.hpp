#pragma once

#include <Eigen/SparseCore>
#include <nlohmann/json.hpp>
#include <set>
#include <unordered_map>

#include "mhe/problem.hpp"

namespace mhe {

/// Column ordering over active blocks: statics first, then states by stamp.
struct Ordering {
  std::vector<BlockId> blocks;
  std::vector<int> offsets;  // tangent-space column offsets
  std::vector<std::string> names;
  std::unordered_map<BlockId, int> position;
  int dim = 0;

  static Ordering build(const Values& values, const std::vector<BlockId>& active_blocks);
  bool contains(BlockId id) const { return position.count(id) > 0; }
};

enum class LossKind { None, Huber };

struct SolverOptions {
  int max_iterations = 10;
  double cost_decrease_tol = 1e-6;  // relative
  double gradient_tol = 1e-8;       // max-norm of b
  double initial_lambda = 1e-4;
  double lambda_up = 10.0;
  double lambda_down = 0.5;
  LossKind loss = LossKind::None;
  double huber_threshold = 1.0;
  int worker_count = 1;

  void validate() const;
};

/// H = J^T J and b = -J^T e in the block layout of the ordering. The stored
/// sparsity pattern contains exactly the block pairs coupled by a residual.
struct SparseNormalEquations {
  Eigen::SparseMatrix<double> H;
  Vec b;
  Ordering ordering;
  std::set<std::pair<int, int>> block_pattern;  // (i, j) with i <= j, ordering positions

  bool has_block(int i, int j) const {
    if (i > j) std::swap(i, j);
    return block_pattern.count({i, j}) > 0;
  }
};

struct LinearizedResidual {
  Vec e;
  std::vector<Mat> jacobians;  // per residual block, active and inactive
};

/// Evaluate all residuals at the current values, in parallel over
/// worker_count threads. Results are in residual order regardless of the
/// thread count. Throws NumericalError naming the residual when a non-finite
/// entry appears.
std::vector<LinearizedResidual> linearize(const std::vector<const Residual*>& residuals,
                                          const Values& values, int worker_count);

/// Huber rescaling of a residual block: for s = |e|, blocks with s > k are
/// scaled by sqrt(2 k s - k^2) / s so the squared norm equals the Huber cost.
/// Jacobians are scaled by the same factor (IRLS-style, no second-order term).
void apply_robust_loss(LinearizedResidual& lr, LossKind loss, double threshold);

SparseNormalEquations assemble_normal_equations(
    const std::vector<const Residual*>& residuals,
    const std::vector<LinearizedResidual>& linearized, const Values& values,
    const Ordering& ordering);

/// Solve (H + lambda diag(H)) dx = b via sparse Cholesky. Throws
/// NumericalError naming the block of the first non-positive pivot when the
/// factorization fails.
Vec solve_damped(const SparseNormalEquations& neq, double lambda);

struct IterationRecord {
  int iteration = 0;
  double cost = 0.0;
  double lambda = 0.0;
  double step_norm = 0.0;
  bool accepted = false;
  double linearize_seconds = 0.0;
  double solve_seconds = 0.0;
};

struct SolveReport {
  std::string status;  // converged_cost | converged_gradient | max_iterations | stalled | empty
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int accepted_steps = 0;
  std::vector<IterationRecord> iterations;

  nlohmann::json to_json() const;
};

/// Levenberg-Marquardt over the active blocks listed in the ordering.
/// Accepted iterations never increase the cost.
SolveReport optimize(const std::vector<const Residual*>& residuals, Values& values,
                     const Ordering& ordering, const SolverOptions& options);

}  // namespace mhe
