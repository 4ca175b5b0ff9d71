#pragma once

#include <nlohmann/json.hpp>

#include "mhe/problem.hpp"

namespace mhe {

/// Linearized summary of marginalized measurements: square-root information
/// J_p over the linked parameters, a linearization point, and a constant
/// offset so that e_p = J_p (x_check boxminus x) + offset reproduces the
/// marginalized subproblem's quadratic model.
struct PriorConstraint {
  std::vector<BlockId> linked;
  std::vector<Vec> linearization_point;    // one per linked block
  std::vector<Manifold> manifolds;         // one per linked block
  Mat sqrt_information;                    // J_p, rows <= tangent columns
  Vec offset;

  int tangent_dim() const;
  bool empty() const { return linked.empty() || sqrt_information.rows() == 0; }

  /// The b* vector this prior reproduces at its linearization point.
  Vec gradient_at_linearization() const {
    return sqrt_information.transpose() * offset;
  }

  nlohmann::json to_json(const Values& values) const;
  static PriorConstraint from_json(const nlohmann::json& j,
                                   const std::map<std::string, BlockId>& by_name);
};

/// Dense normal equations of the residuals touching the marginalized
/// parameters, ordered marginalized-first.
struct Subproblem {
  std::vector<BlockId> marginalized;
  std::vector<BlockId> linked;
  Mat H;  // over [marginalized, linked]
  Vec b;
  int marg_dim = 0;
  int linked_dim = 0;
};

/// Collect the residuals in which any of params_m appears and assemble their
/// dense normal equations at the current values. Linked parameters are the
/// remaining active blocks touched by those residuals. Throws ConfigError if
/// params_m is empty.
Subproblem build_subproblem(const std::vector<const Residual*>& residuals,
                            const Values& values,
                            const std::vector<BlockId>& params_m);

/// Schur complement onto the linked parameters:
/// H* = H_ll - H_lm H_mm^-1 H_ml, b* = b_l - H_lm H_mm^-1 b_m.
/// H_mm is inverted via Cholesky; throws NumericalError naming rank-deficient
/// marginalized directions on failure.
void schur_marginalize(const Subproblem& sub, Mat* h_star, Vec* b_star);

/// Build the prior constraint from H* = J_p^T J_p via a rank-revealing
/// symmetric eigendecomposition. Eigenvalues below 1e-10 of the largest are
/// truncated. Throws NumericalError when H* is significantly indefinite.
PriorConstraint build_prior(const Mat& h_star, const Vec& b_star,
                            const std::vector<BlockId>& linked,
                            const Values& values);

/// e_p and (optionally) its Jacobians at the current values.
Vec evaluate_prior(const PriorConstraint& prior, const Values& values,
                   std::vector<Mat>* jacobians);

/// Remove params_r from the prior by applying the Schur complement to the
/// implied H*, b*. Removing everything yields an empty prior.
PriorConstraint factor_out(const PriorConstraint& prior,
                           const std::vector<BlockId>& params_r);

/// Residual adapter so a prior participates in solving and marginalization.
class PriorResidual : public Residual {
 public:
  explicit PriorResidual(PriorConstraint prior) : prior_(std::move(prior)) {}

  const std::vector<BlockId>& blocks() const override { return prior_.linked; }
  int dim() const override { return static_cast<int>(prior_.sqrt_information.rows()); }
  Vec evaluate(const Values& values, std::vector<Mat>* jacobians) const override {
    return evaluate_prior(prior_, values, jacobians);
  }
  std::string label() const override { return "prior"; }

  const PriorConstraint& prior() const { return prior_; }
  PriorConstraint& prior() { return prior_; }

 private:
  PriorConstraint prior_;
};

}  // namespace mhe
