#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mhe/manifold.hpp"

namespace mhe {

using BlockId = int;

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Registry of all parameter blocks in an estimation problem. Block ids are
/// stable for the lifetime of the registry.
class Values {
 public:
  BlockId add(const Manifold& m, const Vec& value, const std::string& name,
              bool active = true);

  ParameterBlock& block(BlockId id);
  const ParameterBlock& block(BlockId id) const;
  void remove(BlockId id);
  bool contains(BlockId id) const;
  int count() const { return static_cast<int>(blocks_.size()); }

 private:
  std::map<BlockId, ParameterBlock> blocks_;
  BlockId next_id_ = 0;
};

/// A measurement constraining a single state at one instant.
struct UpdateMeasurement {
  double stamp = 0.0;
  Vec payload;
  Mat weight_sqrt;  // upper-triangular square-root information
  int model = 0;    // update-model index (engine-level)
};

struct ProcessMeasurement {
  double stamp = 0.0;
  Vec payload;
};

/// Ordered process measurements linking two consecutive states. Measurement
/// stamps lie in (start_stamp, end_stamp]; the propagated weighting is filled
/// in by compute_chain_weight once the preceding state has an estimate.
struct ProcessChain {
  double start_stamp = 0.0;
  double end_stamp = 0.0;
  std::vector<ProcessMeasurement> measurements;
  Mat weight_sqrt;  // empty until computed
};

/// A time-stamped collection of parameter blocks with attached update
/// measurements and incoming process chains (one per process-model index).
struct State {
  double stamp = 0.0;
  std::vector<BlockId> blocks;
  std::vector<UpdateMeasurement> updates;
  std::map<int, ProcessChain> incoming;
};

/// Weighted residual term. evaluate returns e = W^{1/2} f(x) and, when
/// requested, tangent-space Jacobians de/d(block) for every listed block;
/// the solver drops columns of inactive blocks.
class Residual {
 public:
  virtual ~Residual() = default;
  virtual const std::vector<BlockId>& blocks() const = 0;
  virtual int dim() const = 0;
  virtual Vec evaluate(const Values& values, std::vector<Mat>* jacobians) const = 0;
  virtual std::string label() const = 0;
};

/// Measurement model u = g(x, s) for update measurements.
class UpdateModel {
 public:
  virtual ~UpdateModel() = default;
  virtual std::string name() const = 0;
  virtual int residual_dim() const = 0;
  /// Indices into the state block layout this model reads.
  virtual std::vector<int> state_blocks() const = 0;
  /// Static parameter blocks this model reads.
  virtual std::vector<BlockId> static_blocks() const = 0;
  /// Unweighted innovation f = u_hat boxminus g(x, s) with tangent-space
  /// Jacobians (state blocks first, then statics).
  virtual Vec innovation(const Values& values, const std::vector<BlockId>& blocks,
                         const Vec& payload, std::vector<Mat>* jacobians) const = 0;
  /// Optional seed for a fresh state from a measurement. Fills values for the
  /// state blocks this model touches (indexed by the state layout); others
  /// keep their defaults.
  virtual bool seed(const Values& values, const Vec& payload,
                    std::vector<Vec>* state_values) const {
    (void)values;
    (void)payload;
    (void)state_values;
    return false;
  }
};

/// Process model x_j = h(x_i, p, s) acting on a portion of the state.
class ProcessModel {
 public:
  virtual ~ProcessModel() = default;
  virtual std::string name() const = 0;
  /// Indices into the state block layout this model propagates.
  virtual std::vector<int> state_blocks() const = 0;
  virtual std::vector<BlockId> static_blocks() const = 0;
  /// Total tangent dimension of the propagated portion.
  virtual int tangent_dim() const = 0;
  /// One integration step over dt with input sample u. F is the tangent-space
  /// transition of the propagated portion, Q the discrete noise added by the
  /// step. dstatics (optional) holds Jacobians of the stepped values w.r.t.
  /// each static block's tangent.
  virtual void step(const std::vector<Vec>& x, const Vec& u, double dt,
                    const Values& values, std::vector<Vec>* next, Mat* F,
                    Mat* Q, std::vector<Mat>* dstatics) const = 0;
};

/// Result of integrating a chain through a process model.
struct Propagation {
  std::vector<Vec> values;     // per propagated block
  Mat transition;              // d final / d initial, tangent space
  Mat covariance;              // from zero covariance at the start
  std::vector<Mat> dstatics;   // d final / d static, tangent space
  double stamp = 0.0;
};

/// Integrate a chain from the values currently held by state_blocks. If the
/// last measurement stamp falls short of chain.end_stamp the final input is
/// held over the remaining interval.
Propagation propagate_chain(const ProcessModel& model, const Values& values,
                            const std::vector<BlockId>& state_blocks,
                            const ProcessChain& chain, bool with_covariance,
                            bool with_jacobians);

/// Upper Cholesky factor of the inverse covariance obtained by forward
/// propagating the preceding state (zero initial covariance) through the
/// chain. Throws NumericalError naming unobservable direction indices when
/// the propagated covariance is singular; throws ConfigError on empty chains.
Mat compute_chain_weight(const ProcessModel& model, const Values& values,
                         const std::vector<BlockId>& state_blocks,
                         const ProcessChain& chain);

/// Update residual e = W^{1/2} (u_hat boxminus g(x, s)).
class UpdateResidual : public Residual {
 public:
  UpdateResidual(const UpdateModel* model, std::vector<BlockId> blocks,
                 UpdateMeasurement meas, std::string label);

  const std::vector<BlockId>& blocks() const override { return blocks_; }
  int dim() const override { return model_->residual_dim(); }
  Vec evaluate(const Values& values, std::vector<Mat>* jacobians) const override;
  std::string label() const override { return label_; }
  const UpdateMeasurement& measurement() const { return meas_; }

 private:
  const UpdateModel* model_;
  std::vector<BlockId> blocks_;  // state blocks then statics
  UpdateMeasurement meas_;
  std::string label_;
};

/// Process residual e = W^{1/2} (x_next boxminus h(x_prev, p, s)).
class ProcessResidual : public Residual {
 public:
  ProcessResidual(const ProcessModel* model, std::vector<BlockId> prev_blocks,
                  std::vector<BlockId> next_blocks, const ProcessChain* chain,
                  std::string label);

  const std::vector<BlockId>& blocks() const override { return blocks_; }
  int dim() const override { return model_->tangent_dim(); }
  Vec evaluate(const Values& values, std::vector<Mat>* jacobians) const override;
  std::string label() const override { return label_; }

 private:
  const ProcessModel* model_;
  std::vector<BlockId> prev_blocks_;
  std::vector<BlockId> next_blocks_;
  std::vector<BlockId> blocks_;  // prev, next, statics
  const ProcessChain* chain_;
  std::string label_;
};

/// Total cost sum_i e_i^T e_i over a set of residuals.
double total_cost(const std::vector<const Residual*>& residuals, const Values& values);

/// Central finite-difference check of a residual's analytic Jacobians.
/// Returns the worst relative error max|J - J_fd| / max(1, max|J_fd|).
double check_jacobians(const Residual& residual, Values& values, double step = 1e-6);

}  // namespace mhe
