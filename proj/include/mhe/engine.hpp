#pragma once

#include <deque>
#include <mutex>

#include "mhe/marginalization.hpp"
#include "mhe/solver.hpp"

namespace mhe {

struct StateBlockSpec {
  std::string name;
  Manifold manifold;
  Vec default_value;  // used when no model seeds the block
};

struct EngineConfig {
  int batch_size = 5;
  SolverOptions solver;
  double attach_tolerance = 1e-3;  // seconds
  double initial_info = 1e4;       // diagonal information on the first state
  bool marginalize = true;
  int propagation_model = 0;  // process-model index used for forward propagation

  void validate() const;
};

struct EstimateOutput {
  double stamp = 0.0;
  std::vector<std::string> block_names;
  std::vector<Vec> block_values;
  bool has_propagated = false;
  double propagated_stamp = 0.0;
  std::vector<Vec> propagated_values;
  bool truncated = false;
  std::string solver_status;
  double solve_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct BatchReport {
  SolveReport solve;
  std::map<std::string, double> residual_rms;  // per residual kind
};

/// Online moving-horizon estimation loop: measurement ingestion, state
/// spawning, window optimization, sliding via marginalization, forward
/// propagation, and covariance recovery.
class Engine {
 public:
  Engine(std::vector<StateBlockSpec> layout, EngineConfig config);

  Values& values() { return values_; }
  const Values& values() const { return values_; }

  BlockId add_static(const std::string& name, const Manifold& m, const Vec& value,
                     bool active);
  /// Returns the model index. Spawning models create a new state per
  /// measurement; others attach to the nearest state within tolerance.
  int add_update_model(std::shared_ptr<UpdateModel> model, bool spawns_states);
  int add_process_model(std::shared_ptr<ProcessModel> model);
  /// Per-model activation flag (sensor on/off switching).
  void set_update_model_enabled(int model_index, bool enabled);

  void ingest_update(int model_index, UpdateMeasurement meas);
  void ingest_process(int model_index, ProcessMeasurement meas);

  EstimateOutput optimize_window();
  void slide();
  EstimateOutput forward_propagate(double to_stamp) const;
  /// Requested blocks of H^-1 at the current linearization.
  Mat covariance(const std::vector<BlockId>& blocks);
  void set_active(BlockId id, bool active);

  /// Full-batch solve over everything ingested; marginalization must be
  /// disabled in the config.
  BatchReport batch_calibrate(const SolverOptions* override_options = nullptr);

  const std::deque<State>& window() const { return window_; }
  int64_t dropped_count() const { return dropped_; }
  int64_t ingested_count() const { return ingested_; }
  int64_t attached_count() const { return attached_; }
  const std::vector<PriorConstraint>& priors() const { return priors_; }

  /// Engine state (window values + priors) for stop/restart.
  nlohmann::json snapshot() const;
  void restore(const nlohmann::json& snap);

  /// Residual/parameter adjacency as DOT text.
  std::string structure_dot();

 private:
  struct UpdateModelEntry {
    std::shared_ptr<UpdateModel> model;
    bool spawns = false;
    bool enabled = true;
  };
  struct ProcessModelEntry {
    std::shared_ptr<ProcessModel> model;
    std::deque<ProcessMeasurement> buffer;
  };

  State make_state(double stamp, int seed_model, const Vec& seed_payload);
  void cut_chains(State& prev, State& next);
  void ensure_chain_weights();
  std::vector<std::unique_ptr<Residual>> build_residuals();
  Ordering active_ordering() const;
  EstimateOutput newest_estimate(const std::string& status, double solve_seconds) const;
  std::vector<BlockId> state_block_ids(const State& s,
                                       const std::vector<int>& indices) const;

  std::vector<StateBlockSpec> layout_;
  EngineConfig config_;
  Values values_;
  std::vector<BlockId> statics_;
  std::vector<UpdateModelEntry> update_models_;
  std::vector<ProcessModelEntry> process_models_;
  std::deque<State> window_;
  std::vector<PriorConstraint> priors_;
  int64_t dropped_ = 0;
  int64_t ingested_ = 0;
  int64_t attached_ = 0;
  int state_counter_ = 0;
  mutable std::mutex ingest_mutex_;
};

}  // namespace mhe
