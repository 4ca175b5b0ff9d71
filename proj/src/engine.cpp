#include "mhe/engine.hpp"

#include <Eigen/SparseCholesky>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

namespace mhe {

namespace {

Vec default_value(const Manifold& m) {
  switch (m.kind()) {
    case Manifold::Kind::UnitQuaternion: {
      Vec q(4);
      q << 1, 0, 0, 0;
      return q;
    }
    default:
      return Vec::Zero(m.ambient_dim());
  }
}

nlohmann::json vec_to_json(const Vec& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Vec vec_from_json(const nlohmann::json& a) {
  Vec v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v(i) = a[i].get<double>();
  return v;
}

nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) rows.push_back(vec_to_json(m.row(i)));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Mat mat_from_json(const nlohmann::json& j) {
  Mat m(j["rows"].get<int>(), j["cols"].get<int>());
  for (int i = 0; i < m.rows(); ++i) m.row(i) = vec_from_json(j["data"][i]).transpose();
  return m;
}

}  // namespace

void EngineConfig::validate() const {
  if (batch_size < 2) throw ConfigError("EngineConfig: batch_size must be >= 2");
  if (attach_tolerance < 0) throw ConfigError("EngineConfig: attach_tolerance < 0");
  if (initial_info <= 0) throw ConfigError("EngineConfig: initial_info must be > 0");
  solver.validate();
}

nlohmann::json EstimateOutput::to_json() const {
  nlohmann::json j;
  j["stamp"] = stamp;
  j["values"] = nlohmann::json::object();
  for (size_t i = 0; i < block_names.size(); ++i)
    j["values"][block_names[i]] = vec_to_json(block_values[i]);
  if (has_propagated) {
    j["propagated_stamp"] = propagated_stamp;
    j["propagated"] = nlohmann::json::object();
    for (size_t i = 0; i < block_names.size(); ++i)
      j["propagated"][block_names[i]] = vec_to_json(propagated_values[i]);
  }
  j["metadata"] = {{"truncated", truncated},
                   {"solver_status", solver_status},
                   {"solve_seconds", solve_seconds}};
  return j;
}

Engine::Engine(std::vector<StateBlockSpec> layout, EngineConfig config)
    : layout_(std::move(layout)), config_(std::move(config)) {
  config_.validate();
  if (layout_.empty()) throw ConfigError("Engine: empty state layout");
  for (auto& spec : layout_) {
    if (spec.default_value.size() == 0) spec.default_value = default_value(spec.manifold);
  }
}

BlockId Engine::add_static(const std::string& name, const Manifold& m, const Vec& value,
                           bool active) {
  const BlockId id = values_.add(m, value, name, active);
  statics_.push_back(id);
  return id;
}

int Engine::add_update_model(std::shared_ptr<UpdateModel> model, bool spawns_states) {
  for (int idx : model->state_blocks()) {
    if (idx < 0 || idx >= static_cast<int>(layout_.size()))
      throw ConfigError("update model '" + model->name() + "' references state block " +
                        std::to_string(idx) + " outside the layout");
  }
  update_models_.push_back({std::move(model), spawns_states, true});
  return static_cast<int>(update_models_.size()) - 1;
}

int Engine::add_process_model(std::shared_ptr<ProcessModel> model) {
  for (int idx : model->state_blocks()) {
    if (idx < 0 || idx >= static_cast<int>(layout_.size()))
      throw ConfigError("process model '" + model->name() + "' references state block " +
                        std::to_string(idx) + " outside the layout");
  }
  process_models_.push_back({std::move(model), {}});
  return static_cast<int>(process_models_.size()) - 1;
}

void Engine::set_update_model_enabled(int model_index, bool enabled) {
  update_models_.at(model_index).enabled = enabled;
}

std::vector<BlockId> Engine::state_block_ids(const State& s,
                                             const std::vector<int>& indices) const {
  std::vector<BlockId> ids;
  ids.reserve(indices.size());
  for (int i : indices) ids.push_back(s.blocks[i]);
  return ids;
}

State Engine::make_state(double stamp, int seed_model, const Vec& seed_payload) {
  std::vector<Vec> vals;
  vals.reserve(layout_.size());
  for (const auto& spec : layout_) vals.push_back(spec.default_value);

  if (window_.empty()) {
    if (seed_model >= 0) {
      update_models_[seed_model].model->seed(values_, seed_payload, &vals);
    }
  } else {
    // Initialize from the newest state, forward-propagated where possible.
    const State& newest = window_.back();
    for (size_t i = 0; i < layout_.size(); ++i)
      vals[i] = values_.block(newest.blocks[i]).value;
    for (auto& pm : process_models_) {
      ProcessChain chain;
      chain.start_stamp = newest.stamp;
      chain.end_stamp = stamp;
      for (const auto& m : pm.buffer) {
        if (m.stamp > newest.stamp && m.stamp <= stamp) chain.measurements.push_back(m);
      }
      if (chain.measurements.empty()) continue;
      const Propagation prop = propagate_chain(
          *pm.model, values_, state_block_ids(newest, pm.model->state_blocks()), chain,
          false, false);
      const auto indices = pm.model->state_blocks();
      for (size_t i = 0; i < indices.size(); ++i) vals[indices[i]] = prop.values[i];
    }
  }

  State s;
  s.stamp = stamp;
  const std::string prefix = "x" + std::to_string(state_counter_++);
  for (size_t i = 0; i < layout_.size(); ++i) {
    s.blocks.push_back(
        values_.add(layout_[i].manifold, vals[i], prefix + "/" + layout_[i].name, true));
  }

  if (window_.empty()) {
    // Diagonal prior on the first state.
    int dim = 0;
    for (const auto& spec : layout_) dim += spec.manifold.tangent_dim();
    PriorConstraint prior;
    prior.linked = s.blocks;
    for (size_t i = 0; i < layout_.size(); ++i) {
      prior.linearization_point.push_back(vals[i]);
      prior.manifolds.push_back(layout_[i].manifold);
    }
    prior.sqrt_information = std::sqrt(config_.initial_info) * Mat::Identity(dim, dim);
    prior.offset = Vec::Zero(dim);
    priors_.push_back(std::move(prior));
  }
  return s;
}

void Engine::cut_chains(State& prev, State& next) {
  for (size_t pi = 0; pi < process_models_.size(); ++pi) {
    auto& pm = process_models_[pi];
    ProcessChain chain;
    chain.start_stamp = prev.stamp;
    chain.end_stamp = next.stamp;
    while (!pm.buffer.empty() && pm.buffer.front().stamp <= next.stamp) {
      if (pm.buffer.front().stamp > prev.stamp)
        chain.measurements.push_back(pm.buffer.front());
      pm.buffer.pop_front();
    }
    if (!chain.measurements.empty()) next.incoming[static_cast<int>(pi)] = std::move(chain);
  }
}

void Engine::ingest_update(int model_index, UpdateMeasurement meas) {
  std::lock_guard<std::mutex> lock(ingest_mutex_);
  ingested_++;
  auto& entry = update_models_.at(model_index);
  meas.model = model_index;
  if (!entry.enabled) {
    dropped_++;
    return;
  }

  if (window_.empty()) {
    if (!entry.spawns) {
      dropped_++;
      return;
    }
    State s = make_state(meas.stamp, model_index, meas.payload);
    s.updates.push_back(std::move(meas));
    attached_++;
    window_.push_back(std::move(s));
    return;
  }

  if (meas.stamp < window_.front().stamp - config_.attach_tolerance) {
    dropped_++;
    return;
  }

  // Nearest existing state within tolerance.
  State* nearest = nullptr;
  double best = config_.attach_tolerance;
  for (State& s : window_) {
    const double d = std::abs(s.stamp - meas.stamp);
    if (d <= best) {
      best = d;
      nearest = &s;
    }
  }
  if (nearest) {
    nearest->updates.push_back(std::move(meas));
    attached_++;
    return;
  }

  if (entry.spawns && meas.stamp > window_.back().stamp) {
    State s = make_state(meas.stamp, model_index, meas.payload);
    cut_chains(window_.back(), s);
    s.updates.push_back(std::move(meas));
    attached_++;
    window_.push_back(std::move(s));
    return;
  }

  if (entry.spawns) {
    // Out-of-order spawning update between existing states: attach to the
    // closest state rather than inserting one.
    State* closest = &window_.front();
    for (State& s : window_) {
      if (std::abs(s.stamp - meas.stamp) < std::abs(closest->stamp - meas.stamp))
        closest = &s;
    }
    closest->updates.push_back(std::move(meas));
    attached_++;
    return;
  }

  dropped_++;
}

void Engine::ingest_process(int model_index, ProcessMeasurement meas) {
  std::lock_guard<std::mutex> lock(ingest_mutex_);
  ingested_++;
  auto& pm = process_models_.at(model_index);
  if (!window_.empty() && meas.stamp <= window_.back().stamp) {
    dropped_++;
    return;
  }
  attached_++;
  // Keep the buffer sorted under per-source jitter.
  if (!pm.buffer.empty() && meas.stamp < pm.buffer.back().stamp) {
    auto it = std::upper_bound(
        pm.buffer.begin(), pm.buffer.end(), meas.stamp,
        [](double t, const ProcessMeasurement& m) { return t < m.stamp; });
    pm.buffer.insert(it, std::move(meas));
  } else {
    pm.buffer.push_back(std::move(meas));
  }
}

void Engine::ensure_chain_weights() {
  for (size_t i = 1; i < window_.size(); ++i) {
    State& prev = window_[i - 1];
    for (auto& [pi, chain] : window_[i].incoming) {
      if (chain.weight_sqrt.size() != 0) continue;
      const auto& model = *process_models_[pi].model;
      chain.weight_sqrt = compute_chain_weight(
          model, values_, state_block_ids(prev, model.state_blocks()), chain);
    }
  }
}

std::vector<std::unique_ptr<Residual>> Engine::build_residuals() {
  std::vector<std::unique_ptr<Residual>> residuals;
  for (const auto& prior : priors_) {
    residuals.push_back(std::make_unique<PriorResidual>(prior));
  }
  for (const State& s : window_) {
    for (const UpdateMeasurement& u : s.updates) {
      const auto& entry = update_models_[u.model];
      if (!entry.enabled) continue;
      std::vector<BlockId> blocks = state_block_ids(s, entry.model->state_blocks());
      const auto statics = entry.model->static_blocks();
      blocks.insert(blocks.end(), statics.begin(), statics.end());
      residuals.push_back(std::make_unique<UpdateResidual>(
          entry.model.get(), std::move(blocks), u,
          entry.model->name() + "@" + std::to_string(u.stamp)));
    }
  }
  for (size_t i = 1; i < window_.size(); ++i) {
    const State& prev = window_[i - 1];
    const State& next = window_[i];
    for (const auto& [pi, chain] : next.incoming) {
      const auto& model = *process_models_[pi].model;
      residuals.push_back(std::make_unique<ProcessResidual>(
          &model, state_block_ids(prev, model.state_blocks()),
          state_block_ids(next, model.state_blocks()), &chain,
          model.name() + "@" + std::to_string(next.stamp)));
    }
  }
  return residuals;
}

Ordering Engine::active_ordering() const {
  std::vector<BlockId> blocks;
  for (BlockId id : statics_) blocks.push_back(id);
  for (const State& s : window_) {
    for (BlockId id : s.blocks) blocks.push_back(id);
  }
  return Ordering::build(values_, blocks);
}

EstimateOutput Engine::newest_estimate(const std::string& status,
                                       double solve_seconds) const {
  const State& s = window_.back();
  EstimateOutput out;
  out.stamp = s.stamp;
  out.solver_status = status;
  out.solve_seconds = solve_seconds;
  for (size_t i = 0; i < layout_.size(); ++i) {
    out.block_names.push_back(layout_[i].name);
    out.block_values.push_back(values_.block(s.blocks[i]).value);
  }
  return out;
}

EstimateOutput Engine::optimize_window() {
  if (window_.empty()) throw ConfigError("optimize_window: no states in the window");
  if (config_.marginalize) slide();
  ensure_chain_weights();

  const auto t0 = std::chrono::steady_clock::now();
  auto owned = build_residuals();
  std::vector<const Residual*> residuals;
  for (const auto& r : owned) residuals.push_back(r.get());
  const Ordering ordering = active_ordering();
  const SolveReport report = optimize(residuals, values_, ordering, config_.solver);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return newest_estimate(report.status, seconds);
}

void Engine::slide() {
  while (static_cast<int>(window_.size()) > config_.batch_size) {
    ensure_chain_weights();
    State& oldest = window_.front();

    std::vector<BlockId> params_m;
    for (BlockId id : oldest.blocks) {
      if (values_.block(id).active) params_m.push_back(id);
    }

    if (!params_m.empty()) {
      auto owned = build_residuals();
      std::vector<const Residual*> residuals;
      for (const auto& r : owned) residuals.push_back(r.get());

      const Subproblem sub = build_subproblem(residuals, values_, params_m);
      // Priors consumed by the subproblem are replaced by the new one.
      std::set<BlockId> marg_set(params_m.begin(), params_m.end());
      priors_.erase(std::remove_if(priors_.begin(), priors_.end(),
                                   [&](const PriorConstraint& p) {
                                     for (BlockId id : p.linked)
                                       if (marg_set.count(id)) return true;
                                     return false;
                                   }),
                    priors_.end());
      if (!sub.linked.empty()) {
        Mat h_star;
        Vec b_star;
        schur_marginalize(sub, &h_star, &b_star);
        PriorConstraint prior = build_prior(h_star, b_star, sub.linked, values_);
        if (!prior.empty()) priors_.push_back(std::move(prior));
      }
    }

    for (BlockId id : oldest.blocks) values_.remove(id);
    window_.pop_front();
    if (!window_.empty()) window_.front().incoming.clear();
  }
}

EstimateOutput Engine::forward_propagate(double to_stamp) const {
  if (window_.empty()) throw ConfigError("forward_propagate: no states");
  const State& newest = window_.back();
  if (to_stamp < newest.stamp - 1e-12)
    throw ConfigError("forward_propagate: target stamp precedes the newest state");

  EstimateOutput out = newest_estimate("", 0.0);
  out.has_propagated = true;
  out.propagated_stamp = newest.stamp;
  out.propagated_values = out.block_values;
  if (to_stamp <= newest.stamp + 1e-12) {
    out.propagated_stamp = out.stamp;
    return out;
  }

  if (process_models_.empty()) {
    out.truncated = true;
    return out;
  }
  const auto& pm = process_models_.at(config_.propagation_model);
  ProcessChain chain;
  chain.start_stamp = newest.stamp;
  chain.end_stamp = to_stamp;
  for (const auto& m : pm.buffer) {
    if (m.stamp > newest.stamp && m.stamp <= to_stamp) chain.measurements.push_back(m);
  }
  if (chain.measurements.empty()) {
    out.truncated = true;
    return out;
  }
  // A buffer gap limits the propagation to the last covered stamp.
  if (chain.measurements.back().stamp < to_stamp - 1e-9)
    chain.end_stamp = chain.measurements.back().stamp;
  const Propagation prop =
      propagate_chain(*pm.model, values_,
                      state_block_ids(newest, pm.model->state_blocks()), chain,
                      false, false);
  const auto indices = pm.model->state_blocks();
  for (size_t i = 0; i < indices.size(); ++i)
    out.propagated_values[indices[i]] = prop.values[i];
  out.propagated_stamp = prop.stamp;
  out.truncated = prop.stamp < to_stamp - 1e-9;
  return out;
}

Mat Engine::covariance(const std::vector<BlockId>& blocks) {
  ensure_chain_weights();
  auto owned = build_residuals();
  std::vector<const Residual*> residuals;
  for (const auto& r : owned) residuals.push_back(r.get());
  const Ordering ordering = active_ordering();
  const auto lin = linearize(residuals, values_, config_.solver.worker_count);
  const SparseNormalEquations neq =
      assemble_normal_equations(residuals, lin, values_, ordering);

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(neq.H);
  if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any())
    throw NumericalError("covariance: H is singular");

  int dim = 0;
  std::vector<int> offsets;
  for (BlockId id : blocks) {
    if (!ordering.contains(id))
      throw ConfigError("covariance: block '" + values_.block(id).name +
                        "' not in the active problem");
    offsets.push_back(ordering.offsets[ordering.position.at(id)]);
    dim += values_.block(id).manifold.tangent_dim();
  }

  Mat cov(dim, dim);
  int row = 0;
  for (size_t i = 0; i < blocks.size(); ++i) {
    const int td = values_.block(blocks[i]).manifold.tangent_dim();
    for (int c = 0; c < td; ++c) {
      Vec e = Vec::Zero(ordering.dim);
      e(offsets[i] + c) = 1.0;
      const Vec col = ldlt.solve(e);
      int r2 = 0;
      for (size_t j = 0; j < blocks.size(); ++j) {
        const int tdj = values_.block(blocks[j]).manifold.tangent_dim();
        cov.block(r2, row + c, tdj, 1) = col.segment(offsets[j], tdj);
        r2 += tdj;
      }
    }
    row += td;
  }
  return cov;
}

void Engine::set_active(BlockId id, bool active) { values_.block(id).active = active; }

BatchReport Engine::batch_calibrate(const SolverOptions* override_options) {
  if (config_.marginalize)
    throw ConfigError("batch_calibrate: disable marginalization in the engine config");
  ensure_chain_weights();
  auto owned = build_residuals();
  std::vector<const Residual*> residuals;
  for (const auto& r : owned) residuals.push_back(r.get());
  const Ordering ordering = active_ordering();
  const SolverOptions& options = override_options ? *override_options : config_.solver;

  BatchReport report;
  report.solve = optimize(residuals, values_, ordering, options);

  std::map<std::string, std::pair<double, int>> acc;
  for (const Residual* r : residuals) {
    const Vec e = r->evaluate(values_, nullptr);
    const std::string kind = r->label().substr(0, r->label().find('@'));
    acc[kind].first += e.squaredNorm();
    acc[kind].second += static_cast<int>(e.size());
  }
  for (const auto& [kind, se] : acc)
    report.residual_rms[kind] = std::sqrt(se.first / std::max(1, se.second));
  return report;
}

nlohmann::json Engine::snapshot() const {
  nlohmann::json j;
  j["schema"] = 1;
  j["statics"] = nlohmann::json::array();
  for (BlockId id : statics_) {
    const auto& blk = values_.block(id);
    j["statics"].push_back({{"name", blk.name},
                            {"value", vec_to_json(blk.value)},
                            {"active", blk.active}});
  }
  j["states"] = nlohmann::json::array();
  for (const State& s : window_) {
    nlohmann::json js;
    js["stamp"] = s.stamp;
    js["blocks"] = nlohmann::json::array();
    for (BlockId id : s.blocks) {
      const auto& blk = values_.block(id);
      js["blocks"].push_back({{"name", blk.name},
                              {"value", vec_to_json(blk.value)},
                              {"active", blk.active}});
    }
    js["updates"] = nlohmann::json::array();
    for (const auto& u : s.updates) {
      js["updates"].push_back({{"stamp", u.stamp},
                               {"payload", vec_to_json(u.payload)},
                               {"weight_sqrt", mat_to_json(u.weight_sqrt)},
                               {"model", u.model}});
    }
    js["incoming"] = nlohmann::json::array();
    for (const auto& [model, chain] : s.incoming) {
      nlohmann::json jc;
      jc["model"] = model;
      jc["start_stamp"] = chain.start_stamp;
      jc["end_stamp"] = chain.end_stamp;
      jc["measurements"] = nlohmann::json::array();
      for (const auto& m : chain.measurements)
        jc["measurements"].push_back(
            {{"stamp", m.stamp}, {"payload", vec_to_json(m.payload)}});
      jc["weight_sqrt"] = mat_to_json(chain.weight_sqrt);
      js["incoming"].push_back(std::move(jc));
    }
    j["states"].push_back(std::move(js));
  }
  j["priors"] = nlohmann::json::array();
  for (const auto& p : priors_) j["priors"].push_back(p.to_json(values_));
  j["state_counter"] = state_counter_;
  return j;
}

void Engine::restore(const nlohmann::json& snap) {
  for (const State& s : window_) {
    for (BlockId id : s.blocks) values_.remove(id);
  }
  window_.clear();
  priors_.clear();
  for (auto& pm : process_models_) pm.buffer.clear();

  std::map<std::string, BlockId> by_name;
  for (BlockId id : statics_) by_name[values_.block(id).name] = id;
  for (const auto& js : snap["statics"]) {
    auto it = by_name.find(js["name"].get<std::string>());
    if (it == by_name.end())
      throw ConfigError("restore: unknown static '" + js["name"].get<std::string>() + "'");
    values_.block(it->second).value = vec_from_json(js["value"]);
    values_.block(it->second).active = js["active"].get<bool>();
  }

  for (const auto& js : snap["states"]) {
    State s;
    s.stamp = js["stamp"].get<double>();
    size_t i = 0;
    for (const auto& jb : js["blocks"]) {
      const BlockId id = values_.add(layout_[i].manifold, vec_from_json(jb["value"]),
                                     jb["name"].get<std::string>(),
                                     jb["active"].get<bool>());
      by_name[values_.block(id).name] = id;
      s.blocks.push_back(id);
      ++i;
    }
    for (const auto& ju : js.value("updates", nlohmann::json::array())) {
      UpdateMeasurement u;
      u.stamp = ju["stamp"].get<double>();
      u.payload = vec_from_json(ju["payload"]);
      u.weight_sqrt = mat_from_json(ju["weight_sqrt"]);
      u.model = ju["model"].get<int>();
      s.updates.push_back(std::move(u));
    }
    for (const auto& jc : js.value("incoming", nlohmann::json::array())) {
      ProcessChain chain;
      chain.start_stamp = jc["start_stamp"].get<double>();
      chain.end_stamp = jc["end_stamp"].get<double>();
      for (const auto& jm : jc["measurements"])
        chain.measurements.push_back(
            {jm["stamp"].get<double>(), vec_from_json(jm["payload"])});
      chain.weight_sqrt = mat_from_json(jc["weight_sqrt"]);
      s.incoming[jc["model"].get<int>()] = std::move(chain);
    }
    window_.push_back(std::move(s));
  }
  for (const auto& jp : snap["priors"])
    priors_.push_back(PriorConstraint::from_json(jp, by_name));
  state_counter_ = snap.value("state_counter", state_counter_);
}

std::string Engine::structure_dot() {
  auto owned = build_residuals();
  std::ostringstream dot;
  dot << "graph mhe {\n  rankdir=LR;\n";
  std::set<BlockId> params;
  for (const auto& r : owned) {
    for (BlockId id : r->blocks()) params.insert(id);
  }
  for (BlockId id : params) {
    const auto& blk = values_.block(id);
    dot << "  \"" << blk.name << "\" [shape=box"
        << (blk.active ? "" : ", style=dashed") << "];\n";
  }
  int idx = 0;
  for (const auto& r : owned) {
    const std::string rn = "r" + std::to_string(idx++);
    dot << "  " << rn << " [shape=circle, label=\"" << r->label() << "\"];\n";
    for (BlockId id : r->blocks())
      dot << "  " << rn << " -- \"" << values_.block(id).name << "\";\n";
  }
  dot << "}\n";
  return dot.str();
}

}  // namespace mhe
