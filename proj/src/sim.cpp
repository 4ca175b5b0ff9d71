#include "mhe/sim.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/LU>

namespace mhe::sim {

namespace {

/// Deterministic Gaussian generator (xoshiro-style core + Box-Muller),
/// identical across platforms for a given seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {
    for (int i = 0; i < 8; ++i) next();
  }

  double uniform() {  // in (0, 1)
    return (static_cast<double>(next() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  double gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform(), u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  uint64_t next() {
    // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

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

Mat diag_weight(const Vec& sigmas) {
  Vec inv = sigmas.cwiseInverse();
  return inv.asDiagonal();
}

bool in_dropout(const SimConfig& cfg, double t) {
  for (const auto& [a, b] : cfg.dropouts) {
    if (t >= a && t <= b) return true;
  }
  return false;
}

}  // namespace

void SimConfig::validate() const {
  if (duration <= 0 || process_rate <= 0 || update_rate <= 0)
    throw ConfigError("SimConfig: duration and rates must be > 0");
  if (process_rate < update_rate)
    throw ConfigError("SimConfig: process_rate must be >= update_rate");
  if (outlier_fraction < 0 || outlier_fraction > 1)
    throw ConfigError("SimConfig: outlier_fraction must be in [0, 1]");
  if (!sensors.landmark_a && !sensors.landmark_b && !sensors.pose)
    throw ConfigError("SimConfig: at least one update sensor must be enabled");
  if (sensors.process_model_count() == 0 && estimator.batch_size > 0) {
    // States would be mutually unlinked; allowed only for batch fixtures.
  }
  if (estimator.loss != "none" && estimator.loss != "huber")
    throw ConfigError("SimConfig: loss must be 'none' or 'huber'");
  diffdrive_params.validate();
}

nlohmann::json SimConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["duration"] = duration;
  j["process_rate"] = process_rate;
  j["update_rate"] = update_rate;
  j["trajectory"] = {{"gyro_amp", trajectory.gyro_amp},
                     {"gyro_freq", trajectory.gyro_freq},
                     {"accel_amp_x", trajectory.accel_amp_x},
                     {"accel_freq_x", trajectory.accel_freq_x},
                     {"accel_amp_y", trajectory.accel_amp_y},
                     {"accel_freq_y", trajectory.accel_freq_y},
                     {"wheel_mean", trajectory.wheel_mean},
                     {"wheel_mean_freq", trajectory.wheel_mean_freq},
                     {"wheel_diff_amp", trajectory.wheel_diff_amp},
                     {"wheel_diff_freq", trajectory.wheel_diff_freq}};
  j["sensors"] = {{"landmark_a", sensors.landmark_a},
                  {"landmark_b", sensors.landmark_b},
                  {"pose", sensors.pose},
                  {"constvel", sensors.constvel},
                  {"diffdrive", sensors.diffdrive}};
  j["noise"] = {{"gyro", noise.gyro},           {"accel", noise.accel},
                {"wheel", noise.wheel},         {"landmark_pos", noise.landmark_pos},
                {"landmark_heading", noise.landmark_heading},
                {"pose_pos", noise.pose_pos},   {"pose_heading", noise.pose_heading}};
  j["dropouts"] = nlohmann::json::array();
  for (const auto& [a, b] : dropouts) j["dropouts"].push_back({a, b});
  j["outlier_fraction"] = outlier_fraction;
  j["landmark_a_pose"] = vec_to_json(landmark_a_pose);
  j["landmark_b_pose"] = vec_to_json(landmark_b_pose);
  j["extrinsic_true"] = vec_to_json(extrinsic_true);
  j["estimate_extrinsic"] = estimate_extrinsic;
  j["constvel_params"] = {{"sigma_gyro", constvel_params.sigma_gyro},
                          {"sigma_accel", constvel_params.sigma_accel},
                          {"sigma_floor_pos", constvel_params.sigma_floor_pos},
                          {"sigma_floor_heading", constvel_params.sigma_floor_heading},
                          {"sigma_floor_vel", constvel_params.sigma_floor_vel}};
  j["diffdrive_params"] = {
      {"wheel_radius", diffdrive_params.wheel_radius},
      {"track_width", diffdrive_params.track_width},
      {"slip_noise_scale_moving", diffdrive_params.slip_noise_scale_moving},
      {"slip_noise_scale_stationary", diffdrive_params.slip_noise_scale_stationary},
      {"sigma_wheel", diffdrive_params.sigma_wheel},
      {"sigma_floor_pos", diffdrive_params.sigma_floor_pos},
      {"sigma_floor_heading", diffdrive_params.sigma_floor_heading},
      {"slip_threshold", diffdrive_params.slip_threshold}};
  j["estimator"] = {{"batch_size", estimator.batch_size},
                    {"threads", estimator.threads},
                    {"loss", estimator.loss},
                    {"huber_threshold", estimator.huber_threshold},
                    {"max_iterations", estimator.max_iterations},
                    {"initial_info", estimator.initial_info}};
  return j;
}

SimConfig SimConfig::from_json(const nlohmann::json& j) {
  SimConfig c;
  c.seed = j.value("seed", c.seed);
  c.duration = j.value("duration", c.duration);
  c.process_rate = j.value("process_rate", c.process_rate);
  c.update_rate = j.value("update_rate", c.update_rate);
  if (j.contains("trajectory")) {
    const auto& t = j["trajectory"];
    c.trajectory.gyro_amp = t.value("gyro_amp", c.trajectory.gyro_amp);
    c.trajectory.gyro_freq = t.value("gyro_freq", c.trajectory.gyro_freq);
    c.trajectory.accel_amp_x = t.value("accel_amp_x", c.trajectory.accel_amp_x);
    c.trajectory.accel_freq_x = t.value("accel_freq_x", c.trajectory.accel_freq_x);
    c.trajectory.accel_amp_y = t.value("accel_amp_y", c.trajectory.accel_amp_y);
    c.trajectory.accel_freq_y = t.value("accel_freq_y", c.trajectory.accel_freq_y);
    c.trajectory.wheel_mean = t.value("wheel_mean", c.trajectory.wheel_mean);
    c.trajectory.wheel_mean_freq = t.value("wheel_mean_freq", c.trajectory.wheel_mean_freq);
    c.trajectory.wheel_diff_amp = t.value("wheel_diff_amp", c.trajectory.wheel_diff_amp);
    c.trajectory.wheel_diff_freq = t.value("wheel_diff_freq", c.trajectory.wheel_diff_freq);
  }
  if (j.contains("sensors")) {
    const auto& s = j["sensors"];
    c.sensors.landmark_a = s.value("landmark_a", c.sensors.landmark_a);
    c.sensors.landmark_b = s.value("landmark_b", c.sensors.landmark_b);
    c.sensors.pose = s.value("pose", c.sensors.pose);
    c.sensors.constvel = s.value("constvel", c.sensors.constvel);
    c.sensors.diffdrive = s.value("diffdrive", c.sensors.diffdrive);
  }
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    c.noise.gyro = n.value("gyro", c.noise.gyro);
    c.noise.accel = n.value("accel", c.noise.accel);
    c.noise.wheel = n.value("wheel", c.noise.wheel);
    c.noise.landmark_pos = n.value("landmark_pos", c.noise.landmark_pos);
    c.noise.landmark_heading = n.value("landmark_heading", c.noise.landmark_heading);
    c.noise.pose_pos = n.value("pose_pos", c.noise.pose_pos);
    c.noise.pose_heading = n.value("pose_heading", c.noise.pose_heading);
  }
  if (j.contains("dropouts")) {
    for (const auto& d : j["dropouts"])
      c.dropouts.emplace_back(d[0].get<double>(), d[1].get<double>());
  }
  c.outlier_fraction = j.value("outlier_fraction", c.outlier_fraction);
  if (j.contains("landmark_a_pose")) c.landmark_a_pose = vec_from_json(j["landmark_a_pose"]);
  if (j.contains("landmark_b_pose")) c.landmark_b_pose = vec_from_json(j["landmark_b_pose"]);
  if (j.contains("extrinsic_true")) c.extrinsic_true = vec_from_json(j["extrinsic_true"]);
  c.estimate_extrinsic = j.value("estimate_extrinsic", c.estimate_extrinsic);
  if (j.contains("constvel_params")) c.constvel_params = j["constvel_params"].get<ConstVelParams>();
  if (j.contains("diffdrive_params")) c.diffdrive_params = j["diffdrive_params"].get<DiffDriveParams>();
  if (j.contains("estimator")) {
    const auto& e = j["estimator"];
    c.estimator.batch_size = e.value("batch_size", c.estimator.batch_size);
    c.estimator.threads = e.value("threads", c.estimator.threads);
    c.estimator.loss = e.value("loss", c.estimator.loss);
    c.estimator.huber_threshold = e.value("huber_threshold", c.estimator.huber_threshold);
    c.estimator.max_iterations = e.value("max_iterations", c.estimator.max_iterations);
    c.estimator.initial_info = e.value("initial_info", c.estimator.initial_info);
  }
  c.validate();
  return c;
}

std::string SimConfig::hash() const {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0')
      << std::hash<std::string>{}(to_json().dump());
  return out.str();
}

nlohmann::json MetricsReport::to_json() const {
  return {{"rms_position_error", rms_position_error},
          {"rms_heading_error", rms_heading_error},
          {"consistency_rms", consistency_rms},
          {"solve_time", {{"mean", solve_time_mean},
                          {"median", solve_time_median},
                          {"max", solve_time_max}}},
          {"total_solves", total_solves},
          {"dropped_measurements", dropped_measurements}};
}

nlohmann::json SimDataset::to_json() const {
  nlohmann::json j;
  j["schema"] = 1;
  j["config"] = config.to_json();
  j["truth_stamps"] = truth_stamps;
  j["truth"] = nlohmann::json::array();
  for (const Vec& v : truth) j["truth"].push_back(vec_to_json(v));
  j["events"] = nlohmann::json::array();
  for (const SimEvent& e : events) {
    j["events"].push_back({{"stamp", e.stamp},
                           {"kind", static_cast<int>(e.kind)},
                           {"payload", vec_to_json(e.payload)}});
  }
  return j;
}

SimDataset SimDataset::from_json(const nlohmann::json& j) {
  SimDataset d;
  d.config = SimConfig::from_json(j["config"]);
  d.truth_stamps = j["truth_stamps"].get<std::vector<double>>();
  for (const auto& v : j["truth"]) d.truth.push_back(vec_from_json(v));
  for (const auto& e : j["events"]) {
    d.events.push_back({e["stamp"].get<double>(),
                        static_cast<EventKind>(e["kind"].get<int>()),
                        vec_from_json(e["payload"])});
  }
  return d;
}

const Vec& SimDataset::truth_at(double stamp) const {
  const double dt = 1.0 / config.process_rate;
  const auto k = static_cast<size_t>(std::llround(stamp / dt));
  if (k >= truth_stamps.size() || std::abs(truth_stamps[k] - stamp) > 0.5 * dt)
    throw ConfigError("truth_at: stamp off the process grid: " + std::to_string(stamp));
  return truth[k];
}

namespace {

Vec landmark_observation(const Vec& pose, const Vec& landmark, const Vec& t_ext) {
  const Eigen::Matrix2d R = rot2(pose(2));
  Vec z(3);
  z.head<2>() = R.transpose() * (landmark.head<2>() - pose.head<2>()) - t_ext.head<2>();
  z(2) = wrap_angle(landmark(2) - pose(2));
  return z;
}

}  // namespace

SimDataset simulate(const SimConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const double dt = 1.0 / config.process_rate;
  const auto steps = static_cast<int>(std::llround(config.duration * config.process_rate));
  const auto stride = static_cast<int>(std::llround(config.process_rate / config.update_rate));
  const bool has_vel = config.sensors.constvel;

  SimDataset ds;
  ds.config = config;

  // Ground truth. The truth trajectory is produced by the same discrete
  // integrators the estimator uses, so zero-noise measurements are exactly
  // consistent with it.
  const DiffDriveProcessModel dd(config.diffdrive_params);
  const ConstVelProcessModel cv(config.constvel_params);
  Values scratch;

  std::vector<Vec> dd_inputs(steps + 1, Vec::Zero(2));
  std::vector<Vec> cv_inputs(steps + 1, Vec::Zero(3));
  std::vector<Vec> poses(steps + 1);      // [px, py, heading]
  std::vector<Vec> velocities(steps + 1, Vec::Zero(2));

  if (config.sensors.diffdrive) {
    std::vector<Vec> x = {Vec::Zero(2), Vec::Zero(1)};
    poses[0] = Vec::Zero(3);
    for (int k = 1; k <= steps; ++k) {
      const double t = k * dt;
      const double common =
          config.trajectory.wheel_mean *
          (1.0 + 0.5 * std::sin(2.0 * M_PI * config.trajectory.wheel_mean_freq * t));
      const double diff = config.trajectory.wheel_diff_amp *
                          std::sin(2.0 * M_PI * config.trajectory.wheel_diff_freq * t);
      Vec u(2);
      u << common - diff, common + diff;
      dd_inputs[k] = u;
      std::vector<Vec> next;
      dd.step(x, u, dt, scratch, &next, nullptr, nullptr, nullptr);
      x = next;
      poses[k] = Vec(3);
      poses[k] << x[0](0), x[0](1), x[1](0);
    }
    if (has_vel) {
      // Derive constvel inputs that reproduce the diffdrive truth exactly
      // under the semi-implicit integrator.
      velocities[0] = (poses[1].head<2>() - poses[0].head<2>()) / dt;
      for (int k = 1; k <= steps; ++k) {
        velocities[k] = (poses[k].head<2>() - poses[k - 1].head<2>()) / dt;
        const double omega = wrap_angle(poses[k](2) - poses[k - 1](2)) / dt;
        const Eigen::Vector2d a =
            rot2(poses[k](2)).transpose() * (velocities[k] - velocities[k - 1]) / dt;
        cv_inputs[k] << omega, a(0), a(1);
      }
      // Recheck: positions integrate as p_k = p_{k-1} + v_k dt by construction.
    }
  } else {
    std::vector<Vec> x = {Vec::Zero(2), Vec::Zero(1), Vec::Zero(2)};
    poses[0] = Vec::Zero(3);
    for (int k = 1; k <= steps; ++k) {
      const double t = k * dt;
      Vec u(3);
      u << config.trajectory.gyro_amp *
               std::sin(2.0 * M_PI * config.trajectory.gyro_freq * t),
          config.trajectory.accel_amp_x *
              std::sin(2.0 * M_PI * config.trajectory.accel_freq_x * t),
          config.trajectory.accel_amp_y *
              std::cos(2.0 * M_PI * config.trajectory.accel_freq_y * t);
      cv_inputs[k] = u;
      std::vector<Vec> next;
      cv.step(x, u, dt, scratch, &next, nullptr, nullptr, nullptr);
      x = next;
      poses[k] = Vec(3);
      poses[k] << x[0](0), x[0](1), x[1](0);
      velocities[k] = x[2];
    }
  }

  const int state_dim = has_vel ? 5 : 3;
  for (int k = 0; k <= steps; ++k) {
    ds.truth_stamps.push_back(k * dt);
    Vec s(state_dim);
    s.head<3>() = poses[k];
    if (has_vel) s.tail<2>() = velocities[k];
    ds.truth.push_back(s);
  }

  // Measurement streams, time ordered; process samples precede updates at
  // the same stamp.
  for (int k = 1; k <= steps; ++k) {
    const double t = k * dt;
    if (config.sensors.constvel) {
      Vec u = cv_inputs[k];
      u(0) += config.noise.gyro * rng.gauss();
      u(1) += config.noise.accel * rng.gauss();
      u(2) += config.noise.accel * rng.gauss();
      ds.events.push_back({t, EventKind::ConstVel, u});
    }
    if (config.sensors.diffdrive) {
      Vec u = dd_inputs[k];
      u(0) += config.noise.wheel * rng.gauss();
      u(1) += config.noise.wheel * rng.gauss();
      ds.events.push_back({t, EventKind::DiffDrive, u});
    }
    if (k % stride == 0) {
      if (config.sensors.landmark_a && !in_dropout(config, t)) {
        const double boost = rng.uniform() < config.outlier_fraction ? 100.0 : 1.0;
        Vec z = landmark_observation(poses[k], config.landmark_a_pose,
                                     config.extrinsic_true);
        z(0) += boost * config.noise.landmark_pos * rng.gauss();
        z(1) += boost * config.noise.landmark_pos * rng.gauss();
        z(2) = wrap_angle(z(2) + boost * config.noise.landmark_heading * rng.gauss());
        ds.events.push_back({t, EventKind::LandmarkA, z});
      }
      if (config.sensors.landmark_b) {
        const double boost = rng.uniform() < config.outlier_fraction ? 100.0 : 1.0;
        Vec z = landmark_observation(poses[k], config.landmark_b_pose,
                                     config.extrinsic_true);
        z(0) += boost * config.noise.landmark_pos * rng.gauss();
        z(1) += boost * config.noise.landmark_pos * rng.gauss();
        z(2) = wrap_angle(z(2) + boost * config.noise.landmark_heading * rng.gauss());
        ds.events.push_back({t, EventKind::LandmarkB, z});
      }
      if (config.sensors.pose) {
        const double boost = rng.uniform() < config.outlier_fraction ? 100.0 : 1.0;
        Vec z = poses[k];
        z(0) += boost * config.noise.pose_pos * rng.gauss();
        z(1) += boost * config.noise.pose_pos * rng.gauss();
        z(2) = wrap_angle(z(2) + boost * config.noise.pose_heading * rng.gauss());
        ds.events.push_back({t, EventKind::Pose, z});
      }
    }
  }
  return ds;
}

namespace {

struct EngineSetup {
  std::unique_ptr<Engine> engine;
  std::map<EventKind, int> update_index;
  std::map<EventKind, int> process_index;
  BlockId extrinsic = -1;
  std::vector<std::shared_ptr<UpdateModel>> update_models;
  std::vector<std::shared_ptr<ProcessModel>> process_models;
};

Mat landmark_weight(const NoiseSpec& n) {
  Vec s(3);
  s << std::max(n.landmark_pos, 1e-6), std::max(n.landmark_pos, 1e-6),
      std::max(n.landmark_heading, 1e-6);
  return diag_weight(s);
}

Mat pose_weight(const NoiseSpec& n) {
  Vec s(3);
  s << std::max(n.pose_pos, 1e-6), std::max(n.pose_pos, 1e-6),
      std::max(n.pose_heading, 1e-6);
  return diag_weight(s);
}

EngineSetup make_engine(const SimConfig& config, bool marginalize) {
  const bool has_vel = config.sensors.constvel;
  std::vector<StateBlockSpec> layout = {{"position", Manifold::Euclidean(2), Vec()},
                                        {"heading", Manifold::Angle(), Vec()}};
  if (has_vel) layout.push_back({"velocity", Manifold::Euclidean(2), Vec()});

  EngineConfig ec;
  ec.batch_size = config.estimator.batch_size;
  ec.marginalize = marginalize;
  ec.initial_info = config.estimator.initial_info;
  ec.solver.worker_count = config.estimator.threads;
  ec.solver.max_iterations = config.estimator.max_iterations;
  ec.solver.loss = config.estimator.loss == "huber" ? LossKind::Huber : LossKind::None;
  ec.solver.huber_threshold = config.estimator.huber_threshold;

  EngineSetup setup;
  setup.engine = std::make_unique<Engine>(layout, ec);
  Engine& eng = *setup.engine;

  if (config.estimate_extrinsic) {
    setup.extrinsic = eng.add_static("extrinsic", Manifold::Euclidean(2),
                                     Vec::Zero(2), true);
  }
  if (config.sensors.landmark_a) {
    const BlockId lp = eng.add_static("landmark_a/position", Manifold::Euclidean(2),
                                      config.landmark_a_pose.head(2), false);
    const BlockId lh = eng.add_static("landmark_a/heading", Manifold::Angle(),
                                      config.landmark_a_pose.tail(1), false);
    auto m = std::make_shared<LandmarkUpdateModel>(lp, lh, setup.extrinsic);
    setup.update_models.push_back(m);
    setup.update_index[EventKind::LandmarkA] = eng.add_update_model(m, true);
  }
  if (config.sensors.landmark_b) {
    const BlockId lp = eng.add_static("landmark_b/position", Manifold::Euclidean(2),
                                      config.landmark_b_pose.head(2), false);
    const BlockId lh = eng.add_static("landmark_b/heading", Manifold::Angle(),
                                      config.landmark_b_pose.tail(1), false);
    auto m = std::make_shared<LandmarkUpdateModel>(lp, lh, setup.extrinsic);
    setup.update_models.push_back(m);
    setup.update_index[EventKind::LandmarkB] = eng.add_update_model(m, true);
  }
  if (config.sensors.pose) {
    auto m = std::make_shared<PoseUpdateModel>();
    setup.update_models.push_back(m);
    setup.update_index[EventKind::Pose] = eng.add_update_model(m, true);
  }
  if (config.sensors.constvel) {
    auto m = std::make_shared<ConstVelProcessModel>(config.constvel_params);
    setup.process_models.push_back(m);
    setup.process_index[EventKind::ConstVel] = eng.add_process_model(m);
  }
  if (config.sensors.diffdrive) {
    auto m = std::make_shared<DiffDriveProcessModel>(config.diffdrive_params);
    setup.process_models.push_back(m);
    setup.process_index[EventKind::DiffDrive] = eng.add_process_model(m);
  }
  return setup;
}

UpdateMeasurement make_update(const SimConfig& config, const SimEvent& e) {
  UpdateMeasurement m;
  m.stamp = e.stamp;
  m.payload = e.payload;
  m.weight_sqrt = (e.kind == EventKind::Pose) ? pose_weight(config.noise)
                                              : landmark_weight(config.noise);
  return m;
}

struct PoseSample {
  Eigen::Vector2d position;
  double heading;
};

PoseSample pose_of(const std::vector<Vec>& block_values) {
  return {block_values[0].head<2>(), block_values[1](0)};
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

MetricsReport finish_metrics(
    const SimDataset& ds, const std::map<double, PoseSample>& posterior,
    const std::map<double, PoseSample>& pre, const std::map<double, PoseSample>& delayed,
    const std::vector<double>& solve_times, int64_t dropped) {
  MetricsReport m;
  double se_pos = 0, se_head = 0, se_cons = 0;
  int n_err = 0, n_cons = 0;
  for (const auto& [stamp, est] : posterior) {
    const Vec& truth = ds.truth_at(stamp);
    se_pos += (est.position - Eigen::Vector2d(truth.head<2>())).squaredNorm();
    const double dh = wrap_angle(est.heading - truth(2));
    se_head += dh * dh;
    n_err++;
    auto itp = pre.find(stamp);
    auto itd = delayed.find(stamp);
    if (itp != pre.end() && itd != delayed.end()) {
      se_cons += (itd->second.position - itp->second.position).squaredNorm();
      n_cons++;
    }
  }
  m.rms_position_error = n_err ? std::sqrt(se_pos / n_err) : 0.0;
  m.rms_heading_error = n_err ? std::sqrt(se_head / n_err) : 0.0;
  m.consistency_rms = n_cons ? std::sqrt(se_cons / n_cons) : 0.0;
  if (!solve_times.empty()) {
    m.solve_time_mean =
        std::accumulate(solve_times.begin(), solve_times.end(), 0.0) / solve_times.size();
    m.solve_time_median = median(solve_times);
    m.solve_time_max = *std::max_element(solve_times.begin(), solve_times.end());
  }
  m.total_solves = static_cast<int64_t>(solve_times.size());
  m.dropped_measurements = dropped;
  return m;
}

StepRow make_row(const SimDataset& ds, double stamp, const std::vector<Vec>& estimate,
                 const std::vector<Vec>& propagated) {
  StepRow row;
  row.stamp = stamp;
  row.truth = ds.truth_at(stamp);
  const int dim = static_cast<int>(row.truth.size());
  row.estimate = Vec::Zero(dim);
  row.propagated = Vec::Zero(dim);
  auto fill = [&](Vec& out, const std::vector<Vec>& blocks) {
    out.head<2>() = blocks[0].head<2>();
    out(2) = blocks[1](0);
    if (dim == 5 && blocks.size() > 2) out.tail<2>() = blocks[2];
  };
  fill(row.estimate, estimate);
  fill(row.propagated, propagated);
  row.position_error = (row.propagated.head<2>() - row.truth.head<2>()).norm();
  row.heading_error = std::abs(wrap_angle(row.propagated(2) - row.truth(2)));
  return row;
}

}  // namespace

RunResult run_mhe(const SimDataset& dataset, const SimConfig& config) {
  EngineSetup setup = make_engine(config, true);
  Engine& eng = *setup.engine;

  RunResult result;
  result.estimator = "mhe";
  std::map<double, PoseSample> posterior, pre, delayed;
  std::vector<double> solve_times;

  size_t step_index = 0;
  for (const SimEvent& e : dataset.events) {
    auto pit = setup.process_index.find(e.kind);
    if (pit != setup.process_index.end()) {
      eng.ingest_process(pit->second, {e.stamp, e.payload});
      if (!eng.window().empty()) {
        const EstimateOutput fp = eng.forward_propagate(e.stamp);
        result.rows.push_back(
            make_row(dataset, e.stamp, fp.block_values, fp.propagated_values));
      }
      step_index++;
      continue;
    }
    auto uit = setup.update_index.find(e.kind);
    if (uit == setup.update_index.end()) continue;

    if (!eng.window().empty()) {
      const EstimateOutput fp = eng.forward_propagate(e.stamp);
      if (!pre.count(e.stamp)) pre[e.stamp] = pose_of(fp.propagated_values);
    }
    eng.ingest_update(uit->second, make_update(config, e));
    try {
      const EstimateOutput out = eng.optimize_window();
      solve_times.push_back(out.solve_seconds);
      posterior[out.stamp] = pose_of(out.block_values);
      // The optimized estimate of this stamp arrives one solve after the
      // real-time propagated one; their distance is the consistency sample.
      delayed[out.stamp] = posterior[out.stamp];
    } catch (const NumericalError& err) {
      throw NumericalError(std::string(err.what()) + " (at step " +
                           std::to_string(step_index) + ")");
    }
  }

  result.metrics = finish_metrics(dataset, posterior, pre, delayed, solve_times,
                                  eng.dropped_count());
  return result;
}

RunResult run_iekf(const SimDataset& dataset, const SimConfig& config) {
  if (config.sensors.process_model_count() > 1) {
    throw ConfigError(
        "run_iekf: multiple process models act on the same portion of the state; "
        "a filter processes measurements sequentially and cannot directly "
        "incorporate multiple process measurements on the same state portion. "
        "Use the MHE estimator for this configuration.");
  }
  if (config.sensors.process_model_count() == 0) {
    throw ConfigError("run_iekf: a filter requires an explicit process model");
  }

  // Reuse the engine only as a container for statics and models.
  EngineSetup setup = make_engine(config, true);
  Engine& eng = *setup.engine;
  Values& values = eng.values();

  const bool has_vel = config.sensors.constvel;
  std::vector<Manifold> layout = {Manifold::Euclidean(2), Manifold::Angle()};
  if (has_vel) layout.push_back(Manifold::Euclidean(2));
  const int n = has_vel ? 5 : 3;

  std::vector<BlockId> state_ids;
  std::vector<int> offsets;
  {
    int off = 0;
    for (size_t i = 0; i < layout.size(); ++i) {
      state_ids.push_back(values.add(layout[i], layout[i].kind() == Manifold::Kind::Angle
                                                    ? Vec::Zero(1)
                                                    : Vec::Zero(layout[i].ambient_dim()),
                                     "iekf/x" + std::to_string(i), true));
      offsets.push_back(off);
      off += layout[i].tangent_dim();
    }
  }

  const std::shared_ptr<ProcessModel> proc = setup.process_models.front();
  Mat P;
  bool initialized = false;
  double last_stamp = 0.0;

  RunResult result;
  result.estimator = "iekf";
  std::map<double, PoseSample> posterior, pre, delayed;
  std::vector<double> solve_times;

  auto current_values = [&]() {
    std::vector<Vec> v;
    for (BlockId id : state_ids) v.push_back(values.block(id).value);
    return v;
  };

  for (const SimEvent& e : dataset.events) {
    if (setup.process_index.count(e.kind)) {
      if (!initialized) continue;
      const double dt = e.stamp - last_stamp;
      if (dt <= 0) continue;
      std::vector<Vec> x = current_values();
      std::vector<Vec> next;
      Mat F, Q;
      proc->step(x, e.payload, dt, values, &next, &F, &Q, nullptr);
      for (size_t i = 0; i < state_ids.size(); ++i)
        values.block(state_ids[i]).value = next[i];
      P = F * P * F.transpose() + Q;
      last_stamp = e.stamp;
      result.rows.push_back(make_row(dataset, e.stamp, next, next));
      continue;
    }
    auto uit = setup.update_index.find(e.kind);
    if (uit == setup.update_index.end()) continue;
    const auto& model = setup.update_models[uit->second];
    const UpdateMeasurement meas = make_update(config, e);

    std::vector<BlockId> blocks;
    for (int idx : model->state_blocks()) blocks.push_back(state_ids[idx]);
    const auto statics = model->static_blocks();
    blocks.insert(blocks.end(), statics.begin(), statics.end());

    if (!initialized) {
      std::vector<Vec> vals = current_values();
      model->seed(values, meas.payload, &vals);
      for (size_t i = 0; i < state_ids.size(); ++i)
        values.block(state_ids[i]).value = vals[i];
      P = Mat::Identity(n, n) / config.estimator.initial_info;
      initialized = true;
      last_stamp = e.stamp;
      posterior[e.stamp] = pose_of(current_values());
      delayed[e.stamp] = posterior[e.stamp];
      continue;
    }

    pre[e.stamp] = pose_of(current_values());
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<Vec> prior_vals = current_values();
    const Mat P_inv = P.inverse();
    Mat JtJ;
    // Iterated Gauss-Newton measurement update.
    for (int iter = 0; iter < 5; ++iter) {
      std::vector<Mat> jac;
      const Vec f = model->innovation(values, blocks, meas.payload, &jac);
      const Vec ew = meas.weight_sqrt * f;
      Mat J = Mat::Zero(ew.size(), n);
      const auto state_idx = model->state_blocks();
      for (size_t i = 0; i < state_idx.size(); ++i) {
        J.middleCols(offsets[state_idx[i]], layout[state_idx[i]].tangent_dim()) =
            meas.weight_sqrt * jac[i];
      }
      Vec r_prior(n);
      for (size_t i = 0; i < state_ids.size(); ++i) {
        r_prior.segment(offsets[i], layout[i].tangent_dim()) = layout[i].boxminus(
            prior_vals[i], values.block(state_ids[i]).value);
      }
      JtJ = J.transpose() * J;
      const Mat A = P_inv + JtJ;
      const Vec rhs = -J.transpose() * ew + P_inv * r_prior;
      const Vec delta = A.ldlt().solve(rhs);
      for (size_t i = 0; i < state_ids.size(); ++i) {
        ParameterBlock& blk = values.block(state_ids[i]);
        blk.value = blk.manifold.boxplus(
            blk.value, delta.segment(offsets[i], layout[i].tangent_dim()));
      }
      if (delta.norm() < 1e-10) break;
    }
    P = (P_inv + JtJ).inverse();
    solve_times.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    last_stamp = std::max(last_stamp, e.stamp);
    posterior[e.stamp] = pose_of(current_values());
    delayed[e.stamp] = posterior[e.stamp];
  }

  result.metrics = finish_metrics(dataset, posterior, pre, delayed, solve_times, 0);
  return result;
}

void write_report(const RunResult& result, const SimConfig& config,
                  const std::string& out_dir, const std::string& format) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);

  nlohmann::json summary;
  summary["schema_version"] = 1;
  summary["config_hash"] = config.hash();
  summary["estimator"] = result.estimator;
  summary["batch_size"] = config.estimator.batch_size;
  summary["threads"] = config.estimator.threads;
  summary["metrics"] = result.metrics.to_json();
  {
    std::ofstream out(fs::path(out_dir) / (result.estimator + "_summary.json"));
    if (!out) throw ConfigError("write_report: cannot write to " + out_dir);
    out << summary.dump(2) << "\n";
  }

  if (format == "csv") {
    std::ofstream out(fs::path(out_dir) / (result.estimator + "_steps.csv"));
    if (!out) throw ConfigError("write_report: cannot write to " + out_dir);
    const int dim = result.rows.empty() ? 3 : static_cast<int>(result.rows[0].truth.size());
    const std::vector<std::string> names =
        dim == 5 ? std::vector<std::string>{"px", "py", "heading", "vx", "vy"}
                 : std::vector<std::string>{"px", "py", "heading"};
    out << "stamp";
    for (const auto& prefix : {"truth_", "est_", "prop_"}) {
      for (const auto& nme : names) out << "," << prefix << nme;
    }
    out << ",err_pos,err_heading\n";
    out << std::setprecision(12);
    for (const StepRow& row : result.rows) {
      out << row.stamp;
      for (const Vec* v : {&row.truth, &row.estimate, &row.propagated}) {
        for (int i = 0; i < dim; ++i) out << "," << (*v)(i);
      }
      out << "," << row.position_error << "," << row.heading_error << "\n";
    }
  }
}

}  // namespace mhe::sim
