// Command-line front end: dataset generation, estimator runs, parameter
// sweeps, and report aggregation.
//
// Exit codes: 0 success, 2 configuration error, 3 estimator failure.

#include "CLI11.hpp"
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mhe/sim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitEstimator = 3;

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mhe::ConfigError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw mhe::ConfigError(std::string("invalid JSON in ") + path + ": " + e.what());
  }
  return j;
}

void write_json(const json& j, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw mhe::ConfigError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

mhe::sim::SimConfig load_config(const std::string& path) {
  return mhe::sim::SimConfig::from_json(load_json(path));
}

mhe::sim::SimDataset load_dataset(const std::string& data_dir) {
  return mhe::sim::SimDataset::from_json(load_json((fs::path(data_dir) / "dataset.json").string()));
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir) {
  const auto config = load_config(config_path);
  const auto dataset = mhe::sim::simulate(config);
  write_json(dataset.to_json(), fs::path(out_dir) / "dataset.json");
  write_json(config.to_json(), fs::path(out_dir) / "config.json");
  std::cout << "wrote " << dataset.events.size() << " events over " << config.duration
            << " s to " << out_dir << "\n";
  return kExitOk;
}

mhe::sim::RunResult run_estimator(const std::string& estimator,
                                  const mhe::sim::SimDataset& dataset,
                                  const mhe::sim::SimConfig& config) {
  return estimator == "mhe" ? mhe::sim::run_mhe(dataset, config)
                            : mhe::sim::run_iekf(dataset, config);
}

int cmd_run(const std::string& estimator, const std::string& config_path,
            const std::string& data_dir, const std::string& out_dir,
            const std::string& format) {
  const auto config = load_config(config_path);
  const auto dataset = load_dataset(data_dir);
  const auto result = run_estimator(estimator, dataset, config);
  mhe::sim::write_report(result, config, out_dir, format);
  std::cout << estimator << ": rms_position_error=" << result.metrics.rms_position_error
            << " consistency_rms=" << result.metrics.consistency_rms
            << " solves=" << result.metrics.total_solves << "\n";
  return kExitOk;
}

mhe::sim::SensorFlags parse_sensors(const std::string& token) {
  mhe::sim::SensorFlags flags;
  flags.landmark_a = flags.constvel = false;
  std::stringstream ss(token);
  std::string name;
  while (std::getline(ss, name, '+')) {
    if (name == "landmark_a") flags.landmark_a = true;
    else if (name == "landmark_b") flags.landmark_b = true;
    else if (name == "pose") flags.pose = true;
    else if (name == "constvel") flags.constvel = true;
    else if (name == "diffdrive") flags.diffdrive = true;
    else throw mhe::ConfigError("unknown sensor '" + name + "' in sweep value");
  }
  return flags;
}

int cmd_sweep(const std::string& param, const std::vector<std::string>& values,
              const std::string& config_path, const std::string& out_dir,
              const std::string& estimator) {
  const auto base = load_config(config_path);
  json rows = json::array();
  for (const std::string& value : values) {
    mhe::sim::SimConfig config = base;
    if (param == "batch_size") {
      config.estimator.batch_size = std::stoi(value);
    } else if (param == "threads") {
      config.estimator.threads = std::stoi(value);
    } else if (param == "sensors") {
      config.sensors = parse_sensors(value);
    } else {
      throw mhe::ConfigError("unknown sweep parameter '" + param + "'");
    }
    config.validate();
    const auto dataset = mhe::sim::simulate(config);
    const auto result = run_estimator(estimator, dataset, config);
    const fs::path sub = fs::path(out_dir) / (param + "_" + value);
    mhe::sim::write_report(result, config, sub.string(), "json");
    json row = result.metrics.to_json();
    row["param"] = param;
    row["value"] = value;
    rows.push_back(std::move(row));
    std::cout << param << "=" << value
              << " rms_position_error=" << result.metrics.rms_position_error
              << " solve_time_mean=" << result.metrics.solve_time_mean << "\n";
  }
  write_json(json{{"schema_version", 1}, {"param", param}, {"rows", rows}},
             fs::path(out_dir) / "sweep_summary.json");
  return kExitOk;
}

int cmd_report(const std::string& data_dir, const std::string& format) {
  std::vector<std::pair<std::string, json>> summaries;
  for (const auto& entry : fs::recursive_directory_iterator(data_dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.size() > 13 &&
        name.substr(name.size() - 13) == "_summary.json" &&
        name != "sweep_summary.json") {  // per-run summaries only
      summaries.emplace_back(fs::relative(entry.path(), data_dir).string(),
                             load_json(entry.path().string()));
    }
  }
  if (summaries.empty()) throw mhe::ConfigError("no *_summary.json found under " + data_dir);
  std::sort(summaries.begin(), summaries.end());

  if (format == "json") {
    json out = json::array();
    for (auto& [path, j] : summaries) {
      j["source"] = path;
      out.push_back(std::move(j));
    }
    std::cout << out.dump(2) << "\n";
  } else {
    std::cout << "source,estimator,rms_position_error,rms_heading_error,"
                 "consistency_rms,solve_time_mean,total_solves,dropped_measurements\n";
    for (const auto& [path, j] : summaries) {
      const json& m = j["metrics"];
      std::cout << path << "," << j.value("estimator", "") << ","
                << m["rms_position_error"].get<double>() << ","
                << m["rms_heading_error"].get<double>() << ","
                << m["consistency_rms"].get<double>() << ","
                << m["solve_time"]["mean"].get<double>() << ","
                << m["total_solves"].get<int64_t>() << ","
                << m["dropped_measurements"].get<int64_t>() << "\n";
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Moving-horizon sensor fusion harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", data_dir, estimator = "mhe";
  std::string format = "csv", param;
  std::vector<std::string> values;

  auto* sim = app.add_subcommand("simulate", "Generate a deterministic dataset");
  sim->add_option("--config", config_path, "Config JSON")->required();
  sim->add_option("--out", out_dir, "Output directory")->required();

  auto* run = app.add_subcommand("run", "Run an estimator over a dataset");
  run->add_option("--estimator", estimator, "mhe | iekf")
      ->check(CLI::IsMember({"mhe", "iekf"}));
  run->add_option("--config", config_path, "Config JSON")->required();
  run->add_option("--data", data_dir, "Dataset directory")->required();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--format", format, "csv | json")
      ->check(CLI::IsMember({"csv", "json"}));

  auto* sweep = app.add_subcommand("sweep", "Sweep one parameter");
  sweep->add_option("--param", param, "batch_size | threads | sensors")
      ->required()
      ->check(CLI::IsMember({"batch_size", "threads", "sensors"}));
  sweep->add_option("--values", values, "Comma-separated values")
      ->required()
      ->delimiter(',');
  sweep->add_option("--config", config_path, "Config JSON")->required();
  sweep->add_option("--out", out_dir, "Output directory")->required();
  sweep->add_option("--estimator", estimator, "mhe | iekf")
      ->check(CLI::IsMember({"mhe", "iekf"}));

  auto* report = app.add_subcommand("report", "Aggregate run summaries");
  report->add_option("--data", data_dir, "Directory containing run outputs")->required();
  report->add_option("--format", format, "csv | json")
      ->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (sim->parsed()) return cmd_simulate(config_path, out_dir);
    if (run->parsed()) return cmd_run(estimator, config_path, data_dir, out_dir, format);
    if (sweep->parsed()) return cmd_sweep(param, values, config_path, out_dir, estimator);
    if (report->parsed()) return cmd_report(data_dir, format);
  } catch (const mhe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const mhe::NumericalError& e) {
    std::cerr << "estimator failure: " << e.what() << "\n";
    return kExitEstimator;
  } catch (const mhe::ContractViolation& e) {
    std::cerr << "estimator failure: " << e.what() << "\n";
    return kExitEstimator;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
