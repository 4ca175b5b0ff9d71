#include <random>

#include "doctest.h"
#include "fixtures.hpp"

using namespace mhe;
using fixtures::vec;

namespace {

struct ScalarEngine {
  std::unique_ptr<Engine> engine;
  int update_index = 0;
  int process_index = 0;
};

ScalarEngine make_scalar_engine(int batch_size, double q, double initial_info = 1e4,
                                bool marginalize = true) {
  EngineConfig config;
  config.batch_size = batch_size;
  config.initial_info = initial_info;
  config.marginalize = marginalize;
  // Tight tolerances: several tests compare against closed-form optima.
  config.solver.max_iterations = 50;
  config.solver.initial_lambda = 1e-10;
  config.solver.cost_decrease_tol = 1e-14;
  config.solver.gradient_tol = 1e-12;
  ScalarEngine out;
  out.engine = std::make_unique<Engine>(
      std::vector<StateBlockSpec>{{"x", Manifold::Euclidean(1), vec({0})}}, config);
  out.update_index = out.engine->add_update_model(
      std::make_shared<fixtures::ScalarUpdateModel>(), true);
  out.process_index = out.engine->add_process_model(
      std::make_shared<fixtures::RandomWalk1D>(q));
  return out;
}

struct ScalarRun {
  double mean = 0.0;
  double variance = 0.0;
};

/// Feed a scalar random-walk dataset through an engine, returning the newest
/// posterior after the last update.
ScalarRun run_scalar(Engine& eng, int update_index, int process_index,
                     const std::vector<double>& z, double sigma, double rate = 10.0) {
  for (size_t k = 0; k < z.size(); ++k) {
    const double t = static_cast<double>(k) / rate;
    if (k > 0) {
      // Two process samples between consecutive updates.
      eng.ingest_process(process_index, {t - 0.5 / rate, Vec::Zero(0)});
      eng.ingest_process(process_index, {t, Vec::Zero(0)});
    }
    eng.ingest_update(update_index, fixtures::scalar_meas(t, z[k], sigma));
    eng.optimize_window();
  }
  ScalarRun out;
  out.mean = eng.values().block(eng.window().back().blocks[0]).value(0);
  out.variance = eng.covariance({eng.window().back().blocks[0]})(0, 0);
  return out;
}

std::vector<double> random_walk_data(int n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  std::vector<double> z(n);
  double x = 0.0;
  for (int i = 0; i < n; ++i) {
    x += 0.1 * noise(rng);
    z[i] = x + noise(rng);
  }
  return z;
}

}  // namespace

TEST_CASE("first spawning update creates the first state at its stamp") {
  ScalarEngine s = make_scalar_engine(5, 0.01);
  s.engine->ingest_process(s.process_index, {0.0, Vec::Zero(0)});
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.1, 1.5, 0.5));
  REQUIRE(s.engine->window().size() == 1);
  CHECK(s.engine->window().front().stamp == 0.1);
  // Seeded from the measurement.
  CHECK(s.engine->values().block(s.engine->window().front().blocks[0]).value(0) == 1.5);
}

TEST_CASE("two update sources at the same stamp attach to one state") {
  ScalarEngine s = make_scalar_engine(5, 0.01);
  const int second =
      s.engine->add_update_model(std::make_shared<fixtures::ScalarUpdateModel>(), false);
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.1, 1.0, 0.5));
  s.engine->ingest_update(second, fixtures::scalar_meas(0.1, 1.1, 0.5));
  REQUIRE(s.engine->window().size() == 1);
  CHECK(s.engine->window().front().updates.size() == 2);
}

TEST_CASE("chains between 10 Hz states hold 40 +- 1 samples of a 400 Hz source") {
  ScalarEngine s = make_scalar_engine(8, 0.01);
  const double dt = 1.0 / 400.0;
  int k = 1;
  for (double t = 0.1; t <= 0.5 + 1e-9; t += 0.1) {
    for (; k * dt <= t + 1e-9; ++k)
      s.engine->ingest_process(s.process_index, {k * dt, Vec::Zero(0)});
    s.engine->ingest_update(s.update_index, fixtures::scalar_meas(t, 0.0, 0.5));
  }
  REQUIRE(s.engine->window().size() == 5);
  for (size_t i = 1; i < s.engine->window().size(); ++i) {
    const auto& incoming = s.engine->window()[i].incoming;
    REQUIRE(incoming.count(s.process_index) == 1);
    const int count =
        static_cast<int>(incoming.at(s.process_index).measurements.size());
    CHECK(std::abs(count - 40) <= 1);
  }
}

TEST_CASE("measurements older than the window are dropped and counted") {
  ScalarEngine s = make_scalar_engine(2, 0.01);
  const auto z = random_walk_data(6, 1);
  run_scalar(*s.engine, s.update_index, s.process_index, z, 0.5);
  // Window start is now late; this one is stale.
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.0, 0.0, 0.5));
  CHECK(s.engine->dropped_count() >= 1);
  CHECK(s.engine->ingested_count() ==
        s.engine->attached_count() + s.engine->dropped_count());
}

TEST_CASE("linear-Gaussian equivalence: KF = MHE(2) = MHE(8) = full batch") {
  const double sigma = 0.5;
  const double q = 0.04;  // per second
  const double info0 = 1e4;
  const auto z = random_walk_data(20, 7);

  // Kalman oracle: seed on the first measurement mean with prior 1/info0,
  // then measurement updates with variance sigma^2 and predictions q*dt.
  fixtures::ScalarKalman kf;
  kf.x = z[0];
  kf.p = 1.0 / info0;
  kf.update(z[0], sigma * sigma);
  for (size_t k = 1; k < z.size(); ++k) {
    kf.predict(q * 0.1);
    kf.update(z[k], sigma * sigma);
  }

  std::vector<ScalarRun> runs;
  for (int batch : {2, 8, 100}) {
    ScalarEngine s = make_scalar_engine(batch, q, info0);
    runs.push_back(run_scalar(*s.engine, s.update_index, s.process_index, z, sigma));
  }
  for (const ScalarRun& r : runs) {
    CHECK(r.mean == doctest::Approx(kf.x).epsilon(1e-8));
    CHECK(r.variance == doctest::Approx(kf.p).epsilon(1e-8));
  }
}

TEST_CASE("sliding twice equals marginalizing two states at once") {
  const auto z = random_walk_data(12, 13);
  ScalarRun a, b;
  {
    ScalarEngine s = make_scalar_engine(2, 0.04);
    a = run_scalar(*s.engine, s.update_index, s.process_index, z, 0.5);
  }
  {
    ScalarEngine s = make_scalar_engine(4, 0.04);
    b = run_scalar(*s.engine, s.update_index, s.process_index, z, 0.5);
  }
  CHECK(a.mean == doctest::Approx(b.mean).epsilon(1e-9));
  CHECK(a.variance == doctest::Approx(b.variance).epsilon(1e-9));
}

TEST_CASE("after the first slide the prior links exactly the next state's blocks") {
  ScalarEngine s = make_scalar_engine(2, 0.04);
  const auto z = random_walk_data(4, 17);
  run_scalar(*s.engine, s.update_index, s.process_index, z, 0.5);
  REQUIRE(s.engine->priors().size() == 1);
  const auto& prior = s.engine->priors().front();
  CHECK(prior.linked == s.engine->window().front().blocks);
}

TEST_CASE("re-optimizing with no new measurements accepts zero steps") {
  ScalarEngine s = make_scalar_engine(5, 0.04);
  const auto z = random_walk_data(5, 19);
  run_scalar(*s.engine, s.update_index, s.process_index, z, 0.5);
  const EstimateOutput out = s.engine->optimize_window();
  CHECK(out.solver_status == "converged_gradient");
}

TEST_CASE("forward propagation through buffered measurements") {
  EngineConfig config;
  config.batch_size = 5;
  Engine eng({{"p", Manifold::Euclidean(1), vec({0})},
              {"v", Manifold::Euclidean(1), vec({0})}},
             config);
  const int u = eng.add_update_model(std::make_shared<fixtures::ScalarUpdateModel>(0), true);
  const int pm = eng.add_process_model(std::make_shared<fixtures::ConstVel1D>(0.01, 0.01));
  eng.ingest_update(u, fixtures::scalar_meas(0.0, 0.0, 0.5));
  eng.optimize_window();
  eng.values().block(eng.window().back().blocks[1]).value = vec({2.0});

  SUBCASE("to the newest stamp returns the optimized state") {
    const EstimateOutput out = eng.forward_propagate(0.0);
    CHECK(out.propagated_stamp == 0.0);
    CHECK(out.propagated_values[0](0) == out.block_values[0](0));
  }

  SUBCASE("half a second at v = 2 advances p to 1") {
    for (int k = 1; k <= 5; ++k) eng.ingest_process(pm, {0.1 * k, Vec::Zero(0)});
    const EstimateOutput out = eng.forward_propagate(0.5);
    CHECK_FALSE(out.truncated);
    CHECK(out.propagated_values[0](0) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("a buffer gap flags truncation") {
    eng.ingest_process(pm, {0.1, Vec::Zero(0)});
    const EstimateOutput out = eng.forward_propagate(0.5);
    CHECK(out.truncated);
    CHECK(out.propagated_stamp == doctest::Approx(0.1));
  }
}

TEST_CASE("covariance of a single state with a unit-information update") {
  ScalarEngine s = make_scalar_engine(5, 0.01, /*initial_info=*/1e-9);
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.0, 1.0, 1.0));
  s.engine->optimize_window();
  const Mat cov = s.engine->covariance({s.engine->window().back().blocks[0]});
  CHECK(cov(0, 0) == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("activating an unobservable static raises naming the block") {
  ScalarEngine s = make_scalar_engine(5, 0.01);
  s.engine->add_static("unobserved_bias", Manifold::Euclidean(1), vec({0}), true);
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.0, 1.0, 1.0));
  // A conflicting second measurement guarantees a nonzero gradient so the
  // solver actually reaches the factorization.
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.0, 2.0, 1.0));
  try {
    s.engine->optimize_window();
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("unobserved_bias") != std::string::npos);
  }
}

TEST_CASE("deactivated statics keep values and receive no updates") {
  EngineConfig config;
  config.batch_size = 5;
  config.initial_info = 1e-12;  // negligible prior so the update dominates
  config.solver.initial_lambda = 1e-10;
  Engine eng({{"x", Manifold::Euclidean(1), vec({0})}}, config);
  const BlockId bias = eng.add_static("bias", Manifold::Euclidean(1), vec({0.2}), false);
  const int u = eng.add_update_model(
      std::make_shared<fixtures::BiasedScalarUpdateModel>(bias), true);
  eng.ingest_update(u, fixtures::scalar_meas(0.0, 1.0, 0.5));
  eng.optimize_window();
  CHECK(eng.values().block(bias).value(0) == 0.2);
  // Inactive bias still shapes the residual: x converges to z - bias.
  CHECK(eng.values().block(eng.window().back().blocks[0]).value(0) ==
        doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("batch_calibrate requires marginalization disabled and reports RMS per kind") {
  {
    ScalarEngine s = make_scalar_engine(5, 0.01);
    CHECK_THROWS_AS(s.engine->batch_calibrate(), ConfigError);
  }
  ScalarEngine s = make_scalar_engine(3, 0.04, 1e4, /*marginalize=*/false);
  const auto z = random_walk_data(10, 23);
  run_scalar(*s.engine, s.update_index, s.process_index, z, 0.5);
  CHECK(s.engine->window().size() == 10);  // no sliding happened
  const BatchReport report = s.engine->batch_calibrate();
  CHECK(report.residual_rms.count("scalar_update") == 1);
  CHECK(report.residual_rms.count("random_walk") == 1);

  // Batch result equals MHE with a window that holds everything.
  ScalarEngine big = make_scalar_engine(100, 0.04);
  const ScalarRun r = run_scalar(*big.engine, big.update_index, big.process_index, z, 0.5);
  CHECK(s.engine->values().block(s.engine->window().back().blocks[0]).value(0) ==
        doctest::Approx(r.mean).epsilon(1e-9));
}

TEST_CASE("snapshot and restore reproduce the estimate stream") {
  const auto z = random_walk_data(12, 29);
  ScalarEngine s = make_scalar_engine(3, 0.04);
  const std::vector<double> first(z.begin(), z.begin() + 6);
  run_scalar(*s.engine, s.update_index, s.process_index, first, 0.5);
  const nlohmann::json snap = s.engine->snapshot();

  auto continue_run = [&](Engine& eng, int ui, int pi) {
    for (size_t k = 6; k < z.size(); ++k) {
      const double t = static_cast<double>(k) / 10.0;
      eng.ingest_process(pi, {t - 0.05, Vec::Zero(0)});
      eng.ingest_process(pi, {t, Vec::Zero(0)});
      eng.ingest_update(ui, fixtures::scalar_meas(t, z[k], 0.5));
      eng.optimize_window();
    }
    return eng.values().block(eng.window().back().blocks[0]).value(0);
  };

  const double direct = continue_run(*s.engine, s.update_index, s.process_index);

  ScalarEngine fresh = make_scalar_engine(3, 0.04);
  fresh.engine->restore(snap);
  const double restored =
      continue_run(*fresh.engine, fresh.update_index, fresh.process_index);
  CHECK(restored == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("estimate output serializes to newline-delimited JSON records") {
  ScalarEngine s = make_scalar_engine(5, 0.01);
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.0, 1.0, 0.5));
  const EstimateOutput out = s.engine->optimize_window();
  const nlohmann::json j = out.to_json();
  CHECK(j.contains("stamp"));
  CHECK(j.contains("values"));
  CHECK(j["metadata"].contains("solver_status"));
  const std::string line = j.dump();
  CHECK(line.find('\n') == std::string::npos);
}

TEST_CASE("problem structure dumps as DOT text") {
  ScalarEngine s = make_scalar_engine(5, 0.04);
  const auto z = random_walk_data(3, 31);
  run_scalar(*s.engine, s.update_index, s.process_index, z, 0.5);
  const std::string dot = s.engine->structure_dot();
  CHECK(dot.find("graph") != std::string::npos);
  CHECK(dot.find("scalar_update@") != std::string::npos);
  CHECK(dot.find("random_walk@") != std::string::npos);
  CHECK(dot.find("prior") != std::string::npos);
}

TEST_CASE("stamps of emitted estimates are monotone") {
  ScalarEngine s = make_scalar_engine(3, 0.04);
  const auto z = random_walk_data(10, 37);
  double last = -1.0;
  for (size_t k = 0; k < z.size(); ++k) {
    const double t = static_cast<double>(k) / 10.0;
    if (k > 0) s.engine->ingest_process(s.process_index, {t, Vec::Zero(0)});
    s.engine->ingest_update(s.update_index, fixtures::scalar_meas(t, z[k], 0.5));
    const EstimateOutput out = s.engine->optimize_window();
    CHECK(out.stamp > last);
    last = out.stamp;
    CHECK(static_cast<int>(s.engine->window().size()) <= 3);
  }
}

TEST_CASE("disabled update models drop their measurements") {
  ScalarEngine s = make_scalar_engine(5, 0.01);
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.0, 1.0, 0.5));
  s.engine->set_update_model_enabled(s.update_index, false);
  s.engine->ingest_update(s.update_index, fixtures::scalar_meas(0.1, 2.0, 0.5));
  CHECK(s.engine->dropped_count() == 1);
  CHECK(s.engine->window().size() == 1);
}
