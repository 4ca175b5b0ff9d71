#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "mhe/models.hpp"

using namespace mhe;
using fixtures::vec;

namespace {

Values make_pose_values(BlockId* pos, BlockId* heading) {
  Values v;
  *pos = v.add(Manifold::Euclidean(2), vec({1, 2}), "pos");
  *heading = v.add(Manifold::Angle(), vec({0.3}), "heading");
  return v;
}

}  // namespace

TEST_CASE("update residual is zero at the measurement") {
  BlockId pos, heading;
  Values values = make_pose_values(&pos, &heading);
  PoseUpdateModel model;

  UpdateMeasurement meas;
  meas.stamp = 0.0;
  meas.payload = vec({1, 2, 0.3});
  meas.weight_sqrt = Mat::Identity(3, 3);
  UpdateResidual r(&model, {pos, heading}, meas, "pose@0");
  CHECK(r.evaluate(values, nullptr).norm() == 0.0);
}

TEST_CASE("update residual applies the square-root weight to the innovation") {
  BlockId pos, heading;
  Values values = make_pose_values(&pos, &heading);
  PoseUpdateModel model;

  UpdateMeasurement meas;
  meas.payload = vec({1.1, 1.8, 0.3});  // position + [0.1, -0.2]
  meas.weight_sqrt = Vec(vec({10, 10, 1})).asDiagonal();
  UpdateResidual r(&model, {pos, heading}, meas, "pose@0");
  const Vec e = r.evaluate(values, nullptr);
  CHECK(e(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e(1) == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(e(2) == doctest::Approx(0.0));
}

TEST_CASE("process residual measures deviation from the propagated prediction") {
  Values values;
  const BlockId p0 = values.add(Manifold::Euclidean(1), vec({0}), "p0");
  const BlockId v0 = values.add(Manifold::Euclidean(1), vec({1}), "v0");
  const BlockId p1 = values.add(Manifold::Euclidean(1), vec({1.5}), "p1");
  const BlockId v1 = values.add(Manifold::Euclidean(1), vec({1}), "v1");

  fixtures::ConstVel1D model(0.1, 0.1);
  ProcessChain chain;
  chain.start_stamp = 0.0;
  chain.end_stamp = 1.0;
  chain.measurements.push_back({1.0, Vec::Zero(0)});
  chain.weight_sqrt = Mat::Identity(2, 2);

  ProcessResidual r(&model, {p0, v0}, {p1, v1}, &chain, "cv@1");
  const Vec e = r.evaluate(values, nullptr);
  // Hand propagation: p = 0 + 1*1 = 1, so the discrepancy is [0.5, 0].
  CHECK(e(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(e(1) == doctest::Approx(0.0));

  SUBCASE("zero residual when next equals the prediction") {
    values.block(p1).value = vec({1.0});
    CHECK(r.evaluate(values, nullptr).norm() == 0.0);
  }

  SUBCASE("analytic jacobians match finite differences") {
    CHECK(check_jacobians(r, values) < 1e-5);
  }
}

TEST_CASE("chain weight is the inverse standard deviation in 1D") {
  Values values;
  const BlockId x = values.add(Manifold::Euclidean(1), vec({0}), "x");

  SUBCASE("single step, variance 0.04") {
    fixtures::RandomWalk1D model(0.04);
    ProcessChain chain;
    chain.start_stamp = 0.0;
    chain.end_stamp = 1.0;
    chain.measurements.push_back({1.0, Vec::Zero(0)});
    const Mat w = compute_chain_weight(model, values, {x}, chain);
    CHECK(w(0, 0) == doctest::Approx(5.0).epsilon(1e-12));
  }

  SUBCASE("two independent steps of variance 0.02 add") {
    fixtures::RandomWalk1D model(0.04);  // q*dt = 0.02 per half-second step
    ProcessChain chain;
    chain.start_stamp = 0.0;
    chain.end_stamp = 1.0;
    chain.measurements.push_back({0.5, Vec::Zero(0)});
    chain.measurements.push_back({1.0, Vec::Zero(0)});
    const Mat w = compute_chain_weight(model, values, {x}, chain);
    CHECK(w(0, 0) == doctest::Approx(5.0).epsilon(1e-12));
  }

  SUBCASE("empty chain is rejected") {
    fixtures::RandomWalk1D model(0.04);
    ProcessChain chain;
    chain.start_stamp = 0.0;
    chain.end_stamp = 1.0;
    CHECK_THROWS_AS(compute_chain_weight(model, values, {x}, chain), ConfigError);
  }
}

TEST_CASE("chain weight names unobservable directions when singular") {
  Values values;
  const BlockId p = values.add(Manifold::Euclidean(1), vec({0}), "p");
  const BlockId v = values.add(Manifold::Euclidean(1), vec({1}), "v");
  fixtures::ConstVel1D model(0.1, 0.0);  // velocity direction gets no noise
  ProcessChain chain;
  chain.start_stamp = 0.0;
  chain.end_stamp = 1.0;
  chain.measurements.push_back({1.0, Vec::Zero(0)});
  CHECK_THROWS_AS(compute_chain_weight(model, values, {p, v}, chain), NumericalError);
}

TEST_CASE("total cost matches a scalar hand computation on a 2-state problem") {
  Values values;
  const BlockId x0 = values.add(Manifold::Euclidean(1), vec({1.0}), "x0");
  const BlockId x1 = values.add(Manifold::Euclidean(1), vec({2.5}), "x1");

  fixtures::ScalarUpdateModel update;
  UpdateResidual r0(&update, {x0}, fixtures::scalar_meas(0, 1.2, 0.5), "u@0");
  UpdateResidual r1(&update, {x1}, fixtures::scalar_meas(1, 2.0, 0.5), "u@1");

  fixtures::RandomWalk1D walk(0.25);
  ProcessChain chain;
  chain.start_stamp = 0.0;
  chain.end_stamp = 1.0;
  chain.measurements.push_back({1.0, Vec::Zero(0)});
  chain.weight_sqrt = compute_chain_weight(walk, values, {x0}, chain);
  ProcessResidual rp(&walk, {x0}, {x1}, &chain, "rw@1");

  // Hand computation: update residuals (1.2-1)/0.5 = 0.4 and (2.0-2.5)/0.5 = -1;
  // process residual (2.5-1)/0.5 = 3.
  const double expected = 0.4 * 0.4 + 1.0 + 9.0;
  CHECK(total_cost({&r0, &r1, &rp}, values) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("deactivating a block never changes residual values") {
  BlockId pos, heading;
  Values values = make_pose_values(&pos, &heading);
  PoseUpdateModel model;
  UpdateMeasurement meas;
  meas.payload = vec({1.3, 2.2, -0.1});
  meas.weight_sqrt = Mat::Identity(3, 3);
  UpdateResidual r(&model, {pos, heading}, meas, "pose@0");

  const Vec before = r.evaluate(values, nullptr);
  values.block(pos).active = false;
  const Vec after = r.evaluate(values, nullptr);
  CHECK((before - after).norm() == 0.0);
}

TEST_CASE("propagate_chain holds the last input over a trailing gap") {
  Values values;
  const BlockId p = values.add(Manifold::Euclidean(1), vec({0}), "p");
  const BlockId v = values.add(Manifold::Euclidean(1), vec({2}), "v");
  fixtures::ConstVel1D model(0.1, 0.1);
  ProcessChain chain;
  chain.start_stamp = 0.0;
  chain.end_stamp = 1.0;
  chain.measurements.push_back({0.5, Vec::Zero(0)});  // covers only half
  const Propagation prop = propagate_chain(model, values, {p, v}, chain, false, false);
  CHECK(prop.stamp == doctest::Approx(1.0));
  CHECK(prop.values[0](0) == doctest::Approx(2.0).epsilon(1e-12));
}
