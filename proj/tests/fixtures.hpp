// Shared test fixtures: small linear models with closed-form oracles.
#pragma once

#include <random>

#include "mhe/engine.hpp"

namespace fixtures {

using mhe::BlockId;
using mhe::Mat;
using mhe::Vec;

inline Vec vec(std::initializer_list<double> v) {
  Vec out(v.size());
  int i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

/// Direct scalar observation of state block `index`: f = z - x.
class ScalarUpdateModel : public mhe::UpdateModel {
 public:
  explicit ScalarUpdateModel(int index = 0, bool can_seed = true)
      : index_(index), can_seed_(can_seed) {}

  std::string name() const override { return "scalar_update"; }
  int residual_dim() const override { return 1; }
  std::vector<int> state_blocks() const override { return {index_}; }
  std::vector<BlockId> static_blocks() const override { return {}; }

  Vec innovation(const mhe::Values& values, const std::vector<BlockId>& blocks,
                 const Vec& payload, std::vector<Mat>* jacobians) const override {
    Vec f(1);
    f(0) = payload(0) - values.block(blocks[0]).value(0);
    if (jacobians) {
      jacobians->clear();
      jacobians->push_back(-Mat::Identity(1, 1));
    }
    return f;
  }

  bool seed(const mhe::Values&, const Vec& payload,
            std::vector<Vec>* state_values) const override {
    if (!can_seed_) return false;
    (*state_values)[index_] = payload;
    return true;
  }

 private:
  int index_;
  bool can_seed_;
};

/// Scalar observation of x plus a static bias: f = z - (x + b).
class BiasedScalarUpdateModel : public mhe::UpdateModel {
 public:
  BiasedScalarUpdateModel(BlockId bias, int index = 0) : bias_(bias), index_(index) {}

  std::string name() const override { return "biased_scalar_update"; }
  int residual_dim() const override { return 1; }
  std::vector<int> state_blocks() const override { return {index_}; }
  std::vector<BlockId> static_blocks() const override { return {bias_}; }

  Vec innovation(const mhe::Values& values, const std::vector<BlockId>& blocks,
                 const Vec& payload, std::vector<Mat>* jacobians) const override {
    Vec f(1);
    f(0) = payload(0) - values.block(blocks[0]).value(0) - values.block(blocks[1]).value(0);
    if (jacobians) {
      jacobians->clear();
      jacobians->push_back(-Mat::Identity(1, 1));
      jacobians->push_back(-Mat::Identity(1, 1));
    }
    return f;
  }

  bool seed(const mhe::Values&, const Vec& payload,
            std::vector<Vec>* state_values) const override {
    (*state_values)[index_] = payload;
    return true;
  }

 private:
  BlockId bias_;
  int index_;
};

/// Scalar random walk on state block `index`: x' = x, Q = q * dt.
class RandomWalk1D : public mhe::ProcessModel {
 public:
  explicit RandomWalk1D(double q, int index = 0) : q_(q), index_(index) {}

  std::string name() const override { return "random_walk"; }
  std::vector<int> state_blocks() const override { return {index_}; }
  std::vector<BlockId> static_blocks() const override { return {}; }
  int tangent_dim() const override { return 1; }

  void step(const std::vector<Vec>& x, const Vec&, double dt, const mhe::Values&,
            std::vector<Vec>* next, Mat* F, Mat* Q,
            std::vector<Mat>* dstatics) const override {
    if (next) *next = x;
    if (F) *F = Mat::Identity(1, 1);
    if (Q) *Q = Mat::Constant(1, 1, q_ * dt);
    if (dstatics) dstatics->clear();
  }

 private:
  double q_;
  int index_;
};

/// 1D constant-velocity model over blocks {p, v}: p' = p + v dt.
class ConstVel1D : public mhe::ProcessModel {
 public:
  ConstVel1D(double qp, double qv) : qp_(qp), qv_(qv) {}

  std::string name() const override { return "constvel_1d"; }
  std::vector<int> state_blocks() const override { return {0, 1}; }
  std::vector<BlockId> static_blocks() const override { return {}; }
  int tangent_dim() const override { return 2; }

  void step(const std::vector<Vec>& x, const Vec&, double dt, const mhe::Values&,
            std::vector<Vec>* next, Mat* F, Mat* Q,
            std::vector<Mat>* dstatics) const override {
    if (next) {
      next->resize(2);
      (*next)[0] = x[0] + x[1] * dt;
      (*next)[1] = x[1];
    }
    if (F) {
      *F = Mat::Identity(2, 2);
      (*F)(0, 1) = dt;
    }
    if (Q) {
      *Q = Mat::Zero(2, 2);
      (*Q)(0, 0) = qp_ * dt;
      (*Q)(1, 1) = qv_ * dt;
    }
    if (dstatics) dstatics->clear();
  }

 private:
  double qp_, qv_;
};

/// Scalar Kalman filter matching the random-walk + scalar-update fixture.
struct ScalarKalman {
  double x = 0.0;
  double p = 0.0;  // variance

  void predict(double q_dt) { p += q_dt; }
  void update(double z, double r) {
    const double k = p / (p + r);
    x += k * (z - x);
    p *= (1.0 - k);
  }
};

inline mhe::UpdateMeasurement scalar_meas(double stamp, double z, double sigma) {
  mhe::UpdateMeasurement m;
  m.stamp = stamp;
  m.payload = Vec::Constant(1, z);
  m.weight_sqrt = Mat::Constant(1, 1, 1.0 / sigma);
  return m;
}

}  // namespace fixtures
