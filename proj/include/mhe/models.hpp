#pragma once

#include <nlohmann/json.hpp>

#include "mhe/problem.hpp"

namespace mhe {

/// Planar pose helpers. A pose is split into a Euclidean(2) position block
/// and an Angle heading block.
Eigen::Matrix2d rot2(double heading);
Eigen::Matrix2d drot2(double heading);  // d rot2 / d heading

struct PlanarPose {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  double heading = 0.0;
};

struct DiffDriveParams {
  double wheel_radius = 0.1;
  double track_width = 0.5;
  double slip_noise_scale_moving = 5.0;
  double slip_noise_scale_stationary = 1.0;
  double sigma_wheel = 0.05;            // rad/s, per wheel
  double sigma_floor_pos = 1e-4;        // m/sqrt(s)
  double sigma_floor_heading = 1e-4;    // rad/sqrt(s)
  double slip_threshold = 1e-3;         // rad/s on |wl| + |wr|

  void validate() const;
};

void from_json(const nlohmann::json& j, DiffDriveParams& p);

struct ConstVelParams {
  double sigma_gyro = 0.1;        // rad/s/sqrt(s)
  double sigma_accel = 0.5;       // m/s^2/sqrt(s)
  double sigma_floor_pos = 1e-4;  // m/sqrt(s)
  double sigma_floor_heading = 1e-5;
  double sigma_floor_vel = 1e-4;
};

void from_json(const nlohmann::json& j, ConstVelParams& p);

/// Unicycle integration of wheel speed measurements acting on a
/// [position, heading] portion of the state. Process noise is scaled up
/// while the wheels are turning to model slip, and stays small when they are
/// not, pinning the base in place.
class DiffDriveProcessModel : public ProcessModel {
 public:
  DiffDriveProcessModel(DiffDriveParams params, int position_index = 0,
                        int heading_index = 1);

  std::string name() const override { return "diffdrive"; }
  std::vector<int> state_blocks() const override { return {position_index_, heading_index_}; }
  std::vector<BlockId> static_blocks() const override { return {}; }
  int tangent_dim() const override { return 3; }
  void step(const std::vector<Vec>& x, const Vec& u, double dt, const Values& values,
            std::vector<Vec>* next, Mat* F, Mat* Q,
            std::vector<Mat>* dstatics) const override;

  const DiffDriveParams& params() const { return params_; }

 private:
  DiffDriveParams params_;
  int position_index_;
  int heading_index_;
};

/// Planar strapdown-style integration of [angular rate, body acceleration]
/// inputs acting on [position, heading, velocity]. Semi-implicit order:
/// heading, then velocity, then position.
class ConstVelProcessModel : public ProcessModel {
 public:
  ConstVelProcessModel(ConstVelParams params, int position_index = 0,
                       int heading_index = 1, int velocity_index = 2);

  std::string name() const override { return "constvel"; }
  std::vector<int> state_blocks() const override {
    return {position_index_, heading_index_, velocity_index_};
  }
  std::vector<BlockId> static_blocks() const override { return {}; }
  int tangent_dim() const override { return 5; }
  void step(const std::vector<Vec>& x, const Vec& u, double dt, const Values& values,
            std::vector<Vec>* next, Mat* F, Mat* Q,
            std::vector<Mat>* dstatics) const override;

 private:
  ConstVelParams params_;
  int position_index_;
  int heading_index_;
  int velocity_index_;
};

/// Direct observation of [position, heading]. Payload [x, y, heading].
class PoseUpdateModel : public UpdateModel {
 public:
  PoseUpdateModel(int position_index = 0, int heading_index = 1)
      : position_index_(position_index), heading_index_(heading_index) {}

  std::string name() const override { return "pose_update"; }
  int residual_dim() const override { return 3; }
  std::vector<int> state_blocks() const override { return {position_index_, heading_index_}; }
  std::vector<BlockId> static_blocks() const override { return {}; }
  Vec innovation(const Values& values, const std::vector<BlockId>& blocks,
                 const Vec& payload, std::vector<Mat>* jacobians) const override;
  bool seed(const Values& values, const Vec& payload,
            std::vector<Vec>* state_values) const override;

 private:
  int position_index_;
  int heading_index_;
};

/// Relative pose of a stationary landmark observed from a body-mounted
/// sensor. Payload [x, y, heading] in the sensor frame. The landmark pose is
/// a pair of static blocks; the sensor extrinsic translation (body frame) is
/// an optional static block.
class LandmarkUpdateModel : public UpdateModel {
 public:
  LandmarkUpdateModel(BlockId landmark_position, BlockId landmark_heading,
                      BlockId extrinsic = -1, int position_index = 0,
                      int heading_index = 1);

  std::string name() const override { return "landmark_update"; }
  int residual_dim() const override { return 3; }
  std::vector<int> state_blocks() const override { return {position_index_, heading_index_}; }
  std::vector<BlockId> static_blocks() const override;
  Vec innovation(const Values& values, const std::vector<BlockId>& blocks,
                 const Vec& payload, std::vector<Mat>* jacobians) const override;
  bool seed(const Values& values, const Vec& payload,
            std::vector<Vec>* state_values) const override;

 private:
  BlockId landmark_position_;
  BlockId landmark_heading_;
  BlockId extrinsic_;
  int position_index_;
  int heading_index_;
};

/// Planar two-link arm relating the base and end-effector pose portions of
/// one state through measured joint angles. Payload [theta1, theta2]. Link
/// lengths and per-joint angle biases are static blocks.
class JointOdometryUpdateModel : public UpdateModel {
 public:
  JointOdometryUpdateModel(BlockId link_lengths, std::vector<BlockId> joint_biases,
                           int base_position_index, int base_heading_index,
                           int ee_position_index, int ee_heading_index);

  std::string name() const override { return "joint_odometry"; }
  int residual_dim() const override { return 3; }
  std::vector<int> state_blocks() const override {
    return {base_position_index_, base_heading_index_, ee_position_index_,
            ee_heading_index_};
  }
  std::vector<BlockId> static_blocks() const override;
  Vec innovation(const Values& values, const std::vector<BlockId>& blocks,
                 const Vec& payload, std::vector<Mat>* jacobians) const override;

  /// Forward kinematics of the arm in the base frame.
  static PlanarPose forward_kinematics(const Vec& link_lengths, double alpha1,
                                       double alpha2);

 private:
  BlockId link_lengths_;
  std::vector<BlockId> joint_biases_;
  int base_position_index_;
  int base_heading_index_;
  int ee_position_index_;
  int ee_heading_index_;
};

}  // namespace mhe
