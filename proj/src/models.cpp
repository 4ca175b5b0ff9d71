#include "mhe/models.hpp"

#include <cmath>

namespace mhe {

Eigen::Matrix2d rot2(double heading) {
  const double c = std::cos(heading), s = std::sin(heading);
  Eigen::Matrix2d r;
  r << c, -s, s, c;
  return r;
}

Eigen::Matrix2d drot2(double heading) {
  const double c = std::cos(heading), s = std::sin(heading);
  Eigen::Matrix2d r;
  r << -s, -c, c, -s;
  return r;
}

void DiffDriveParams::validate() const {
  if (wheel_radius <= 0.0 || track_width <= 0.0)
    throw ConfigError("DiffDriveParams: wheel_radius and track_width must be > 0");
  if (slip_noise_scale_moving < slip_noise_scale_stationary)
    throw ConfigError("DiffDriveParams: moving slip scale must be >= stationary scale");
}

void from_json(const nlohmann::json& j, DiffDriveParams& p) {
  p.wheel_radius = j.value("wheel_radius", p.wheel_radius);
  p.track_width = j.value("track_width", p.track_width);
  p.slip_noise_scale_moving = j.value("slip_noise_scale_moving", p.slip_noise_scale_moving);
  p.slip_noise_scale_stationary =
      j.value("slip_noise_scale_stationary", p.slip_noise_scale_stationary);
  p.sigma_wheel = j.value("sigma_wheel", p.sigma_wheel);
  p.sigma_floor_pos = j.value("sigma_floor_pos", p.sigma_floor_pos);
  p.sigma_floor_heading = j.value("sigma_floor_heading", p.sigma_floor_heading);
  p.slip_threshold = j.value("slip_threshold", p.slip_threshold);
  p.validate();
}

void from_json(const nlohmann::json& j, ConstVelParams& p) {
  p.sigma_gyro = j.value("sigma_gyro", p.sigma_gyro);
  p.sigma_accel = j.value("sigma_accel", p.sigma_accel);
  p.sigma_floor_pos = j.value("sigma_floor_pos", p.sigma_floor_pos);
  p.sigma_floor_heading = j.value("sigma_floor_heading", p.sigma_floor_heading);
  p.sigma_floor_vel = j.value("sigma_floor_vel", p.sigma_floor_vel);
}

DiffDriveProcessModel::DiffDriveProcessModel(DiffDriveParams params, int position_index,
                                             int heading_index)
    : params_(std::move(params)), position_index_(position_index),
      heading_index_(heading_index) {
  params_.validate();
}

void DiffDriveProcessModel::step(const std::vector<Vec>& x, const Vec& u, double dt,
                                 const Values&, std::vector<Vec>* next, Mat* F,
                                 Mat* Q, std::vector<Mat>* dstatics) const {
  const Eigen::Vector2d p = x[0].head<2>();
  const double psi = x[1](0);
  const double wl = u(0), wr = u(1);
  const double r = params_.wheel_radius, w = params_.track_width;

  const double v = r * (wl + wr) / 2.0;
  const double psi_dot = r * (wr - wl) / w;
  const double psi_mid = psi + 0.5 * psi_dot * dt;  // midpoint integration
  const Eigen::Vector2d dir(std::cos(psi_mid), std::sin(psi_mid));
  const Eigen::Vector2d dir_d(-std::sin(psi_mid), std::cos(psi_mid));

  next->resize(2);
  (*next)[0] = p + v * dt * dir;
  (*next)[1] = Vec::Constant(1, wrap_angle(psi + psi_dot * dt));

  if (F) {
    *F = Mat::Identity(3, 3);
    F->block<2, 1>(0, 2) = v * dt * dir_d;
  }
  if (Q) {
    // Input noise mapped through the step, plus a small floor for rank.
    Mat G(3, 2);
    G.block<2, 1>(0, 0) = dt * (r / 2.0) * dir + v * dt * dir_d * (0.5 * dt * (-r / w));
    G.block<2, 1>(0, 1) = dt * (r / 2.0) * dir + v * dt * dir_d * (0.5 * dt * (r / w));
    G(2, 0) = -dt * r / w;
    G(2, 1) = dt * r / w;
    const bool moving = std::abs(wl) + std::abs(wr) > params_.slip_threshold;
    const double scale = moving ? params_.slip_noise_scale_moving
                                : params_.slip_noise_scale_stationary;
    Vec floor(3);
    floor << params_.sigma_floor_pos, params_.sigma_floor_pos,
        params_.sigma_floor_heading;
    *Q = scale * scale * dt *
         floor.cwiseProduct(floor).asDiagonal().toDenseMatrix();
    // Encoder noise only drives the pose while the wheels are turning; this
    // keeps a stationary platform pinned instead of drifting with updates.
    if (moving)
      *Q += scale * scale * params_.sigma_wheel * params_.sigma_wheel * G *
            G.transpose();
  }
  if (dstatics) dstatics->clear();
}

ConstVelProcessModel::ConstVelProcessModel(ConstVelParams params, int position_index,
                                           int heading_index, int velocity_index)
    : params_(std::move(params)), position_index_(position_index),
      heading_index_(heading_index), velocity_index_(velocity_index) {}

void ConstVelProcessModel::step(const std::vector<Vec>& x, const Vec& u, double dt,
                                const Values&, std::vector<Vec>* next, Mat* F,
                                Mat* Q, std::vector<Mat>* dstatics) const {
  const Eigen::Vector2d p = x[0].head<2>();
  const double psi = x[1](0);
  const Eigen::Vector2d v = x[2].head<2>();
  const double omega = u(0);
  const Eigen::Vector2d a = u.segment<2>(1);

  // Semi-implicit order: heading, then velocity, then position.
  const double psi_n = wrap_angle(psi + omega * dt);
  const Eigen::Matrix2d R = rot2(psi_n);
  const Eigen::Matrix2d S = drot2(psi_n);
  const Eigen::Vector2d v_n = v + R * a * dt;
  const Eigen::Vector2d p_n = p + v_n * dt;

  next->resize(3);
  (*next)[0] = p_n;
  (*next)[1] = Vec::Constant(1, psi_n);
  (*next)[2] = v_n;

  const Eigen::Vector2d Sa_dt = S * a * dt;
  if (F) {
    *F = Mat::Identity(5, 5);
    F->block<2, 1>(0, 2) = dt * Sa_dt;
    F->block<2, 2>(0, 3) = dt * Eigen::Matrix2d::Identity();
    F->block<2, 1>(3, 2) = Sa_dt;
  }
  if (Q) {
    Mat G = Mat::Zero(5, 3);
    G.block<2, 1>(0, 0) = dt * dt * Sa_dt;
    G.block<2, 2>(0, 1) = dt * dt * R;
    G(2, 0) = dt;
    G.block<2, 1>(3, 0) = dt * Sa_dt;
    G.block<2, 2>(3, 1) = dt * R;
    Vec sigma_u(3);
    sigma_u << params_.sigma_gyro, params_.sigma_accel, params_.sigma_accel;
    Vec floor(5);
    floor << params_.sigma_floor_pos, params_.sigma_floor_pos,
        params_.sigma_floor_heading, params_.sigma_floor_vel, params_.sigma_floor_vel;
    *Q = G * sigma_u.cwiseProduct(sigma_u).asDiagonal() * G.transpose() +
         dt * floor.cwiseProduct(floor).asDiagonal().toDenseMatrix();
  }
  if (dstatics) dstatics->clear();
}

Vec PoseUpdateModel::innovation(const Values& values, const std::vector<BlockId>& blocks,
                                const Vec& payload, std::vector<Mat>* jacobians) const {
  const Vec& p = values.block(blocks[0]).value;
  const double psi = values.block(blocks[1]).value(0);

  Vec f(3);
  f.head<2>() = payload.head<2>() - p.head<2>();
  f(2) = wrap_angle(payload(2) - psi);

  if (jacobians) {
    jacobians->assign(2, Mat());
    (*jacobians)[0] = Mat::Zero(3, 2);
    (*jacobians)[0].block<2, 2>(0, 0) = -Eigen::Matrix2d::Identity();
    (*jacobians)[1] = Mat::Zero(3, 1);
    (*jacobians)[1](2, 0) = -1.0;
  }
  return f;
}

bool PoseUpdateModel::seed(const Values&, const Vec& payload,
                           std::vector<Vec>* state_values) const {
  (*state_values)[position_index_] = payload.head<2>();
  (*state_values)[heading_index_] = Vec::Constant(1, wrap_angle(payload(2)));
  return true;
}

LandmarkUpdateModel::LandmarkUpdateModel(BlockId landmark_position,
                                         BlockId landmark_heading, BlockId extrinsic,
                                         int position_index, int heading_index)
    : landmark_position_(landmark_position), landmark_heading_(landmark_heading),
      extrinsic_(extrinsic), position_index_(position_index),
      heading_index_(heading_index) {}

std::vector<BlockId> LandmarkUpdateModel::static_blocks() const {
  std::vector<BlockId> s{landmark_position_, landmark_heading_};
  if (extrinsic_ >= 0) s.push_back(extrinsic_);
  return s;
}

Vec LandmarkUpdateModel::innovation(const Values& values,
                                    const std::vector<BlockId>& blocks,
                                    const Vec& payload,
                                    std::vector<Mat>* jacobians) const {
  const Eigen::Vector2d p = values.block(blocks[0]).value.head<2>();
  const double psi = values.block(blocks[1]).value(0);
  const Eigen::Vector2d l = values.block(blocks[2]).value.head<2>();
  const double l_psi = values.block(blocks[3]).value(0);
  const bool has_ext = extrinsic_ >= 0;
  const Eigen::Vector2d t_ext =
      has_ext ? Eigen::Vector2d(values.block(blocks[4]).value.head<2>())
              : Eigen::Vector2d::Zero();

  const Eigen::Matrix2d R = rot2(psi);
  const Eigen::Matrix2d Sd = drot2(psi);
  const Eigen::Vector2d z_pos = R.transpose() * (l - p) - t_ext;
  const double z_psi = wrap_angle(l_psi - psi);

  Vec f(3);
  f.head<2>() = payload.head<2>() - z_pos;
  f(2) = wrap_angle(payload(2) - z_psi);

  if (jacobians) {
    jacobians->assign(blocks.size(), Mat::Zero(3, 2));
    // state position
    (*jacobians)[0].block<2, 2>(0, 0) = R.transpose();
    // state heading
    (*jacobians)[1] = Mat::Zero(3, 1);
    (*jacobians)[1].block<2, 1>(0, 0) = -Sd.transpose() * (l - p);
    (*jacobians)[1](2, 0) = 1.0;
    // landmark position
    (*jacobians)[2].block<2, 2>(0, 0) = -R.transpose();
    // landmark heading
    (*jacobians)[3] = Mat::Zero(3, 1);
    (*jacobians)[3](2, 0) = -1.0;
    if (has_ext) {
      (*jacobians)[4] = Mat::Zero(3, 2);
      (*jacobians)[4].block<2, 2>(0, 0) = Eigen::Matrix2d::Identity();
    }
  }
  return f;
}

bool LandmarkUpdateModel::seed(const Values& values, const Vec& payload,
                               std::vector<Vec>* state_values) const {
  const Eigen::Vector2d l = values.block(landmark_position_).value.head<2>();
  const double l_psi = values.block(landmark_heading_).value(0);
  const Eigen::Vector2d t_ext =
      extrinsic_ >= 0 ? Eigen::Vector2d(values.block(extrinsic_).value.head<2>())
                      : Eigen::Vector2d::Zero();

  const double psi = wrap_angle(l_psi - payload(2));
  const Eigen::Vector2d p = l - rot2(psi) * (payload.head<2>() + t_ext);
  (*state_values)[position_index_] = p;
  (*state_values)[heading_index_] = Vec::Constant(1, psi);
  return true;
}

JointOdometryUpdateModel::JointOdometryUpdateModel(
    BlockId link_lengths, std::vector<BlockId> joint_biases, int base_position_index,
    int base_heading_index, int ee_position_index, int ee_heading_index)
    : link_lengths_(link_lengths), joint_biases_(std::move(joint_biases)),
      base_position_index_(base_position_index), base_heading_index_(base_heading_index),
      ee_position_index_(ee_position_index), ee_heading_index_(ee_heading_index) {
  if (joint_biases_.size() > 2)
    throw ConfigError("JointOdometryUpdateModel: at most one bias per joint");
}

std::vector<BlockId> JointOdometryUpdateModel::static_blocks() const {
  std::vector<BlockId> s{link_lengths_};
  s.insert(s.end(), joint_biases_.begin(), joint_biases_.end());
  return s;
}

PlanarPose JointOdometryUpdateModel::forward_kinematics(const Vec& link_lengths,
                                                        double alpha1, double alpha2) {
  const double l1 = link_lengths(0), l2 = link_lengths(1);
  PlanarPose ee;
  ee.position << l1 * std::cos(alpha1) + l2 * std::cos(alpha1 + alpha2),
      l1 * std::sin(alpha1) + l2 * std::sin(alpha1 + alpha2);
  ee.heading = alpha1 + alpha2;
  return ee;
}

Vec JointOdometryUpdateModel::innovation(const Values& values,
                                         const std::vector<BlockId>& blocks,
                                         const Vec& payload,
                                         std::vector<Mat>* jacobians) const {
  const Eigen::Vector2d p_b = values.block(blocks[0]).value.head<2>();
  const double psi_b = values.block(blocks[1]).value(0);
  const Eigen::Vector2d p_e = values.block(blocks[2]).value.head<2>();
  const double psi_e = values.block(blocks[3]).value(0);
  const Vec& lengths = values.block(blocks[4]).value;

  double alpha1 = payload(0), alpha2 = payload(1);
  const size_t nb = joint_biases_.size();
  if (nb >= 1) alpha1 += values.block(blocks[5]).value(0);
  if (nb >= 2) alpha2 += values.block(blocks[6]).value(0);

  const PlanarPose fk = forward_kinematics(lengths, alpha1, alpha2);
  const Eigen::Matrix2d R = rot2(psi_b);
  const Eigen::Matrix2d Sd = drot2(psi_b);
  const Eigen::Vector2d pred_pos = p_b + R * fk.position;
  const double pred_psi = wrap_angle(psi_b + fk.heading);

  Vec f(3);
  f.head<2>() = p_e - pred_pos;
  f(2) = wrap_angle(psi_e - pred_psi);

  if (jacobians) {
    const double l1 = lengths(0), l2 = lengths(1);
    const double s1 = std::sin(alpha1), c1 = std::cos(alpha1);
    const double s12 = std::sin(alpha1 + alpha2), c12 = std::cos(alpha1 + alpha2);
    Eigen::Vector2d dfk_da1(-l1 * s1 - l2 * s12, l1 * c1 + l2 * c12);
    Eigen::Vector2d dfk_da2(-l2 * s12, l2 * c12);

    jacobians->assign(blocks.size(), Mat());
    (*jacobians)[0] = Mat::Zero(3, 2);
    (*jacobians)[0].block<2, 2>(0, 0) = -Eigen::Matrix2d::Identity();
    (*jacobians)[1] = Mat::Zero(3, 1);
    (*jacobians)[1].block<2, 1>(0, 0) = -Sd * fk.position;
    (*jacobians)[1](2, 0) = -1.0;
    (*jacobians)[2] = Mat::Zero(3, 2);
    (*jacobians)[2].block<2, 2>(0, 0) = Eigen::Matrix2d::Identity();
    (*jacobians)[3] = Mat::Zero(3, 1);
    (*jacobians)[3](2, 0) = 1.0;
    // link lengths
    (*jacobians)[4] = Mat::Zero(3, 2);
    (*jacobians)[4].block<2, 1>(0, 0) = -R * Eigen::Vector2d(c1, s1);
    (*jacobians)[4].block<2, 1>(0, 1) = -R * Eigen::Vector2d(c12, s12);
    if (nb >= 1) {
      (*jacobians)[5] = Mat::Zero(3, 1);
      (*jacobians)[5].block<2, 1>(0, 0) = -R * dfk_da1;
      (*jacobians)[5](2, 0) = -1.0;
    }
    if (nb >= 2) {
      (*jacobians)[6] = Mat::Zero(3, 1);
      (*jacobians)[6].block<2, 1>(0, 0) = -R * dfk_da2;
      (*jacobians)[6](2, 0) = -1.0;
    }
  }
  return f;
}

}  // namespace mhe
