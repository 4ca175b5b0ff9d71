#include "mhe/manifold.hpp"

#include <cmath>

namespace mhe {

namespace {

void check_dim(const Vec& v, int expected, const char* what) {
  if (v.size() != expected) {
    throw ContractViolation(std::string(what) + ": expected dimension " +
                            std::to_string(expected) + ", got " +
                            std::to_string(v.size()));
  }
}

// Quaternions stored as (w, x, y, z).
Eigen::Vector4d quat_mul(const Eigen::Vector4d& a, const Eigen::Vector4d& b) {
  Eigen::Vector4d r;
  r(0) = a(0) * b(0) - a(1) * b(1) - a(2) * b(2) - a(3) * b(3);
  r(1) = a(0) * b(1) + a(1) * b(0) + a(2) * b(3) - a(3) * b(2);
  r(2) = a(0) * b(2) - a(1) * b(3) + a(2) * b(0) + a(3) * b(1);
  r(3) = a(0) * b(3) + a(1) * b(2) - a(2) * b(1) + a(3) * b(0);
  return r;
}

Eigen::Vector4d quat_exp(const Eigen::Vector3d& phi) {
  const double theta = phi.norm();
  Eigen::Vector4d q;
  if (theta < 1e-12) {
    // First-order expansion; renormalized by the caller.
    q << 1.0, 0.5 * phi(0), 0.5 * phi(1), 0.5 * phi(2);
  } else {
    const double half = 0.5 * theta;
    const Eigen::Vector3d axis = phi / theta;
    q(0) = std::cos(half);
    q.tail<3>() = std::sin(half) * axis;
  }
  return q.normalized();
}

Eigen::Vector3d quat_log(Eigen::Vector4d q) {
  // Shortest rotation: resolve the double cover by forcing w >= 0.
  if (q(0) < 0.0) q = -q;
  const double vn = q.tail<3>().norm();
  if (vn < 1e-12) return 2.0 * q.tail<3>();
  const double theta = 2.0 * std::atan2(vn, q(0));
  return (theta / vn) * q.tail<3>();
}

}  // namespace

double wrap_angle(double a) {
  if (a > -M_PI && a <= M_PI) return a;  // already wrapped; keep it exact
  double r = std::fmod(a + M_PI, 2.0 * M_PI);
  if (r <= 0.0) r += 2.0 * M_PI;
  return r - M_PI;
}

Manifold Manifold::Euclidean(int n) { return Manifold(Kind::Euclidean, n, n); }
Manifold Manifold::UnitQuaternion() { return Manifold(Kind::UnitQuaternion, 4, 3); }
Manifold Manifold::Angle() { return Manifold(Kind::Angle, 1, 1); }

Vec Manifold::boxplus(const Vec& x, const Vec& delta) const {
  check_dim(x, ambient_dim_, "boxplus value");
  check_dim(delta, tangent_dim_, "boxplus increment");
  switch (kind_) {
    case Kind::Euclidean:
      return x + delta;
    case Kind::Angle: {
      Vec r(1);
      r(0) = wrap_angle(x(0) + delta(0));
      return r;
    }
    case Kind::UnitQuaternion: {
      // Left-multiplicative increment: q' = exp(delta) * q.
      const Eigen::Vector4d q = quat_mul(quat_exp(delta.head<3>()),
                                         Eigen::Vector4d(x(0), x(1), x(2), x(3)));
      return q.normalized();
    }
  }
  throw ContractViolation("boxplus: unknown manifold kind");
}

Vec Manifold::boxminus(const Vec& y, const Vec& x) const {
  check_dim(y, ambient_dim_, "boxminus lhs");
  check_dim(x, ambient_dim_, "boxminus rhs");
  switch (kind_) {
    case Kind::Euclidean:
      return y - x;
    case Kind::Angle: {
      Vec r(1);
      r(0) = wrap_angle(y(0) - x(0));
      return r;
    }
    case Kind::UnitQuaternion: {
      // log(q_y * q_x^-1) with the relative quaternion flipped to w >= 0.
      const Eigen::Vector4d qy(y(0), y(1), y(2), y(3));
      const Eigen::Vector4d qx_inv(x(0), -x(1), -x(2), -x(3));
      return quat_log(quat_mul(qy, qx_inv));
    }
  }
  throw ContractViolation("boxminus: unknown manifold kind");
}

bool Manifold::is_valid(const Vec& v, double tol) const {
  if (v.size() != ambient_dim_) return false;
  if (!v.allFinite()) return false;
  switch (kind_) {
    case Kind::Euclidean:
      return true;
    case Kind::Angle:
      return v(0) > -M_PI - tol && v(0) <= M_PI + tol;
    case Kind::UnitQuaternion:
      return std::abs(v.norm() - 1.0) < tol;
  }
  return false;
}

}  // namespace mhe
