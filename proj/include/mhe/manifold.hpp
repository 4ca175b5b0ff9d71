#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace mhe {

/// Error thrown when an operation is called with inconsistent dimensions or
/// values that violate a manifold constraint.
class ContractViolation : public std::runtime_error {
 public:
  explicit ContractViolation(const std::string& what) : std::runtime_error(what) {}
};

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Parameter-block manifold. Values live in the ambient space, increments in
/// the tangent space.
class Manifold {
 public:
  enum class Kind { Euclidean, UnitQuaternion, Angle };

  static Manifold Euclidean(int n);
  static Manifold UnitQuaternion();
  static Manifold Angle();

  Kind kind() const { return kind_; }
  int ambient_dim() const { return ambient_dim_; }
  int tangent_dim() const { return tangent_dim_; }

  /// x boxplus delta. Result satisfies the manifold constraint.
  Vec boxplus(const Vec& x, const Vec& delta) const;

  /// y boxminus x, the tangent-space difference at x. Inverse of boxplus for
  /// small increments.
  Vec boxminus(const Vec& y, const Vec& x) const;

  /// True if v satisfies the manifold constraint within tol.
  bool is_valid(const Vec& v, double tol = 1e-9) const;

  bool operator==(const Manifold& other) const {
    return kind_ == other.kind_ && ambient_dim_ == other.ambient_dim_;
  }

 private:
  Manifold(Kind kind, int ambient, int tangent)
      : kind_(kind), ambient_dim_(ambient), tangent_dim_(tangent) {}

  Kind kind_;
  int ambient_dim_;
  int tangent_dim_;
};

/// Wrap an angle into (-pi, pi].
double wrap_angle(double a);

/// A single estimated quantity: manifold, ambient value, and an active flag.
/// Inactive blocks keep their values but never receive increments.
struct ParameterBlock {
  Manifold manifold = Manifold::Euclidean(0);
  Vec value;
  bool active = true;
  std::string name;
};

}  // namespace mhe
