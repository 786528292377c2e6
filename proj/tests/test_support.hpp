#pragma once

// Independent reference implementations used as oracles by the tests.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <filesystem>
#include <algorithm>
#include <random>
#include <string>

#include "eft/skeleton.hpp"

namespace eft::test {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("eft_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Eigen::Vector3d random_vec3(std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  return {n(rng), n(rng), n(rng)};
}

inline BodyParams random_params(const Skeleton& sk, std::mt19937_64& rng, double pose_scale = 0.6,
                                double shape_scale = 1.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  BodyParams p = BodyParams::zeros(sk);
  for (Eigen::Index i = 0; i < p.pose.size(); ++i) p.pose[i] = pose_scale * n(rng);
  for (Eigen::Index i = 0; i < p.shape.size(); ++i) p.shape[i] = shape_scale * n(rng);
  return p;
}

/// Rotation from axis-angle via a unit quaternion.
inline Eigen::Matrix3d quaternion_rotation(const Eigen::Vector3d& v) {
  const double angle = v.norm();
  if (angle == 0.0) return Eigen::Matrix3d::Identity();
  const Eigen::Vector3d axis = v / angle;
  const Eigen::Quaterniond q(std::cos(angle / 2), axis.x() * std::sin(angle / 2), axis.y() * std::sin(angle / 2),
                             axis.z() * std::sin(angle / 2));
  return q.toRotationMatrix();
}

/// Bone offsets summed explicitly: template offset plus each basis column times its coefficient.
inline Eigen::Matrix3Xd offsets_oracle(const Skeleton& sk, const Eigen::VectorXd& shape) {
  Eigen::Matrix3Xd off(3, sk.num_joints);
  for (int j = 0; j < sk.num_joints; ++j) {
    Eigen::Vector3d o = sk.rest_offsets.col(j);
    for (int k = 0; k < sk.num_shape_dims; ++k)
      for (int a = 0; a < 3; ++a) o[a] += sk.shape_basis(3 * j + a, k) * shape[k];
    off.col(j) = o;
  }
  return off;
}

/// Rest joints by walking each joint's path to the root and summing offsets.
inline Eigen::Matrix3Xd rest_joints_oracle(const Skeleton& sk, const Eigen::VectorXd& shape) {
  const Eigen::Matrix3Xd off = offsets_oracle(sk, shape);
  Eigen::Matrix3Xd out(3, sk.num_joints);
  for (int j = 0; j < sk.num_joints; ++j) {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    for (int k = j; k != kRootParent; k = sk.parents[k]) sum += off.col(k);
    out.col(j) = sum;
  }
  return out;
}

/// Forward kinematics through 4x4 homogeneous transforms. The root transform
/// rotates its own offset; each child is parent * [R_c | offset_c].
inline Eigen::Matrix3Xd fk_oracle(const Skeleton& sk, const BodyParams& p) {
  const Eigen::Matrix3Xd off = offsets_oracle(sk, p.shape);
  std::vector<Eigen::Matrix4d> world(static_cast<size_t>(sk.num_joints));
  Eigen::Matrix3Xd out(3, sk.num_joints);
  for (int j = 0; j < sk.num_joints; ++j) {
    const Eigen::Matrix3d r = quaternion_rotation(p.pose.segment<3>(3 * j));
    Eigen::Matrix4d local = Eigen::Matrix4d::Identity();
    local.topLeftCorner<3, 3>() = r;
    local.topRightCorner<3, 1>() = off.col(j);
    if (sk.parents[j] == kRootParent) {
      Eigen::Matrix4d rot = Eigen::Matrix4d::Identity();
      rot.topLeftCorner<3, 3>() = r;
      Eigen::Matrix4d trans = Eigen::Matrix4d::Identity();
      trans.topRightCorner<3, 1>() = off.col(j);
      world[j] = rot * trans;
    } else {
      world[j] = world[static_cast<size_t>(sk.parents[j])] * local;
    }
    out.col(j) = world[j].topRightCorner<3, 1>();
  }
  return out;
}

/// Uniform random rotation (normalized Gaussian quaternion).
inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

/// Sum of squared residuals of the best similarity map with rotation fixed to `r`.
inline double residual_with_rotation(const Eigen::Matrix3Xd& pred, const Eigen::Matrix3Xd& gt,
                                     const Eigen::Matrix3d& r, bool with_scale = true) {
  const Eigen::Matrix3Xd x = pred.colwise() - pred.rowwise().mean();
  const Eigen::Matrix3Xd y = gt.colwise() - gt.rowwise().mean();
  double s = 1.0;
  if (with_scale) s = std::max(0.0, (y.array() * (r * x).array()).sum() / x.squaredNorm());
  return (s * r * x - y).squaredNorm();
}

inline double max_abs(const Eigen::MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace eft::test
