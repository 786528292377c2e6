#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace eft {

using Joints3D = Eigen::Matrix3Xd;     // one column per joint, meters
using Keypoints2D = Eigen::Matrix2Xd;  // one column per joint, pixels

inline constexpr int kRootParent = -1;

/// Articulated template: parent tree, rest bone offsets and a linear shape basis.
///
/// Joint 0 is the root and `parents[j] < j` for every other joint, so a
/// single forward sweep visits parents before children.
struct Skeleton {
  int num_joints = 0;
  int num_shape_dims = 0;
  std::vector<int> parents;
  std::vector<std::string> names;
  Joints3D rest_offsets;        // offset of each joint from its parent at zero shape
  Eigen::MatrixXd shape_basis;  // (3 * num_joints) x num_shape_dims, rows ordered joint-major
  std::vector<std::pair<int, int>> leg_chains;  // (knee, ankle)
  std::vector<std::pair<int, int>> mirror_pairs;  // (left, right)
  std::vector<int> hip_joints;
  std::vector<int> ankle_joints;
  std::vector<int> torso_joints;
  std::vector<int> upper_body_joints;  // shoulders down to the hips
  std::vector<int> face_arm_joints;    // head and shoulders down to the elbows

  /// Throws ParameterError when the tree or index tables are inconsistent.
  void validate() const;
};

struct BodyParams {
  Eigen::VectorXd pose;   // 3 * num_joints axis-angle entries, radians
  Eigen::VectorXd shape;  // num_shape_dims coefficients

  static BodyParams zeros(const Skeleton& skeleton);
  Eigen::Vector3d joint_rotation(int joint) const { return pose.segment<3>(3 * joint); }
};

/// Canonical 24-joint humanoid when `seed == 0 && num_joints == 24`,
/// otherwise a random tree derived from `seed`.
Skeleton make_template(int num_joints, int num_shape_dims, std::uint64_t seed);

/// Exponential map from axis-angle to a rotation matrix.
Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle);

/// Partial derivatives dR/dv_k for k = 0, 1, 2.
std::array<Eigen::Matrix3d, 3> rodrigues_jacobian(const Eigen::Vector3d& axis_angle);

/// Per-joint bone offsets for the given shape coefficients.
Joints3D shaped_offsets(const Skeleton& skeleton, std::span<const double> shape);

/// Rest-pose joint positions: shaped offsets accumulated down the tree.
Joints3D rest_joints(const Skeleton& skeleton, std::span<const double> shape);

/// Intermediate values of a forward pass, kept for the backward sweep.
struct KinematicsCache {
  std::vector<Eigen::Matrix3d> local;   // R(theta_j)
  std::vector<Eigen::Matrix3d> global;  // product of rotations from the root to j
  Joints3D offsets;
  Joints3D joints;
};

Joints3D forward_kinematics(const Skeleton& skeleton, const BodyParams& params);
void forward_kinematics(const Skeleton& skeleton, const BodyParams& params, KinematicsCache& cache);

/// Vector-Jacobian product: accumulates dL/dpose and dL/dshape given dL/dJ.
void forward_kinematics_backward(const Skeleton& skeleton, const BodyParams& params,
                                 const KinematicsCache& cache, const Joints3D& grad_joints,
                                 Eigen::Ref<Eigen::VectorXd> grad_pose,
                                 Eigen::Ref<Eigen::VectorXd> grad_shape);

/// Versioned JSON text form; `skeleton_from_text(skeleton_to_text(s))` is exact.
std::string skeleton_to_text(const Skeleton& skeleton);
Skeleton skeleton_from_text(const std::string& text);
Skeleton load_skeleton(const std::string& path);
void save_skeleton(const Skeleton& skeleton, const std::string& path);

/// Hex SHA-256 of the canonical text form.
std::string skeleton_hash(const Skeleton& skeleton);

}  // namespace eft
