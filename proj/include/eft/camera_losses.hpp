#pragma once

#include <Eigen/Core>
#include <vector>

#include "eft/skeleton.hpp"

namespace eft {

inline constexpr double kCropSize = 224.0;
inline constexpr double kCropHalf = kCropSize / 2.0;
inline constexpr int kDefaultMinVisible = 5;

/// Weak-perspective camera: p = scale * (x, y) + translation.
struct CameraParams {
  double scale = 1.0;                                 // pixels per meter
  Eigen::Vector2d translation = Eigen::Vector2d::Zero();  // pixels

  bool valid() const;
};

/// Unconstrained camera coordinates shared by the regressor head and the
/// fitters: (log scale, (tx - 112) / 112, (ty - 112) / 112).
CameraParams camera_from_code(const Eigen::Vector3d& code);
Eigen::Vector3d camera_to_code(const CameraParams& camera);
/// d(loss)/d(code) given d(loss)/d(scale) and d(loss)/d(translation).
Eigen::Vector3d camera_code_backward(const CameraParams& camera, double grad_scale,
                                     const Eigen::Vector2d& grad_translation);

/// 2D keypoints in the 224x224 crop frame with per-joint confidence in [0, 1].
struct Observation {
  Keypoints2D keypoints;
  Eigen::VectorXd confidence;

  int num_joints() const { return static_cast<int>(confidence.size()); }
  int visible_count() const;
  bool valid(int min_visible = kDefaultMinVisible) const;
};

/// Per-joint include flags; an empty mask includes every joint.
using JointMask = std::vector<bool>;

JointMask mask_excluding(const Skeleton& skeleton, const std::vector<int>& excluded);

struct LossWeights {
  double lambda_shape = 1e-3;
  double mu_3d = 1.0;
  double tau_params = 0.1;
  double prior_weight = 1.0;
  double leg_orient_weight = 1.0;

  bool valid() const;
};

Keypoints2D project_weak_perspective(const CameraParams& camera, const Joints3D& joints);

/// Backward of the projection: accumulates into grad_joints, grad_scale, grad_translation.
void project_weak_perspective_backward(const CameraParams& camera, const Joints3D& joints,
                                       const Keypoints2D& grad_pred, Joints3D& grad_joints,
                                       double& grad_scale, Eigen::Vector2d& grad_translation);

// Each loss optionally accumulates `scale * d(loss)/d(input)` into the
// supplied gradient buffers.

/// Confidence-weighted mean squared distance over visible, unmasked joints.
double loss_reprojection(const Keypoints2D& pred, const Observation& obs, const JointMask& mask = {},
                         Keypoints2D* grad = nullptr, double scale = 1.0);

/// Sum over leg chains of (1 - cos) between predicted and observed knee->ankle directions.
double loss_leg_orientation(const Keypoints2D& pred, const Observation& obs, const Skeleton& skeleton,
                            Keypoints2D* grad = nullptr, double scale = 1.0);

/// Root-relative mean squared joint distance.
double loss_3d_joints(const Joints3D& pred, const Joints3D& gt, Joints3D* grad = nullptr, double scale = 1.0);

/// Mean squared difference over the concatenated (pose, shape) vector.
double loss_params(const BodyParams& pred, const BodyParams& gt, BodyParams* grad = nullptr, double scale = 1.0);

double loss_shape_reg(const Eigen::VectorXd& shape, double lambda, Eigen::VectorXd* grad = nullptr,
                      double scale = 1.0);

}  // namespace eft
