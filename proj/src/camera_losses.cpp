#include "eft/camera_losses.hpp"

#include <cmath>

#include "eft/errors.hpp"

namespace eft {

namespace {

bool included(const JointMask& mask, int j) { return mask.empty() || mask[static_cast<size_t>(j)]; }

void check_counts(const Keypoints2D& pred, const Observation& obs) {
  if (pred.cols() != obs.keypoints.cols() || obs.confidence.size() != obs.keypoints.cols())
    throw ParameterError("keypoint counts do not match");
}

}  // namespace

bool CameraParams::valid() const {
  return std::isfinite(scale) && scale > 0.0 && translation.allFinite();
}

CameraParams camera_from_code(const Eigen::Vector3d& code) {
  return {std::exp(code[0]), Eigen::Vector2d(kCropHalf + kCropHalf * code[1], kCropHalf + kCropHalf * code[2])};
}

Eigen::Vector3d camera_to_code(const CameraParams& camera) {
  return {std::log(camera.scale), (camera.translation.x() - kCropHalf) / kCropHalf,
          (camera.translation.y() - kCropHalf) / kCropHalf};
}

Eigen::Vector3d camera_code_backward(const CameraParams& camera, double grad_scale,
                                     const Eigen::Vector2d& grad_translation) {
  return {grad_scale * camera.scale, kCropHalf * grad_translation.x(), kCropHalf * grad_translation.y()};
}

int Observation::visible_count() const { return static_cast<int>((confidence.array() > 0.0).count()); }

bool Observation::valid(int min_visible) const {
  if (keypoints.cols() != confidence.size()) return false;
  if (!keypoints.allFinite() || !confidence.allFinite()) return false;
  if ((confidence.array() < 0.0).any() || (confidence.array() > 1.0).any()) return false;
  return visible_count() >= min_visible;
}

JointMask mask_excluding(const Skeleton& skeleton, const std::vector<int>& excluded) {
  JointMask mask(static_cast<size_t>(skeleton.num_joints), true);
  for (int j : excluded) mask.at(static_cast<size_t>(j)) = false;
  return mask;
}

bool LossWeights::valid() const {
  return lambda_shape >= 0.0 && mu_3d >= 0.0 && tau_params >= 0.0 && prior_weight >= 0.0 &&
         leg_orient_weight >= 0.0;
}

Keypoints2D project_weak_perspective(const CameraParams& camera, const Joints3D& joints) {
  Keypoints2D out = camera.scale * joints.topRows<2>();
  out.colwise() += camera.translation;
  return out;
}

void project_weak_perspective_backward(const CameraParams& camera, const Joints3D& joints,
                                       const Keypoints2D& grad_pred, Joints3D& grad_joints,
                                       double& grad_scale, Eigen::Vector2d& grad_translation) {
  grad_joints.topRows<2>() += camera.scale * grad_pred;
  grad_scale += (grad_pred.array() * joints.topRows<2>().array()).sum();
  grad_translation += grad_pred.rowwise().sum();
}

double loss_reprojection(const Keypoints2D& pred, const Observation& obs, const JointMask& mask,
                         Keypoints2D* grad, double scale) {
  check_counts(pred, obs);
  double total = 0.0;
  int count = 0;
  for (int j = 0; j < pred.cols(); ++j) {
    if (obs.confidence[j] <= 0.0 || !included(mask, j)) continue;
    total += obs.confidence[j] * (pred.col(j) - obs.keypoints.col(j)).squaredNorm();
    ++count;
  }
  if (count == 0) return 0.0;
  if (grad) {
    const double k = 2.0 * scale / count;
    for (int j = 0; j < pred.cols(); ++j) {
      if (obs.confidence[j] <= 0.0 || !included(mask, j)) continue;
      grad->col(j) += (k * obs.confidence[j]) * (pred.col(j) - obs.keypoints.col(j));
    }
  }
  return total / count;
}

double loss_leg_orientation(const Keypoints2D& pred, const Observation& obs, const Skeleton& skeleton,
                            Keypoints2D* grad, double scale) {
  check_counts(pred, obs);
  constexpr double kDegenerate = 1e-12;
  double total = 0.0;
  for (const auto& [knee, ankle] : skeleton.leg_chains) {
    if (obs.confidence[knee] <= 0.0 || obs.confidence[ankle] <= 0.0) continue;
    const Eigen::Vector2d u = pred.col(ankle) - pred.col(knee);
    const Eigen::Vector2d v = obs.keypoints.col(ankle) - obs.keypoints.col(knee);
    const double nu = u.norm();
    const double nv = v.norm();
    if (nu < kDegenerate || nv < kDegenerate) continue;
    const Eigen::Vector2d uh = u / nu;
    const Eigen::Vector2d vh = v / nv;
    const double cosine = uh.dot(vh);
    total += 1.0 - cosine;
    if (grad) {
      const Eigen::Vector2d gu = -(scale / nu) * (vh - cosine * uh);
      grad->col(ankle) += gu;
      grad->col(knee) -= gu;
    }
  }
  return total;
}

double loss_3d_joints(const Joints3D& pred, const Joints3D& gt, Joints3D* grad, double scale) {
  if (pred.cols() != gt.cols() || pred.cols() == 0) throw ParameterError("joint counts do not match");
  const int n = static_cast<int>(pred.cols());
  double total = 0.0;
  Eigen::Vector3d root_grad = Eigen::Vector3d::Zero();
  for (int j = 1; j < n; ++j) {
    const Eigen::Vector3d d = (pred.col(j) - pred.col(0)) - (gt.col(j) - gt.col(0));
    total += d.squaredNorm();
    if (grad) {
      const Eigen::Vector3d g = (2.0 * scale / n) * d;
      grad->col(j) += g;
      root_grad -= g;
    }
  }
  if (grad) grad->col(0) += root_grad;
  return total / n;
}

double loss_params(const BodyParams& pred, const BodyParams& gt, BodyParams* grad, double scale) {
  if (pred.pose.size() != gt.pose.size() || pred.shape.size() != gt.shape.size())
    throw ParameterError("parameter dimensions do not match");
  const double n = static_cast<double>(pred.pose.size() + pred.shape.size());
  const Eigen::VectorXd dp = pred.pose - gt.pose;
  const Eigen::VectorXd ds = pred.shape - gt.shape;
  if (grad) {
    grad->pose += (2.0 * scale / n) * dp;
    grad->shape += (2.0 * scale / n) * ds;
  }
  return (dp.squaredNorm() + ds.squaredNorm()) / n;
}

double loss_shape_reg(const Eigen::VectorXd& shape, double lambda, Eigen::VectorXd* grad, double scale) {
  if (lambda < 0.0) throw ParameterError("lambda must be non-negative");
  if (grad) *grad += (2.0 * lambda * scale) * shape;
  return lambda * shape.squaredNorm();
}

}  // namespace eft
