#include "eft/body_objective.hpp"

#include <cmath>

#include "eft/errors.hpp"

namespace eft {

BodyEvaluation evaluate_body_loss(const BodyLossTerms& terms, const BodyParams& params,
                                  const Eigen::Vector3d& camera_code, BodyGradient* grad) {
  if (!terms.skeleton) throw ParameterError("body loss needs a skeleton");
  const Skeleton& sk = *terms.skeleton;
  const int n = sk.num_joints;

  KinematicsCache cache;
  forward_kinematics(sk, params, cache);
  const CameraParams camera = camera_from_code(camera_code);
  BodyEvaluation out;
  out.joints = cache.joints;
  out.projected = project_weak_perspective(camera, cache.joints);
  BodyLossBreakdown& loss = out.loss;

  Keypoints2D g2d;
  Joints3D g3d;
  if (grad) {
    g2d = Keypoints2D::Zero(2, n);
    g3d = Joints3D::Zero(3, n);
    grad->params = BodyParams::zeros(sk);
    grad->camera_code.setZero();
  }

  if (terms.observation && terms.reproj_weight != 0.0) {
    const double unit2 = terms.reproj_unit * terms.reproj_unit;
    loss.reproj = loss_reprojection(out.projected, *terms.observation, terms.reproj_mask, grad ? &g2d : nullptr,
                                    terms.reproj_weight / unit2) / unit2;
    loss.total += terms.reproj_weight * loss.reproj;
  }
  if (terms.observation && terms.leg_weight != 0.0) {
    loss.leg = loss_leg_orientation(out.projected, *terms.observation, sk, grad ? &g2d : nullptr, terms.leg_weight);
    loss.total += terms.leg_weight * loss.leg;
  }
  if (terms.prior && terms.prior_weight != 0.0) {
    const auto body_pose = params.pose.tail(params.pose.size() - 3);
    if (grad) {
      auto g = grad->params.pose.tail(params.pose.size() - 3);
      loss.prior = loss_gmm_prior(*terms.prior, body_pose, g, terms.prior_weight);
    } else {
      loss.prior = loss_gmm_prior(*terms.prior, body_pose);
    }
    loss.total += terms.prior_weight * loss.prior;
  }
  if (terms.lambda_shape != 0.0) {
    loss.shape = loss_shape_reg(params.shape, terms.lambda_shape, grad ? &grad->params.shape : nullptr);
    loss.total += loss.shape;
  }
  if (terms.gt_joints && terms.mu_3d != 0.0) {
    loss.joints3d = loss_3d_joints(cache.joints, *terms.gt_joints, grad ? &g3d : nullptr, terms.mu_3d);
    loss.total += terms.mu_3d * loss.joints3d;
  }
  if (terms.gt_params && terms.tau_params != 0.0) {
    loss.params = loss_params(params, *terms.gt_params, grad ? &grad->params : nullptr, terms.tau_params);
    loss.total += terms.tau_params * loss.params;
  }
  if (!std::isfinite(loss.total)) throw EvaluationError("body loss is not finite");

  if (grad) {
    double g_scale = 0.0;
    Eigen::Vector2d g_trans = Eigen::Vector2d::Zero();
    project_weak_perspective_backward(camera, cache.joints, g2d, g3d, g_scale, g_trans);
    grad->camera_code = camera_code_backward(camera, g_scale, g_trans);
    forward_kinematics_backward(sk, params, cache, g3d, grad->params.pose, grad->params.shape);
  }
  return out;
}

ParamVector body_param_vector(const Skeleton& skeleton, const BodyParams& params, const Eigen::Vector3d& camera_code) {
  ParamVector v;
  v.add_segment("pose", 3 * skeleton.num_joints);
  v.add_segment("shape", skeleton.num_shape_dims);
  v.add_segment("camera", 3);
  v.slice("pose") = params.pose;
  v.slice("shape") = params.shape;
  v.slice("camera") = camera_code;
  return v;
}

BodyParams body_params_from(const ParamVector& v) { return {v.slice("pose"), v.slice("shape")}; }

Eigen::Vector3d camera_code_from(const ParamVector& v) { return v.slice("camera"); }

double BodyFitObjective::evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> grad) const {
  const Skeleton& sk = *terms_.skeleton;
  const Eigen::Index np = 3 * sk.num_joints;
  const Eigen::Index ns = sk.num_shape_dims;
  if (x.size() != np + ns + 3) throw ParameterError("flat body vector has the wrong length");
  const BodyParams params{x.head(np), x.segment(np, ns)};
  const Eigen::Vector3d code = x.tail<3>();
  if (grad.size() == 0) return evaluate_body_loss(terms_, params, code).loss.total;
  BodyGradient g;
  const double v = evaluate_body_loss(terms_, params, code, &g).loss.total;
  grad.head(np) = g.params.pose;
  grad.segment(np, ns) = g.params.shape;
  grad.tail<3>() = g.camera_code;
  return v;
}

}  // namespace eft
