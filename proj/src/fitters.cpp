#include "eft/fitters.hpp"

#include <cmath>

#include "eft/errors.hpp"

namespace eft {

namespace {

void check_observation(const Observation& obs, const Skeleton& skeleton, int min_visible) {
  if (obs.num_joints() != skeleton.num_joints || obs.keypoints.cols() != skeleton.num_joints)
    throw InputError("observation joint count does not match the skeleton");
  if (!obs.valid(min_visible))
    throw InputError("observation needs at least " + std::to_string(min_visible) + " visible keypoints");
}

JointMask fit_mask(const Skeleton& skeleton, bool mask_hips_ankles) {
  if (!mask_hips_ankles) return {};
  std::vector<int> excluded = skeleton.hip_joints;
  excluded.insert(excluded.end(), skeleton.ankle_joints.begin(), skeleton.ankle_joints.end());
  return mask_excluding(skeleton, excluded);
}

}  // namespace

void FitConfig::validate() const {
  if (eft_max_iters < 0 || smplify_stage1_iters < 0 || smplify_stage2_iters < 0)
    throw ParameterError("iteration counts must be non-negative");
  if (!(stop_px > 0.0)) throw ParameterError("stop_px must be positive");
  if (!(eft_lr > 0.0) || !(smplify_stage1_lr > 0.0) || !(smplify_stage2_lr > 0.0))
    throw ParameterError("learning rates must be positive");
  if (!weights.valid()) throw ParameterError("loss weights must be non-negative");
}

double stopping_metric(const Keypoints2D& pred, const Observation& obs, const JointMask& mask) {
  if (pred.cols() != obs.keypoints.cols()) throw ParameterError("keypoint counts do not match");
  double total = 0.0;
  int count = 0;
  for (int j = 0; j < pred.cols(); ++j) {
    if (obs.confidence[j] <= 0.0 || !(mask.empty() || mask[static_cast<size_t>(j)])) continue;
    total += (pred.col(j) - obs.keypoints.col(j)).norm();
    ++count;
  }
  if (count == 0) throw InputError("stopping metric needs at least one visible joint");
  return total / count;
}

CameraParams fit_camera_closed_form(const Joints3D& joints, const Observation& obs, const std::vector<int>& subset) {
  std::vector<int> used;
  auto collect = [&](const std::vector<int>& candidates) {
    used.clear();
    for (int j : candidates)
      if (obs.confidence[j] > 0.0) used.push_back(j);
  };
  std::vector<int> all(static_cast<size_t>(obs.num_joints()));
  for (int j = 0; j < obs.num_joints(); ++j) all[static_cast<size_t>(j)] = j;
  collect(subset.empty() ? all : subset);
  if (used.size() < 2) collect(all);

  double wsum = 0.0;
  Eigen::Vector2d xbar = Eigen::Vector2d::Zero();
  Eigen::Vector2d pbar = Eigen::Vector2d::Zero();
  for (int j : used) {
    const double c = obs.confidence[j];
    wsum += c;
    xbar += c * joints.col(j).head<2>();
    pbar += c * obs.keypoints.col(j);
  }
  if (wsum <= 0.0) return {kInitialCameraScale, Eigen::Vector2d(kCropHalf, kCropHalf)};
  xbar /= wsum;
  pbar /= wsum;
  double num = 0.0;
  double den = 0.0;
  for (int j : used) {
    const double c = obs.confidence[j];
    const Eigen::Vector2d dx = joints.col(j).head<2>() - xbar;
    num += c * dx.dot(obs.keypoints.col(j) - pbar);
    den += c * dx.squaredNorm();
  }
  double scale = (den > 0.0) ? num / den : 0.0;
  if (!(scale > 0.0) || !std::isfinite(scale)) scale = kInitialCameraScale;
  return {scale, pbar - scale * xbar};
}

BodyLossTerms smplify_terms(const Skeleton& skeleton, const Observation& obs, const GmmPrior* prior,
                            const FitConfig& config) {
  BodyLossTerms t;
  t.skeleton = &skeleton;
  t.observation = &obs;
  t.reproj_weight = 1.0;
  t.reproj_unit = 1.0;
  t.reproj_mask = fit_mask(skeleton, config.smplify_mask_hips_ankles);
  t.prior = prior;
  t.prior_weight = prior ? config.weights.prior_weight : 0.0;
  t.lambda_shape = config.weights.lambda_shape;
  return t;
}

FitResult smplify_fit(const Observation& obs, const GmmPrior& prior, const Skeleton& skeleton,
                      const std::optional<Prediction>& init, const FitConfig& config) {
  config.validate();
  check_observation(obs, skeleton, config.min_visible);
  if (prior.dim() != 3 * (skeleton.num_joints - 1)) throw ParameterError("prior dimension must cover non-root pose");

  BodyParams start = BodyParams::zeros(skeleton);
  Eigen::Vector3d code;
  if (init) {
    start = init->params;
    code = init->camera_code;
  } else {
    const Joints3D rest = rest_joints(skeleton, {start.shape.data(), static_cast<size_t>(start.shape.size())});
    code = camera_to_code(fit_camera_closed_form(rest, obs, skeleton.torso_joints));
  }

  const BodyLossTerms terms = smplify_terms(skeleton, obs, &prior, config);
  ParamVector x = body_param_vector(skeleton, start, code);
  ParamVector grad = x.zeros_like();
  const auto& pose_seg = x.segment("pose");

  FitResult result;
  // Evaluates the current iterate, records it in the trace and fills `grad`.
  auto evaluate = [&](bool with_grad) {
    BodyGradient g;
    const BodyEvaluation ev =
        evaluate_body_loss(terms, body_params_from(x), camera_code_from(x), with_grad ? &g : nullptr);
    result.trace.push_back({ev.loss.total, stopping_metric(ev.projected, obs, terms.reproj_mask)});
    if (with_grad) {
      grad.slice("pose") = g.params.pose;
      grad.slice("shape") = g.params.shape;
      grad.slice("camera") = g.camera_code;
    }
  };

  auto run_stage = [&](int iters, double lr, bool camera_and_root_only) {
    AdamState adam = AdamState::for_params(x, {lr});
    for (int it = 0; it < iters; ++it) {
      evaluate(true);
      if (camera_and_root_only) {
        grad.values().segment(pose_seg.offset + 3, pose_seg.size - 3).setZero();
        grad.slice("shape").setZero();
      }
      adam_step(adam, x, grad);
      ++result.iterations_used;
    }
  };
  run_stage(config.smplify_stage1_iters, config.smplify_stage1_lr, true);
  run_stage(config.smplify_stage2_iters, config.smplify_stage2_lr, false);
  evaluate(false);

  result.params = body_params_from(x);
  result.camera = camera_from_code(camera_code_from(x));
  result.final_loss = result.trace.back().loss;
  result.final_reproj_px = result.trace.back().px;
  result.converged = result.final_reproj_px < config.stop_px;
  return result;
}

BodyLossTerms eft_terms(const Skeleton& skeleton, const Observation& obs, const FitConfig& config,
                        const Joints3D* gt_joints) {
  BodyLossTerms t;
  t.skeleton = &skeleton;
  t.observation = &obs;
  t.reproj_weight = 1.0;
  t.reproj_unit = 1.0;
  t.reproj_mask = fit_mask(skeleton, config.mask_hips_ankles);
  t.leg_weight = config.mask_hips_ankles ? config.weights.leg_orient_weight : 0.0;
  t.lambda_shape = config.weights.lambda_shape;
  if (config.use_3d_term && gt_joints) {
    t.gt_joints = gt_joints;
    t.mu_3d = config.weights.mu_3d;
  }
  return t;
}

std::pair<FitResult, RegressorWeights> eft_fit(const RegressorWeights& weights_star, const Observation& obs,
                                               const Skeleton& skeleton, const FitConfig& config,
                                               const Joints3D* gt_joints, const EftObserver& observer) {
  config.validate();
  check_observation(obs, skeleton, config.min_visible);
  if (weights_star.arch.num_joints() != skeleton.num_joints ||
      weights_star.arch.num_shape_dims() != skeleton.num_shape_dims)
    throw ParameterError("regressor output does not match the skeleton");
  if (config.use_3d_term && !gt_joints) throw InputError("3D keypoint term requested without 3D keypoints");

  RegressorWeights w = weights_star;
  const BodyLossTerms terms = eft_terms(skeleton, obs, config, gt_joints);
  const JointMask mask = terms.reproj_mask;
  const RegressorObjective objective(w.arch, featurize(obs), {terms});
  AdamState adam = AdamState::for_params(w.params, {config.eft_lr});
  Eigen::VectorXd grad(w.params.size());

  FitResult result;
  std::vector<Prediction> preds;
  std::vector<BodyEvaluation> evals;
  Eigen::VectorXd no_grad;
  for (int it = 0;; ++it) {
    const bool may_step = it < config.eft_max_iters;
    const double loss = may_step ? objective.evaluate_detailed(w.params.values(), grad, &preds, &evals)
                                 : objective.evaluate_detailed(w.params.values(), no_grad, &preds, &evals);
    const double px = stopping_metric(evals[0].projected, obs, mask);
    result.trace.push_back({loss, px});
    if (observer) observer(it, preds[0], evals[0]);
    result.params = preds[0].params;
    result.camera = preds[0].camera();
    result.final_loss = loss;
    result.final_reproj_px = px;
    result.converged = px < config.stop_px;
    if ((config.early_stop && result.converged) || !may_step) break;
    if (!grad.allFinite()) throw EvaluationError("EFT gradient is not finite");
    adam_step(adam, w.params.values(), grad);
    ++result.iterations_used;
  }
  return {std::move(result), std::move(w)};
}

}  // namespace eft
