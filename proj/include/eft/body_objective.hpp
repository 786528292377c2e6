#pragma once

#include <Eigen/Core>

#include "eft/camera_losses.hpp"
#include "eft/gmm_prior.hpp"
#include "eft/optim.hpp"
#include "eft/skeleton.hpp"

namespace eft {

/// Weighted combination of the body-level loss terms. Terms whose weight is
/// zero or whose target is missing are skipped.
struct BodyLossTerms {
  const Skeleton* skeleton = nullptr;

  const Observation* observation = nullptr;
  double reproj_weight = 1.0;
  double reproj_unit = 1.0;  // pixels per loss unit; kCropHalf gives [-1, 1] crop coordinates
  JointMask reproj_mask;

  double leg_weight = 0.0;

  const GmmPrior* prior = nullptr;  // evaluated on the non-root pose entries
  double prior_weight = 0.0;

  double lambda_shape = 0.0;

  const Joints3D* gt_joints = nullptr;
  double mu_3d = 0.0;

  const BodyParams* gt_params = nullptr;
  double tau_params = 0.0;
};

struct BodyLossBreakdown {
  double reproj = 0.0;
  double leg = 0.0;
  double prior = 0.0;
  double shape = 0.0;
  double joints3d = 0.0;
  double params = 0.0;
  double total = 0.0;  // weighted sum
};

struct BodyGradient {
  BodyParams params;
  Eigen::Vector3d camera_code = Eigen::Vector3d::Zero();
};

struct BodyEvaluation {
  BodyLossBreakdown loss;
  Joints3D joints;
  Keypoints2D projected;
};

/// Evaluates the weighted loss; when `grad` is given it is overwritten with the
/// gradient with respect to (pose, shape, camera code).
BodyEvaluation evaluate_body_loss(const BodyLossTerms& terms, const BodyParams& params,
                                  const Eigen::Vector3d& camera_code, BodyGradient* grad = nullptr);

/// Flat layout "pose" | "shape" | "camera" used by the parameter-space fitter.
ParamVector body_param_vector(const Skeleton& skeleton, const BodyParams& params, const Eigen::Vector3d& camera_code);
BodyParams body_params_from(const ParamVector& v);
Eigen::Vector3d camera_code_from(const ParamVector& v);

/// The body loss as a function of the flat (pose, shape, camera) vector.
class BodyFitObjective : public DifferentiableObjective {
 public:
  explicit BodyFitObjective(BodyLossTerms terms) : terms_(std::move(terms)) {}

  double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> grad) const override;
  const BodyLossTerms& terms() const { return terms_; }

 private:
  BodyLossTerms terms_;
};

}  // namespace eft
