#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "eft/body_objective.hpp"
#include "eft/camera_losses.hpp"
#include "eft/gmm_prior.hpp"
#include "eft/regressor.hpp"
#include "eft/skeleton.hpp"

namespace eft {

inline constexpr double kDefaultEftLearningRate = 1e-4;
inline constexpr double kPaperScaleEftLearningRate = 1e-6;

struct FitConfig {
  double eft_lr = kDefaultEftLearningRate;
  int eft_max_iters = 20;
  double stop_px = 2.0;
  bool early_stop = true;  // false runs exactly eft_max_iters steps
  LossWeights weights;
  int smplify_stage1_iters = 100;
  int smplify_stage2_iters = 100;
  double smplify_stage1_lr = 1e-2;
  double smplify_stage2_lr = 1e-2;
  bool use_3d_term = false;
  bool mask_hips_ankles = true;
  bool smplify_mask_hips_ankles = false;
  int min_visible = kDefaultMinVisible;

  void validate() const;
};

struct IterationRecord {
  double loss = 0.0;  // full objective value
  double px = 0.0;    // stopping metric
};

struct FitResult {
  BodyParams params;
  CameraParams camera;
  int iterations_used = 0;
  double final_reproj_px = 0.0;
  double final_loss = 0.0;
  std::vector<IterationRecord> trace;  // one entry per evaluated iterate, the last at the returned solution
  bool converged = false;
};

/// Mean unsquared pixel distance over joints with confidence > 0 and an
/// include flag in `mask`. Throws InputError when no joint qualifies.
double stopping_metric(const Keypoints2D& pred, const Observation& obs, const JointMask& mask = {});

/// Least-squares scale and translation mapping the x/y of `joints` onto the
/// visible observed keypoints among `subset` (all joints when empty).
CameraParams fit_camera_closed_form(const Joints3D& joints, const Observation& obs, const std::vector<int>& subset = {});

/// Loss terms of the parameter-space fit (Stage 2 objective).
BodyLossTerms smplify_terms(const Skeleton& skeleton, const Observation& obs, const GmmPrior* prior,
                            const FitConfig& config);

/// Two-stage prior-regularized fit: camera and root orientation first, then
/// every pose, shape and camera parameter.
FitResult smplify_fit(const Observation& obs, const GmmPrior& prior, const Skeleton& skeleton,
                      const std::optional<Prediction>& init, const FitConfig& config);

/// Loss terms of exemplar fine-tuning for one observation.
BodyLossTerms eft_terms(const Skeleton& skeleton, const Observation& obs, const FitConfig& config,
                        const Joints3D* gt_joints = nullptr);

using EftObserver = std::function<void(int iteration, const Prediction&, const BodyEvaluation&)>;

/// Exemplar fine-tuning: Adam steps on a private copy of the regressor weights
/// until the stopping metric drops below stop_px or the iteration budget is used.
/// Returns the decoded fit and the fine-tuned weights; `weights_star` is untouched.
std::pair<FitResult, RegressorWeights> eft_fit(const RegressorWeights& weights_star, const Observation& obs,
                                               const Skeleton& skeleton, const FitConfig& config,
                                               const Joints3D* gt_joints = nullptr,
                                               const EftObserver& observer = {});

}  // namespace eft
