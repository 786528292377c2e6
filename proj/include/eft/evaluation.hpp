#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "eft/fitters.hpp"
#include "eft/gmm_prior.hpp"
#include "eft/regressor.hpp"
#include "eft/skeleton.hpp"
#include "eft/synth_world.hpp"

namespace eft {

struct SimilarityTransform {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Joints3D apply(const Joints3D& points) const;
};

struct Alignment {
  Joints3D aligned;
  SimilarityTransform transform;
};

/// Least-squares map of `pred` onto `gt`. With `with_scale` false the scale is
/// held at 1 (rigid alignment).
Alignment procrustes_align(const Joints3D& pred, const Joints3D& gt, bool with_scale = true);

/// Mean joint distance after alignment, in millimeters.
double pa_mpjpe(const Joints3D& pred, const Joints3D& gt, bool with_scale = true);

enum class PostProcessor { kNone, kSmplify, kEft };

PostProcessor parse_post_processor(const std::string& name);
std::string to_string(PostProcessor p);

struct EvalOptions {
  PostProcessor post = PostProcessor::kNone;
  FitConfig fit;
  const GmmPrior* prior = nullptr;  // required for smplify
  bool with_scale = true;
};

struct EvalReport {
  std::vector<std::int64_t> ids;
  std::vector<double> per_sample_mm;
  double mean_mm = 0.0;
  double median_mm = 0.0;

  std::size_t count() const { return per_sample_mm.size(); }
};

/// Mean and median over `values`, in order.
void summarize(EvalReport& report);

/// PA-MPJPE of already-decoded predictions against the sidecar joints.
EvalReport eval_predictions(const std::vector<Prediction>& predictions, const Dataset& dataset,
                            const TruthSidecar& truth, const Skeleton& skeleton, bool with_scale = true);

EvalReport eval_regressor(const RegressorWeights& weights, const Dataset& dataset, const TruthSidecar& truth,
                          const Skeleton& skeleton, const EvalOptions& options);

/// Reads `dataset_path` and its ".truth" sidecar; a missing sidecar is an input error.
EvalReport eval_regressor(const RegressorWeights& weights, const std::string& dataset_path, const Skeleton& skeleton,
                          const EvalOptions& options);

}  // namespace eft
