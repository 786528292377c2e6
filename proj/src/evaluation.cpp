#include "eft/evaluation.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <algorithm>
#include <filesystem>
#include <numeric>

#include "eft/errors.hpp"

namespace eft {

Joints3D SimilarityTransform::apply(const Joints3D& points) const {
  return ((scale * rotation) * points).colwise() + translation;
}

Alignment procrustes_align(const Joints3D& pred, const Joints3D& gt, bool with_scale) {
  if (pred.cols() != gt.cols()) throw EvaluationError("joint counts differ");
  if (pred.cols() < 3) throw EvaluationError("alignment needs at least 3 joints");
  if (!pred.allFinite() || !gt.allFinite()) throw EvaluationError("non-finite joints");
  const Eigen::Vector3d mu_p = pred.rowwise().mean();
  const Eigen::Vector3d mu_g = gt.rowwise().mean();
  const Eigen::Matrix3Xd x = pred.colwise() - mu_p;
  const Eigen::Matrix3Xd y = gt.colwise() - mu_g;
  const double var_x = x.squaredNorm();
  if (var_x < 1e-20) throw EvaluationError("degenerate prediction: all joints coincide");

  const Eigen::Matrix3d cov = y * x.transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d[2] = -1.0;

  SimilarityTransform t;
  t.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  t.scale = with_scale ? svd.singularValues().dot(d) / var_x : 1.0;
  if (!(t.scale > 0.0)) throw EvaluationError("degenerate alignment scale");
  t.translation = mu_g - t.scale * t.rotation * mu_p;
  return {t.apply(pred), t};
}

double pa_mpjpe(const Joints3D& pred, const Joints3D& gt, bool with_scale) {
  const Alignment a = procrustes_align(pred, gt, with_scale);
  return 1000.0 * (a.aligned - gt).colwise().norm().mean();
}

PostProcessor parse_post_processor(const std::string& name) {
  if (name == "none") return PostProcessor::kNone;
  if (name == "smplify") return PostProcessor::kSmplify;
  if (name == "eft") return PostProcessor::kEft;
  throw InputError("unknown post-processor '" + name + "' (expected none, smplify or eft)");
}

std::string to_string(PostProcessor p) {
  switch (p) {
    case PostProcessor::kNone: return "none";
    case PostProcessor::kSmplify: return "smplify";
    case PostProcessor::kEft: return "eft";
  }
  return "none";
}

void summarize(EvalReport& report) {
  const auto& v = report.per_sample_mm;
  if (v.empty()) {
    report.mean_mm = report.median_mm = 0.0;
    return;
  }
  report.mean_mm = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  report.median_mm = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

EvalReport eval_predictions(const std::vector<Prediction>& predictions, const Dataset& dataset,
                            const TruthSidecar& truth, const Skeleton& skeleton, bool with_scale) {
  if (predictions.size() != dataset.records.size()) throw ParameterError("one prediction per record expected");
  EvalReport report;
  report.ids.reserve(predictions.size());
  report.per_sample_mm.reserve(predictions.size());
  for (size_t i = 0; i < predictions.size(); ++i) {
    const auto& rec = dataset.records[i];
    const Joints3D joints = forward_kinematics(skeleton, predictions[i].params);
    report.ids.push_back(rec.id);
    report.per_sample_mm.push_back(pa_mpjpe(joints, truth.find(rec.id).truth.joints3d, with_scale));
  }
  summarize(report);
  return report;
}

EvalReport eval_regressor(const RegressorWeights& weights, const Dataset& dataset, const TruthSidecar& truth,
                          const Skeleton& skeleton, const EvalOptions& options) {
  std::vector<Observation> observations;
  observations.reserve(dataset.records.size());
  for (const auto& r : dataset.records) observations.push_back(r.observation);
  std::vector<Prediction> predictions = regress_batch(weights, observations);

  if (options.post == PostProcessor::kSmplify && !options.prior)
    throw InputError("smplify post-processing needs a pose prior");
  for (size_t i = 0; i < predictions.size() && options.post != PostProcessor::kNone; ++i) {
    const Observation& obs = observations[i];
    FitResult fit;
    if (options.post == PostProcessor::kSmplify) {
      fit = smplify_fit(obs, *options.prior, skeleton, predictions[i], options.fit);
    } else {
      fit = eft_fit(weights, obs, skeleton, options.fit).first;
    }
    predictions[i].params = fit.params;
    predictions[i].camera_code = camera_to_code(fit.camera);
  }
  return eval_predictions(predictions, dataset, truth, skeleton, options.with_scale);
}

EvalReport eval_regressor(const RegressorWeights& weights, const std::string& dataset_path, const Skeleton& skeleton,
                          const EvalOptions& options) {
  const std::string truth_path = sidecar_path(dataset_path);
  if (!std::filesystem::exists(truth_path)) throw InputError("missing truth sidecar: " + truth_path);
  const Dataset dataset = read_dataset(dataset_path);
  const TruthSidecar truth = read_truth_sidecar(truth_path);
  return eval_regressor(weights, dataset, truth, skeleton, options);
}

}  // namespace eft
