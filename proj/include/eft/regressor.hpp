#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "eft/body_objective.hpp"
#include "eft/camera_losses.hpp"
#include "eft/optim.hpp"
#include "eft/skeleton.hpp"

namespace eft {

enum class Activation : std::uint8_t { kTanh = 0, kRelu = 1 };

/// Fully connected network shape: input, hidden..., output.
struct Architecture {
  std::vector<int> layer_sizes;
  Activation activation = Activation::kTanh;

  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  int num_joints() const { return input_size() / 3; }
  int num_shape_dims() const { return output_size() - 3 * num_joints() - 3; }
  Eigen::Index parameter_count() const;
  void validate() const;
};

/// Input = 3 * num_joints features, output = pose | shape | camera code.
Architecture make_architecture(const Skeleton& skeleton, const std::vector<int>& hidden = {256, 256},
                               Activation activation = Activation::kTanh);

inline constexpr std::uint32_t kWeightsVersion = 1;
inline constexpr double kInitialCameraScale = 105.0;

struct RegressorWeights {
  Architecture arch;
  ParamVector params;  // segments "layer<i>.weight" (out x in, column-major) and "layer<i>.bias"
  std::uint32_t version = kWeightsVersion;

  bool bitwise_equal(const RegressorWeights& other) const;
};

/// Glorot-uniform hidden layers, a small output layer, and a head bias that
/// decodes to the zero pose with a centered camera of kInitialCameraScale.
RegressorWeights init_regressor(const Architecture& arch, std::uint64_t seed);

/// Normalized keypoints in [-1, 1] (x, y interleaved per joint, zero where
/// occluded) followed by the confidence vector.
Eigen::VectorXd featurize(const Observation& observation);
/// Inverse of the keypoint part of featurize for visible joints.
Keypoints2D denormalize_keypoints(const Eigen::VectorXd& features, int num_joints);

struct Prediction {
  BodyParams params;
  Eigen::Vector3d camera_code = Eigen::Vector3d::Zero();

  CameraParams camera() const { return camera_from_code(camera_code); }
};

/// Splits one output column into pose, shape and camera code.
Prediction decode_output(const Architecture& arch, const Eigen::Ref<const Eigen::VectorXd>& output);

/// Per-layer activations of a forward pass; column b belongs to sample b.
struct MlpTape {
  std::vector<Eigen::MatrixXd> activations;  // [0] = input, back() = output
};

Eigen::MatrixXd mlp_forward(const Architecture& arch, const Eigen::VectorXd& params, const Eigen::MatrixXd& inputs,
                            MlpTape* tape = nullptr);
/// Accumulates dLoss/dparams given dLoss/doutputs.
void mlp_backward(const Architecture& arch, const Eigen::VectorXd& params, const MlpTape& tape,
                  const Eigen::MatrixXd& grad_outputs, Eigen::Ref<Eigen::VectorXd> grad_params);

Prediction regress_features(const RegressorWeights& weights, const Eigen::VectorXd& features);
std::pair<BodyParams, CameraParams> regress(const RegressorWeights& weights, const Observation& observation);
/// Batched regression; one prediction per observation, in order.
std::vector<Prediction> regress_batch(const RegressorWeights& weights, const std::vector<Observation>& observations);

/// Mean of per-sample body losses over the decoded outputs of a feature batch,
/// as a function of the flat network parameters.
class RegressorObjective : public DifferentiableObjective {
 public:
  RegressorObjective(Architecture arch, Eigen::MatrixXd features, std::vector<BodyLossTerms> terms);

  double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> grad) const override;

  /// Evaluates at `x` and returns the decoded predictions and per-sample evaluations.
  double evaluate_detailed(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> grad,
                           std::vector<Prediction>* predictions, std::vector<BodyEvaluation>* evaluations) const;

 private:
  Architecture arch_;
  Eigen::MatrixXd features_;
  std::vector<BodyLossTerms> terms_;
};

struct TrainingSample {
  Observation observation;
  std::optional<Joints3D> gt_joints3d;
  std::optional<BodyParams> gt_params;
  double mu = 0.0;
  double tau = 0.0;
  std::string source_dataset;

  /// mu and tau are zero whenever the matching ground truth is absent.
  bool consistent() const;
};

struct SamplingPlan {
  std::vector<double> ratios;

  void validate() const;
};

/// Dataset index of each batch element, drawn independently from the plan.
std::vector<int> draw_batch_sources(const SamplingPlan& plan, int batch_size, std::mt19937_64& rng);

enum class CropMode { kNone, kUpperBody, kFaceArms };

struct AugmentedSample {
  TrainingSample sample;
  double factor = 1.0;
  CropMode mode = CropMode::kNone;
};

/// Extreme-crop augmentation: a tight box around the upper body or the face
/// and arms, rescaled by a factor in [0.8, 1.2]; joints outside lose their
/// confidence and the observation is re-expressed in the new crop frame.
/// Supervision targets are copied unchanged.
AugmentedSample crop_augment(const TrainingSample& sample, const Skeleton& skeleton, std::mt19937_64& rng);

struct TrainConfig {
  std::vector<int> hidden = {256, 256};
  Activation activation = Activation::kTanh;
  long steps = 20000;
  int batch_size = 64;
  double lr = 1e-3;
  double lr_final_ratio = 0.01;  // cosine decay from lr to lr * ratio over the run; 1 keeps lr constant
  double lambda_shape = 1e-3;
  double crop_probability = 0.0;
  std::uint64_t seed = 1;
};

struct TrainResult {
  RegressorWeights weights;
  std::vector<double> loss_curve;  // mean batch loss per step
};

/// Minibatch Adam on L_2D (crop-normalized units) + mu L_J + tau L_Theta + lambda |beta|^2.
TrainResult train_regressor(const std::vector<std::vector<TrainingSample>>& datasets, const SamplingPlan& plan,
                            const Skeleton& skeleton, const TrainConfig& config);

/// Body-loss terms used for a training sample (reprojection in crop-normalized units).
BodyLossTerms training_terms(const Skeleton& skeleton, const TrainingSample& sample, double lambda_shape);

void save_weights(const RegressorWeights& weights, const std::string& path);
RegressorWeights load_weights(const std::string& path);
std::string weights_digest(const RegressorWeights& weights);

}  // namespace eft
