#include "eft/regressor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstring>
#include <sstream>

#include "container.hpp"
#include "eft/digest.hpp"
#include "eft/errors.hpp"

namespace eft {

namespace {

ParamVector make_param_layout(const Architecture& arch) {
  ParamVector p;
  for (size_t i = 0; i + 1 < arch.layer_sizes.size(); ++i) {
    const Eigen::Index in = arch.layer_sizes[i];
    const Eigen::Index out = arch.layer_sizes[i + 1];
    p.add_segment("layer" + std::to_string(i) + ".weight", out * in);
    p.add_segment("layer" + std::to_string(i) + ".bias", out);
  }
  return p;
}

void apply_activation(Activation a, Eigen::MatrixXd& z) {
  if (a == Activation::kTanh) {
    z = z.array().tanh().matrix();
  } else {
    z = z.cwiseMax(0.0);
  }
}

void activation_backward(Activation a, const Eigen::MatrixXd& activated, Eigen::MatrixXd& grad) {
  if (a == Activation::kTanh) {
    grad.array() *= 1.0 - activated.array().square();
  } else {
    grad.array() *= (activated.array() > 0.0).cast<double>();
  }
}

struct LayerView {
  Eigen::Map<const Eigen::MatrixXd> weight;
  Eigen::Map<const Eigen::VectorXd> bias;
};

LayerView layer_view(const Architecture& arch, const Eigen::VectorXd& params, size_t layer, Eigen::Index& offset) {
  const Eigen::Index in = arch.layer_sizes[layer];
  const Eigen::Index out = arch.layer_sizes[layer + 1];
  LayerView v{Eigen::Map<const Eigen::MatrixXd>(params.data() + offset, out, in),
              Eigen::Map<const Eigen::VectorXd>(params.data() + offset + out * in, out)};
  offset += out * in + out;
  return v;
}

std::string encode_weights(const RegressorWeights& weights) {
  detail::Container c;
  for (int s : weights.arch.layer_sizes) c.sizes.push_back(static_cast<std::uint32_t>(s));
  c.tag = static_cast<std::uint8_t>(weights.arch.activation);
  c.values.assign(weights.params.values().data(), weights.params.values().data() + weights.params.size());
  return detail::encode_container(c);
}

std::vector<int> visible_in(const Observation& obs, const std::vector<int>& joints) {
  std::vector<int> out;
  for (int j : joints)
    if (j < obs.num_joints() && obs.confidence[j] > 0.0) out.push_back(j);
  return out;
}

}  // namespace

Eigen::Index Architecture::parameter_count() const {
  Eigen::Index total = 0;
  for (size_t i = 0; i + 1 < layer_sizes.size(); ++i)
    total += static_cast<Eigen::Index>(layer_sizes[i + 1]) * (layer_sizes[i] + 1);
  return total;
}

void Architecture::validate() const {
  if (layer_sizes.size() < 2) throw ParameterError("architecture needs input and output layers");
  if (std::any_of(layer_sizes.begin(), layer_sizes.end(), [](int s) { return s < 1; }))
    throw ParameterError("layer sizes must be positive");
  if (input_size() % 3 != 0 || num_joints() < 2) throw ParameterError("input must be 3 * num_joints features");
  if (num_shape_dims() < 0) throw ParameterError("output too small for pose and camera heads");
  if (activation != Activation::kTanh && activation != Activation::kRelu) throw ParameterError("unknown activation");
}

Architecture make_architecture(const Skeleton& skeleton, const std::vector<int>& hidden, Activation activation) {
  Architecture arch;
  arch.layer_sizes.push_back(3 * skeleton.num_joints);
  arch.layer_sizes.insert(arch.layer_sizes.end(), hidden.begin(), hidden.end());
  arch.layer_sizes.push_back(3 * skeleton.num_joints + skeleton.num_shape_dims + 3);
  arch.activation = activation;
  arch.validate();
  return arch;
}

bool RegressorWeights::bitwise_equal(const RegressorWeights& other) const {
  if (arch.layer_sizes != other.arch.layer_sizes || arch.activation != other.arch.activation ||
      version != other.version || params.size() != other.params.size())
    return false;
  return std::memcmp(params.values().data(), other.params.values().data(),
                     sizeof(double) * static_cast<size_t>(params.size())) == 0;
}

RegressorWeights init_regressor(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  RegressorWeights w{arch, make_param_layout(arch), kWeightsVersion};
  std::mt19937_64 rng(seed);
  const size_t layers = arch.layer_sizes.size() - 1;
  for (size_t i = 0; i < layers; ++i) {
    const double in = arch.layer_sizes[i];
    const double out = arch.layer_sizes[i + 1];
    double bound = std::sqrt(6.0 / (in + out));
    if (i + 1 == layers) bound *= 0.1;
    std::uniform_real_distribution<double> u(-bound, bound);
    auto weight = w.params.slice("layer" + std::to_string(i) + ".weight");
    for (Eigen::Index k = 0; k < weight.size(); ++k) weight[k] = u(rng);
  }
  auto head = w.params.slice("layer" + std::to_string(layers - 1) + ".bias");
  head.setZero();
  head.tail<3>() = camera_to_code({kInitialCameraScale, Eigen::Vector2d(kCropHalf, kCropHalf)});
  return w;
}

Eigen::VectorXd featurize(const Observation& observation) {
  const int n = observation.num_joints();
  if (observation.keypoints.cols() != n) throw ParameterError("observation tables disagree");
  Eigen::VectorXd f = Eigen::VectorXd::Zero(3 * n);
  for (int j = 0; j < n; ++j) {
    if (observation.confidence[j] <= 0.0) continue;
    f[2 * j] = (observation.keypoints(0, j) - kCropHalf) / kCropHalf;
    f[2 * j + 1] = (observation.keypoints(1, j) - kCropHalf) / kCropHalf;
  }
  f.tail(n) = observation.confidence;
  return f;
}

Keypoints2D denormalize_keypoints(const Eigen::VectorXd& features, int num_joints) {
  if (features.size() != 3 * num_joints) throw ParameterError("feature length mismatch");
  Keypoints2D k(2, num_joints);
  for (int j = 0; j < num_joints; ++j) {
    k(0, j) = kCropHalf + kCropHalf * features[2 * j];
    k(1, j) = kCropHalf + kCropHalf * features[2 * j + 1];
  }
  return k;
}

Prediction decode_output(const Architecture& arch, const Eigen::Ref<const Eigen::VectorXd>& output) {
  const int np = 3 * arch.num_joints();
  const int ns = arch.num_shape_dims();
  if (output.size() != np + ns + 3) throw ParameterError("output length mismatch");
  return {{output.head(np), output.segment(np, ns)}, output.tail<3>()};
}

Eigen::MatrixXd mlp_forward(const Architecture& arch, const Eigen::VectorXd& params, const Eigen::MatrixXd& inputs,
                            MlpTape* tape) {
  if (inputs.rows() != arch.input_size()) throw ParameterError("feature length does not match the input layer");
  if (params.size() != arch.parameter_count()) throw ParameterError("parameter count does not match architecture");
  const size_t layers = arch.layer_sizes.size() - 1;
  Eigen::Index offset = 0;
  Eigen::MatrixXd a = inputs;
  if (tape) {
    tape->activations.clear();
    tape->activations.push_back(inputs);
  }
  for (size_t i = 0; i < layers; ++i) {
    const auto layer = layer_view(arch, params, i, offset);
    Eigen::MatrixXd z = layer.weight * a;
    z.colwise() += layer.bias;
    if (i + 1 < layers) apply_activation(arch.activation, z);
    a = std::move(z);
    if (tape) tape->activations.push_back(a);
  }
  return a;
}

void mlp_backward(const Architecture& arch, const Eigen::VectorXd& params, const MlpTape& tape,
                  const Eigen::MatrixXd& grad_outputs, Eigen::Ref<Eigen::VectorXd> grad_params) {
  const size_t layers = arch.layer_sizes.size() - 1;
  std::vector<Eigen::Index> offsets(layers);
  Eigen::Index offset = 0;
  for (size_t i = 0; i < layers; ++i) {
    offsets[i] = offset;
    offset += static_cast<Eigen::Index>(arch.layer_sizes[i + 1]) * (arch.layer_sizes[i] + 1);
  }
  Eigen::MatrixXd g = grad_outputs;
  for (size_t i = layers; i-- > 0;) {
    const Eigen::Index in = arch.layer_sizes[i];
    const Eigen::Index out = arch.layer_sizes[i + 1];
    Eigen::Map<Eigen::MatrixXd> gw(grad_params.data() + offsets[i], out, in);
    Eigen::Map<Eigen::VectorXd> gb(grad_params.data() + offsets[i] + out * in, out);
    const Eigen::MatrixXd& below = tape.activations[i];
    gw.noalias() += g * below.transpose();
    gb += g.rowwise().sum();
    if (i == 0) break;
    const Eigen::Map<const Eigen::MatrixXd> w(params.data() + offsets[i], out, in);
    Eigen::MatrixXd g_below = w.transpose() * g;
    activation_backward(arch.activation, below, g_below);
    g = std::move(g_below);
  }
}

Prediction regress_features(const RegressorWeights& weights, const Eigen::VectorXd& features) {
  const Eigen::MatrixXd out = mlp_forward(weights.arch, weights.params.values(), features);
  return decode_output(weights.arch, out.col(0));
}

std::pair<BodyParams, CameraParams> regress(const RegressorWeights& weights, const Observation& observation) {
  Prediction p = regress_features(weights, featurize(observation));
  const CameraParams camera = p.camera();
  return {std::move(p.params), camera};
}

std::vector<Prediction> regress_batch(const RegressorWeights& weights, const std::vector<Observation>& observations) {
  std::vector<Prediction> out;
  out.reserve(observations.size());
  constexpr size_t kChunk = 256;
  for (size_t start = 0; start < observations.size(); start += kChunk) {
    const size_t count = std::min(kChunk, observations.size() - start);
    Eigen::MatrixXd x(weights.arch.input_size(), static_cast<Eigen::Index>(count));
    for (size_t i = 0; i < count; ++i) x.col(static_cast<Eigen::Index>(i)) = featurize(observations[start + i]);
    const Eigen::MatrixXd y = mlp_forward(weights.arch, weights.params.values(), x);
    for (Eigen::Index i = 0; i < y.cols(); ++i) out.push_back(decode_output(weights.arch, y.col(i)));
  }
  return out;
}

RegressorObjective::RegressorObjective(Architecture arch, Eigen::MatrixXd features, std::vector<BodyLossTerms> terms)
    : arch_(std::move(arch)), features_(std::move(features)), terms_(std::move(terms)) {
  if (features_.cols() != static_cast<Eigen::Index>(terms_.size()) || features_.cols() == 0)
    throw ParameterError("one loss-term set per feature column is required");
}

double RegressorObjective::evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> grad) const {
  return evaluate_detailed(x, grad, nullptr, nullptr);
}

double RegressorObjective::evaluate_detailed(const Eigen::Ref<const Eigen::VectorXd>& x,
                                             Eigen::Ref<Eigen::VectorXd> grad, std::vector<Prediction>* predictions,
                                             std::vector<BodyEvaluation>* evaluations) const {
  const Eigen::VectorXd params = x;
  const bool want_grad = grad.size() > 0;
  MlpTape tape;
  const Eigen::MatrixXd out = mlp_forward(arch_, params, features_, want_grad ? &tape : nullptr);
  const Eigen::Index batch = out.cols();
  const int np = 3 * arch_.num_joints();
  const int ns = arch_.num_shape_dims();
  Eigen::MatrixXd g_out;
  if (want_grad) g_out.resize(out.rows(), batch);
  if (predictions) predictions->clear();
  if (evaluations) evaluations->clear();
  double total = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    Prediction pred = decode_output(arch_, out.col(b));
    BodyGradient g;
    BodyEvaluation ev = evaluate_body_loss(terms_[b], pred.params, pred.camera_code, want_grad ? &g : nullptr);
    total += ev.loss.total;
    if (want_grad) {
      g_out.col(b).head(np) = g.params.pose / static_cast<double>(batch);
      g_out.col(b).segment(np, ns) = g.params.shape / static_cast<double>(batch);
      g_out.col(b).tail<3>() = g.camera_code / static_cast<double>(batch);
    }
    if (predictions) predictions->push_back(std::move(pred));
    if (evaluations) evaluations->push_back(std::move(ev));
  }
  if (want_grad) {
    grad.setZero();
    mlp_backward(arch_, params, tape, g_out, grad);
  }
  return total / static_cast<double>(batch);
}

bool TrainingSample::consistent() const {
  return (gt_joints3d.has_value() || mu == 0.0) && (gt_params.has_value() || tau == 0.0) && mu >= 0.0 && tau >= 0.0;
}

void SamplingPlan::validate() const {
  if (ratios.empty()) throw ParameterError("sampling plan is empty");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw ParameterError("sampling ratios must lie in [0, 1]");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ParameterError("sampling ratios must sum to 1");
}

std::vector<int> draw_batch_sources(const SamplingPlan& plan, int batch_size, std::mt19937_64& rng) {
  plan.validate();
  std::discrete_distribution<int> pick(plan.ratios.begin(), plan.ratios.end());
  std::vector<int> out(static_cast<size_t>(batch_size));
  for (auto& o : out) o = pick(rng);
  return out;
}

AugmentedSample crop_augment(const TrainingSample& sample, const Skeleton& skeleton, std::mt19937_64& rng) {
  AugmentedSample result{sample, 1.0, CropMode::kNone};
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> factor_dist(0.8, 1.2);
  const CropMode mode = coin(rng) ? CropMode::kUpperBody : CropMode::kFaceArms;
  const double factor = factor_dist(rng);
  const Observation& obs = sample.observation;
  std::vector<int> group = visible_in(obs, mode == CropMode::kUpperBody ? skeleton.upper_body_joints
                                                                        : skeleton.face_arm_joints);
  if (group.empty()) return result;

  Eigen::Vector2d lo = obs.keypoints.col(group[0]);
  Eigen::Vector2d hi = lo;
  for (int j : group) {
    lo = lo.cwiseMin(obs.keypoints.col(j));
    hi = hi.cwiseMax(obs.keypoints.col(j));
  }
  constexpr double kMinSide = 16.0;  // pixels; keeps single-joint groups from collapsing the box
  const Eigen::Vector2d center = 0.5 * (lo + hi);
  const double side = factor * std::max((hi - lo).maxCoeff(), kMinSide);
  const Eigen::Vector2d corner = center - Eigen::Vector2d::Constant(side / 2.0);

  Observation& out = result.sample.observation;
  for (int j = 0; j < out.num_joints(); ++j) {
    const Eigen::Vector2d p = obs.keypoints.col(j);
    const bool inside = (p.array() >= corner.array()).all() && (p.array() <= (corner.array() + side)).all();
    if (!inside) out.confidence[j] = 0.0;
    out.keypoints.col(j) = (p - corner) * (kCropSize / side);
  }
  result.factor = factor;
  result.mode = mode;
  return result;
}

BodyLossTerms training_terms(const Skeleton& skeleton, const TrainingSample& sample, double lambda_shape) {
  BodyLossTerms t;
  t.skeleton = &skeleton;
  t.observation = &sample.observation;
  t.reproj_weight = 1.0;
  t.reproj_unit = kCropHalf;
  t.lambda_shape = lambda_shape;
  if (sample.gt_joints3d && sample.mu > 0.0) {
    t.gt_joints = &*sample.gt_joints3d;
    t.mu_3d = sample.mu;
  }
  if (sample.gt_params && sample.tau > 0.0) {
    t.gt_params = &*sample.gt_params;
    t.tau_params = sample.tau;
  }
  return t;
}

TrainResult train_regressor(const std::vector<std::vector<TrainingSample>>& datasets, const SamplingPlan& plan,
                            const Skeleton& skeleton, const TrainConfig& config) {
  if (datasets.empty()) throw ParameterError("no training datasets");
  if (plan.ratios.size() != datasets.size()) throw ParameterError("sampling plan does not cover every dataset");
  plan.validate();
  for (size_t d = 0; d < datasets.size(); ++d) {
    if (datasets[d].empty() && plan.ratios[d] > 0.0) throw ParameterError("empty dataset with nonzero ratio");
    for (const auto& s : datasets[d])
      if (!s.consistent()) throw ParameterError("training sample has weights without ground truth");
  }
  if (config.steps < 0 || config.batch_size < 1) throw ParameterError("invalid step or batch count");
  if (!(config.lr > 0.0) || !(config.lr_final_ratio > 0.0 && config.lr_final_ratio <= 1.0))
    throw ParameterError("invalid learning rate schedule");

  const Architecture arch = make_architecture(skeleton, config.hidden, config.activation);
  TrainResult result{init_regressor(arch, config.seed), {}};
  result.loss_curve.reserve(static_cast<size_t>(config.steps));
  AdamState adam = AdamState::for_params(result.weights.params, {config.lr});
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::bernoulli_distribution do_crop(config.crop_probability);

  std::vector<TrainingSample> batch(static_cast<size_t>(config.batch_size));
  Eigen::MatrixXd features(arch.input_size(), config.batch_size);
  Eigen::VectorXd grad(arch.parameter_count());
  for (long step = 0; step < config.steps; ++step) {
    const auto sources = draw_batch_sources(plan, config.batch_size, rng);
    std::vector<BodyLossTerms> terms;
    terms.reserve(batch.size());
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& pool = datasets[static_cast<size_t>(sources[b])];
      std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
      const TrainingSample& chosen = pool[pick(rng)];
      batch[b] = (config.crop_probability > 0.0 && do_crop(rng)) ? crop_augment(chosen, skeleton, rng).sample : chosen;
      features.col(b) = featurize(batch[b].observation);
      terms.push_back(training_terms(skeleton, batch[b], config.lambda_shape));
    }
    const RegressorObjective objective(arch, features, std::move(terms));
    double loss = 0.0;
    try {
      loss = objective.evaluate(result.weights.params.values(), grad);
    } catch (const EvaluationError& e) {
      throw TrainingError("non-finite loss at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss) || !grad.allFinite()) {
      std::ostringstream msg;
      msg << "non-finite loss or gradient at step " << step << " (loss " << loss << ")";
      throw TrainingError(msg.str());
    }
    result.loss_curve.push_back(loss);
    if (config.lr_final_ratio != 1.0 && config.steps > 1) {
      const double progress = static_cast<double>(step) / static_cast<double>(config.steps - 1);
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      adam.hyper.lr = config.lr * (config.lr_final_ratio + (1.0 - config.lr_final_ratio) * cosine);
    }
    adam_step(adam, result.weights.params.values(), grad);
  }
  return result;
}

void save_weights(const RegressorWeights& weights, const std::string& path) {
  write_file(path, encode_weights(weights));
}

RegressorWeights load_weights(const std::string& path) {
  const auto c = detail::decode_container(read_file(path));
  if (c.tag == detail::kTagGmmDiagonal) throw FormatError("container holds a pose prior, not regressor weights");
  Architecture arch;
  for (auto s : c.sizes) arch.layer_sizes.push_back(static_cast<int>(s));
  arch.activation = static_cast<Activation>(c.tag);
  try {
    arch.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("bad architecture descriptor: ") + e.what());
  }
  if (static_cast<Eigen::Index>(c.values.size()) != arch.parameter_count())
    throw FormatError("parameter count does not match architecture");
  RegressorWeights w{arch, make_param_layout(arch), kWeightsVersion};
  w.params.values() = Eigen::Map<const Eigen::VectorXd>(c.values.data(), static_cast<Eigen::Index>(c.values.size()));
  if (!w.params.finite()) throw FormatError("non-finite weights");
  return w;
}

std::string weights_digest(const RegressorWeights& weights) { return sha256_hex(encode_weights(weights)); }

}  // namespace eft
