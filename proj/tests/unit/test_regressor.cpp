#include <fstream>

#include "doctest.h"
#include "eft/errors.hpp"
#include "eft/regressor.hpp"
#include "eft/synth_world.hpp"
#include "test_support.hpp"

using namespace eft;
using eft::test::max_abs;

namespace {

const Skeleton& skeleton() {
  static const Skeleton sk = make_template(24, 10, 0);
  return sk;
}

std::vector<TrainingSample> corpus(int n, std::uint64_t seed, bool with_3d) {
  WorldConfig cfg = with_3d ? lab_world() : wild_world();
  cfg.swap_prob = 0.0;
  const PoseDistribution poses = make_pose_distribution(cfg, skeleton());
  std::mt19937_64 rng(seed);
  std::vector<TrainingSample> out;
  for (int i = 0; i < n; ++i) {
    const SampledBody body = sample_body(cfg, poses, skeleton(), rng);
    TrainingSample s;
    s.observation = corrupt(body.clean_keypoints, cfg, skeleton(), rng).observation;
    if (with_3d) {
      s.gt_joints3d = body.joints3d;
      s.gt_params = body.params;
      s.mu = 1.0;
      s.tau = 0.1;
    }
    out.push_back(std::move(s));
  }
  return out;
}

double mean_normalized_reprojection(const RegressorWeights& w, const std::vector<TrainingSample>& samples) {
  double total = 0.0;
  for (const auto& s : samples) {
    const auto [params, camera] = regress(w, s.observation);
    const Keypoints2D p = project_weak_perspective(camera, forward_kinematics(skeleton(), params));
    total += loss_reprojection(p, s.observation) / (kCropHalf * kCropHalf);
  }
  return total / static_cast<double>(samples.size());
}

Observation some_observation(std::uint64_t seed) { return corpus(1, seed, false).front().observation; }

}  // namespace

TEST_CASE("architecture") {
  const Architecture a = make_architecture(skeleton());
  CHECK(a.layer_sizes == std::vector<int>{72, 256, 256, 85});
  CHECK(a.num_joints() == 24);
  CHECK(a.num_shape_dims() == 10);
  CHECK(a.parameter_count() == 256 * 73 + 256 * 257 + 85 * 257);
  Architecture bad = a;
  bad.layer_sizes[0] = 71;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = a;
  bad.layer_sizes.back() = 10;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("initialization") {
  const Architecture arch = make_architecture(skeleton(), {64, 64});
  const RegressorWeights a = init_regressor(arch, 7);
  CHECK(a.bitwise_equal(init_regressor(arch, 7)));
  CHECK_FALSE(a.bitwise_equal(init_regressor(arch, 8)));
  const Prediction p = regress_features(a, Eigen::VectorXd::Zero(72));
  CHECK(p.params.pose.allFinite());
  CHECK(p.params.pose.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(p.camera().scale > 0.0);
  CHECK(std::abs(p.camera().scale - kInitialCameraScale) < 1e-9);
}

TEST_CASE("zero hidden weights decode the head bias") {
  RegressorWeights w = init_regressor(make_architecture(skeleton(), {16}), 1);
  for (const auto& seg : w.params.layout())
    if (seg.name.find(".weight") != std::string::npos) w.params.slice(seg.name).setZero();
  Eigen::VectorXd bias(85);
  for (int i = 0; i < 85; ++i) bias[i] = 0.01 * i - 0.3;
  w.params.slice("layer1.bias") = bias;
  const Prediction p = regress_features(w, featurize(some_observation(1)));
  CHECK(p.params.pose == bias.head(72));
  CHECK(p.params.shape == bias.segment(72, 10));
  CHECK(p.camera_code == bias.tail<3>());
  CHECK(p.camera().scale == std::exp(bias[82]));
}

TEST_CASE("featurize") {
  Observation obs{Keypoints2D::Zero(2, 24), Eigen::VectorXd::Ones(24)};
  obs.keypoints.col(0) = Eigen::Vector2d(112, 112);
  obs.keypoints.col(1) = Eigen::Vector2d(224, 224);
  obs.keypoints.col(2) = Eigen::Vector2d(50, 70);
  obs.confidence[2] = 0.0;
  obs.confidence[3] = 0.4;
  const Eigen::VectorXd f = featurize(obs);
  CHECK(f.size() == 72);
  CHECK(f[0] == 0.0);
  CHECK(f[1] == 0.0);
  CHECK(f[2] == 1.0);
  CHECK(f[3] == 1.0);
  CHECK(f[4] == 0.0);
  CHECK(f[5] == 0.0);
  CHECK(f.tail(24) == obs.confidence);

  const Observation o = some_observation(2);
  const Keypoints2D back = denormalize_keypoints(featurize(o), 24);
  for (int j = 0; j < 24; ++j)
    if (o.confidence[j] > 0.0) CHECK(max_abs(back.col(j) - o.keypoints.col(j)) < 1e-12);
}

TEST_CASE("regress is a pure function") {
  const RegressorWeights w = init_regressor(make_architecture(skeleton(), {32, 32}), 3);
  const Observation o = some_observation(3);
  const auto [p1, c1] = regress(w, o);
  const auto [p2, c2] = regress(w, o);
  CHECK(p1.pose == p2.pose);
  CHECK(c1.translation == c2.translation);
  const auto batch = regress_batch(w, {o, some_observation(4), o});
  CHECK(batch.size() == 3);
  CHECK(max_abs(batch[2].params.pose - p1.pose) < 1e-14);

  Observation small{Keypoints2D::Zero(2, 20), Eigen::VectorXd::Ones(20)};
  CHECK_THROWS_AS(regress(w, small), ParameterError);
}

TEST_CASE("network gradient matches finite differences") {
  for (Activation act : {Activation::kTanh, Activation::kRelu}) {
    const Architecture arch = make_architecture(skeleton(), {8, 6}, act);
    const RegressorWeights w = init_regressor(arch, 4);
    auto samples = corpus(3, 5, true);
    Eigen::MatrixXd features(72, 3);
    std::vector<BodyLossTerms> terms;
    for (int i = 0; i < 3; ++i) {
      features.col(i) = featurize(samples[static_cast<size_t>(i)].observation);
      terms.push_back(training_terms(skeleton(), samples[static_cast<size_t>(i)], 1e-3));
    }
    const RegressorObjective objective(arch, features, terms);
    CHECK(finite_diff_check(objective, w.params) < 1e-4);
  }
}

TEST_CASE("zero mu and tau remove the 3D supervision gradient") {
  const Architecture arch = make_architecture(skeleton(), {16});
  const RegressorWeights w = init_regressor(arch, 6);
  TrainingSample with = corpus(1, 6, true).front();
  with.mu = 0.0;
  with.tau = 0.0;
  TrainingSample without = with;
  without.gt_joints3d.reset();
  without.gt_params.reset();
  CHECK(with.consistent());
  const Eigen::MatrixXd f = featurize(with.observation);
  const RegressorObjective a(arch, f, {training_terms(skeleton(), with, 1e-3)});
  const RegressorObjective b(arch, f, {training_terms(skeleton(), without, 1e-3)});
  CHECK(gradient(a, w.params).values() == gradient(b, w.params).values());

  TrainingSample bad = without;
  bad.mu = 1.0;
  CHECK_FALSE(bad.consistent());
}

TEST_CASE("sampling plan") {
  CHECK_THROWS_AS((SamplingPlan{{0.5, 0.4}}.validate()), ParameterError);
  CHECK_THROWS_AS((SamplingPlan{{1.2, -0.2}}.validate()), ParameterError);
  CHECK_NOTHROW((SamplingPlan{{0.6, 0.4}}.validate()));
  std::mt19937_64 rng(7);
  long first = 0, total = 0;
  for (int b = 0; b < 1000; ++b)
    for (int s : draw_batch_sources({{0.6, 0.4}}, 64, rng)) {
      first += s == 0;
      ++total;
    }
  CHECK(std::abs(static_cast<double>(first) / total - 0.6) < 0.02);
}

TEST_CASE("crop augmentation") {
  const auto samples = corpus(20, 8, true);
  std::mt19937_64 rng(9);
  double lo = 2.0, hi = 0.0;
  int changed = 0;
  for (int i = 0; i < 100000; ++i) {
    const TrainingSample& s = samples[static_cast<size_t>(i % 20)];
    const AugmentedSample a = crop_augment(s, skeleton(), rng);
    if (a.mode == CropMode::kNone) continue;
    lo = std::min(lo, a.factor);
    hi = std::max(hi, a.factor);
    if (i < 2000) {
      CHECK(a.sample.gt_joints3d->cwiseEqual(*s.gt_joints3d).all());
      CHECK(a.sample.gt_params->pose == s.gt_params->pose);
      for (int j = 0; j < 24; ++j)
        if (a.sample.observation.confidence[j] > 0.0) CHECK(s.observation.confidence[j] > 0.0);
      changed += (a.sample.observation.confidence.array() > 0).count() <
                 (s.observation.confidence.array() > 0).count();
    }
  }
  CHECK(lo >= 0.8);
  CHECK(hi <= 1.2);
  CHECK(changed > 0);

  TrainingSample blind = samples[0];
  for (int j : skeleton().upper_body_joints) blind.observation.confidence[j] = 0.0;
  for (int j : skeleton().face_arm_joints) blind.observation.confidence[j] = 0.0;
  const AugmentedSample same = crop_augment(blind, skeleton(), rng);
  CHECK(same.mode == CropMode::kNone);
  CHECK(same.sample.observation.keypoints == blind.observation.keypoints);
  CHECK(same.sample.observation.confidence == blind.observation.confidence);
}

TEST_CASE("training overfits a tiny corpus and is deterministic") {
  const auto samples = corpus(10, 10, true);
  TrainConfig cfg;
  cfg.hidden = {64};
  cfg.steps = 5000;
  cfg.batch_size = 10;
  cfg.lambda_shape = 0.0;  // the shape regularizer alone keeps the loss away from zero
  cfg.seed = 3;
  const TrainResult a = train_regressor({samples}, {{1.0}}, skeleton(), cfg);
  CHECK(a.loss_curve.size() == 5000);
  double tail = 0.0;
  for (size_t i = a.loss_curve.size() - 100; i < a.loss_curve.size(); ++i) tail += a.loss_curve[i];
  tail /= 100.0;
  MESSAGE("loss start " << a.loss_curve.front() << " end " << tail);
  CHECK(tail < 0.02 * a.loss_curve.front());
  CHECK(tail < 1e-3);

  // a constant schedule makes a shorter run a prefix of a longer one
  cfg.lr_final_ratio = 1.0;
  cfg.steps = 600;
  const TrainResult longer = train_regressor({samples}, {{1.0}}, skeleton(), cfg);
  cfg.steps = 300;
  const TrainResult b = train_regressor({samples}, {{1.0}}, skeleton(), cfg);
  const TrainResult c = train_regressor({samples}, {{1.0}}, skeleton(), cfg);
  CHECK(b.loss_curve == c.loss_curve);
  CHECK(b.weights.bitwise_equal(c.weights));
  for (size_t i = 0; i < b.loss_curve.size(); ++i) CHECK(b.loss_curve[i] == longer.loss_curve[i]);
}

TEST_CASE("training on 2D-only data halves held-out reprojection loss") {
  const auto train = corpus(400, 11, false);
  const auto held = corpus(100, 12, false);
  TrainConfig cfg;
  cfg.hidden = {64, 64};
  cfg.steps = 1500;
  cfg.batch_size = 32;
  const double before = mean_normalized_reprojection(init_regressor(make_architecture(skeleton(), cfg.hidden), 1), held);
  const TrainResult r = train_regressor({train}, {{1.0}}, skeleton(), cfg);
  const double after = mean_normalized_reprojection(r.weights, held);
  MESSAGE("held-out 2D loss " << before << " -> " << after);
  CHECK(after < 0.5 * before);
}

TEST_CASE("training rejects bad inputs") {
  TrainConfig cfg;
  cfg.steps = 1;
  CHECK_THROWS_AS(train_regressor({}, {{1.0}}, skeleton(), cfg), ParameterError);
  CHECK_THROWS_AS(train_regressor({{}}, {{1.0}}, skeleton(), cfg), ParameterError);
  CHECK_THROWS_AS(train_regressor({corpus(2, 1, false)}, {{0.5, 0.5}}, skeleton(), cfg), ParameterError);
}

TEST_CASE("weights file round trip") {
  const auto dir = test::temp_dir("weights");
  const RegressorWeights w = init_regressor(make_architecture(skeleton(), {20, 10}, Activation::kRelu), 12);
  const std::string path = (dir / "w.eftw").string();
  save_weights(w, path);
  const RegressorWeights back = load_weights(path);
  CHECK(back.bitwise_equal(w));
  CHECK(back.arch.activation == Activation::kRelu);
  CHECK(weights_digest(back) == weights_digest(w));

  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes.substr(0, 4) == "EFTW");
  {
    std::ofstream out(dir / "trunc.eftw", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 5);
  }
  CHECK_THROWS_AS(load_weights((dir / "trunc.eftw").string()), FormatError);
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream out(dir / "magic.eftw", std::ios::binary);
    out << bad;
  }
  CHECK_THROWS_AS(load_weights((dir / "magic.eftw").string()), FormatError);
  {
    std::string bad = bytes;
    bad[4] = 9;
    std::ofstream out(dir / "version.eftw", std::ios::binary);
    out << bad;
  }
  CHECK_THROWS_AS(load_weights((dir / "version.eftw").string()), FormatError);
  CHECK_THROWS_AS(load_weights((dir / "absent.eftw").string()), IoError);
}
