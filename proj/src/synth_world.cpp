#include "eft/synth_world.hpp"

#include <algorithm>
#include <fstream>
#include <numbers>
#include <sstream>

#include "eft/digest.hpp"
#include "eft/errors.hpp"
#include "json.hpp"

namespace eft {

namespace {

using nlohmann::json;

constexpr int kDatasetFormatVersion = 1;
constexpr int kMaxOcclusionAttempts = 100;

// Limb joints of the canonical template; other skeletons treat every non-root
// joint as a limb.
bool is_limb_joint(const Skeleton& skeleton, int j) {
  if (skeleton.num_joints != 24) return j != 0;
  static constexpr int kLimbs[] = {1, 2, 4, 5, 7, 8, 13, 14, 16, 17, 18, 19, 20, 21};
  return std::find(std::begin(kLimbs), std::end(kLimbs), j) != std::end(kLimbs);
}

Eigen::VectorXd standing_pose(const Skeleton& skeleton) {
  Eigen::VectorXd pose = Eigen::VectorXd::Zero(3 * skeleton.num_joints);
  if (skeleton.num_joints == 24) {
    pose[3 * 16 + 2] = 1.2;   // left arm down
    pose[3 * 17 + 2] = -1.2;  // right arm down
    pose[3 * 18 + 1] = -0.3;  // slight elbow bend
    pose[3 * 19 + 1] = 0.3;
  }
  return pose;
}

bool descends_from(const Skeleton& skeleton, int joint, int ancestor) {
  for (int j = joint; j != kRootParent; j = skeleton.parents[j])
    if (j == ancestor) return true;
  return false;
}

json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json mat_json(const Eigen::MatrixXd& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

Eigen::MatrixXd mat_from(const json& j, Eigen::Index rows, Eigen::Index cols) {
  const auto v = j.get<std::vector<double>>();
  if (static_cast<Eigen::Index>(v.size()) != rows * cols) throw FormatError("array has the wrong length");
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
}

Eigen::VectorXd vec_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json truth_json(const GroundTruth& t) {
  json j;
  j["pose"] = vec_json(t.params.pose);
  j["shape"] = vec_json(t.params.shape);
  j["camera"] = {t.camera.scale, t.camera.translation.x(), t.camera.translation.y()};
  j["joints3d"] = mat_json(t.joints3d);
  if (t.clean_keypoints) j["clean_keypoints"] = mat_json(*t.clean_keypoints);
  j["swapped"] = t.swapped;
  return j;
}

GroundTruth truth_from(const json& j) {
  GroundTruth t;
  t.params.pose = vec_from(j.at("pose"));
  t.params.shape = vec_from(j.at("shape"));
  const auto cam = j.at("camera").get<std::vector<double>>();
  if (cam.size() != 3) throw FormatError("camera needs 3 values");
  t.camera = {cam[0], Eigen::Vector2d(cam[1], cam[2])};
  const Eigen::Index n = t.params.pose.size() / 3;
  t.joints3d = mat_from(j.at("joints3d"), 3, n);
  if (j.contains("clean_keypoints")) t.clean_keypoints = mat_from(j.at("clean_keypoints"), 2, n);
  t.swapped = j.value("swapped", false);
  return t;
}

json header_json(const DatasetHeader& h, const char* role) {
  json j;
  j["format"] = "eft-dataset";
  j["version"] = kDatasetFormatVersion;
  j["role"] = role;
  j["kind"] = h.kind;
  j["skeleton_hash"] = h.skeleton_hash;
  j["config_digest"] = h.config_digest;
  j["count"] = h.count;
  return j;
}

DatasetHeader header_from(const json& j, const std::string& expected_role, const std::string& path) {
  if (j.value("format", "") != "eft-dataset") throw FormatError(path + ":1: not a dataset file");
  if (j.value("version", 0) != kDatasetFormatVersion) throw FormatError(path + ":1: unsupported dataset version");
  const std::string role = j.value("role", "");
  if (role != expected_role)
    throw FormatError(path + ":1: expected a '" + expected_role + "' file but found role '" + role + "'");
  return {j.at("kind").get<std::string>(), j.at("skeleton_hash").get<std::string>(),
          j.at("config_digest").get<std::string>(), j.at("count").get<std::int64_t>()};
}

// Reads the header and hands each subsequent line to `on_record` with its line number.
template <typename OnRecord>
DatasetHeader read_lines(const std::string& path, const std::string& role, OnRecord&& on_record) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) return {};  // empty file: no header, no records
  DatasetHeader header;
  try {
    header = header_from(json::parse(line), role, path);
  } catch (const json::exception& e) {
    throw FormatError(path + ":1: " + e.what());
  }
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      on_record(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return header;
}

}  // namespace

void WorldConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (pose_components < 1) throw ParameterError("pose_components must be >= 1");
  if (limb_mean_spread < 0 || limb_spread < 0 || torso_spread < 0 || root_spread < 0 || shape_std < 0 ||
      noise_std < 0 || translation_range < 0)
    throw ParameterError("spreads and standard deviations must be non-negative");
  if (!(scale_min > 0.0) || scale_max < scale_min) throw ParameterError("invalid camera scale range");
  if (!prob(occlusion_prob) || !prob(swap_prob)) throw ParameterError("probabilities must lie in [0, 1]");
  if (min_visible < 0) throw ParameterError("min_visible must be non-negative");
}

std::string WorldConfig::canonical_text() const {
  json j;
  j["pose_components"] = pose_components;
  j["pose_seed"] = pose_seed;
  j["limb_mean_spread"] = limb_mean_spread;
  j["limb_spread"] = limb_spread;
  j["torso_spread"] = torso_spread;
  j["root_spread"] = root_spread;
  j["shape_std"] = shape_std;
  j["scale_min"] = scale_min;
  j["scale_max"] = scale_max;
  j["translation_range"] = translation_range;
  j["noise_std"] = noise_std;
  j["occlusion_prob"] = occlusion_prob;
  j["min_visible"] = min_visible;
  j["swap_prob"] = swap_prob;
  return j.dump();
}

WorldConfig lab_world() {
  WorldConfig c;
  c.pose_components = 3;
  c.pose_seed = 0x1ab;
  c.limb_mean_spread = 0.3;
  c.limb_spread = 0.15;
  c.torso_spread = 0.05;
  c.root_spread = 0.1;
  c.noise_std = 0.5;
  c.occlusion_prob = 0.0;
  c.swap_prob = 0.0;
  return c;
}

WorldConfig wild_world() {
  WorldConfig c;
  c.pose_seed = 0x3117d;
  return c;
}

PoseDistribution make_pose_distribution(const WorldConfig& config, const Skeleton& skeleton) {
  config.validate();
  const int dim = 3 * skeleton.num_joints;
  const int k_count = config.pose_components;
  std::mt19937_64 rng(config.pose_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  PoseDistribution d;
  d.weights = Eigen::VectorXd::Constant(k_count, 1.0 / k_count);
  d.means.resize(dim, k_count);
  d.stddevs.resize(dim, k_count);
  const Eigen::VectorXd base = standing_pose(skeleton);
  for (int k = 0; k < k_count; ++k) {
    for (int j = 0; j < skeleton.num_joints; ++j) {
      const bool limb = is_limb_joint(skeleton, j);
      for (int a = 0; a < 3; ++a) {
        const int i = 3 * j + a;
        double mean_spread = limb ? config.limb_mean_spread : 0.5 * config.torso_spread;
        double spread = limb ? config.limb_spread : config.torso_spread;
        if (j == 0) {
          mean_spread = config.root_spread;
          spread = config.root_spread;
        }
        d.means(i, k) = base[i] + mean_spread * normal(rng);
        d.stddevs(i, k) = spread;
      }
    }
  }
  return d;
}

SampledBody sample_body(const WorldConfig& config, const PoseDistribution& poses, const Skeleton& skeleton,
                        std::mt19937_64& rng) {
  std::discrete_distribution<int> component(poses.weights.data(), poses.weights.data() + poses.weights.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> scale(config.scale_min, config.scale_max);
  std::uniform_real_distribution<double> shift(-config.translation_range, config.translation_range);
  const int k = component(rng);
  SampledBody b;
  b.params = BodyParams::zeros(skeleton);
  for (Eigen::Index i = 0; i < b.params.pose.size(); ++i)
    b.params.pose[i] = poses.means(i, k) + poses.stddevs(i, k) * normal(rng);
  for (Eigen::Index i = 0; i < b.params.shape.size(); ++i) b.params.shape[i] = config.shape_std * normal(rng);
  b.camera.scale = scale(rng);
  b.camera.translation = Eigen::Vector2d(kCropHalf + shift(rng), kCropHalf + shift(rng));
  b.joints3d = forward_kinematics(skeleton, b.params);
  b.clean_keypoints = project_weak_perspective(b.camera, b.joints3d);
  return b;
}

Corruption corrupt(const Keypoints2D& clean, const WorldConfig& config, const Skeleton& skeleton, std::mt19937_64& rng) {
  const int n = static_cast<int>(clean.cols());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution swap(config.swap_prob);
  std::bernoulli_distribution occlude(config.occlusion_prob);
  Corruption out;
  out.observation.keypoints = clean;
  if (config.noise_std > 0.0)
    for (int j = 0; j < n; ++j)
      for (int a = 0; a < 2; ++a) out.observation.keypoints(a, j) += config.noise_std * normal(rng);

  if (!skeleton.mirror_pairs.empty() && swap(rng)) {
    std::uniform_int_distribution<size_t> pick(0, skeleton.mirror_pairs.size() - 1);
    const auto [left_root, right_root] = skeleton.mirror_pairs[pick(rng)];
    for (const auto& [l, r] : skeleton.mirror_pairs) {
      if (descends_from(skeleton, l, left_root) && descends_from(skeleton, r, right_root)) {
        const Eigen::Vector2d tmp = out.observation.keypoints.col(l);
        out.observation.keypoints.col(l) = out.observation.keypoints.col(r);
        out.observation.keypoints.col(r) = tmp;
      }
    }
    out.swapped = true;
  }

  const int needed = std::min(config.min_visible, n);
  Eigen::VectorXd best;
  int best_visible = -1;
  for (int attempt = 0; attempt < kMaxOcclusionAttempts; ++attempt) {
    Eigen::VectorXd conf = Eigen::VectorXd::Ones(n);
    for (int j = 0; j < n; ++j)
      if (occlude(rng)) conf[j] = 0.0;
    const int visible = static_cast<int>((conf.array() > 0.0).count());
    if (visible > best_visible) {
      best = conf;
      best_visible = visible;
    }
    if (visible >= needed) break;
  }
  out.observation.confidence = best;
  return out;
}

const TruthRecord& TruthSidecar::find(std::int64_t id) const {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw InputError("no ground truth for record " + std::to_string(id));
}

std::string sidecar_path(const std::string& dataset_path) { return dataset_path + ".truth"; }

namespace {

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t record_seed(std::uint64_t seed, std::int64_t id) {
  return splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(id));
}

void gen_dataset(WorldKind kind, int n, const WorldConfig& config, std::uint64_t seed, const Skeleton& skeleton,
                 const std::string& out_path) {
  if (n < 1) throw ParameterError("dataset needs at least one record");
  config.validate();
  const PoseDistribution poses = make_pose_distribution(config, skeleton);
  const std::string kind_name = kind == WorldKind::kLab ? "lab" : "wild";
  const DatasetHeader header{kind_name, skeleton_hash(skeleton), sha256_hex(config.canonical_text()), n};

  Dataset data{header, {}};
  TruthSidecar truth{header, {}};
  data.records.reserve(static_cast<size_t>(n));
  truth.records.reserve(static_cast<size_t>(n));
  for (std::int64_t id = 0; id < n; ++id) {
    std::mt19937_64 rng(record_seed(seed, id));
    const SampledBody body = sample_body(config, poses, skeleton, rng);
    const Corruption c = corrupt(body.clean_keypoints, config, skeleton, rng);
    GroundTruth gt{body.params, body.camera, body.joints3d, body.clean_keypoints, c.swapped};
    DatasetRecord rec{id, c.observation, std::nullopt, "gen:seed=" + std::to_string(seed), kind_name};
    if (kind == WorldKind::kLab) rec.truth = gt;
    data.records.push_back(std::move(rec));
    truth.records.push_back({id, std::move(gt)});
  }
  write_dataset(data, out_path);
  write_truth_sidecar(truth, sidecar_path(out_path));
}

void write_dataset(const Dataset& dataset, const std::string& path) {
  std::ostringstream out;
  DatasetHeader header = dataset.header;
  header.count = static_cast<std::int64_t>(dataset.records.size());
  out << header_json(header, "train").dump() << '\n';
  for (const auto& r : dataset.records) {
    json j;
    j["id"] = r.id;
    j["source"] = r.source;
    j["provenance"] = r.provenance;
    j["keypoints"] = mat_json(r.observation.keypoints);
    j["confidence"] = vec_json(r.observation.confidence);
    if (r.truth) j["truth"] = truth_json(*r.truth);
    out << j.dump() << '\n';
  }
  write_file(path, out.str());
}

Dataset read_dataset(const std::string& path) {
  Dataset d;
  d.header = read_lines(path, "train", [&](const json& j) {
    DatasetRecord r;
    r.id = j.at("id").get<std::int64_t>();
    r.source = j.at("source").get<std::string>();
    r.provenance = j.at("provenance").get<std::string>();
    r.observation.confidence = vec_from(j.at("confidence"));
    r.observation.keypoints = mat_from(j.at("keypoints"), 2, r.observation.confidence.size());
    if (j.contains("truth")) r.truth = truth_from(j.at("truth"));
    d.records.push_back(std::move(r));
  });
  return d;
}

void write_truth_sidecar(const TruthSidecar& sidecar, const std::string& path) {
  std::ostringstream out;
  DatasetHeader header = sidecar.header;
  header.count = static_cast<std::int64_t>(sidecar.records.size());
  out << header_json(header, "truth").dump() << '\n';
  for (const auto& r : sidecar.records) {
    json j;
    j["id"] = r.id;
    j["truth"] = truth_json(r.truth);
    out << j.dump() << '\n';
  }
  write_file(path, out.str());
}

TruthSidecar read_truth_sidecar(const std::string& path) {
  TruthSidecar s;
  s.header = read_lines(path, "truth", [&](const json& j) {
    s.records.push_back({j.at("id").get<std::int64_t>(), truth_from(j.at("truth"))});
  });
  return s;
}

std::vector<TrainingSample> to_training_samples(const Dataset& dataset, double mu, double tau) {
  std::vector<TrainingSample> out;
  out.reserve(dataset.records.size());
  for (const auto& r : dataset.records) {
    TrainingSample s;
    s.observation = r.observation;
    s.source_dataset = r.source;
    if (r.truth) {
      s.gt_joints3d = r.truth->joints3d;
      s.gt_params = r.truth->params;
      s.mu = mu;
      s.tau = tau;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace eft
