#include "eft/skeleton.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "eft/digest.hpp"
#include "eft/errors.hpp"
#include "json.hpp"

namespace eft {

namespace {

using nlohmann::json;

constexpr int kSkeletonFormatVersion = 1;
constexpr double kShapeFieldMagnitude = 0.05;  // meters per unit coefficient
constexpr std::uint64_t kCanonicalBasisSeed = 0x5eedba515ULL;

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d k;
  k << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return k;
}

// Coefficients of R = I + a K + b K^2 and their radial derivatives divided by
// the angle: c = a'(t) / t, d = b'(t) / t.
struct RodriguesCoefficients {
  double a, b, c, d;
};

RodriguesCoefficients rodrigues_coefficients(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-3) {
    return {1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0};
  }
  const double s = std::sin(theta);
  const double co = std::cos(theta);
  return {s / theta, (1.0 - co) / t2, (theta * co - s) / (t2 * theta),
          (theta * s - 2.0 * (1.0 - co)) / (t2 * t2)};
}

struct CanonicalJoint {
  const char* name;
  int parent;
  double x, y, z;
};

// SMPL joint ordering; image-aligned frame (+x to the subject's left as seen by
// the camera, +y down, +z away from the camera).
constexpr CanonicalJoint kCanonical[24] = {
    {"pelvis", kRootParent, 0.0, 0.0, 0.0},
    {"left_hip", 0, 0.09, 0.08, 0.0},
    {"right_hip", 0, -0.09, 0.08, 0.0},
    {"spine1", 0, 0.0, -0.11, 0.0},
    {"left_knee", 1, 0.0, 0.40, 0.0},
    {"right_knee", 2, 0.0, 0.40, 0.0},
    {"spine2", 3, 0.0, -0.14, 0.0},
    {"left_ankle", 4, 0.0, 0.40, 0.0},
    {"right_ankle", 5, 0.0, 0.40, 0.0},
    {"spine3", 6, 0.0, -0.06, 0.0},
    {"left_foot", 7, 0.0, 0.06, -0.12},
    {"right_foot", 8, 0.0, 0.06, -0.12},
    {"neck", 9, 0.0, -0.21, 0.0},
    {"left_collar", 9, 0.07, -0.12, 0.0},
    {"right_collar", 9, -0.07, -0.12, 0.0},
    {"head", 12, 0.0, -0.09, 0.0},
    {"left_shoulder", 13, 0.10, 0.02, 0.0},
    {"right_shoulder", 14, -0.10, 0.02, 0.0},
    {"left_elbow", 16, 0.26, 0.0, 0.0},
    {"right_elbow", 17, -0.26, 0.0, 0.0},
    {"left_wrist", 18, 0.25, 0.0, 0.0},
    {"right_wrist", 19, -0.25, 0.0, 0.0},
    {"left_hand", 20, 0.08, 0.0, 0.0},
    {"right_hand", 21, -0.08, 0.0, 0.0},
};

// Random direction fields with zero root rows, orthogonalized and scaled so the
// largest per-joint displacement of each column is kShapeFieldMagnitude.
Eigen::MatrixXd make_shape_basis(int num_joints, int num_shape_dims, std::mt19937_64& rng) {
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(3 * num_joints, num_shape_dims);
  if (num_shape_dims == 0) return basis;
  const int rows = 3 * (num_joints - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd raw(rows, num_shape_dims);
  for (int c = 0; c < num_shape_dims; ++c)
    for (int r = 0; r < rows; ++r) raw(r, c) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, num_shape_dims);
  for (int c = 0; c < num_shape_dims; ++c) {
    double largest = 0.0;
    for (int j = 0; j < num_joints - 1; ++j) largest = std::max(largest, q.col(c).segment<3>(3 * j).norm());
    q.col(c) *= kShapeFieldMagnitude / largest;
  }
  basis.bottomRows(rows) = q;
  return basis;
}

Skeleton canonical_humanoid(int num_shape_dims) {
  Skeleton s;
  s.num_joints = 24;
  s.num_shape_dims = num_shape_dims;
  s.rest_offsets.resize(3, 24);
  for (int j = 0; j < 24; ++j) {
    s.parents.push_back(kCanonical[j].parent);
    s.names.emplace_back(kCanonical[j].name);
    s.rest_offsets.col(j) << kCanonical[j].x, kCanonical[j].y, kCanonical[j].z;
  }
  std::mt19937_64 rng(kCanonicalBasisSeed);
  s.shape_basis = make_shape_basis(24, num_shape_dims, rng);
  s.leg_chains = {{4, 7}, {5, 8}};
  s.mirror_pairs = {{1, 2}, {4, 5}, {7, 8}, {10, 11}, {13, 14}, {16, 17}, {18, 19}, {20, 21}, {22, 23}};
  s.hip_joints = {1, 2};
  s.ankle_joints = {7, 8};
  s.torso_joints = {0, 1, 2, 3, 6, 9, 12, 16, 17};
  s.upper_body_joints = {0, 1, 2, 3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23};
  s.face_arm_joints = {12, 13, 14, 15, 16, 17, 18, 19};
  return s;
}

Skeleton random_tree(int num_joints, int num_shape_dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> length(0.1, 0.4);
  Skeleton s;
  s.num_joints = num_joints;
  s.num_shape_dims = num_shape_dims;
  s.rest_offsets = Joints3D::Zero(3, num_joints);
  s.parents.push_back(kRootParent);
  s.names.emplace_back("j0");
  for (int j = 1; j < num_joints; ++j) {
    std::uniform_int_distribution<int> pick(0, j - 1);
    s.parents.push_back(pick(rng));
    s.names.push_back("j" + std::to_string(j));
    Eigen::Vector3d dir(normal(rng), normal(rng), normal(rng));
    s.rest_offsets.col(j) = dir.normalized() * length(rng);
  }
  s.shape_basis = make_shape_basis(num_joints, num_shape_dims, rng);
  for (int j = num_joints - 1; j >= 1 && s.leg_chains.size() < 2; --j) {
    const int p = s.parents[j];
    if (p == 0) continue;
    bool used = false;
    for (const auto& [a, b] : s.leg_chains) used = used || a == j || b == j || a == p || b == p;
    if (!used) s.leg_chains.emplace_back(p, j);
  }
  for (int j = 0; j < num_joints; ++j) s.torso_joints.push_back(j);
  return s;
}

bool valid_index(int j, int n) { return j >= 0 && j < n; }

}  // namespace

void Skeleton::validate() const {
  if (num_joints < 2) throw ParameterError("skeleton needs at least 2 joints");
  if (num_shape_dims < 0) throw ParameterError("negative shape dimension count");
  if (static_cast<int>(parents.size()) != num_joints || static_cast<int>(names.size()) != num_joints ||
      rest_offsets.cols() != num_joints || shape_basis.rows() != 3 * num_joints ||
      shape_basis.cols() != num_shape_dims)
    throw ParameterError("skeleton tables disagree with joint/shape counts");
  if (parents[0] != kRootParent) throw ParameterError("joint 0 must be the root");
  for (int j = 1; j < num_joints; ++j)
    if (parents[j] < 0 || parents[j] >= j) throw ParameterError("parent index must precede child");
  auto check = [&](int j) {
    if (!valid_index(j, num_joints)) throw ParameterError("joint index out of range");
  };
  for (const auto& [a, b] : leg_chains) check(a), check(b);
  for (const auto& [a, b] : mirror_pairs) check(a), check(b);
  for (const auto* list : {&hip_joints, &ankle_joints, &torso_joints, &upper_body_joints, &face_arm_joints})
    for (int j : *list) check(j);
}

BodyParams BodyParams::zeros(const Skeleton& skeleton) {
  return {Eigen::VectorXd::Zero(3 * skeleton.num_joints), Eigen::VectorXd::Zero(skeleton.num_shape_dims)};
}

Skeleton make_template(int num_joints, int num_shape_dims, std::uint64_t seed) {
  if (num_joints < 2) throw ParameterError("num_joints must be >= 2");
  if (num_shape_dims < 0) throw ParameterError("num_shape_dims must be >= 0");
  if (num_shape_dims > 3 * (num_joints - 1))
    throw ParameterError("num_shape_dims exceeds the offset degrees of freedom");
  Skeleton s = (seed == 0 && num_joints == 24) ? canonical_humanoid(num_shape_dims)
                                               : random_tree(num_joints, num_shape_dims, seed);
  s.validate();
  return s;
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle) {
  const auto co = rodrigues_coefficients(axis_angle.norm());
  const Eigen::Matrix3d k = skew(axis_angle);
  return Eigen::Matrix3d::Identity() + co.a * k + co.b * (k * k);
}

std::array<Eigen::Matrix3d, 3> rodrigues_jacobian(const Eigen::Vector3d& axis_angle) {
  const auto co = rodrigues_coefficients(axis_angle.norm());
  const Eigen::Matrix3d k = skew(axis_angle);
  const Eigen::Matrix3d k2 = k * k;
  std::array<Eigen::Matrix3d, 3> out;
  for (int i = 0; i < 3; ++i) {
    const Eigen::Matrix3d ei = skew(Eigen::Vector3d::Unit(i));
    out[i] = co.a * ei + co.b * (ei * k + k * ei) + (co.c * axis_angle[i]) * k + (co.d * axis_angle[i]) * k2;
  }
  return out;
}

Joints3D shaped_offsets(const Skeleton& skeleton, std::span<const double> shape) {
  if (static_cast<int>(shape.size()) != skeleton.num_shape_dims)
    throw ParameterError("shape length does not match skeleton");
  Joints3D offsets = skeleton.rest_offsets;
  if (skeleton.num_shape_dims > 0) {
    const Eigen::Map<const Eigen::VectorXd> beta(shape.data(), skeleton.num_shape_dims);
    const Eigen::VectorXd delta = skeleton.shape_basis * beta;
    offsets += Eigen::Map<const Joints3D>(delta.data(), 3, skeleton.num_joints);
  }
  return offsets;
}

Joints3D rest_joints(const Skeleton& skeleton, std::span<const double> shape) {
  Joints3D joints = shaped_offsets(skeleton, shape);
  for (int j = 1; j < skeleton.num_joints; ++j) joints.col(j) += joints.col(skeleton.parents[j]);
  return joints;
}

void forward_kinematics(const Skeleton& skeleton, const BodyParams& params, KinematicsCache& cache) {
  const int n = skeleton.num_joints;
  if (params.pose.size() != 3 * n) throw ParameterError("pose length does not match skeleton");
  cache.offsets = shaped_offsets(skeleton, {params.shape.data(), static_cast<size_t>(params.shape.size())});
  cache.local.resize(n);
  cache.global.resize(n);
  cache.joints.resize(3, n);
  for (int j = 0; j < n; ++j) {
    cache.local[j] = rodrigues(params.joint_rotation(j));
    const int p = skeleton.parents[j];
    if (p == kRootParent) {
      cache.global[j] = cache.local[j];
      cache.joints.col(j) = cache.global[j] * cache.offsets.col(j);
    } else {
      cache.global[j] = cache.global[p] * cache.local[j];
      cache.joints.col(j) = cache.joints.col(p) + cache.global[p] * cache.offsets.col(j);
    }
  }
}

Joints3D forward_kinematics(const Skeleton& skeleton, const BodyParams& params) {
  KinematicsCache cache;
  forward_kinematics(skeleton, params, cache);
  return std::move(cache.joints);
}

void forward_kinematics_backward(const Skeleton& skeleton, const BodyParams& params,
                                 const KinematicsCache& cache, const Joints3D& grad_joints,
                                 Eigen::Ref<Eigen::VectorXd> grad_pose,
                                 Eigen::Ref<Eigen::VectorXd> grad_shape) {
  const int n = skeleton.num_joints;
  Joints3D g_joint = grad_joints;
  Joints3D g_offset(3, n);
  std::vector<Eigen::Matrix3d> g_global(n, Eigen::Matrix3d::Zero());
  for (int j = n - 1; j >= 0; --j) {
    const int p = skeleton.parents[j];
    if (p == kRootParent) {
      g_global[j] += g_joint.col(j) * cache.offsets.col(j).transpose();
      g_offset.col(j) = cache.global[j].transpose() * g_joint.col(j);
    } else {
      g_joint.col(p) += g_joint.col(j);
      g_global[p] += g_joint.col(j) * cache.offsets.col(j).transpose();
      g_offset.col(j) = cache.global[p].transpose() * g_joint.col(j);
    }
    // global[j] = global[p] * local[j]
    Eigen::Matrix3d g_local;
    if (p == kRootParent) {
      g_local = g_global[j];
    } else {
      g_global[p] += g_global[j] * cache.local[j].transpose();
      g_local = cache.global[p].transpose() * g_global[j];
    }
    const auto dr = rodrigues_jacobian(params.joint_rotation(j));
    for (int k = 0; k < 3; ++k) grad_pose[3 * j + k] += (g_local.array() * dr[k].array()).sum();
  }
  if (skeleton.num_shape_dims > 0) {
    const Eigen::Map<const Eigen::VectorXd> flat(g_offset.data(), 3 * n);
    grad_shape += skeleton.shape_basis.transpose() * flat;
  }
}

std::string skeleton_to_text(const Skeleton& s) {
  json doc;
  doc["format"] = "eft-skeleton";
  doc["version"] = kSkeletonFormatVersion;
  doc["num_joints"] = s.num_joints;
  doc["num_shape_dims"] = s.num_shape_dims;
  doc["parents"] = s.parents;
  doc["names"] = s.names;
  doc["rest_offsets"] = std::vector<double>(s.rest_offsets.data(), s.rest_offsets.data() + s.rest_offsets.size());
  std::vector<double> basis(s.shape_basis.size());
  Eigen::Map<Eigen::MatrixXd>(basis.data(), s.shape_basis.rows(), s.shape_basis.cols()) = s.shape_basis;
  doc["shape_basis"] = basis;
  doc["leg_chains"] = s.leg_chains;
  doc["mirror_pairs"] = s.mirror_pairs;
  doc["hip_joints"] = s.hip_joints;
  doc["ankle_joints"] = s.ankle_joints;
  doc["torso_joints"] = s.torso_joints;
  doc["upper_body_joints"] = s.upper_body_joints;
  doc["face_arm_joints"] = s.face_arm_joints;
  return doc.dump();
}

Skeleton skeleton_from_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("skeleton document: ") + e.what());
  }
  if (doc.value("format", "") != "eft-skeleton") throw FormatError("not a skeleton document");
  if (doc.value("version", 0) != kSkeletonFormatVersion) throw FormatError("unsupported skeleton version");
  try {
    Skeleton s;
    s.num_joints = doc.at("num_joints").get<int>();
    s.num_shape_dims = doc.at("num_shape_dims").get<int>();
    s.parents = doc.at("parents").get<std::vector<int>>();
    s.names = doc.at("names").get<std::vector<std::string>>();
    const auto offsets = doc.at("rest_offsets").get<std::vector<double>>();
    const auto basis = doc.at("shape_basis").get<std::vector<double>>();
    if (offsets.size() != 3u * s.num_joints || basis.size() != 3u * s.num_joints * s.num_shape_dims)
      throw FormatError("skeleton array sizes disagree with counts");
    s.rest_offsets = Eigen::Map<const Joints3D>(offsets.data(), 3, s.num_joints);
    s.shape_basis = Eigen::Map<const Eigen::MatrixXd>(basis.data(), 3 * s.num_joints, s.num_shape_dims);
    s.leg_chains = doc.at("leg_chains").get<std::vector<std::pair<int, int>>>();
    s.mirror_pairs = doc.at("mirror_pairs").get<std::vector<std::pair<int, int>>>();
    s.hip_joints = doc.at("hip_joints").get<std::vector<int>>();
    s.ankle_joints = doc.at("ankle_joints").get<std::vector<int>>();
    s.torso_joints = doc.at("torso_joints").get<std::vector<int>>();
    s.upper_body_joints = doc.at("upper_body_joints").get<std::vector<int>>();
    s.face_arm_joints = doc.at("face_arm_joints").get<std::vector<int>>();
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("skeleton document: ") + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(std::string("skeleton document: ") + e.what());
  }
}

Skeleton load_skeleton(const std::string& path) { return skeleton_from_text(read_file(path)); }

void save_skeleton(const Skeleton& skeleton, const std::string& path) {
  write_file(path, skeleton_to_text(skeleton) + "\n");
}

std::string skeleton_hash(const Skeleton& skeleton) { return sha256_hex(skeleton_to_text(skeleton)); }

}  // namespace eft
