#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "eft/camera_losses.hpp"
#include "eft/regressor.hpp"
#include "eft/skeleton.hpp"

namespace eft {

enum class WorldKind { kLab, kWild };

/// Generator settings for one synthetic corpus.
struct WorldConfig {
  // Pose mixture: component means scatter around a standing pose.
  int pose_components = 12;
  std::uint64_t pose_seed = 0;   // fixes the component means
  double limb_mean_spread = 0.3;  // rad, std of component means about the standing pose
  double limb_spread = 0.4;       // rad, within-component std on limb joints
  double torso_spread = 0.1;      // rad, within-component std elsewhere
  double root_spread = 0.2;       // rad, within-component std of the root rotation
  double shape_std = 1.0;
  double scale_min = 90.0;
  double scale_max = 120.0;
  double translation_range = 8.0;  // pixels around the crop center
  double noise_std = 1.0;          // pixels
  double occlusion_prob = 0.1;
  int min_visible = kDefaultMinVisible;
  double swap_prob = 0.02;

  void validate() const;
  std::string canonical_text() const;
};

/// Narrow indoor-like corpus: few pose clusters, clean full annotations.
WorldConfig lab_world();
/// Broad corpus with noise, occlusion and left/right annotation swaps.
WorldConfig wild_world();

/// Pose mixture over the full pose vector (root included). Unlike GmmPrior the
/// standard deviations may be zero.
struct PoseDistribution {
  Eigen::VectorXd weights;
  Eigen::MatrixXd means;    // 3J x K
  Eigen::MatrixXd stddevs;  // 3J x K
};

PoseDistribution make_pose_distribution(const WorldConfig& config, const Skeleton& skeleton);

struct SampledBody {
  BodyParams params;
  CameraParams camera;
  Joints3D joints3d;
  Keypoints2D clean_keypoints;
};

SampledBody sample_body(const WorldConfig& config, const PoseDistribution& poses, const Skeleton& skeleton,
                        std::mt19937_64& rng);

struct Corruption {
  Observation observation;
  bool swapped = false;
};

/// Pixel noise, an optional left/right swap of one limb chain, and per-joint
/// occlusion resampled until at least min_visible joints remain visible.
Corruption corrupt(const Keypoints2D& clean, const WorldConfig& config, const Skeleton& skeleton, std::mt19937_64& rng);

struct GroundTruth {
  BodyParams params;
  CameraParams camera;
  Joints3D joints3d;
  std::optional<Keypoints2D> clean_keypoints;
  bool swapped = false;
};

struct DatasetRecord {
  std::int64_t id = 0;
  Observation observation;
  std::optional<GroundTruth> truth;  // training-visible supervision
  std::string provenance;
  std::string source;
};

struct TruthRecord {
  std::int64_t id = 0;
  GroundTruth truth;
};

struct DatasetHeader {
  std::string kind;
  std::string skeleton_hash;
  std::string config_digest;
  std::int64_t count = 0;
};

struct Dataset {
  DatasetHeader header;
  std::vector<DatasetRecord> records;
};

struct TruthSidecar {
  DatasetHeader header;
  std::vector<TruthRecord> records;

  const TruthRecord& find(std::int64_t id) const;
};

std::string sidecar_path(const std::string& dataset_path);

/// Writes `out_path` and its ".truth" sidecar. Lab records keep their ground
/// truth in the training-visible fields; wild records expose observations only.
void gen_dataset(WorldKind kind, int n, const WorldConfig& config, std::uint64_t seed, const Skeleton& skeleton,
                 const std::string& out_path);

/// Line-delimited JSON; the first line is a header. Rejects sidecar files.
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

void write_truth_sidecar(const TruthSidecar& sidecar, const std::string& path);
/// Reads only files whose header marks them as evaluation sidecars.
TruthSidecar read_truth_sidecar(const std::string& path);

/// Training samples from records; mu and tau apply only where ground truth exists.
std::vector<TrainingSample> to_training_samples(const Dataset& dataset, double mu = 1.0, double tau = 0.1);

std::uint64_t record_seed(std::uint64_t seed, std::int64_t id);

}  // namespace eft
