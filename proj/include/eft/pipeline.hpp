#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "eft/evaluation.hpp"
#include "eft/fitters.hpp"
#include "eft/regressor.hpp"
#include "eft/synth_world.hpp"

namespace eft {

// ---- pseudo ground truth ---------------------------------------------------

struct FilterRule {
  double max_abs_shape = 5.0;
  double max_2d_loss = 0.01;  // mean squared joint error in [-1, 1] crop coordinates
  bool signed_shape = false;  // compare max(beta) instead of max |beta|

  void validate() const;
};

struct FilterDecision {
  bool accepted = true;
  std::string reason;  // "", "shape" or "reproj"
};

/// Confidence-weighted mean squared joint distance in normalized crop units,
/// i.e. the pixel loss divided by 112^2.
double normalized_2d_loss(const Keypoints2D& projected, const Observation& obs);
double shape_statistic(const Eigen::VectorXd& shape, bool signed_shape);

/// Pure threshold test; both bounds are inclusive.
FilterDecision apply_filter(const FilterRule& rule, double shape_stat, double normalized_loss);
FilterDecision apply_filter(const FilterRule& rule, const FitResult& fit, const Observation& obs,
                            const Skeleton& skeleton);

struct PseudoLogEntry {
  std::int64_t id = 0;
  bool accepted = false;
  std::string reason;  // filter reason, or "error"
  double shape_stat = 0.0;
  double normalized_loss = 0.0;
  double final_px = 0.0;
  int iterations = 0;
  std::string error;
};

struct PseudoGtResult {
  Dataset pseudo;
  std::vector<PseudoLogEntry> log;
  int accepted = 0;
  int rejected = 0;
  int failed = 0;
};

PseudoGtResult generate_pseudo_gt(const RegressorWeights& weights_star, const Dataset& wild, const Skeleton& skeleton,
                                  const FitConfig& config, const FilterRule& rule);

/// File form: writes the accepted records to `out_path` and the per-record log to `out_path + ".log"`.
PseudoGtResult generate_pseudo_gt(const RegressorWeights& weights_star, const std::string& wild_path,
                                  const Skeleton& skeleton, const FitConfig& config, const FilterRule& rule,
                                  const std::string& out_path);

void write_pseudo_log(const std::vector<PseudoLogEntry>& log, const std::string& path);

// ---- studies ---------------------------------------------------------------

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges
  std::vector<int> counts;
};

Histogram make_histogram(const std::vector<double>& values, int bins);

struct RetentionCurve {
  int iterations = 0;
  std::vector<std::int64_t> sample_ids;
  std::vector<bool> swapped;
  std::vector<double> mean_mm;  // whole-test-set mean PA-MPJPE of each mutated regressor
  double median_mm = 0.0;
  double fraction_within_25pct = 0.0;
  double worst_decile_swap_rate = 0.0;
  double base_swap_rate = 0.0;
  Histogram histogram;
};

struct RetentionResult {
  double baseline_mm = 0.0;
  std::vector<RetentionCurve> curves;
  std::string weights_hash_before;
  std::string weights_hash_after;
};

/// Overfits w* to each chosen sample with a forced iteration count and scores
/// the mutated copy on the whole test set. Samples are a seeded draw without
/// replacement of min(sample_count, N) records.
RetentionResult retention_study(const RegressorWeights& weights_star, const Dataset& test, const TruthSidecar& truth,
                                const Skeleton& skeleton, const FitConfig& config, int sample_count,
                                const std::vector<int>& iters_list, std::uint64_t seed, bool with_scale = true);

struct OracleStudy {
  int max_iters = 0;
  std::size_t count = 0;
  std::vector<double> fixed_curve_mm;  // mean PA-MPJPE after exactly k steps, k = 0..max_iters
  int best_fixed = 0;
  double best_fixed_mm = 0.0;
  double oracle_mm = 0.0;            // per-sample best iterate
  double default_stopping_mm = 0.0;  // early stop at stop_px, capped at max_iters
  double baseline_mm = 0.0;
};

OracleStudy oracle_iteration_study(const RegressorWeights& weights_star, const Dataset& test,
                                   const TruthSidecar& truth, const Skeleton& skeleton, const FitConfig& config,
                                   int max_iters, int sample_limit = 0, bool with_scale = true);

// ---- experiments -----------------------------------------------------------

struct ExperimentConfig {
  std::uint64_t seed = 1;
  int lab_size = 5000;
  int wild_train_size = 5000;
  int wild_test_size = 1000;
  WorldConfig lab = lab_world();
  WorldConfig wild = wild_world();
  TrainConfig train;
  double base_lab_ratio = 0.2;    // w*: lab 3D + wild 2D-only
  double mix_pseudo_ratio = 0.6;  // pseudo share of the lab+pseudo mix
  double mu = 1.0;
  double tau = 0.1;
  FitConfig fit;
  FilterRule filter;
  int prior_components = 8;
  bool with_scale = true;
  bool run_pseudo_vs_lab = true;
  bool run_postprocess = true;
  bool run_retention = false;
  bool run_oracle = false;
  int postprocess_limit = 0;  // 0 = whole test set
  int retention_samples = 500;
  std::vector<int> retention_iters = {20, 100};
  int oracle_max_iters = 20;

  void validate() const;
  std::string canonical_text() const;
  std::string digest() const;
};

using KeyValues = std::map<std::string, std::string>;

/// "key = value" lines; '#' starts a comment. Duplicate keys are an input error.
KeyValues parse_key_values(const std::string& text);
/// Applies recognized keys; unknown keys are an input error.
void apply_config(const KeyValues& values, ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::string& path);

struct Provenance {
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string skeleton_hash;
};

struct CellReport {
  std::string cell;   // A, B, C or base on the whole test set; D for post-processing
  std::string model;  // base, lab-only, pseudo-only, mix
  std::string post;   // none, smplify, eft
  EvalReport eval;
  Provenance provenance;
};

struct ExperimentReport {
  Provenance provenance;
  std::vector<CellReport> cells;
  int pseudo_accepted = 0;
  int pseudo_rejected = 0;
  int pseudo_failed = 0;
  std::vector<std::string> missing;
  std::optional<RetentionResult> retention;
  std::optional<OracleStudy> oracle;

  const CellReport* find(const std::string& cell, const std::string& model, const std::string& post) const;
};

std::string report_to_json(const ExperimentReport& report);
std::string retention_to_json(const RetentionResult& result);
std::string oracle_to_json(const OracleStudy& study);
std::string eval_to_json(const EvalReport& report, const Provenance& provenance);
std::string format_table(const ExperimentReport& report);

/// Holds `dir/.lock` for its lifetime; a second holder fails with IoError.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Writes manifest.json listing the SHA-256 of every regular file in `dir`
/// other than the manifest and the lock.
void write_manifest(const std::filesystem::path& dir);

/// Generates the corpora, trains w* and the A/B/C models, evaluates the
/// configured cells, and writes all artifacts plus report.json under `dir`.
ExperimentReport run_experiment(const ExperimentConfig& config, const Skeleton& skeleton,
                                const std::filesystem::path& dir);

}  // namespace eft
