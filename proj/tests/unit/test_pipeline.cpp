#include <cmath>
#include <fstream>

#include "doctest.h"
#include "eft/digest.hpp"
#include "eft/errors.hpp"
#include "eft/pipeline.hpp"
#include "json.hpp"
#include "test_support.hpp"

using namespace eft;
using eft::test::max_abs;
using nlohmann::json;

namespace {

const Skeleton& skeleton() {
  static const Skeleton sk = make_template(24, 10, 0);
  return sk;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.lab_size = 60;
  c.wild_train_size = 40;
  c.wild_test_size = 20;
  c.train.hidden = {16};
  c.train.steps = 60;
  c.train.batch_size = 16;
  c.fit.smplify_stage1_iters = 5;
  c.fit.smplify_stage2_iters = 5;
  c.fit.eft_max_iters = 3;
  c.filter.max_2d_loss = 1.0;
  c.postprocess_limit = 5;
  c.prior_components = 2;
  return c;
}

}  // namespace

TEST_CASE("filter thresholds are inclusive and exact") {
  const FilterRule rule;
  CHECK(apply_filter(rule, 5.0, 0.01).accepted);
  const FilterDecision shape = apply_filter(rule, 5.0 + 1e-9, 0.0);
  CHECK_FALSE(shape.accepted);
  CHECK(shape.reason == "shape");
  CHECK(apply_filter(rule, 5.1, 0.0).reason == "shape");
  const FilterDecision reproj = apply_filter(rule, 0.0, 0.01 + 1e-12);
  CHECK_FALSE(reproj.accepted);
  CHECK(reproj.reason == "reproj");
  CHECK(apply_filter(rule, 1.0, 0.02).reason == "reproj");
  CHECK(apply_filter(rule, 1.0, std::nan("")).reason == "reproj");
  CHECK(apply_filter(rule, std::nextafter(5.0, 0.0), std::nextafter(0.01, 0.0)).accepted);

  FilterRule custom;
  custom.max_abs_shape = 2.5;
  custom.max_2d_loss = 0.003;
  CHECK(apply_filter(custom, 2.5, 0.003).accepted);
  CHECK_FALSE(apply_filter(custom, std::nextafter(2.5, 3.0), 0.0).accepted);
  CHECK_FALSE(apply_filter(custom, 0.0, std::nextafter(0.003, 1.0)).accepted);
  custom.max_2d_loss = 0.0;
  CHECK_THROWS_AS(custom.validate(), ParameterError);
}

TEST_CASE("shape statistic and normalized loss") {
  Eigen::VectorXd beta(4);
  beta << 1.0, -6.0, 2.0, 0.5;
  CHECK(shape_statistic(beta, false) == 6.0);
  CHECK(shape_statistic(beta, true) == 2.0);
  Observation obs{Keypoints2D::Zero(2, 4), Eigen::VectorXd::Ones(4)};
  Keypoints2D pred = obs.keypoints;
  pred.col(0) = Eigen::Vector2d(11.2, 0.0);
  CHECK(std::abs(normalized_2d_loss(pred, obs) - (11.2 * 11.2 / 4) / (112.0 * 112.0)) < 1e-15);
}

TEST_CASE("filter on a constructed fit") {
  std::mt19937_64 rng(1);
  FitResult fit;
  fit.params = test::random_params(skeleton(), rng, 0.3, 0.5);
  fit.camera = {100.0, Eigen::Vector2d(112, 112)};
  const auto observe = [&] {
    return Observation{project_weak_perspective(fit.camera, forward_kinematics(skeleton(), fit.params)),
                       Eigen::VectorXd::Ones(24)};
  };
  CHECK(apply_filter({}, fit, observe(), skeleton()).accepted);
  fit.params.shape[3] = -(5.0 + 1e-9);
  const Observation obs = observe();
  CHECK(apply_filter({}, fit, obs, skeleton()).reason == "shape");
  FilterRule signed_rule;
  signed_rule.signed_shape = true;
  CHECK(apply_filter(signed_rule, fit, obs, skeleton()).accepted);
  fit.params.shape[3] += 0.5;
  fit.camera.translation.x() += 20.0;
  CHECK(apply_filter({}, fit, obs, skeleton()).reason == "reproj");
}

TEST_CASE("pseudo ground truth") {
  const auto dir = test::temp_dir("pseudo");
  const std::string wild = (dir / "wild.jsonl").string();
  gen_dataset(WorldKind::kWild, 12, wild_world(), 2, skeleton(), wild);
  const RegressorWeights w = init_regressor(make_architecture(skeleton(), {16}), 3);
  const RegressorWeights copy = w;
  FitConfig cfg;
  cfg.eft_lr = 1e-3;
  FilterRule rule;
  rule.max_2d_loss = 0.02;
  const std::string out = (dir / "pseudo.jsonl").string();
  const PseudoGtResult r = generate_pseudo_gt(w, wild, skeleton(), cfg, rule, out);
  CHECK(w.bitwise_equal(copy));
  CHECK(r.accepted + r.rejected + r.failed == 12);
  CHECK(r.log.size() == 12);
  const Dataset pseudo = read_dataset(out);
  CHECK(static_cast<int>(pseudo.records.size()) == r.accepted);
  for (const auto& rec : pseudo.records) {
    CHECK(rec.provenance == "eft-pseudo");
    REQUIRE(rec.truth.has_value());
    CHECK(max_abs(forward_kinematics(skeleton(), rec.truth->params) - rec.truth->joints3d) < 1e-12);
  }

  // decisions are reproduced from the logged statistics alone
  std::ifstream log(out + ".log");
  std::string line;
  std::getline(log, line);
  CHECK(json::parse(line)["loss_units"].get<std::string>().find("11.2 px") != std::string::npos);
  int rows = 0;
  while (std::getline(log, line)) {
    const json j = json::parse(line);
    const FilterDecision d = apply_filter(rule, j["shape_stat"].get<double>(), j["normalized_loss"].get<double>());
    CHECK(d.accepted == j["accepted"].get<bool>());
    CHECK(d.reason == j["reason"].get<std::string>());
    ++rows;
  }
  CHECK(rows == 12);

  // a strict threshold rejects on reprojection
  FilterRule strict;
  strict.max_2d_loss = 1e-12;
  const PseudoGtResult none = generate_pseudo_gt(w, read_dataset(wild), skeleton(), cfg, strict);
  CHECK(none.accepted == 0);
  for (const auto& e : none.log) CHECK(e.reason == "reproj");

  // an unusable record is logged, not fatal
  Dataset bad = read_dataset(wild);
  bad.records[0].observation.confidence.setZero();
  const PseudoGtResult partial = generate_pseudo_gt(w, bad, skeleton(), cfg, rule);
  CHECK(partial.failed == 1);
  CHECK(partial.log[0].reason == "error");
  CHECK_FALSE(partial.log[0].error.empty());
}

TEST_CASE("histogram") {
  const Histogram h = make_histogram({1.0, 2.0, 2.5, 3.0, 10.0}, 4);
  CHECK(h.edges.size() == 5);
  int total = 0;
  for (int c : h.counts) total += c;
  CHECK(total == 5);
  CHECK(h.counts.back() == 1);
  CHECK(make_histogram({4.0, 4.0}, 3).counts[0] == 2);
  CHECK_THROWS_AS(make_histogram({1.0}, 0), ParameterError);
}

TEST_CASE("retention and oracle studies") {
  const auto dir = test::temp_dir("studies");
  const std::string test_path = (dir / "test.jsonl").string();
  gen_dataset(WorldKind::kWild, 15, wild_world(), 7, skeleton(), test_path);
  const Dataset test = read_dataset(test_path);
  const TruthSidecar truth = read_truth_sidecar(sidecar_path(test_path));
  const RegressorWeights w = init_regressor(make_architecture(skeleton(), {16}), 4);
  FitConfig cfg;
  cfg.eft_lr = 1e-3;

  const RetentionResult r = retention_study(w, test, truth, skeleton(), cfg, 8, {0, 3}, 5);
  CHECK(r.weights_hash_before == r.weights_hash_after);
  REQUIRE(r.curves.size() == 2);
  for (double v : r.curves[0].mean_mm) CHECK(v == r.baseline_mm);
  CHECK(r.curves[0].fraction_within_25pct == 1.0);
  for (const auto& c : r.curves) {
    CHECK(c.mean_mm.size() == 8);
    int total = 0;
    for (int n : c.histogram.counts) total += n;
    CHECK(total == 8);
  }
  const RetentionResult again = retention_study(w, test, truth, skeleton(), cfg, 8, {3}, 5);
  CHECK(again.curves[0].mean_mm == r.curves[1].mean_mm);
  CHECK(again.curves[0].sample_ids == r.curves[1].sample_ids);
  CHECK(retention_study(w, test, truth, skeleton(), cfg, 100, {0}, 5).curves[0].mean_mm.size() == 15);

  const OracleStudy zero = oracle_iteration_study(w, test, truth, skeleton(), cfg, 0);
  CHECK(zero.oracle_mm == zero.baseline_mm);
  CHECK(zero.best_fixed_mm == zero.baseline_mm);
  CHECK(zero.default_stopping_mm == zero.baseline_mm);

  const OracleStudy s = oracle_iteration_study(w, test, truth, skeleton(), cfg, 6, 10);
  CHECK(s.count == 10);
  CHECK(s.fixed_curve_mm.size() == 7);
  CHECK(s.oracle_mm <= s.best_fixed_mm);
  CHECK(s.oracle_mm <= s.default_stopping_mm);
  CHECK(s.best_fixed_mm == s.fixed_curve_mm[static_cast<size_t>(s.best_fixed)]);
}

TEST_CASE("config parsing") {
  const KeyValues kv = parse_key_values("# comment\nseed = 9\n  lab_size=10  # trailing\n\nfit.eft_lr = 2e-4\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("lab_size") == "10");
  CHECK_THROWS_AS(parse_key_values("seed = 1\nseed = 2\n"), InputError);
  CHECK_THROWS_AS(parse_key_values("no equals sign\n"), InputError);

  ExperimentConfig c;
  const std::string before = c.digest();
  apply_config(kv, c);
  CHECK(c.seed == 9);
  CHECK(c.lab_size == 10);
  CHECK(c.fit.eft_lr == 2e-4);
  CHECK(c.digest() != before);
  CHECK_THROWS_AS(apply_config({{"nope", "1"}}, c), InputError);
  CHECK_THROWS_AS(apply_config({{"seed", "abc"}}, c), InputError);
  apply_config({{"train.hidden", "32,16"}, {"wild.noise_std", "0.5"}, {"run.oracle", "true"}}, c);
  CHECK(c.train.hidden == std::vector<int>{32, 16});
  CHECK(c.wild.noise_std == 0.5);
  CHECK(c.run_oracle);

  // the canonical text reproduces the config
  ExperimentConfig d;
  apply_config(parse_key_values(c.canonical_text()), d);
  CHECK(d.canonical_text() == c.canonical_text());
  CHECK(d.digest() == c.digest());
}

TEST_CASE("directory lock and manifest") {
  const auto dir = test::temp_dir("lock");
  {
    DirectoryLock a(dir);
    CHECK_THROWS_AS(DirectoryLock{dir}, IoError);
  }
  CHECK_NOTHROW(DirectoryLock{dir});
  write_file((dir / "a.txt").string(), "alpha");
  write_manifest(dir);
  const json m = json::parse(read_file((dir / "manifest.json").string()));
  REQUIRE(m["files"].size() == 1);
  CHECK(m["files"][0]["sha256"] == sha256_hex("alpha"));
}

TEST_CASE("small experiment end to end") {
  const auto dir = test::temp_dir("experiment");
  const ExperimentConfig c = tiny_config();
  const ExperimentReport r = run_experiment(c, skeleton(), dir / "run1");
  for (const char* model : {"base", "lab-only"}) CHECK(r.find("D", model, "eft") != nullptr);
  const CellReport* a = r.find("A", "lab-only", "none");
  REQUIRE(a != nullptr);
  CHECK(a->eval.count() == 20);
  CHECK(a->provenance.config_digest == c.digest());
  CHECK(a->provenance.skeleton_hash == skeleton_hash(skeleton()));
  if (r.pseudo_accepted > 0) {
    const CellReport* b = r.find("B", "pseudo-only", "none");
    REQUIRE(b != nullptr);
    CHECK(b->eval.ids == a->eval.ids);
    CHECK(r.find("C", "mix", "none") != nullptr);
  }
  for (const char* f : {"lab.jsonl", "wild_train.jsonl", "wild_test.jsonl.truth", "base.eftw", "prior.eftw",
                        "report.json", "manifest.json", "config.txt", "skeleton.json"})
    CHECK(std::filesystem::exists(dir / "run1" / f));
  CHECK_FALSE(std::filesystem::exists(dir / "run1" / ".lock"));

  ExperimentConfig zero = c;
  zero.fit.eft_max_iters = 0;
  zero.run_pseudo_vs_lab = false;
  const ExperimentReport z = run_experiment(zero, skeleton(), dir / "run2");
  CHECK(z.find("D", "base", "eft")->eval.per_sample_mm == z.find("D", "base", "none")->eval.per_sample_mm);
}
