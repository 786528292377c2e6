#include "eft/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "eft/digest.hpp"
#include "eft/errors.hpp"
#include "eft/gmm_prior.hpp"
#include "json.hpp"

namespace eft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string number_text(double v) { return json(v).dump(); }

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw InputError("config key '" + key + "': not a number: '" + text + "'");
  return v;
}

long parse_long(const std::string& key, const std::string& text) {
  long v = 0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw InputError("config key '" + key + "': not an integer: '" + text + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw InputError("config key '" + key + "': not an unsigned integer");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw InputError("config key '" + key + "': expected true or false");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(static_cast<int>(parse_long(key, item)));
  }
  return out;
}

std::string int_list_text(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// One named setting: reads its current value as text and writes it back from text.
struct Field {
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

using Registry = std::map<std::string, Field>;

template <typename T>
Field num_field(const std::string& key, T& ref) {
  if constexpr (std::is_same_v<T, double>) {
    return {[&ref] { return number_text(ref); }, [&ref, key](const std::string& t) { ref = parse_double(key, t); }};
  } else if constexpr (std::is_same_v<T, bool>) {
    return {[&ref] { return std::string(ref ? "true" : "false"); },
            [&ref, key](const std::string& t) { ref = parse_bool(key, t); }};
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    return {[&ref] { return std::to_string(ref); }, [&ref, key](const std::string& t) { ref = parse_u64(key, t); }};
  } else {
    return {[&ref] { return std::to_string(ref); },
            [&ref, key](const std::string& t) { ref = static_cast<T>(parse_long(key, t)); }};
  }
}

void add_world(Registry& r, const std::string& prefix, WorldConfig& w) {
  auto add = [&](const std::string& name, auto& ref) { r[prefix + name] = num_field(prefix + name, ref); };
  add("pose_components", w.pose_components);
  add("pose_seed", w.pose_seed);
  add("limb_mean_spread", w.limb_mean_spread);
  add("limb_spread", w.limb_spread);
  add("torso_spread", w.torso_spread);
  add("root_spread", w.root_spread);
  add("shape_std", w.shape_std);
  add("scale_min", w.scale_min);
  add("scale_max", w.scale_max);
  add("translation_range", w.translation_range);
  add("noise_std", w.noise_std);
  add("occlusion_prob", w.occlusion_prob);
  add("min_visible", w.min_visible);
  add("swap_prob", w.swap_prob);
}

void add_fit(Registry& r, FitConfig& f) {
  auto add = [&](const std::string& name, auto& ref) { r["fit." + name] = num_field("fit." + name, ref); };
  add("eft_lr", f.eft_lr);
  add("eft_max_iters", f.eft_max_iters);
  add("stop_px", f.stop_px);
  add("early_stop", f.early_stop);
  add("lambda_shape", f.weights.lambda_shape);
  add("mu_3d", f.weights.mu_3d);
  add("tau_params", f.weights.tau_params);
  add("prior_weight", f.weights.prior_weight);
  add("leg_orient_weight", f.weights.leg_orient_weight);
  add("smplify_stage1_iters", f.smplify_stage1_iters);
  add("smplify_stage2_iters", f.smplify_stage2_iters);
  add("smplify_stage1_lr", f.smplify_stage1_lr);
  add("smplify_stage2_lr", f.smplify_stage2_lr);
  add("use_3d_term", f.use_3d_term);
  add("mask_hips_ankles", f.mask_hips_ankles);
  add("smplify_mask_hips_ankles", f.smplify_mask_hips_ankles);
  add("min_visible", f.min_visible);
}

Registry make_registry(ExperimentConfig& c) {
  Registry r;
  r["seed"] = num_field("seed", c.seed);
  r["lab_size"] = num_field("lab_size", c.lab_size);
  r["wild_train_size"] = num_field("wild_train_size", c.wild_train_size);
  r["wild_test_size"] = num_field("wild_test_size", c.wild_test_size);
  add_world(r, "lab.", c.lab);
  add_world(r, "wild.", c.wild);
  r["train.hidden"] = {[&c] { return int_list_text(c.train.hidden); },
                       [&c](const std::string& t) { c.train.hidden = parse_int_list("train.hidden", t); }};
  r["train.activation"] = {[&c] { return std::string(c.train.activation == Activation::kTanh ? "tanh" : "relu"); },
                           [&c](const std::string& t) {
                             if (t == "tanh") c.train.activation = Activation::kTanh;
                             else if (t == "relu") c.train.activation = Activation::kRelu;
                             else throw InputError("config key 'train.activation': expected tanh or relu");
                           }};
  r["train.steps"] = num_field("train.steps", c.train.steps);
  r["train.batch_size"] = num_field("train.batch_size", c.train.batch_size);
  r["train.lr"] = num_field("train.lr", c.train.lr);
  r["train.lr_final_ratio"] = num_field("train.lr_final_ratio", c.train.lr_final_ratio);
  r["train.lambda_shape"] = num_field("train.lambda_shape", c.train.lambda_shape);
  r["train.crop_probability"] = num_field("train.crop_probability", c.train.crop_probability);
  r["train.seed"] = num_field("train.seed", c.train.seed);
  r["base_lab_ratio"] = num_field("base_lab_ratio", c.base_lab_ratio);
  r["mix_pseudo_ratio"] = num_field("mix_pseudo_ratio", c.mix_pseudo_ratio);
  r["mu"] = num_field("mu", c.mu);
  r["tau"] = num_field("tau", c.tau);
  add_fit(r, c.fit);
  r["filter.max_abs_shape"] = num_field("filter.max_abs_shape", c.filter.max_abs_shape);
  r["filter.max_2d_loss"] = num_field("filter.max_2d_loss", c.filter.max_2d_loss);
  r["filter.signed_shape"] = num_field("filter.signed_shape", c.filter.signed_shape);
  r["prior_components"] = num_field("prior_components", c.prior_components);
  r["with_scale"] = num_field("with_scale", c.with_scale);
  r["run.pseudo_vs_lab"] = num_field("run.pseudo_vs_lab", c.run_pseudo_vs_lab);
  r["run.postprocess"] = num_field("run.postprocess", c.run_postprocess);
  r["run.retention"] = num_field("run.retention", c.run_retention);
  r["run.oracle"] = num_field("run.oracle", c.run_oracle);
  r["postprocess_limit"] = num_field("postprocess_limit", c.postprocess_limit);
  r["retention_samples"] = num_field("retention_samples", c.retention_samples);
  r["retention_iters"] = {[&c] { return int_list_text(c.retention_iters); },
                          [&c](const std::string& t) { c.retention_iters = parse_int_list("retention_iters", t); }};
  r["oracle_max_iters"] = num_field("oracle_max_iters", c.oracle_max_iters);
  return r;
}

std::string fit_config_text(const FitConfig& config) {
  FitConfig copy = config;
  Registry r;
  add_fit(r, copy);
  std::string out;
  for (const auto& [k, f] : r) out += k + "=" + f.get() + "\n";
  return out;
}

json provenance_json(const Provenance& p) {
  return {{"seed", p.seed}, {"config_digest", p.config_digest}, {"skeleton_hash", p.skeleton_hash}};
}

json eval_json(const EvalReport& r) {
  return {{"count", r.count()}, {"mean_mm", r.mean_mm}, {"median_mm", r.median_mm}, {"ids", r.ids},
          {"per_sample_mm", r.per_sample_mm}};
}

json retention_json(const RetentionResult& r) {
  json curves = json::array();
  for (const auto& c : r.curves) {
    curves.push_back({{"iterations", c.iterations},
                      {"sample_ids", c.sample_ids},
                      {"swapped", c.swapped},
                      {"mean_mm", c.mean_mm},
                      {"median_mm", c.median_mm},
                      {"fraction_within_25pct", c.fraction_within_25pct},
                      {"worst_decile_swap_rate", c.worst_decile_swap_rate},
                      {"base_swap_rate", c.base_swap_rate},
                      {"histogram", {{"edges", c.histogram.edges}, {"counts", c.histogram.counts}}}});
  }
  return {{"baseline_mm", r.baseline_mm},
          {"curves", curves},
          {"weights_hash_before", r.weights_hash_before},
          {"weights_hash_after", r.weights_hash_after}};
}

json oracle_json(const OracleStudy& s) {
  return {{"max_iters", s.max_iters},          {"count", s.count},
          {"fixed_curve_mm", s.fixed_curve_mm}, {"best_fixed", s.best_fixed},
          {"best_fixed_mm", s.best_fixed_mm},   {"oracle_mm", s.oracle_mm},
          {"default_stopping_mm", s.default_stopping_mm}, {"baseline_mm", s.baseline_mm}};
}

std::vector<Observation> observations_of(const Dataset& d) {
  std::vector<Observation> out;
  out.reserve(d.records.size());
  for (const auto& r : d.records) out.push_back(r.observation);
  return out;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Dataset head(const Dataset& d, int limit) {
  if (limit <= 0 || static_cast<size_t>(limit) >= d.records.size()) return d;
  Dataset out{d.header, {d.records.begin(), d.records.begin() + limit}};
  out.header.count = limit;
  return out;
}

}  // namespace

// ---- pseudo ground truth ---------------------------------------------------

void FilterRule::validate() const {
  if (!(max_abs_shape > 0.0) || !(max_2d_loss > 0.0)) throw ParameterError("filter thresholds must be positive");
}

double normalized_2d_loss(const Keypoints2D& projected, const Observation& obs) {
  return loss_reprojection(projected, obs) / (kCropHalf * kCropHalf);
}

double shape_statistic(const Eigen::VectorXd& shape, bool signed_shape) {
  if (shape.size() == 0) return 0.0;
  return signed_shape ? shape.maxCoeff() : shape.cwiseAbs().maxCoeff();
}

FilterDecision apply_filter(const FilterRule& rule, double shape_stat, double normalized_loss) {
  if (!(shape_stat <= rule.max_abs_shape)) return {false, "shape"};
  if (!(normalized_loss <= rule.max_2d_loss)) return {false, "reproj"};
  return {true, ""};
}

FilterDecision apply_filter(const FilterRule& rule, const FitResult& fit, const Observation& obs,
                            const Skeleton& skeleton) {
  const Keypoints2D projected = project_weak_perspective(fit.camera, forward_kinematics(skeleton, fit.params));
  return apply_filter(rule, shape_statistic(fit.params.shape, rule.signed_shape), normalized_2d_loss(projected, obs));
}

PseudoGtResult generate_pseudo_gt(const RegressorWeights& weights_star, const Dataset& wild, const Skeleton& skeleton,
                                  const FitConfig& config, const FilterRule& rule) {
  rule.validate();
  config.validate();
  PseudoGtResult out;
  out.pseudo.header.kind = "pseudo";
  out.pseudo.header.skeleton_hash = skeleton_hash(skeleton);
  out.pseudo.header.config_digest = sha256_hex(weights_digest(weights_star) + "\n" + fit_config_text(config) +
                                               "max_abs_shape=" + number_text(rule.max_abs_shape) +
                                               "\nmax_2d_loss=" + number_text(rule.max_2d_loss) +
                                               "\nsigned_shape=" + (rule.signed_shape ? "true" : "false") + "\n");
  for (const auto& rec : wild.records) {
    PseudoLogEntry entry;
    entry.id = rec.id;
    try {
      const FitResult fit = eft_fit(weights_star, rec.observation, skeleton, config).first;
      const Joints3D joints = forward_kinematics(skeleton, fit.params);
      entry.shape_stat = shape_statistic(fit.params.shape, rule.signed_shape);
      entry.normalized_loss = normalized_2d_loss(project_weak_perspective(fit.camera, joints), rec.observation);
      entry.final_px = fit.final_reproj_px;
      entry.iterations = fit.iterations_used;
      const FilterDecision d = apply_filter(rule, entry.shape_stat, entry.normalized_loss);
      entry.accepted = d.accepted;
      entry.reason = d.reason;
      if (d.accepted) {
        GroundTruth gt{fit.params, fit.camera, joints, std::nullopt, false};
        out.pseudo.records.push_back({rec.id, rec.observation, std::move(gt), "eft-pseudo", "pseudo"});
        ++out.accepted;
      } else {
        ++out.rejected;
      }
    } catch (const std::exception& e) {
      entry.accepted = false;
      entry.reason = "error";
      entry.error = e.what();
      ++out.failed;
    }
    out.log.push_back(std::move(entry));
  }
  out.pseudo.header.count = static_cast<std::int64_t>(out.pseudo.records.size());
  return out;
}

PseudoGtResult generate_pseudo_gt(const RegressorWeights& weights_star, const std::string& wild_path,
                                  const Skeleton& skeleton, const FitConfig& config, const FilterRule& rule,
                                  const std::string& out_path) {
  const Dataset wild = read_dataset(wild_path);
  if (!wild.header.skeleton_hash.empty() && wild.header.skeleton_hash != skeleton_hash(skeleton))
    throw InputError(wild_path + ": dataset was generated with a different skeleton");
  PseudoGtResult out = generate_pseudo_gt(weights_star, wild, skeleton, config, rule);
  write_dataset(out.pseudo, out_path);
  write_pseudo_log(out.log, out_path + ".log");
  return out;
}

void write_pseudo_log(const std::vector<PseudoLogEntry>& log, const std::string& path) {
  std::ostringstream out;
  out << json{{"format", "eft-pseudo-log"},
              {"version", 1},
              {"loss_units", "mean squared joint error in [-1,1] crop coordinates (pixel loss / 112^2); "
                             "0.01 corresponds to about 11.2 px RMS"}}
             .dump()
      << '\n';
  for (const auto& e : log) {
    json j{{"id", e.id},
           {"accepted", e.accepted},
           {"reason", e.reason},
           {"shape_stat", e.shape_stat},
           {"normalized_loss", e.normalized_loss},
           {"final_px", e.final_px},
           {"iterations", e.iterations}};
    if (!e.error.empty()) j["error"] = e.error;
    out << j.dump() << '\n';
  }
  write_file(path, out.str());
}

// ---- studies ---------------------------------------------------------------

Histogram make_histogram(const std::vector<double>& values, int bins) {
  if (bins < 1) throw ParameterError("histogram needs at least one bin");
  Histogram h;
  h.counts.assign(static_cast<size_t>(bins), 0);
  if (values.empty()) {
    h.edges.assign(static_cast<size_t>(bins) + 1, 0.0);
    return h;
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it > lo ? *hi_it : lo + 1.0;
  for (int b = 0; b <= bins; ++b) h.edges.push_back(lo + (hi - lo) * b / bins);
  for (double v : values) {
    int b = static_cast<int>((v - lo) / (hi - lo) * bins);
    h.counts[static_cast<size_t>(std::clamp(b, 0, bins - 1))]++;
  }
  return h;
}

RetentionResult retention_study(const RegressorWeights& weights_star, const Dataset& test, const TruthSidecar& truth,
                                const Skeleton& skeleton, const FitConfig& config, int sample_count,
                                const std::vector<int>& iters_list, std::uint64_t seed, bool with_scale) {
  if (sample_count < 1) throw ParameterError("retention study needs at least one sample");
  if (test.records.empty()) throw InputError("retention study needs a non-empty test set");
  RetentionResult result;
  result.weights_hash_before = weights_digest(weights_star);
  const std::vector<Observation> observations = observations_of(test);
  result.baseline_mm =
      eval_predictions(regress_batch(weights_star, observations), test, truth, skeleton, with_scale).mean_mm;

  std::vector<size_t> order(test.records.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(order.size(), static_cast<size_t>(sample_count)));

  for (int iters : iters_list) {
    if (iters < 0) throw ParameterError("iteration counts must be non-negative");
    FitConfig cfg = config;
    cfg.eft_max_iters = iters;
    cfg.early_stop = false;
    RetentionCurve curve;
    curve.iterations = iters;
    for (size_t idx : order) {
      const auto& rec = test.records[idx];
      try {
        const RegressorWeights mutated = eft_fit(weights_star, rec.observation, skeleton, cfg).second;
        const double mean =
            eval_predictions(regress_batch(mutated, observations), test, truth, skeleton, with_scale).mean_mm;
        curve.sample_ids.push_back(rec.id);
        curve.swapped.push_back(truth.find(rec.id).truth.swapped);
        curve.mean_mm.push_back(mean);
      } catch (const InputError&) {
        continue;  // unfit-able exemplar; counted out of the distribution
      }
    }
    const size_t n = curve.mean_mm.size();
    curve.median_mm = median_of(curve.mean_mm);
    size_t within = 0;
    size_t swapped = 0;
    for (size_t i = 0; i < n; ++i) {
      if (std::abs(curve.mean_mm[i] - result.baseline_mm) <= 0.25 * result.baseline_mm) ++within;
      if (curve.swapped[i]) ++swapped;
    }
    curve.fraction_within_25pct = n ? static_cast<double>(within) / n : 0.0;
    curve.base_swap_rate = n ? static_cast<double>(swapped) / n : 0.0;
    std::vector<size_t> rank(n);
    std::iota(rank.begin(), rank.end(), size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&](size_t a, size_t b) { return curve.mean_mm[a] > curve.mean_mm[b]; });
    const size_t decile = (n + 9) / 10;
    size_t worst_swapped = 0;
    for (size_t i = 0; i < decile; ++i)
      if (curve.swapped[rank[i]]) ++worst_swapped;
    curve.worst_decile_swap_rate = decile ? static_cast<double>(worst_swapped) / decile : 0.0;
    curve.histogram = make_histogram(curve.mean_mm, 20);
    result.curves.push_back(std::move(curve));
  }
  result.weights_hash_after = weights_digest(weights_star);
  if (result.weights_hash_after != result.weights_hash_before)
    throw EvaluationError("retention study modified the shared regressor weights");
  return result;
}

OracleStudy oracle_iteration_study(const RegressorWeights& weights_star, const Dataset& test,
                                   const TruthSidecar& truth, const Skeleton& skeleton, const FitConfig& config,
                                   int max_iters, int sample_limit, bool with_scale) {
  if (max_iters < 0) throw ParameterError("max_iters must be non-negative");
  FitConfig cfg = config;
  cfg.eft_max_iters = max_iters;
  cfg.early_stop = false;
  const Dataset subset = head(test, sample_limit);

  OracleStudy s;
  s.max_iters = max_iters;
  std::vector<std::vector<double>> errors;  // per sample, per iterate
  std::vector<int> default_index;
  for (const auto& rec : subset.records) {
    const Joints3D& gt = truth.find(rec.id).truth.joints3d;
    std::vector<double> curve;
    auto observer = [&](int, const Prediction&, const BodyEvaluation& ev) {
      curve.push_back(pa_mpjpe(ev.joints, gt, with_scale));
    };
    const FitResult fit = eft_fit(weights_star, rec.observation, skeleton, cfg, nullptr, observer).first;
    int stop = max_iters;
    for (size_t k = 0; k < fit.trace.size(); ++k) {
      if (fit.trace[k].px < cfg.stop_px) {
        stop = static_cast<int>(k);
        break;
      }
    }
    errors.push_back(std::move(curve));
    default_index.push_back(stop);
  }
  s.count = errors.size();
  if (s.count == 0) throw InputError("oracle study needs a non-empty test set");

  s.fixed_curve_mm.assign(static_cast<size_t>(max_iters) + 1, 0.0);
  double oracle = 0.0;
  double stopping = 0.0;
  for (size_t i = 0; i < s.count; ++i) {
    for (int k = 0; k <= max_iters; ++k) s.fixed_curve_mm[static_cast<size_t>(k)] += errors[i][static_cast<size_t>(k)];
    oracle += *std::min_element(errors[i].begin(), errors[i].end());
    stopping += errors[i][static_cast<size_t>(default_index[i])];
  }
  for (double& v : s.fixed_curve_mm) v /= static_cast<double>(s.count);
  s.oracle_mm = oracle / static_cast<double>(s.count);
  s.default_stopping_mm = stopping / static_cast<double>(s.count);
  const auto best = std::min_element(s.fixed_curve_mm.begin(), s.fixed_curve_mm.end());
  s.best_fixed = static_cast<int>(best - s.fixed_curve_mm.begin());
  s.best_fixed_mm = *best;
  s.baseline_mm = s.fixed_curve_mm.front();
  return s;
}

// ---- experiments -----------------------------------------------------------

void ExperimentConfig::validate() const {
  if (lab_size < 1 || wild_train_size < 1 || wild_test_size < 1) throw ParameterError("corpus sizes must be >= 1");
  lab.validate();
  wild.validate();
  fit.validate();
  filter.validate();
  if (base_lab_ratio < 0.0 || base_lab_ratio > 1.0 || mix_pseudo_ratio < 0.0 || mix_pseudo_ratio > 1.0)
    throw ParameterError("sampling ratios must lie in [0, 1]");
  if (mu < 0.0 || tau < 0.0) throw ParameterError("mu and tau must be non-negative");
  if (prior_components < 1) throw ParameterError("prior_components must be >= 1");
  if (train.steps < 0 || train.batch_size < 1) throw ParameterError("invalid training schedule");
  if (retention_samples < 1 || oracle_max_iters < 0) throw ParameterError("invalid study settings");
}

std::string ExperimentConfig::canonical_text() const {
  ExperimentConfig copy = *this;
  const Registry r = make_registry(copy);
  std::string out;
  for (const auto& [k, f] : r) out += k + " = " + f.get() + "\n";
  return out;
}

std::string ExperimentConfig::digest() const { return sha256_hex(canonical_text()); }

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw InputError("config line " + std::to_string(line_no) + ": empty key");
    if (!out.emplace(key, value).second)
      throw InputError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }
  return out;
}

void apply_config(const KeyValues& values, ExperimentConfig& config) {
  Registry r = make_registry(config);
  for (const auto& [k, v] : values) {
    const auto it = r.find(k);
    if (it == r.end()) throw InputError("unknown config key '" + k + "'");
    it->second.set(v);
  }
}

ExperimentConfig load_experiment_config(const std::string& path) {
  if (!fs::exists(path)) throw InputError("config file not found: " + path);
  ExperimentConfig c;
  apply_config(parse_key_values(read_file(path)), c);
  return c;
}

const CellReport* ExperimentReport::find(const std::string& cell, const std::string& model,
                                         const std::string& post) const {
  for (const auto& c : cells)
    if (c.cell == cell && c.model == model && c.post == post) return &c;
  return nullptr;
}

std::string eval_to_json(const EvalReport& report, const Provenance& provenance) {
  json j = eval_json(report);
  j["provenance"] = provenance_json(provenance);
  return j.dump(1) + "\n";
}

std::string retention_to_json(const RetentionResult& result) { return retention_json(result).dump(1) + "\n"; }

std::string oracle_to_json(const OracleStudy& study) { return oracle_json(study).dump(1) + "\n"; }

std::string report_to_json(const ExperimentReport& report) {
  json cells = json::array();
  for (const auto& c : report.cells) {
    json cell = eval_json(c.eval);
    cell["cell"] = c.cell;
    cell["model"] = c.model;
    cell["post"] = c.post;
    cell["provenance"] = provenance_json(c.provenance);
    cells.push_back(std::move(cell));
  }
  json j{{"format", "eft-report"},
         {"version", 1},
         {"loss_units", "2D filter loss is mean squared joint error in [-1,1] crop coordinates (pixel loss / 112^2); "
                        "0.01 corresponds to about 11.2 px RMS"},
         {"provenance", provenance_json(report.provenance)},
         {"pseudo", {{"accepted", report.pseudo_accepted},
                     {"rejected", report.pseudo_rejected},
                     {"failed", report.pseudo_failed}}},
         {"cells", cells},
         {"missing", report.missing}};
  if (report.retention) j["retention"] = retention_json(*report.retention);
  if (report.oracle) j["oracle"] = oracle_json(*report.oracle);
  return j.dump(1) + "\n";
}

std::string format_table(const ExperimentReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << std::left << std::setw(6) << "cell" << std::setw(14) << "model" << std::setw(10) << "post" << std::right
      << std::setw(8) << "n" << std::setw(12) << "mean mm" << std::setw(12) << "median mm" << '\n';
  for (const auto& c : report.cells) {
    out << std::left << std::setw(6) << c.cell << std::setw(14) << c.model << std::setw(10) << c.post << std::right
        << std::setw(8) << c.eval.count() << std::setw(12) << c.eval.mean_mm << std::setw(12) << c.eval.median_mm
        << '\n';
  }
  out << "pseudo-gt accepted " << report.pseudo_accepted << ", rejected " << report.pseudo_rejected << ", failed "
      << report.pseudo_failed << '\n';
  if (report.oracle) {
    const auto& o = *report.oracle;
    out << "oracle study: baseline " << o.baseline_mm << ", default stopping " << o.default_stopping_mm
        << ", best fixed (" << o.best_fixed << ") " << o.best_fixed_mm << ", per-sample oracle " << o.oracle_mm << '\n';
  }
  if (report.retention) {
    for (const auto& c : report.retention->curves)
      out << "retention " << c.iterations << " iters: baseline " << report.retention->baseline_mm << ", median "
          << c.median_mm << ", within 25% " << c.fraction_within_25pct << ", worst-decile swap rate "
          << c.worst_decile_swap_rate << " (base " << c.base_swap_rate << ")\n";
  }
  for (const auto& m : report.missing) out << "missing: " << m << '\n';
  return out.str();
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) throw IoError("experiment directory is locked or unwritable: " + path_.string());
  std::fclose(f);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void write_manifest(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name != "manifest.json" && name != ".lock") names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  json files = json::array();
  for (const auto& n : names) files.push_back({{"file", n}, {"sha256", file_sha256((dir / n).string())}});
  write_file((dir / "manifest.json").string(), json{{"format", "eft-manifest"}, {"files", files}}.dump(1) + "\n");
}

ExperimentReport run_experiment(const ExperimentConfig& config, const Skeleton& skeleton, const fs::path& dir) {
  config.validate();
  fs::create_directories(dir);
  DirectoryLock lock(dir);
  auto path = [&](const char* name) { return (dir / name).string(); };

  ExperimentReport report;
  report.provenance = {config.seed, config.digest(), skeleton_hash(skeleton)};
  write_file(path("config.txt"), config.canonical_text());
  save_skeleton(skeleton, path("skeleton.json"));

  gen_dataset(WorldKind::kLab, config.lab_size, config.lab, record_seed(config.seed, -1), skeleton, path("lab.jsonl"));
  gen_dataset(WorldKind::kWild, config.wild_train_size, config.wild, record_seed(config.seed, -2), skeleton,
              path("wild_train.jsonl"));
  gen_dataset(WorldKind::kWild, config.wild_test_size, config.wild, record_seed(config.seed, -3), skeleton,
              path("wild_test.jsonl"));
  const Dataset lab = read_dataset(path("lab.jsonl"));
  const Dataset wild_train = read_dataset(path("wild_train.jsonl"));
  const Dataset wild_test = read_dataset(path("wild_test.jsonl"));
  const TruthSidecar test_truth = read_truth_sidecar(sidecar_path(path("wild_test.jsonl")));

  // Pose prior from the lab poses, the stand-in for a separate mocap corpus.
  Eigen::MatrixXd poses(3 * (skeleton.num_joints - 1), static_cast<Eigen::Index>(lab.records.size()));
  for (size_t i = 0; i < lab.records.size(); ++i)
    poses.col(static_cast<Eigen::Index>(i)) = lab.records[i].truth->params.pose.tail(poses.rows());
  const GmmPrior prior = fit_gmm_prior(poses, std::min<int>(config.prior_components, poses.cols()), config.seed).prior;
  save_gmm_prior(prior, path("prior.eftw"));

  const auto lab_samples = to_training_samples(lab, config.mu, config.tau);
  const auto wild_samples = to_training_samples(wild_train);
  const RegressorWeights base =
      train_regressor({lab_samples, wild_samples}, {{config.base_lab_ratio, 1.0 - config.base_lab_ratio}}, skeleton,
                      config.train)
          .weights;
  save_weights(base, path("base.eftw"));

  const Dataset post_subset = head(wild_test, config.postprocess_limit);
  EvalOptions none_options;
  none_options.with_scale = config.with_scale;
  auto add_cells = [&](const std::string& cell, const std::string& model, const RegressorWeights& w) {
    report.cells.push_back({cell, model, "none", eval_regressor(w, wild_test, test_truth, skeleton, none_options),
                            report.provenance});
    if (!config.run_postprocess) return;
    for (PostProcessor p : {PostProcessor::kNone, PostProcessor::kSmplify, PostProcessor::kEft}) {
      EvalOptions o;
      o.post = p;
      o.fit = config.fit;
      o.prior = &prior;
      o.with_scale = config.with_scale;
      report.cells.push_back({"D", model, to_string(p),
                              eval_regressor(w, post_subset, test_truth, skeleton, o), report.provenance});
    }
  };
  add_cells("base", "base", base);

  if (config.run_pseudo_vs_lab) {
    TrainConfig tc = config.train;
    const RegressorWeights lab_only = train_regressor({lab_samples}, {{1.0}}, skeleton, tc).weights;
    save_weights(lab_only, path("lab_only.eftw"));
    add_cells("A", "lab-only", lab_only);

    const PseudoGtResult pseudo = generate_pseudo_gt(base, wild_train, skeleton, config.fit, config.filter);
    write_dataset(pseudo.pseudo, path("pseudo.jsonl"));
    write_pseudo_log(pseudo.log, path("pseudo.jsonl.log"));
    report.pseudo_accepted = pseudo.accepted;
    report.pseudo_rejected = pseudo.rejected;
    report.pseudo_failed = pseudo.failed;
    if (pseudo.accepted == 0) {
      report.missing.push_back("pseudo-only and mix cells: no pseudo-GT record passed the filter");
    } else {
      const auto pseudo_samples = to_training_samples(pseudo.pseudo, config.mu, config.tau);
      const RegressorWeights pseudo_only = train_regressor({pseudo_samples}, {{1.0}}, skeleton, tc).weights;
      save_weights(pseudo_only, path("pseudo_only.eftw"));
      add_cells("B", "pseudo-only", pseudo_only);
      const RegressorWeights mix =
          train_regressor({pseudo_samples, lab_samples}, {{config.mix_pseudo_ratio, 1.0 - config.mix_pseudo_ratio}},
                          skeleton, tc)
              .weights;
      save_weights(mix, path("mix.eftw"));
      add_cells("C", "mix", mix);
    }
  }

  if (config.run_retention)
    report.retention = retention_study(base, wild_test, test_truth, skeleton, config.fit,
                                       std::min<int>(config.retention_samples, config.wild_test_size),
                                       config.retention_iters, config.seed, config.with_scale);
  if (config.run_oracle)
    report.oracle = oracle_iteration_study(base, wild_test, test_truth, skeleton, config.fit, config.oracle_max_iters,
                                           config.postprocess_limit, config.with_scale);

  write_file(path("report.json"), report_to_json(report));
  write_manifest(dir);
  return report;
}

}  // namespace eft
