#include "eft/cli.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "eft/digest.hpp"
#include "eft/errors.hpp"
#include "eft/evaluation.hpp"
#include "eft/gmm_prior.hpp"
#include "eft/pipeline.hpp"
#include "json.hpp"

namespace eft {

namespace {

using nlohmann::json;

struct GlobalOptions {
  std::uint64_t seed = 1;
  bool seed_set = false;
  std::string skeleton_path;
  std::string config_path;
  std::string out;
};

Skeleton load_skeleton_or_default(const GlobalOptions& g) {
  if (g.skeleton_path.empty()) return make_template(24, 10, 0);
  if (!std::filesystem::exists(g.skeleton_path)) throw InputError("skeleton file not found: " + g.skeleton_path);
  return load_skeleton(g.skeleton_path);
}

ExperimentConfig load_config(const GlobalOptions& g) {
  ExperimentConfig c = g.config_path.empty() ? ExperimentConfig{} : load_experiment_config(g.config_path);
  if (g.seed_set) c.seed = g.seed;
  return c;
}

std::string require_out(const GlobalOptions& g, const char* what) {
  if (g.out.empty()) throw InputError(std::string("--out is required for ") + what);
  return g.out;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw InputError(std::string("missing ") + what + " path");
  if (!std::filesystem::exists(path)) throw InputError(std::string(what) + " not found: " + path);
}

json fit_json(const FitResult& fit) {
  json trace = json::array();
  for (const auto& r : fit.trace) trace.push_back({{"loss", r.loss}, {"px", r.px}});
  const auto& p = fit.params;
  return {{"pose", std::vector<double>(p.pose.data(), p.pose.data() + p.pose.size())},
          {"shape", std::vector<double>(p.shape.data(), p.shape.data() + p.shape.size())},
          {"camera", {fit.camera.scale, fit.camera.translation.x(), fit.camera.translation.y()}},
          {"iterations_used", fit.iterations_used},
          {"final_reproj_px", fit.final_reproj_px},
          {"final_loss", fit.final_loss},
          {"converged", fit.converged},
          {"trace", trace}};
}

void emit(const std::string& text, const GlobalOptions& g, std::ostream& out) {
  if (g.out.empty()) out << text;
  else write_file(g.out, text);
}

}  // namespace

int cli_main(int argc, const char* const* argv) { return cli_main(argc, argv, std::cout, std::cerr); }

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Exemplar fine-tuning and prior-regularized body fitting on synthetic keypoint data", "eft_cli"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--seed", g.seed, "random seed")->each([&](const std::string&) { g.seed_set = true; });
  app.add_option("--skeleton", g.skeleton_path, "skeleton file (default: built-in 24-joint template)");
  app.add_option("--config", g.config_path, "key = value config file");
  app.add_option("--out", g.out, "output file or directory");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus and its .truth sidecar");
  std::string kind = "wild";
  int count = 100;
  gen->add_option("--kind", kind, "lab or wild")->check(CLI::IsMember({"lab", "wild"}));
  gen->add_option("--n", count, "number of records");

  auto* train = app.add_subcommand("train", "train a regressor");
  std::vector<std::string> train_data;
  train->add_option("--data", train_data, "dataset path, optionally path:ratio; repeatable")->required();
  long steps = -1;
  train->add_option("--steps", steps, "training steps (default from config)");

  auto* fit = app.add_subcommand("fit", "fit one record and print the result");
  std::string weights_path, data_path, prior_path, method = "eft";
  std::int64_t record_id = 0;
  fit->add_option("--weights", weights_path, "regressor weights")->required();
  fit->add_option("--data", data_path, "dataset")->required();
  fit->add_option("--id", record_id, "record id");
  fit->add_option("--method", method, "eft or smplify")->check(CLI::IsMember({"eft", "smplify"}));
  fit->add_option("--prior", prior_path, "pose prior (smplify)");

  auto* pseudo = app.add_subcommand("pseudo-gt", "lift 2D records to 3D with EFT and filter them");
  pseudo->add_option("--weights", weights_path, "regressor weights")->required();
  pseudo->add_option("--data", data_path, "wild dataset")->required();

  auto* eval = app.add_subcommand("eval", "PA-MPJPE of a regressor against a .truth sidecar");
  std::string post = "none";
  bool no_scale = false;
  eval->add_option("--weights", weights_path, "regressor weights")->required();
  eval->add_option("--data", data_path, "dataset with sidecar")->required();
  eval->add_option("--post", post, "none, smplify or eft")->check(CLI::IsMember({"none", "smplify", "eft"}));
  eval->add_option("--prior", prior_path, "pose prior (smplify)");
  eval->add_flag("--no-scale", no_scale, "rigid alignment without scale");

  auto* experiment = app.add_subcommand("experiment", "run the full experiment into --out");

  auto* retention = app.add_subcommand("retention", "retention study of exemplar overfitting");
  int samples = 500;
  std::vector<int> iters_list = {20, 100};
  retention->add_option("--weights", weights_path, "regressor weights")->required();
  retention->add_option("--data", data_path, "test dataset with sidecar")->required();
  retention->add_option("--samples", samples, "number of exemplars");
  retention->add_option("--iters", iters_list, "forced iteration counts")->delimiter(',');

  auto* oracle = app.add_subcommand("oracle-iters", "per-iteration error study");
  int max_iters = 20;
  int limit = 0;
  oracle->add_option("--weights", weights_path, "regressor weights")->required();
  oracle->add_option("--data", data_path, "test dataset with sidecar")->required();
  oracle->add_option("--max-iters", max_iters, "largest iteration count");
  oracle->add_option("--limit", limit, "use only the first N records (0 = all)");

  for (auto* sub : {gen, train, fit, pseudo, eval, experiment, retention, oracle}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    const Skeleton skeleton = load_skeleton_or_default(g);
    ExperimentConfig config = load_config(g);
    config.validate();

    if (*gen) {
      const bool lab = kind == "lab";
      const std::string path = require_out(g, "gen-data");
      gen_dataset(lab ? WorldKind::kLab : WorldKind::kWild, count, lab ? config.lab : config.wild, config.seed,
                  skeleton, path);
      out << path << " " << file_sha256(path) << "\n";
      return 0;
    }
    if (*train) {
      std::vector<std::vector<TrainingSample>> datasets;
      SamplingPlan plan;
      for (const auto& spec : train_data) {
        std::string path = spec;
        double ratio = 1.0 / static_cast<double>(train_data.size());
        if (const auto colon = spec.rfind(':'); colon != std::string::npos) {
          path = spec.substr(0, colon);
          try {
            ratio = std::stod(spec.substr(colon + 1));
          } catch (const std::exception&) {
            throw InputError("bad ratio in --data " + spec);
          }
        }
        require_file(path, "dataset");
        datasets.push_back(to_training_samples(read_dataset(path), config.mu, config.tau));
        plan.ratios.push_back(ratio);
      }
      TrainConfig tc = config.train;
      if (steps >= 0) tc.steps = steps;
      const std::string path = require_out(g, "train");
      const TrainResult result = train_regressor(datasets, plan, skeleton, tc);
      save_weights(result.weights, path);
      out << path << " " << weights_digest(result.weights) << " final loss "
          << (result.loss_curve.empty() ? 0.0 : result.loss_curve.back()) << "\n";
      return 0;
    }
    if (*fit) {
      require_file(weights_path, "weights");
      require_file(data_path, "dataset");
      const RegressorWeights w = load_weights(weights_path);
      const Dataset d = read_dataset(data_path);
      const DatasetRecord* rec = nullptr;
      for (const auto& r : d.records)
        if (r.id == record_id) rec = &r;
      if (!rec) throw InputError("no record with id " + std::to_string(record_id) + " in " + data_path);
      FitResult result;
      if (method == "eft") {
        result = eft_fit(w, rec->observation, skeleton, config.fit).first;
      } else {
        require_file(prior_path, "prior");
        result = smplify_fit(rec->observation, load_gmm_prior(prior_path), skeleton,
                             regress_features(w, featurize(rec->observation)), config.fit);
      }
      emit(fit_json(result).dump(1) + "\n", g, out);
      return 0;
    }
    if (*pseudo) {
      require_file(weights_path, "weights");
      require_file(data_path, "dataset");
      const std::string path = require_out(g, "pseudo-gt");
      const PseudoGtResult r =
          generate_pseudo_gt(load_weights(weights_path), data_path, skeleton, config.fit, config.filter, path);
      out << "accepted " << r.accepted << " rejected " << r.rejected << " failed " << r.failed << "\n";
      return 0;
    }
    if (*eval) {
      require_file(weights_path, "weights");
      require_file(data_path, "dataset");
      EvalOptions o;
      o.post = parse_post_processor(post);
      o.fit = config.fit;
      o.with_scale = !no_scale;
      GmmPrior prior;
      if (o.post == PostProcessor::kSmplify) {
        require_file(prior_path, "prior");
        prior = load_gmm_prior(prior_path);
        o.prior = &prior;
      }
      const EvalReport r = eval_regressor(load_weights(weights_path), data_path, skeleton, o);
      const Provenance prov{config.seed, config.digest(), skeleton_hash(skeleton)};
      if (!g.out.empty()) write_file(g.out, eval_to_json(r, prov));
      out << "records " << r.count() << " mean " << r.mean_mm << " mm median " << r.median_mm << " mm\n";
      return 0;
    }
    if (*experiment) {
      const std::string dir = require_out(g, "experiment");
      const auto start = std::chrono::steady_clock::now();
      const ExperimentReport r = run_experiment(config, skeleton, dir);
      out << format_table(r);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      err << "wall clock " << secs << " s\n";
      return 0;
    }
    if (*retention) {
      require_file(weights_path, "weights");
      require_file(data_path, "dataset");
      const std::string truth = sidecar_path(data_path);
      if (!std::filesystem::exists(truth)) throw InputError("missing truth sidecar: " + truth);
      const Dataset d = read_dataset(data_path);
      const RetentionResult r = retention_study(load_weights(weights_path), d, read_truth_sidecar(truth), skeleton,
                                                config.fit, samples, iters_list, config.seed, config.with_scale);
      emit(retention_to_json(r), g, out);
      return 0;
    }
    if (*oracle) {
      require_file(weights_path, "weights");
      require_file(data_path, "dataset");
      const std::string truth = sidecar_path(data_path);
      if (!std::filesystem::exists(truth)) throw InputError("missing truth sidecar: " + truth);
      const Dataset d = read_dataset(data_path);
      const OracleStudy s = oracle_iteration_study(load_weights(weights_path), d, read_truth_sidecar(truth),
                                                   skeleton, config.fit, max_iters, limit, config.with_scale);
      emit(oracle_to_json(s), g, out);
      return 0;
    }
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return 1;
  } catch (const ParameterError& e) {
    err << "invalid parameter: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace eft
