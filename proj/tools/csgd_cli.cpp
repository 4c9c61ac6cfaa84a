#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "csgd/checkpoint.hpp"
#include "csgd/config.hpp"
#include "csgd/errors.hpp"
#include "csgd/pipelines.hpp"
#include "csgd/train.hpp"
#include "csgd/trim.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kEquivalence = 2;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
};

csgd::ExperimentConfig load(const CommonArgs& a) {
  csgd::ExperimentConfig c = csgd::load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  if (!a.out.empty()) c.out = a.out;
  csgd::validate_config(c);
  return c;
}

void print(const nlohmann::json& summary) { std::cout << summary.dump(2) << std::endl; }

/// The base model for commands that prune: the given checkpoint, or a
/// freshly trained baseline under <out>/baseline.
csgd::Model base_model(const CommonArgs& a, const csgd::ExperimentConfig& c, const csgd::DatasetSplit& data) {
  if (!a.checkpoint.empty()) return csgd::load_checkpoint(a.checkpoint);
  return csgd::train_baseline(c, data, csgd::detail::sub_path(c.out, "baseline")).model;
}

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, CommonArgs& a,
                      bool needs_config = true) {
  CLI::App* cmd = app.add_subcommand(name, help);
  auto* opt = cmd->add_option("--config", a.config, "JSON experiment config")->check(CLI::ExistingFile);
  if (needs_config) opt->required();
  cmd->add_option("--seed", a.seed, "Override the config seed");
  cmd->add_option("--out", a.out, "Output directory (overrides the config)");
  return cmd;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Centripetal SGD filter pruning"};
  app.require_subcommand(1);
  CommonArgs a;
  std::string clusters;
  std::string lhs, rhs;
  std::size_t samples = 100;
  float tolerance = 1e-4f;
  std::function<int()> run;

  auto* train_cmd = add_command(app, "train", "Train the configured network with plain SGD", a);
  train_cmd->callback([&] {
    run = [&] {
      const auto c = load(a);
      print(csgd::train_baseline(c, csgd::load_dataset(c.dataset, c.seed), c.out).summary);
      return kOk;
    };
  });

  auto* prune_cmd = add_command(app, "prune", "Cluster, C-SGD train, trim and verify a trained model", a);
  prune_cmd->add_option("--checkpoint", a.checkpoint, "Base checkpoint (default: train one first)");
  prune_cmd->callback([&] {
    run = [&] {
      const auto c = load(a);
      const auto data = csgd::load_dataset(c.dataset, c.seed);
      print(csgd::prune_pretrained(base_model(a, c, data), c, data, c.out).summary);
      return kOk;
    };
  });

  auto* trim_cmd = add_command(app, "trim", "Snap, trim and verify a C-SGD checkpoint", a);
  trim_cmd->add_option("--checkpoint", a.checkpoint, "C-SGD trained checkpoint")->required();
  trim_cmd->add_option("--clusters", clusters, "Cluster assignment JSON")->required()->check(CLI::ExistingFile);
  trim_cmd->callback([&] {
    run = [&] {
      const auto c = load(a);
      const auto data = csgd::load_dataset(c.dataset, c.seed);
      print(csgd::trim_checkpoint(csgd::load_checkpoint(a.checkpoint), csgd::load_clusters(clusters), c, data, c.out).summary);
      return kOk;
    };
  });

  auto* eval_cmd = add_command(app, "eval", "Evaluate a checkpoint on the configured dataset", a);
  eval_cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint to evaluate")->required();
  eval_cmd->callback([&] {
    run = [&] {
      const auto c = load(a);
      const auto data = csgd::load_dataset(c.dataset, c.seed);
      const csgd::Model m = csgd::load_checkpoint(a.checkpoint);
      const csgd::Evaluation ev = csgd::evaluate(m, csgd::detail::eval_set(data));
      const nlohmann::json s = {{"pipeline", "eval"},
                                {"status", "ok"},
                                {"checkpoint", a.checkpoint},
                                {"accuracy", ev.accuracy},
                                {"loss", ev.loss},
                                {"samples", csgd::detail::eval_set(data).size()},
                                {"flops", csgd::flops(m.spec())},
                                {"parameters", csgd::parameter_count(m.spec())}};
      csgd::detail::write_outputs(c.out, s);
      print(s);
      return kOk;
    };
  });

  auto* scale_cmd = add_command(app, "scale-squeeze", "Train wide, squeeze back to the original widths", a);
  scale_cmd->callback([&] {
    run = [&] {
      const auto c = load(a);
      print(csgd::scale_and_squeeze(c, csgd::load_dataset(c.dataset, c.seed), c.out).summary);
      return kOk;
    };
  });

  auto* lasso_cmd = add_command(app, "compare-lasso", "C-SGD against group-Lasso with hard zero-out", a);
  lasso_cmd->add_option("--checkpoint", a.checkpoint, "Base checkpoint (default: train one first)");
  lasso_cmd->callback([&] {
    run = [&] {
      const auto c = load(a);
      const auto data = csgd::load_dataset(c.dataset, c.seed);
      print(csgd::compare_lasso(base_model(a, c, data), c, data, c.out).summary);
      return kOk;
    };
  });

  auto* sweep_cmd = add_command(app, "sweep-eps", "Chi threshold crossing for several epsilons", a);
  sweep_cmd->add_option("--checkpoint", a.checkpoint, "Start checkpoint (default: train one first)");
  sweep_cmd->callback([&] {
    run = [&] {
      const auto c = load(a);
      const auto data = csgd::load_dataset(c.dataset, c.seed);
      print(csgd::epsilon_sweep(base_model(a, c, data), c, data, c.out).summary);
      return kOk;
    };
  });

  auto* slim_cmd = add_command(app, "slim-vs-clip", "Uniform slimming against clipping internal layers", a);
  slim_cmd->add_option("--checkpoint", a.checkpoint, "Base checkpoint (default: train one first)");
  slim_cmd->callback([&] {
    run = [&] {
      const auto c = load(a);
      const auto data = csgd::load_dataset(c.dataset, c.seed);
      print(csgd::slim_vs_clip(base_model(a, c, data), c, data, c.out).summary);
      return kOk;
    };
  });

  auto* verify_cmd = add_command(app, "verify", "Max logit difference between two checkpoints", a, false);
  verify_cmd->add_option("first", lhs, "First checkpoint")->required();
  verify_cmd->add_option("second", rhs, "Second checkpoint")->required();
  auto* samples_opt = verify_cmd->add_option("--samples", samples, "Random inputs to compare");
  auto* tolerance_opt = verify_cmd->add_option("--tolerance", tolerance, "Largest accepted difference");
  verify_cmd->callback([&] {
    run = [&] {
      std::uint64_t seed = a.seed.value_or(1);
      if (!a.config.empty()) {
        const auto c = load(a);
        seed = c.seed;
        if (!samples_opt->count()) samples = c.train.verify_samples;
        if (!tolerance_opt->count()) tolerance = c.train.equivalence_tolerance;
      }
      const float diff = csgd::verify_equivalence(csgd::load_checkpoint(lhs), csgd::load_checkpoint(rhs), samples, seed);
      std::printf("max_logit_diff %.9g\n", static_cast<double>(diff));
      return diff <= tolerance ? kOk : kEquivalence;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    return run ? run() : kValidation;
  } catch (const csgd::EquivalenceError& e) {
    std::cerr << "equivalence check failed: " << e.what() << "\n";
    return kEquivalence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
}
