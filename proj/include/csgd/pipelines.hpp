#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "csgd/checkpoint.hpp"
#include "csgd/clustering.hpp"
#include "csgd/config.hpp"
#include "csgd/constraints.hpp"
#include "csgd/csgd.hpp"
#include "csgd/data.hpp"
#include "csgd/errors.hpp"
#include "csgd/metrics.hpp"
#include "csgd/model.hpp"
#include "csgd/network_spec.hpp"
#include "csgd/train.hpp"
#include "csgd/trim.hpp"

namespace csgd {

enum class SeedStream : std::uint64_t { init = 1, shuffle, cluster, verify, data, probe };

/// Independent per-purpose seeds derived from the run seed (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(stream);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline DatasetSplit load_dataset(const DatasetConfig& d, std::uint64_t seed) {
  if (d.kind == "mnist") return load_mnist(d.path, d.train_limit, d.test_limit);
  return synth_split(parse_synth_kind(d.kind), d.n_train, d.n_test, d.classes, derive_seed(seed, SeedStream::data),
                     SynthOptions{d.side, d.noise});
}

/// Output channel count of every conv layer.
inline std::map<std::string, std::size_t> conv_widths(const NetworkSpec& spec) {
  std::map<std::string, std::size_t> w;
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::conv) w[l.id] = l.filters;
  return w;
}

/// The spec a prune with these targets produces: each target sets its conv's
/// width and conv followers take their pacesetter's width.
inline NetworkSpec target_spec(const NetworkSpec& spec, const std::map<std::string, std::size_t>& targets) {
  NetworkSpec out = spec;
  for (const auto& [id, r] : targets) out.layer(id).filters = r;
  for (const auto& g : derive_constraint_groups(spec)) {
    auto it = targets.find(g.pacesetter);
    if (it == targets.end()) continue;
    for (const auto& f : g.followers)
      if (spec.layer(f.id).kind == LayerKind::conv) out.layer(f.id).filters = it->second;
  }
  validate(out);
  return out;
}

/// Clusters every independent conv by the configured scheme and copies the
/// result onto the followers.
inline ClusterAssignment build_assignment(const Model& model, const std::map<std::string, std::size_t>& targets,
                                          const ClusterConfig& cc, std::uint64_t seed) {
  const auto groups = derive_constraint_groups(model.spec());
  ClusterAssignment a;
  for (const auto& [id, r] : targets)
    a.set(id, cluster_layer(cc.scheme, model.params(id).kernel, r, derive_seed(seed, SeedStream::cluster), cc.max_iters));
  return propagate_clusters(groups, a);
}

namespace detail {

inline std::string sub_path(const std::string& dir, const std::string& name) {
  return dir.empty() ? std::string() : (std::filesystem::path(dir) / name).string();
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline TrainOptions train_options(const ExperimentConfig& c, std::size_t epochs, const LrSchedule& schedule,
                                  const DatasetSplit& data, MetricsLog* log) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = c.optimizer.batch_size;
  o.bn_momentum = c.optimizer.bn_momentum;
  o.schedule = schedule;
  o.shuffle_seed = derive_seed(c.seed, SeedStream::shuffle);
  o.max_steps = c.train.max_steps;
  o.eval_set = data.test.size() ? &data.test : &data.train;
  o.log = log;
  o.log_every = c.train.log_every;
  return o;
}

inline const Dataset& eval_set(const DatasetSplit& data) { return data.test.size() ? data.test : data.train; }

inline void write_outputs(const std::string& dir, const nlohmann::json& summary) {
  if (!dir.empty()) write_summary(sub_path(dir, "summary.json"), summary);
}

inline void write_clusters(const std::string& path, const ClusterAssignment& a) {
  if (path.empty()) return;
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  detail::write_file(path, nlohmann::json(a).dump(2) + "\n");
}

}  // namespace detail

inline ClusterAssignment load_clusters(const std::string& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path)).get<ClusterAssignment>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cluster file '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Baseline training

struct TrainOutcome {
  Model model;
  Evaluation eval;
  TrainStats stats;
  nlohmann::json summary;
};

/// Trains the configured network (widths multiplied by `scale`) from its
/// seeded initialization with plain SGD. Writes checkpoint/, metrics.csv and
/// summary.json under `out` unless `out` is empty.
inline TrainOutcome train_baseline(const ExperimentConfig& c, const DatasetSplit& data, const std::string& out,
                                   double scale = 1.0) {
  validate_config(c);
  detail::Stopwatch clock;
  TrainOutcome r;
  r.model = build_model(build_spec(c, scale), derive_seed(c.seed, SeedStream::init));
  MetricsLog log(detail::sub_path(out, "metrics.csv"));
  PlainSgd opt(c.optimizer.weight_decay);
  r.stats = train(r.model, opt, data.train, detail::train_options(c, c.train.epochs, c.optimizer.lr_schedule(), data, &log));
  if (log.records().empty()) {
    MetricsRecord rec;
    rec.accuracy = evaluate(r.model, detail::eval_set(data)).accuracy;
    log.append(rec);
  }
  r.eval = evaluate(r.model, detail::eval_set(data));
  r.summary = {{"pipeline", "train"},
               {"status", "ok"},
               {"spec", r.model.spec().name},
               {"widths", conv_widths(r.model.spec())},
               {"flops", flops(r.model.spec())},
               {"parameters", parameter_count(r.model.spec())},
               {"epochs", r.stats.epochs_run},
               {"steps", r.stats.steps},
               {"accuracy", r.eval.accuracy},
               {"loss", r.eval.loss},
               {"seed", c.seed},
               {"seconds", clock.seconds()}};
  if (!out.empty()) save_checkpoint(detail::sub_path(out, "checkpoint"), r.model, {{"pipeline", "train"}, {"seed", c.seed}});
  detail::write_outputs(out, r.summary);
  return r;
}

// ---------------------------------------------------------------------------
// Snap, trim and the equivalence gate

struct TrimOutcome {
  Model trimmed;
  SnapReport snap;
  float equivalence = 0.0f;
  Evaluation pre_trim, snapped, post_trim;
  nlohmann::json summary;
};

/// Snaps a copy of `trained`, trims it and measures the largest logit
/// difference between the snapped and trimmed networks on random inputs.
inline TrimOutcome snap_and_trim(const Model& trained, const ClusterAssignment& a, const ExperimentConfig& c,
                                 const DatasetSplit& data) {
  TrimOutcome r;
  const Dataset& ev = detail::eval_set(data);
  r.pre_trim = evaluate(trained, ev);
  Model snapped = trained.clone();
  r.snap = snap_clusters(snapped, a, c.train.snap_tolerance);
  r.snapped = evaluate(snapped, ev);
  r.trimmed = trim_network(snapped, a);
  r.equivalence = verify_equivalence(snapped, r.trimmed, c.train.verify_samples, derive_seed(c.seed, SeedStream::verify));
  r.post_trim = evaluate(r.trimmed, ev);
  r.summary = {{"pre_trim_accuracy", r.pre_trim.accuracy},
               {"snapped_accuracy", r.snapped.accuracy},
               {"trimmed_accuracy", r.post_trim.accuracy},
               {"trim_drop", r.pre_trim.accuracy - r.post_trim.accuracy},
               {"snap_deviation", r.snap.max_deviation},
               {"snap_within_tolerance", r.snap.within_tolerance()},
               {"equivalence", r.equivalence},
               {"equivalence_tolerance", c.train.equivalence_tolerance},
               {"widths_after", conv_widths(r.trimmed.spec())},
               {"flops_after", flops(r.trimmed.spec())},
               {"parameters_after", parameter_count(r.trimmed.spec())}};
  return r;
}

/// Throws EquivalenceError (after writing the failed summary) when the trim
/// changed the logits by more than the configured tolerance.
inline void require_equivalence(const TrimOutcome& t, const ExperimentConfig& c, const std::string& out,
                                nlohmann::json summary) {
  if (t.equivalence <= c.train.equivalence_tolerance) return;
  summary["status"] = "equivalence-failed";
  detail::write_outputs(out, summary);
  throw EquivalenceError("trimmed model differs from the snapped model by " + std::to_string(t.equivalence) +
                         " (tolerance " + std::to_string(c.train.equivalence_tolerance) + ")");
}

// ---------------------------------------------------------------------------
// C-SGD training

struct CsgdRun {
  TrainStats stats;
  double chi_initial = 0.0, chi_final = 0.0;
  float deviation = 0.0f;  // max cluster deviation when training stopped
  bool early_trim = false;
  std::optional<std::size_t> crossing_step;  // first step with chi <= threshold * chi_initial
};

struct CsgdRunOptions {
  std::size_t epochs = 0;
  LrSchedule schedule;
  bool early_trim = false;
  float trim_threshold = 1e-5f;
  std::optional<double> chi_threshold;  // relative; stops at the first crossing
};

inline CsgdRun run_csgd(Model& model, const ClusterAssignment& a, const ExperimentConfig& c, const DatasetSplit& data,
                        const CsgdRunOptions& ro, MetricsLog* log) {
  CsgdRun r;
  r.chi_initial = chi(model, a);
  CentripetalSgd opt(a, c.optimizer.weight_decay, c.optimizer.epsilon);
  TrainOptions o = detail::train_options(c, ro.epochs, ro.schedule, data, log);
  o.annotate = [&](const Model& m, MetricsRecord& rec) { rec.chi = chi(m, a); };
  o.on_step = [&](const Model& m, const StepInfo& s) {
    if (ro.chi_threshold && !r.crossing_step && chi(m, a) <= *ro.chi_threshold * r.chi_initial) {
      r.crossing_step = s.step;
      return false;
    }
    if (ro.early_trim && max_cluster_deviation(m, a) <= ro.trim_threshold) {
      r.early_trim = true;
      return false;
    }
    return true;
  };
  if (log) {
    MetricsRecord rec;
    rec.chi = r.chi_initial;
    rec.accuracy = evaluate(model, *o.eval_set).accuracy;
    rec.lr = ro.schedule.at(0.0, static_cast<double>(ro.epochs));
    log->append(rec);
  }
  r.stats = train(model, opt, data.train, o);
  r.chi_final = chi(model, a);
  r.deviation = max_cluster_deviation(model, a);
  return r;
}

// ---------------------------------------------------------------------------
// Prune a trained model

struct PruneOutcome {
  Model trained;  // after C-SGD, before snapping
  Model trimmed;
  ClusterAssignment clusters;
  Evaluation base;
  CsgdRun run;
  TrimOutcome trim;
  std::vector<MetricsRecord> log;
  nlohmann::json summary;
};

/// Clusters, C-SGD-trains until the early-trim threshold or the epoch budget,
/// snaps, trims, verifies equivalence and evaluates. Writes checkpoint/
/// (trimmed), csgd_checkpoint/ (before trimming), clusters.json, metrics.csv
/// and summary.json under `out`.
inline PruneOutcome prune_pretrained(const Model& base, const ExperimentConfig& c, const DatasetSplit& data,
                                     const std::string& out) {
  validate_config(c);
  detail::Stopwatch clock;
  PruneOutcome r;
  r.trained = base.clone();
  r.trained.check_shapes();
  const auto targets = cluster_targets(base.spec(), c.clustering);
  r.clusters = build_assignment(base, targets, c.clustering, c.seed);
  r.base = evaluate(base, detail::eval_set(data));

  MetricsLog log(detail::sub_path(out, "metrics.csv"));
  CsgdRunOptions ro;
  ro.epochs = c.train.prune_epochs;
  ro.schedule = c.optimizer.lr_schedule();
  ro.early_trim = c.train.early_trim;
  ro.trim_threshold = c.train.trim_threshold;
  r.run = run_csgd(r.trained, r.clusters, c, data, ro, &log);
  r.log = log.records();
  r.trim = snap_and_trim(r.trained, r.clusters, c, data);
  r.trimmed = r.trim.trimmed;

  r.summary = r.trim.summary;
  r.summary["pipeline"] = "prune";
  r.summary["status"] = "ok";
  r.summary["base_accuracy"] = r.base.accuracy;
  r.summary["targets"] = targets;
  r.summary["widths_before"] = conv_widths(base.spec());
  r.summary["flops_before"] = flops(base.spec());
  r.summary["parameters_before"] = parameter_count(base.spec());
  r.summary["steps"] = r.run.stats.steps;
  r.summary["epochs"] = r.run.stats.epochs_run;
  r.summary["early_trim"] = r.run.early_trim;
  r.summary["deviation"] = r.run.deviation;
  r.summary["chi_initial"] = r.run.chi_initial;
  r.summary["chi_final"] = r.run.chi_final;
  r.summary["epsilon"] = c.optimizer.epsilon;
  r.summary["seed"] = c.seed;
  r.summary["seconds"] = clock.seconds();
  if (!out.empty()) {
    save_checkpoint(detail::sub_path(out, "csgd_checkpoint"), r.trained, {{"pipeline", "prune"}, {"stage", "csgd"}});
    detail::write_clusters(detail::sub_path(out, "clusters.json"), r.clusters);
  }
  require_equivalence(r.trim, c, out, r.summary);
  if (!out.empty()) save_checkpoint(detail::sub_path(out, "checkpoint"), r.trimmed, {{"pipeline", "prune"}, {"stage", "trimmed"}});
  detail::write_outputs(out, r.summary);
  return r;
}

/// Snap, trim and verify a checkpoint against a stored cluster assignment.
inline TrimOutcome trim_checkpoint(const Model& trained, const ClusterAssignment& a, const ExperimentConfig& c,
                                   const DatasetSplit& data, const std::string& out) {
  TrimOutcome t = snap_and_trim(trained, a, c, data);
  t.summary["pipeline"] = "trim";
  t.summary["status"] = "ok";
  require_equivalence(t, c, out, t.summary);
  if (!out.empty()) save_checkpoint(detail::sub_path(out, "checkpoint"), t.trimmed, {{"pipeline", "trim"}});
  detail::write_outputs(out, t.summary);
  return t;
}

// ---------------------------------------------------------------------------
// Scaling and squeezing

struct ScaleSqueezeOutcome {
  TrainOutcome baseline, wide;
  Evaluation baseline_final, wide_final;
  PruneOutcome squeezed;
  bool widths_match = false;
  bool flops_match = false;
  nlohmann::json summary;
};

/// Continues plain SGD for `train.prune_epochs` with the pruning schedule.
inline Evaluation continue_plain(Model& model, const ExperimentConfig& c, const DatasetSplit& data, const std::string& out) {
  MetricsLog log(detail::sub_path(out, "metrics.csv"));
  PlainSgd opt(c.optimizer.weight_decay);
  train(model, opt, data.train, detail::train_options(c, c.train.prune_epochs, c.optimizer.lr_schedule(), data, &log));
  const Evaluation ev = evaluate(model, detail::eval_set(data));
  if (!out.empty()) save_checkpoint(detail::sub_path(out, "checkpoint"), model, {{"pipeline", "continue"}});
  detail::write_outputs(out, {{"pipeline", "continue"}, {"accuracy", ev.accuracy}, {"loss", ev.loss}});
  return ev;
}

/// Trains the configured network and a copy `scale.factor` times wider with
/// plain SGD for `train.epochs`, then runs a second phase of
/// `train.prune_epochs` on all three arms: the wide network is squeezed back
/// to the original widths with C-SGD while the baseline and a wide reference
/// copy continue with plain SGD on the same schedule.
inline ScaleSqueezeOutcome scale_and_squeeze(const ExperimentConfig& c, const DatasetSplit& data, const std::string& out) {
  validate_config(c);
  ScaleSqueezeOutcome r;
  const NetworkSpec narrow = build_spec(c);
  r.baseline = train_baseline(c, data, detail::sub_path(out, "baseline"));
  r.wide = train_baseline(c, data, detail::sub_path(out, "wide"), c.scale.factor);

  ExperimentConfig sq = c;
  sq.clustering.targets.clear();
  for (const auto& id : independent_convs(narrow, derive_constraint_groups(narrow)))
    sq.clustering.targets[id] = narrow.layer(id).filters;
  sq.spec = c.spec;
  for (auto& w : sq.spec.widths) w = static_cast<std::size_t>(std::llround(static_cast<double>(w) * c.scale.factor));
  sq.spec.stem = static_cast<std::size_t>(std::llround(static_cast<double>(c.spec.stem) * c.scale.factor));
  sq.spec.growth = static_cast<std::size_t>(std::llround(static_cast<double>(c.spec.growth) * c.scale.factor));
  r.squeezed = prune_pretrained(r.wide.model, sq, data, detail::sub_path(out, "squeezed"));

  Model base_copy = r.baseline.model.clone();
  Model wide_copy = r.wide.model.clone();
  r.baseline_final = continue_plain(base_copy, c, data, detail::sub_path(out, "baseline_continued"));
  r.wide_final = continue_plain(wide_copy, c, data, detail::sub_path(out, "wide_continued"));

  r.widths_match = conv_widths(r.squeezed.trimmed.spec()) == conv_widths(narrow);
  r.flops_match = flops(r.squeezed.trimmed.spec()) == flops(narrow);
  r.summary = {{"pipeline", "scale-squeeze"},
               {"status", "ok"},
               {"factor", c.scale.factor},
               {"baseline_accuracy", r.baseline_final.accuracy},
               {"wide_accuracy", r.wide_final.accuracy},
               {"squeezed_accuracy", r.squeezed.trim.post_trim.accuracy},
               {"baseline_first_phase_accuracy", r.baseline.eval.accuracy},
               {"wide_first_phase_accuracy", r.wide.eval.accuracy},
               {"squeeze_trim_drop", r.squeezed.trim.pre_trim.accuracy - r.squeezed.trim.post_trim.accuracy},
               {"widths_match", r.widths_match},
               {"flops_match", r.flops_match},
               {"baseline_flops", flops(narrow)},
               {"wide_flops", flops(r.wide.model.spec())},
               {"squeezed_flops", flops(r.squeezed.trimmed.spec())},
               {"equivalence", r.squeezed.trim.equivalence},
               {"seed", c.seed}};
  detail::write_outputs(out, r.summary);
  return r;
}

// ---------------------------------------------------------------------------
// Redundant filters from scratch

struct RedundantOutcome {
  TrainOutcome narrow;
  Model trimmed;
  Evaluation redundant;
  bool structure_match = false;
  float equivalence = 0.0f;
  nlohmann::json summary;
};

/// A narrow network trained with plain SGD against a `scale.factor` times
/// wider one trained from scratch with C-SGD on clusters of the narrow
/// widths and then trimmed. Both share seed and schedule.
inline RedundantOutcome redundant_from_scratch(const ExperimentConfig& c, const DatasetSplit& data, const std::string& out) {
  validate_config(c);
  RedundantOutcome r;
  const NetworkSpec narrow = build_spec(c);
  r.narrow = train_baseline(c, data, detail::sub_path(out, "narrow"));

  Model wide = build_model(build_spec(c, c.scale.factor), derive_seed(c.seed, SeedStream::init));
  ClusterConfig cc = c.clustering;
  cc.targets.clear();
  for (const auto& id : independent_convs(narrow, derive_constraint_groups(narrow))) cc.targets[id] = narrow.layer(id).filters;
  const ClusterAssignment a = build_assignment(wide, cluster_targets(wide.spec(), cc), cc, c.seed);
  MetricsLog log(detail::sub_path(out, "redundant/metrics.csv"));
  CsgdRunOptions ro;
  ro.epochs = c.train.epochs;
  ro.schedule = c.optimizer.lr_schedule();
  run_csgd(wide, a, c, data, ro, &log);
  TrimOutcome t = snap_and_trim(wide, a, c, data);
  r.trimmed = t.trimmed;
  r.redundant = t.post_trim;
  r.equivalence = t.equivalence;
  r.structure_match = conv_widths(r.trimmed.spec()) == conv_widths(narrow);
  r.summary = t.summary;
  r.summary["pipeline"] = "redundant-from-scratch";
  r.summary["status"] = "ok";
  r.summary["narrow_accuracy"] = r.narrow.eval.accuracy;
  r.summary["redundant_accuracy"] = r.redundant.accuracy;
  r.summary["structure_match"] = r.structure_match;
  r.summary["seed"] = c.seed;
  require_equivalence(t, c, out, r.summary);
  if (!out.empty()) save_checkpoint(detail::sub_path(out, "redundant/checkpoint"), r.trimmed, {{"pipeline", "redundant"}});
  detail::write_outputs(out, r.summary);
  return r;
}

// ---------------------------------------------------------------------------
// Group-Lasso comparison

/// For every independent conv, the c - r filters with the smallest l1 kernel
/// norm; conv followers share their pacesetter's set.
inline PruneSets lasso_prune_sets(const Model& model, const std::map<std::string, std::size_t>& targets) {
  PruneSets sets;
  for (const auto& [id, r] : targets) {
    const Tensor& k = model.params(id).kernel;
    const IndexSet keep = magnitude_remaining_set(k, r);
    IndexSet p;
    for (std::size_t j = 0; j < k.dim(3); ++j)
      if (!std::binary_search(keep.begin(), keep.end(), j)) p.push_back(j);
    if (!p.empty()) sets[id] = p;
  }
  for (const auto& g : derive_constraint_groups(model.spec())) {
    auto it = sets.find(g.pacesetter);
    if (it == sets.end()) continue;
    for (const auto& f : g.followers)
      if (model.spec().layer(f.id).kind == LayerKind::conv) sets[f.id] = it->second;
  }
  return sets;
}

/// Drops every filter in the prune sets without merging.
inline TrimPlan zero_out_plan(const Model& model, const PruneSets& sets) {
  TrimPlan plan;
  for (const auto& [id, p] : sets) {
    const std::size_t c = model.params(id).kernel.dim(3);
    IndexSet keep;
    for (std::size_t j = 0; j < c; ++j)
      if (!std::binary_search(p.begin(), p.end(), j)) keep.push_back(j);
    plan.layers[id] = discard_plan(c, keep);
  }
  return plan;
}

/// auto_scale times the root-mean-square kernel-gradient norm of the pruned
/// filters on the first training batch.
inline float auto_lasso_strength(const Model& base, const PruneSets& sets, const Dataset& train_set,
                                  const ExperimentConfig& c) {
  Model m = base.clone();
  const std::size_t n = std::min(c.optimizer.batch_size, train_set.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto [x, y] = train_set.batch(idx);
  Tape tape;
  m.zero_grad();
  const Tensor loss = softmax_xent(forward(m, x, {Mode::train, c.optimizer.bn_momentum}, &tape), y, &tape);
  tape.backward(loss);
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& [id, p] : sets) {
    Tensor k = m.params(id).kernel;
    if (!k.has_grad()) continue;
    const std::size_t cols = k.dim(3), rows = k.numel() / cols;
    for (std::size_t j : p) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double g = k.grad_ptr()[r * cols + j];
        sum += g * g;
      }
      ++count;
    }
  }
  return count ? static_cast<float>(c.lasso.auto_scale * std::sqrt(sum / static_cast<double>(count))) : 0.0f;
}

struct LassoOutcome {
  PruneOutcome csgd;
  Evaluation lasso_pre, lasso_post;
  float strength = 0.0f;
  double phi_initial = 0.0, phi_final = 0.0;
  std::vector<MetricsRecord> csgd_log, lasso_log;
  nlohmann::json summary;
};

/// Two runs from the same base with identical schedules: C-SGD (trimmed at
/// the end) and SGD with a group-Lasso penalty on the lowest-magnitude
/// filters (removed at the end without finetuning).
inline LassoOutcome compare_lasso(const Model& base, const ExperimentConfig& c, const DatasetSplit& data,
                                  const std::string& out) {
  validate_config(c);
  LassoOutcome r;
  ExperimentConfig cc = c;
  cc.train.early_trim = false;
  r.csgd = prune_pretrained(base, cc, data, detail::sub_path(out, "csgd"));

  const auto targets = cluster_targets(base.spec(), c.clustering);
  const PruneSets sets = lasso_prune_sets(base, targets);
  r.strength = c.lasso.strength ? *c.lasso.strength : auto_lasso_strength(base, sets, data.train, c);
  Model m = base.clone();
  r.phi_initial = phi(m, sets);
  MetricsLog log(detail::sub_path(out, "lasso/metrics.csv"));
  {
    MetricsRecord rec;
    rec.phi = r.phi_initial;
    rec.accuracy = evaluate(m, detail::eval_set(data)).accuracy;
    rec.lr = c.optimizer.lr_schedule().at(0.0, static_cast<double>(c.train.prune_epochs));
    log.append(rec);
  }
  GroupLassoSgd opt(sets, c.optimizer.weight_decay, r.strength);
  TrainOptions o = detail::train_options(c, c.train.prune_epochs, c.optimizer.lr_schedule(), data, &log);
  o.annotate = [&](const Model& mm, MetricsRecord& rec) { rec.phi = phi(mm, sets); };
  train(m, opt, data.train, o);
  r.phi_final = phi(m, sets);
  r.lasso_pre = evaluate(m, detail::eval_set(data));
  const Model pruned = trim_network(m, zero_out_plan(m, sets));
  r.lasso_post = evaluate(pruned, detail::eval_set(data));

  r.csgd_log = r.csgd.log;
  r.lasso_log = log.records();
  r.summary = {{"pipeline", "compare-lasso"},
               {"status", "ok"},
               {"csgd_pre_trim_accuracy", r.csgd.trim.pre_trim.accuracy},
               {"csgd_post_trim_accuracy", r.csgd.trim.post_trim.accuracy},
               {"csgd_drop", r.csgd.trim.pre_trim.accuracy - r.csgd.trim.post_trim.accuracy},
               {"chi_initial", r.csgd.run.chi_initial},
               {"chi_final", r.csgd.run.chi_final},
               {"lasso_strength", r.strength},
               {"lasso_pre_prune_accuracy", r.lasso_pre.accuracy},
               {"lasso_post_prune_accuracy", r.lasso_post.accuracy},
               {"lasso_drop", r.lasso_pre.accuracy - r.lasso_post.accuracy},
               {"phi_initial", r.phi_initial},
               {"phi_final", r.phi_final},
               {"lasso_flops_after", flops(pruned.spec())},
               {"csgd_flops_after", flops(r.csgd.trimmed.spec())},
               {"seed", c.seed}};
  detail::write_outputs(out, r.summary);
  return r;
}

// ---------------------------------------------------------------------------
// Epsilon sweep

struct SweepArm {
  float epsilon = 0.0f;
  CsgdRun run;
  std::optional<TrimOutcome> trim;
  std::vector<MetricsRecord> log;
};

struct SweepOutcome {
  std::vector<SweepArm> arms;
  bool strictly_decreasing = false;
  bool all_crossed = false;
  bool all_lossless = false;
  nlohmann::json summary;
};

/// C-SGD from the same start for each epsilon at a constant learning rate,
/// each stopped at the first step where chi falls to `sweep.threshold` of
/// its initial value (or `sweep.max_steps`). Arms that cross are trimmed
/// through the equivalence gate.
inline SweepOutcome epsilon_sweep(const Model& start, const ExperimentConfig& c, const DatasetSplit& data,
                                  const std::string& out) {
  validate_config(c);
  SweepOutcome r;
  const auto targets = cluster_targets(start.spec(), c.clustering);
  const ClusterAssignment a = build_assignment(start, targets, c.clustering, c.seed);
  r.all_crossed = r.all_lossless = true;
  nlohmann::json arms = nlohmann::json::array();
  for (float eps : c.sweep.epsilons) {
    SweepArm arm;
    arm.epsilon = eps;
    ExperimentConfig ec = c;
    ec.optimizer.epsilon = eps;
    ec.train.max_steps = c.sweep.max_steps;
    const std::size_t per_epoch = (data.train.size() + c.optimizer.batch_size - 1) / c.optimizer.batch_size;
    CsgdRunOptions ro;
    ro.epochs = (c.sweep.max_steps + per_epoch - 1) / per_epoch;
    ro.schedule = LrSchedule::constant(c.optimizer.lr);
    ro.chi_threshold = c.sweep.threshold;
    std::ostringstream name;
    name << "eps_" << eps;
    const std::string dir = detail::sub_path(out, name.str());
    MetricsLog log(detail::sub_path(dir, "metrics.csv"));
    Model m = start.clone();
    arm.run = run_csgd(m, a, ec, data, ro, &log);
    arm.log = log.records();
    nlohmann::json js = {{"epsilon", eps},
                         {"crossed", arm.run.crossing_step.has_value()},
                         {"crossing_step", arm.run.crossing_step ? nlohmann::json(*arm.run.crossing_step) : nlohmann::json()},
                         {"chi_initial", arm.run.chi_initial},
                         {"chi_final", arm.run.chi_final},
                         {"deviation", arm.run.deviation}};
    if (arm.run.crossing_step) {
      arm.trim = snap_and_trim(m, a, ec, data);
      js["equivalence"] = arm.trim->equivalence;
      js["trim_drop"] = arm.trim->pre_trim.accuracy - arm.trim->post_trim.accuracy;
      js["trimmed_accuracy"] = arm.trim->post_trim.accuracy;
      if (arm.trim->equivalence > c.train.equivalence_tolerance) r.all_lossless = false;
      if (!dir.empty()) save_checkpoint(detail::sub_path(dir, "checkpoint"), arm.trim->trimmed, {{"pipeline", "sweep-eps"}});
    } else {
      r.all_crossed = false;
    }
    arms.push_back(js);
    r.arms.push_back(std::move(arm));
  }
  r.strictly_decreasing = r.all_crossed;
  std::vector<std::size_t> order(r.arms.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return r.arms[x].epsilon < r.arms[y].epsilon; });
  for (std::size_t i = 1; i < order.size() && r.strictly_decreasing; ++i) {
    const SweepArm& lo = r.arms[order[i - 1]];
    const SweepArm& hi = r.arms[order[i]];
    if (!(hi.epsilon > lo.epsilon && *hi.run.crossing_step < *lo.run.crossing_step)) r.strictly_decreasing = false;
  }
  r.summary = {{"pipeline", "sweep-eps"},
               {"status", r.all_lossless ? "ok" : "equivalence-failed"},
               {"threshold", c.sweep.threshold},
               {"lr", c.optimizer.lr},
               {"arms", arms},
               {"all_crossed", r.all_crossed},
               {"all_lossless", r.all_lossless},
               {"strictly_decreasing", r.strictly_decreasing},
               {"seed", c.seed}};
  detail::write_outputs(out, r.summary);
  if (!r.all_lossless) throw EquivalenceError("epsilon sweep: a crossing arm failed the equivalence gate");
  return r;
}

// ---------------------------------------------------------------------------
// Global slimming against clipping internal layers

/// Independent convs that lead no constraint group (the first conv of each
/// residual block, or every conv of a plain network).
inline std::vector<std::string> internal_convs(const NetworkSpec& spec) {
  const auto groups = derive_constraint_groups(spec);
  std::vector<std::string> out;
  for (const auto& id : independent_convs(spec, groups))
    if (std::none_of(groups.begin(), groups.end(), [&](const ConstraintGroup& g) { return g.pacesetter == id; }))
      out.push_back(id);
  return out;
}

/// Stage notation "[x,y]-[x,y]-..." of a ResNet: per stage, the widths of
/// the first and second conv of its first residual block.
inline std::string stage_notation(const NetworkSpec& spec) {
  std::string s;
  for (std::size_t st = 1;; ++st) {
    const std::string b = "s" + std::to_string(st) + "_b1_";
    if (!spec.has_layer(b + "conv1") || !spec.has_layer(b + "conv2")) break;
    s += (st > 1 ? "-[" : "[") + std::to_string(spec.layer(b + "conv1").filters) + "," +
         std::to_string(spec.layer(b + "conv2").filters) + "]";
  }
  return s;
}

struct SlimClipOutcome {
  PruneOutcome slim, clip;
  double slim_flops = 0.0, clip_flops = 0.0;
  double flops_gap = 0.0;  // |slim - clip| / max(slim, clip)
  nlohmann::json summary;
};

/// Two prunes of the same base: every independent conv to `slim_ratio`,
/// and only the internal convs to `clip_ratio`.
inline SlimClipOutcome slim_vs_clip(const Model& base, const ExperimentConfig& c, const DatasetSplit& data,
                                    const std::string& out) {
  validate_config(c);
  SlimClipOutcome r;
  const NetworkSpec& spec = base.spec();
  ExperimentConfig slim = c, clip = c;
  slim.clustering.targets.clear();
  slim.clustering.ratio = c.slim_clip.slim_ratio;
  clip.clustering.targets.clear();
  clip.clustering.ratio = 1.0;
  for (const auto& id : internal_convs(spec))
    clip.clustering.targets[id] = detail::scaled_width(spec.layer(id).filters, c.slim_clip.clip_ratio);
  const auto slim_targets = cluster_targets(spec, slim.clustering);
  const auto clip_targets = cluster_targets(spec, clip.clustering);
  r.slim_flops = flops(target_spec(spec, slim_targets));
  r.clip_flops = flops(target_spec(spec, clip_targets));
  r.flops_gap = std::abs(r.slim_flops - r.clip_flops) / std::max(r.slim_flops, r.clip_flops);
  r.slim = prune_pretrained(base, slim, data, detail::sub_path(out, "slim"));
  r.clip = prune_pretrained(base, clip, data, detail::sub_path(out, "clip"));
  r.summary = {{"pipeline", "slim-vs-clip"},
               {"status", "ok"},
               {"base_flops", flops(spec)},
               {"slim_flops", r.slim_flops},
               {"clip_flops", r.clip_flops},
               {"flops_gap", r.flops_gap},
               {"slim_structure", stage_notation(r.slim.trimmed.spec())},
               {"clip_structure", stage_notation(r.clip.trimmed.spec())},
               {"slim_accuracy", r.slim.trim.post_trim.accuracy},
               {"clip_accuracy", r.clip.trim.post_trim.accuracy},
               {"slim_equivalence", r.slim.trim.equivalence},
               {"clip_equivalence", r.clip.trim.equivalence},
               {"seed", c.seed}};
  detail::write_outputs(out, r.summary);
  return r;
}

}  // namespace csgd
