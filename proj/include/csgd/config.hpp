#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "csgd/checkpoint.hpp"
#include "csgd/clustering.hpp"
#include "csgd/constraints.hpp"
#include "csgd/data.hpp"
#include "csgd/errors.hpp"
#include "csgd/network_spec.hpp"
#include "csgd/train.hpp"

#ifndef CSGD_DATA_DIR
#define CSGD_DATA_DIR "data/mnist"
#endif

namespace csgd {

/// Architecture id plus width overrides. `widths` are the toy-VGG layer
/// widths or the ResNet stage widths; the dense network uses `stem`,
/// `growth` and `layers`.
struct SpecConfig {
  std::string id = "resnet";
  std::vector<std::size_t> widths = {16, 32, 64};
  std::size_t blocks = 1;
  std::size_t stem_stride = 1;
  std::size_t stem = 8;
  std::size_t growth = 4;
  std::size_t layers = 3;
};

struct DatasetConfig {
  std::string kind = "mnist";  // mnist | blobs | rings
  std::string path = CSGD_DATA_DIR;
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;
  std::size_t n_train = 512;
  std::size_t n_test = 256;
  std::size_t classes = 2;
  std::size_t side = 8;
  float noise = 0.1f;
};

struct ClusterConfig {
  ClusterScheme scheme = ClusterScheme::kmeans;
  double ratio = 0.625;                       // r = round(ratio * c) for layers without a target
  std::map<std::string, std::size_t> targets;  // explicit r per pacesetter or plain conv
  std::size_t max_iters = 100;
};

struct OptimizerConfig {
  float lr = 3e-2f;
  float weight_decay = 1e-4f;
  float epsilon = 3e-3f;
  std::size_t batch_size = 64;
  float bn_momentum = 0.1f;
  std::vector<double> decay_at = {0.5, 0.75};
  float decay_factor = 0.1f;
  std::vector<std::pair<double, float>> schedule;  // explicit (epoch, lr) points; overrides decay_at

  LrSchedule lr_schedule() const { return LrSchedule{lr, decay_at, decay_factor, schedule}; }
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t prune_epochs = 10;
  std::size_t max_steps = 0;
  bool early_trim = true;
  float trim_threshold = 1e-5f;
  float snap_tolerance = 1e-3f;
  float equivalence_tolerance = 1e-4f;
  std::size_t verify_samples = 100;
  std::size_t log_every = 0;
};

struct LassoConfig {
  std::optional<float> strength;  // empty: derived from the first batch's gradients
  double auto_scale = 0.1;
};

struct ScaleConfig {
  double factor = 2.0;
};

struct SweepConfig {
  std::vector<float> epsilons = {1e-3f, 2e-3f, 1e-2f};
  std::size_t max_steps = 200000;
  double threshold = 1e-10;  // chi relative to its initial value
};

struct SlimClipConfig {
  double slim_ratio = 0.625;
  double clip_ratio = 0.375;
};

struct ExperimentConfig {
  SpecConfig spec;
  DatasetConfig dataset;
  ClusterConfig clustering;
  OptimizerConfig optimizer;
  TrainConfig train;
  LassoConfig lasso;
  ScaleConfig scale;
  SweepConfig sweep;
  SlimClipConfig slim_clip;
  std::uint64_t seed = 1;
  std::string out = "runs/default";
};

namespace detail {

/// Reads the keys of one JSON object and rejects any key it was not asked
/// about, naming the full key path.
class KeyReader {
 public:
  KeyReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: '" + where() + "' must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config: bad value for '" + sub(key) + "': " + e.what());
    }
  }

  const nlohmann::json& child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError("config: unknown key '" + sub(k) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::size_t scaled_width(std::size_t c, double ratio) {
  const auto r = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(c)));
  return std::clamp<std::size_t>(r, 1, c);
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::KeyReader root(j, "");
  if (!root.has("spec")) throw ValidationError("config: missing required key 'spec'");
  if (!root.has("dataset")) throw ValidationError("config: missing required key 'dataset'");

  {
    const nlohmann::json& s = root.child("spec");
    if (s.is_string()) {
      c.spec.id = s.get<std::string>();
    } else {
      detail::KeyReader r(s, "spec");
      r.get("id", c.spec.id);
      r.get("widths", c.spec.widths);
      r.get("blocks", c.spec.blocks);
      r.get("stem_stride", c.spec.stem_stride);
      r.get("stem", c.spec.stem);
      r.get("growth", c.spec.growth);
      r.get("layers", c.spec.layers);
      r.finish();
    }
  }
  {
    const nlohmann::json& d = root.child("dataset");
    if (d.is_string()) {
      c.dataset.kind = d.get<std::string>();
    } else {
      detail::KeyReader r(d, "dataset");
      r.get("kind", c.dataset.kind);
      r.get("path", c.dataset.path);
      r.get("train_limit", c.dataset.train_limit);
      r.get("test_limit", c.dataset.test_limit);
      r.get("n_train", c.dataset.n_train);
      r.get("n_test", c.dataset.n_test);
      r.get("classes", c.dataset.classes);
      r.get("side", c.dataset.side);
      r.get("noise", c.dataset.noise);
      r.finish();
    }
  }
  if (root.has("clustering")) {
    detail::KeyReader r(root.child("clustering"), "clustering");
    std::string scheme = "kmeans";
    r.get("scheme", scheme);
    c.clustering.scheme = parse_scheme(scheme);
    r.get("ratio", c.clustering.ratio);
    r.get("targets", c.clustering.targets);
    r.get("max_iters", c.clustering.max_iters);
    r.finish();
  }
  if (root.has("optimizer")) {
    detail::KeyReader r(root.child("optimizer"), "optimizer");
    r.get("lr", c.optimizer.lr);
    r.get("weight_decay", c.optimizer.weight_decay);
    r.get("epsilon", c.optimizer.epsilon);
    r.get("batch_size", c.optimizer.batch_size);
    r.get("bn_momentum", c.optimizer.bn_momentum);
    r.get("decay_at", c.optimizer.decay_at);
    r.get("decay_factor", c.optimizer.decay_factor);
    r.get("schedule", c.optimizer.schedule);
    r.finish();
  }
  if (root.has("train")) {
    detail::KeyReader r(root.child("train"), "train");
    r.get("epochs", c.train.epochs);
    r.get("prune_epochs", c.train.prune_epochs);
    r.get("max_steps", c.train.max_steps);
    r.get("early_trim", c.train.early_trim);
    r.get("trim_threshold", c.train.trim_threshold);
    r.get("snap_tolerance", c.train.snap_tolerance);
    r.get("equivalence_tolerance", c.train.equivalence_tolerance);
    r.get("verify_samples", c.train.verify_samples);
    r.get("log_every", c.train.log_every);
    r.finish();
  }
  if (root.has("lasso")) {
    detail::KeyReader r(root.child("lasso"), "lasso");
    if (r.has("strength")) {
      const nlohmann::json& s = r.child("strength");
      if (s.is_number())
        c.lasso.strength = s.get<float>();
      else if (!(s.is_string() && s.get<std::string>() == "auto"))
        throw ValidationError("config: 'lasso.strength' must be a number or \"auto\"");
    }
    r.get("auto_scale", c.lasso.auto_scale);
    r.finish();
  }
  if (root.has("scale")) {
    detail::KeyReader r(root.child("scale"), "scale");
    r.get("factor", c.scale.factor);
    r.finish();
  }
  if (root.has("sweep")) {
    detail::KeyReader r(root.child("sweep"), "sweep");
    r.get("epsilons", c.sweep.epsilons);
    r.get("max_steps", c.sweep.max_steps);
    r.get("threshold", c.sweep.threshold);
    r.finish();
  }
  if (root.has("slim_clip")) {
    detail::KeyReader r(root.child("slim_clip"), "slim_clip");
    r.get("slim_ratio", c.slim_clip.slim_ratio);
    r.get("clip_ratio", c.slim_clip.clip_ratio);
    r.finish();
  }
  root.get("seed", c.seed);
  root.get("out", c.out);
  root.finish();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path), nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config '" + path + "': " + e.what());
  }
  return parse_config(j);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json schedule = nlohmann::json::array();
  for (const auto& [e, lr] : c.optimizer.schedule) schedule.push_back({e, lr});
  const char* scheme = c.clustering.scheme == ClusterScheme::kmeans ? "kmeans"
                       : c.clustering.scheme == ClusterScheme::even ? "even"
                                                                    : "imbalanced";
  nlohmann::json lasso_strength = c.lasso.strength ? nlohmann::json(*c.lasso.strength) : nlohmann::json("auto");
  return {
      {"spec",
       {{"id", c.spec.id},
        {"widths", c.spec.widths},
        {"blocks", c.spec.blocks},
        {"stem_stride", c.spec.stem_stride},
        {"stem", c.spec.stem},
        {"growth", c.spec.growth},
        {"layers", c.spec.layers}}},
      {"dataset",
       {{"kind", c.dataset.kind},
        {"path", c.dataset.path},
        {"train_limit", c.dataset.train_limit},
        {"test_limit", c.dataset.test_limit},
        {"n_train", c.dataset.n_train},
        {"n_test", c.dataset.n_test},
        {"classes", c.dataset.classes},
        {"side", c.dataset.side},
        {"noise", c.dataset.noise}}},
      {"clustering",
       {{"scheme", scheme},
        {"ratio", c.clustering.ratio},
        {"targets", c.clustering.targets},
        {"max_iters", c.clustering.max_iters}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"weight_decay", c.optimizer.weight_decay},
        {"epsilon", c.optimizer.epsilon},
        {"batch_size", c.optimizer.batch_size},
        {"bn_momentum", c.optimizer.bn_momentum},
        {"decay_at", c.optimizer.decay_at},
        {"decay_factor", c.optimizer.decay_factor},
        {"schedule", schedule}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"prune_epochs", c.train.prune_epochs},
        {"max_steps", c.train.max_steps},
        {"early_trim", c.train.early_trim},
        {"trim_threshold", c.train.trim_threshold},
        {"snap_tolerance", c.train.snap_tolerance},
        {"equivalence_tolerance", c.train.equivalence_tolerance},
        {"verify_samples", c.train.verify_samples},
        {"log_every", c.train.log_every}}},
      {"lasso", {{"strength", lasso_strength}, {"auto_scale", c.lasso.auto_scale}}},
      {"scale", {{"factor", c.scale.factor}}},
      {"sweep", {{"epsilons", c.sweep.epsilons}, {"max_steps", c.sweep.max_steps}, {"threshold", c.sweep.threshold}}},
      {"slim_clip", {{"slim_ratio", c.slim_clip.slim_ratio}, {"clip_ratio", c.slim_clip.clip_ratio}}},
      {"seed", c.seed},
      {"out", c.out},
  };
}

/// Input geometry and class count implied by the dataset settings.
inline InputShape input_shape(const DatasetConfig& d) {
  if (d.kind == "mnist") return {28, 28, 1, 10};
  if (d.kind == "blobs") return {d.side, d.side, 1, d.classes};
  if (d.kind == "rings") return {1, 1, 2, d.classes};
  throw ValidationError("config: unknown dataset kind '" + d.kind + "' (expected mnist, blobs or rings)");
}

/// The network described by `s`, with every width multiplied by `scale`.
inline NetworkSpec build_spec(const SpecConfig& s, InputShape in, double scale = 1.0) {
  auto w = [&](std::size_t c) {
    const double v = static_cast<double>(c) * scale;
    if (std::abs(v - std::round(v)) > 1e-9)
      throw ValidationError("config: scale factor " + std::to_string(scale) + " makes width " + std::to_string(c) +
                            " non-integral");
    return static_cast<std::size_t>(std::llround(v));
  };
  std::vector<std::size_t> widths;
  for (std::size_t c : s.widths) widths.push_back(w(c));
  if (s.id == "toy-vgg" || s.id == "vgg") {
    if (widths.empty()) throw ValidationError("config: 'spec.widths' must not be empty");
    return toy_vgg(widths, in);
  }
  if (s.id == "resnet") {
    if (widths.empty()) throw ValidationError("config: 'spec.widths' must not be empty");
    if (s.blocks == 0) throw ValidationError("config: 'spec.blocks' must be positive");
    if (s.stem_stride == 0) throw ValidationError("config: 'spec.stem_stride' must be positive");
    return resnet(widths, s.blocks, in, s.stem_stride);
  }
  if (s.id == "densenet") return densenet(w(s.stem), w(s.growth), s.layers, in);
  throw ValidationError("config: unknown spec id '" + s.id + "' (expected toy-vgg, resnet or densenet)");
}

inline NetworkSpec build_spec(const ExperimentConfig& c, double scale = 1.0) {
  return build_spec(c.spec, input_shape(c.dataset), scale);
}

/// Cluster count per independently clustered conv: the explicit target when
/// present, otherwise round(ratio * c). Targets naming a follower, a non-conv
/// layer or an unknown layer, or exceeding the layer width, are rejected.
inline std::map<std::string, std::size_t> cluster_targets(const NetworkSpec& spec, const ClusterConfig& cc) {
  const auto groups = derive_constraint_groups(spec);
  const auto free = independent_convs(spec, groups);
  for (const auto& [id, r] : cc.targets) {
    if (!spec.has_layer(id)) throw ValidationError("config: 'clustering.targets." + id + "' names no layer");
    const LayerSpec& l = spec.layer(id);
    if (l.kind != LayerKind::conv)
      throw ValidationError("config: 'clustering.targets." + id + "' names a " + to_string(l.kind) + " layer");
    if (std::find(free.begin(), free.end(), id) == free.end())
      throw ValidationError("config: 'clustering.targets." + id + "' names a follower; it takes its pacesetter's clusters");
    if (r < 1 || r > l.filters)
      throw ValidationError("config: 'clustering.targets." + id + "' = " + std::to_string(r) + " must satisfy 1 <= r <= " +
                            std::to_string(l.filters));
  }
  std::map<std::string, std::size_t> out;
  for (const auto& id : free) {
    auto it = cc.targets.find(id);
    out[id] = it != cc.targets.end() ? it->second : detail::scaled_width(spec.layer(id).filters, cc.ratio);
  }
  return out;
}

/// Cross-field checks that need the built network.
inline void validate_config(const ExperimentConfig& c) {
  if (!(c.clustering.ratio > 0.0 && c.clustering.ratio <= 1.0))
    throw ValidationError("config: 'clustering.ratio' must lie in (0, 1]");
  if (c.optimizer.batch_size == 0) throw ValidationError("config: 'optimizer.batch_size' must be positive");
  if (c.optimizer.weight_decay < 0.0f) throw ValidationError("config: 'optimizer.weight_decay' must be >= 0");
  if (c.optimizer.epsilon < 0.0f) throw ValidationError("config: 'optimizer.epsilon' must be >= 0");
  if (!(c.optimizer.bn_momentum >= 0.0f && c.optimizer.bn_momentum <= 1.0f))
    throw ValidationError("config: 'optimizer.bn_momentum' must lie in [0, 1]");
  c.optimizer.lr_schedule().check();
  if (!(c.scale.factor >= 1.0)) throw ValidationError("config: 'scale.factor' must be >= 1");
  if (c.sweep.epsilons.empty()) throw ValidationError("config: 'sweep.epsilons' must not be empty");
  if (!(c.sweep.threshold > 0.0 && c.sweep.threshold < 1.0))
    throw ValidationError("config: 'sweep.threshold' must lie in (0, 1)");
  for (double r : {c.slim_clip.slim_ratio, c.slim_clip.clip_ratio})
    if (!(r > 0.0 && r <= 1.0)) throw ValidationError("config: slim_clip ratios must lie in (0, 1]");
  if (c.dataset.kind != "mnist" && c.dataset.classes < 2)
    throw ValidationError("config: 'dataset.classes' must be at least 2");
  const NetworkSpec spec = build_spec(c);
  validate(spec);
  cluster_targets(spec, c.clustering);
}

}  // namespace csgd
