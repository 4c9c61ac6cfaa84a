#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "csgd/clustering.hpp"
#include "csgd/csgd.hpp"
#include "csgd/errors.hpp"
#include "csgd/model.hpp"
#include "csgd/network_spec.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

struct SnapReport {
  float max_deviation = 0.0f;  // before snapping, over all five slots
  float tolerance = 0.0f;
  bool within_tolerance() const { return max_deviation <= tolerance; }
};

/// Sets every slot of every filter in a cluster (kernel slice, mu, sigma,
/// gamma, beta) to the cluster's arithmetic mean. Exceeding `tolerance` is
/// reported, not thrown.
inline SnapReport snap_clusters(Model& model, const ClusterAssignment& a, float tolerance = 1e-3f) {
  SnapReport rep;
  rep.tolerance = tolerance;
  for (const auto& [id, lc] : a.layers) {
    LayerParams& p = model.params(id);
    for (Tensor* t : {&p.kernel, &p.mu, &p.sigma, &p.gamma, &p.beta}) {
      if (!t->defined()) continue;
      const std::size_t c = t->shape().back(), rows = t->numel() / c;
      if (c != lc.width)
        throw ShapeError("snap_clusters: layer '" + id + "' has " + std::to_string(c) + " channels, clusters cover " +
                         std::to_string(lc.width));
      float* d = t->ptr();
      for (const auto& h : lc.clusters) {
        if (h.size() < 2) continue;
        for (std::size_t r = 0; r < rows; ++r) {
          double mean = 0.0;
          for (std::size_t k : h) mean += d[r * c + k];
          mean /= static_cast<double>(h.size());
          const float m = static_cast<float>(mean);
          for (std::size_t k : h) {
            rep.max_deviation = std::max(rep.max_deviation, static_cast<float>(std::abs(d[r * c + k] - mean)));
            d[r * c + k] = m;
          }
        }
      }
    }
  }
  return rep;
}

/// How one tensor's channels survive a trim: leader[j] is the original index
/// of the channel that absorbs j (j itself when it survives), or -1 when j is
/// discarded.
struct ChannelPlan {
  std::vector<long> leader;

  static ChannelPlan identity(std::size_t c) {
    ChannelPlan p;
    for (std::size_t j = 0; j < c; ++j) p.leader.push_back(static_cast<long>(j));
    return p;
  }
  std::size_t width() const { return leader.size(); }
  IndexSet remaining() const {
    IndexSet r;
    for (std::size_t j = 0; j < leader.size(); ++j)
      if (leader[j] == static_cast<long>(j)) r.push_back(j);
    return r;
  }
  /// New position of every surviving original index.
  std::vector<long> position() const {
    std::vector<long> pos(leader.size(), -1);
    long n = 0;
    for (std::size_t j = 0; j < leader.size(); ++j)
      if (leader[j] == static_cast<long>(j)) pos[j] = n++;
    return pos;
  }
  bool is_identity() const {
    for (std::size_t j = 0; j < leader.size(); ++j)
      if (leader[j] != static_cast<long>(j)) return false;
    return true;
  }
  bool operator==(const ChannelPlan&) const = default;
};

/// Per-layer channel plans: merge plans from clusters, or discard plans from
/// remaining sets.
struct TrimPlan {
  std::map<std::string, ChannelPlan> layers;
  bool operator==(const TrimPlan&) const = default;
};

/// R = {min H | H in C}; every other index merges into its cluster's minimum.
inline TrimPlan select_remaining(const ClusterAssignment& a) {
  TrimPlan plan;
  for (const auto& [id, lc] : a.layers) {
    ChannelPlan p;
    p.leader.assign(lc.width, -1);
    for (const auto& h : lc.clusters) {
      const std::size_t lead = *std::min_element(h.begin(), h.end());
      for (std::size_t j : h) p.leader.at(j) = static_cast<long>(lead);
    }
    plan.layers[id] = std::move(p);
  }
  return plan;
}

/// Keeps the listed channels and drops the rest without merging.
inline ChannelPlan discard_plan(std::size_t c, const IndexSet& remaining) {
  ChannelPlan p;
  p.leader.assign(c, -1);
  for (std::size_t j : remaining) {
    if (j >= c) throw ValidationError("remaining index " + std::to_string(j) + " out of range " + std::to_string(c));
    p.leader[j] = static_cast<long>(j);
  }
  return p;
}

inline void to_json(nlohmann::json& j, const TrimPlan& plan) {
  j = nlohmann::json::object();
  for (const auto& [id, p] : plan.layers) {
    std::map<std::string, long> merge;
    for (std::size_t k = 0; k < p.leader.size(); ++k)
      if (p.leader[k] != static_cast<long>(k)) merge[std::to_string(k)] = p.leader[k];
    j[id] = {{"remaining", p.remaining()}, {"merge", merge}};
  }
}

namespace detail {

/// Selects `keep` along the last axis of t.
inline Tensor slice_last(const Tensor& t, const IndexSet& keep) {
  const std::size_t c = t.shape().back(), rows = t.numel() / c;
  for (std::size_t j : keep)
    if (j >= c) throw ValidationError("slice index " + std::to_string(j) + " out of range " + std::to_string(c));
  Shape s = t.shape();
  s.back() = keep.size();
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t n = 0; n < keep.size(); ++n) out.ptr()[r * keep.size() + n] = t.ptr()[r * c + keep[n]];
  return out;
}

/// Merges then slices axis `axis` of t (of extent plan.width() * repeat,
/// laid out as [outer, repeat, plan, inner]).
inline Tensor merge_axis(const Tensor& t, std::size_t outer, std::size_t repeat, const ChannelPlan& plan,
                         std::size_t inner) {
  const std::size_t c = plan.width();
  if (outer * repeat * c * inner != t.numel())
    throw ShapeError("merge: tensor " + shape_str(t.shape()) + " does not have an input axis of width " +
                     std::to_string(c));
  const auto pos = plan.position();
  const std::size_t nc = plan.remaining().size();
  std::vector<float> out(outer * repeat * nc * inner, 0.0f);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t p = 0; p < repeat; ++p)
      for (std::size_t h = 0; h < c; ++h) {
        if (plan.leader[h] < 0) continue;
        const long dst = pos.at(static_cast<std::size_t>(plan.leader[h]));
        const float* src = t.ptr() + ((o * repeat + p) * c + h) * inner;
        float* d = out.data() + ((o * repeat + p) * nc + static_cast<std::size_t>(dst)) * inner;
        for (std::size_t i = 0; i < inner; ++i) d[i] += src[i];
      }
  return Tensor(Shape{outer * repeat * nc * inner}, std::move(out));
}

}  // namespace detail

/// Slices kernel (4th axis) and the four vectors of one layer to R.
inline LayerParams trim_layer(const LayerParams& p, const IndexSet& remaining) {
  LayerParams out;
  if (p.kernel.defined()) out.kernel = detail::slice_last(p.kernel, remaining);
  if (p.mu.defined()) out.mu = detail::slice_last(p.mu, remaining);
  if (p.sigma.defined()) out.sigma = detail::slice_last(p.sigma, remaining);
  if (p.gamma.defined()) out.gamma = detail::slice_last(p.gamma, remaining);
  if (p.beta.defined()) out.beta = detail::slice_last(p.beta, remaining);
  return out;
}

/// K[:,:,k,:] <- sum over h merged into k of K[:,:,h,:] for surviving k, then
/// the input axis is sliced to the survivors.
inline Tensor trim_following_inputs(const Tensor& kernel, const ChannelPlan& plan) {
  if (kernel.rank() != 4) throw ShapeError("trim_following_inputs: kernel must be rank 4, got " + shape_str(kernel.shape()));
  if (kernel.dim(2) != plan.width())
    throw ShapeError("trim_following_inputs: kernel input channels (dim 2) = " + std::to_string(kernel.dim(2)) +
                     " but the plan covers " + std::to_string(plan.width()) + " channels");
  Tensor flat = detail::merge_axis(kernel, kernel.dim(0) * kernel.dim(1), 1, plan, kernel.dim(3));
  return flat.reshaped({kernel.dim(0), kernel.dim(1), plan.remaining().size(), kernel.dim(3)});
}

/// Rows of a linear weight [spatial*c, out] whose input is a flattened
/// [h,w,c] map (spatial = h*w) or flat features (spatial = 1).
inline Tensor trim_linear_inputs(const Tensor& weight, const ChannelPlan& plan, std::size_t spatial) {
  if (weight.rank() != 2 || weight.dim(0) != spatial * plan.width())
    throw ShapeError("trim_linear_inputs: weight " + shape_str(weight.shape()) + " does not have " +
                     std::to_string(spatial * plan.width()) + " input rows");
  Tensor flat = detail::merge_axis(weight, 1, spatial, plan, weight.dim(1));
  return flat.reshaped({spatial * plan.remaining().size(), weight.dim(1)});
}

namespace detail {

inline std::string describe(const ChannelPlan& p) {
  std::string s = "[";
  const auto r = p.remaining();
  for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + std::to_string(r[i]);
  return s + "]";
}

}  // namespace detail

/// Builds the narrower model. Conv layers in the plan are sliced to their
/// survivors; every consumer merges its input channels by the producer's
/// plan (conv kernels, linear weights, BN vectors slice). Add operands must
/// carry identical plans and BN nodes in the plan must agree with the
/// channels they receive, otherwise ConstraintError.
inline Model trim_network(const Model& model, const TrimPlan& plan) {
  const NetworkSpec& spec = model.spec();
  const SpecAnalysis& a = model.analysis();
  for (const auto& [id, p] : plan.layers) {
    const LayerSpec& l = spec.layer(id);
    if (l.kind != LayerKind::conv && l.kind != LayerKind::bn)
      throw ValidationError("trim plan names '" + id + "', which is neither a conv nor a bn layer");
    if (p.width() != a.dims.at(l.kind == LayerKind::conv ? id : l.inputs.at(0)).c)
      throw ShapeError("trim plan for '" + id + "' covers " + std::to_string(p.width()) + " channels");
  }

  NetworkSpec out_spec = spec;
  std::map<std::string, ChannelPlan> node;
  node[kInputId] = ChannelPlan::identity(spec.input_c);
  std::map<std::string, LayerParams> params;
  for (const auto& id : a.order) {
    const LayerSpec& l = spec.layer(id);
    const ChannelPlan& in = node.at(l.inputs.at(0));
    switch (l.kind) {
      case LayerKind::conv: {
        const LayerParams& p = model.params(id);
        auto it = plan.layers.find(id);
        ChannelPlan own = it != plan.layers.end() ? it->second : ChannelPlan::identity(l.filters);
        LayerParams q = trim_layer(p, own.remaining());
        q.kernel = trim_following_inputs(q.kernel, in);
        out_spec.layer(id).filters = own.remaining().size();
        params[id] = q;
        node[id] = own;
        break;
      }
      case LayerKind::bn: {
        auto it = plan.layers.find(id);
        if (it != plan.layers.end() && it->second != in)
          throw ConstraintError("bn node '" + id + "' is planned to keep channels " + detail::describe(it->second) +
                                " but receives channels " + detail::describe(in));
        params[id] = trim_layer(model.params(id), in.remaining());
        node[id] = in;
        break;
      }
      case LayerKind::linear: {
        const LayerParams& p = model.params(id);
        const NodeDims& d = a.dims.at(l.inputs.at(0));
        LayerParams q;
        q.kernel = trim_linear_inputs(p.kernel, in, d.flat ? 1 : d.h * d.w);
        q.beta = p.beta.clone();
        params[id] = q;
        node[id] = ChannelPlan::identity(l.filters);
        break;
      }
      case LayerKind::add: {
        const ChannelPlan& other = node.at(l.inputs.at(1));
        if (in != other)
          throw ConstraintError("add node '" + id + "': operand '" + l.inputs[0] + "' keeps channels " +
                                detail::describe(in) + " but operand '" + l.inputs[1] + "' keeps " +
                                detail::describe(other));
        node[id] = in;
        break;
      }
      case LayerKind::concat: {
        ChannelPlan cat;
        for (const auto& src : l.inputs) {
          const ChannelPlan& part = node.at(src);
          const long shift = static_cast<long>(cat.leader.size());
          for (long v : part.leader) cat.leader.push_back(v < 0 ? -1 : v + shift);
        }
        node[id] = std::move(cat);
        break;
      }
      case LayerKind::pool: node[id] = in; break;
    }
  }
  Model out(out_spec);
  for (auto& [id, p] : params) out.set_params(id, std::move(p));
  out.check_shapes();
  return out;
}

inline Model trim_network(const Model& model, const ClusterAssignment& a) {
  return trim_network(model, select_remaining(a));
}

/// Max |logit difference| between two models over n random inputs in [0,1),
/// evaluated in eval mode.
inline float verify_equivalence(const Model& original, const Model& trimmed, std::size_t n_samples, std::uint64_t seed,
                                std::size_t batch = 50) {
  const NetworkSpec& s = original.spec();
  const NetworkSpec& t = trimmed.spec();
  if (s.input_h != t.input_h || s.input_w != t.input_w || s.input_c != t.input_c || s.classes != t.classes)
    throw ShapeError("verify_equivalence: models disagree on input or class count");
  std::mt19937_64 rng(seed);
  float worst = 0.0f;
  for (std::size_t done = 0; done < n_samples; done += batch) {
    const std::size_t n = std::min(batch, n_samples - done);
    Tensor x = uniform_tensor({n, s.input_h, s.input_w, s.input_c}, 0.0f, 1.0f, rng);
    const Tensor a = forward(original, x);
    const Tensor b = forward(trimmed, x);
    worst = std::max(worst, max_abs_diff(a, b));
  }
  return worst;
}

}  // namespace csgd
