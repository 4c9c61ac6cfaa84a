#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "csgd/clustering.hpp"
#include "csgd/errors.hpp"
#include "csgd/network_spec.hpp"

namespace csgd {

enum class GroupKind { residual_stem, dense_bn };

inline const char* to_string(GroupKind k) { return k == GroupKind::residual_stem ? "residual-stem" : "dense-bn"; }

/// A layer whose channels [offset, offset+width) must follow the pacesetter's
/// clustering. Conv followers cover their whole output (offset 0); BN
/// followers in dense blocks cover a slice of their concatenated input.
struct FollowerSlot {
  std::string id;
  std::size_t offset = 0;
  std::size_t width = 0;
  std::size_t layer_width = 0;
  bool operator==(const FollowerSlot&) const = default;
};

struct ConstraintGroup {
  std::string pacesetter;
  std::vector<FollowerSlot> followers;
  GroupKind kind = GroupKind::residual_stem;

  std::vector<std::string> follower_ids() const {
    std::vector<std::string> ids;
    for (const auto& f : followers) ids.push_back(f.id);
    return ids;
  }
};

namespace detail {

struct ChannelSource {
  std::string producer;
  std::size_t channel = 0;
};

/// For every node, which producer (conv, linear or the input) originally
/// emitted each of its channels. Add nodes report their first operand.
inline std::map<std::string, std::vector<ChannelSource>> trace_channels(const NetworkSpec& spec, const SpecAnalysis& a) {
  std::map<std::string, std::vector<ChannelSource>> src;
  auto fresh = [](const std::string& id, std::size_t c) {
    std::vector<ChannelSource> v(c);
    for (std::size_t j = 0; j < c; ++j) v[j] = {id, j};
    return v;
  };
  src[kInputId] = fresh(kInputId, spec.input_c);
  for (const auto& id : a.order) {
    const LayerSpec& l = spec.layer(id);
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::linear: src[id] = fresh(id, a.dims.at(id).c); break;
      case LayerKind::concat: {
        std::vector<ChannelSource> v;
        for (const auto& in : l.inputs) v.insert(v.end(), src.at(in).begin(), src.at(in).end());
        src[id] = std::move(v);
        break;
      }
      default: src[id] = src.at(l.inputs.at(0)); break;
    }
  }
  return src;
}

class UnionFind {
 public:
  std::string find(const std::string& x) {
    auto it = parent_.find(x);
    if (it == parent_.end() || it->second == x) return x;
    return it->second = find(it->second);
  }
  void unite(const std::string& a, const std::string& b, const std::map<std::string, std::size_t>& rank) {
    std::string ra = find(a), rb = find(b);
    if (ra == rb) return;
    if (rank.at(rb) < rank.at(ra)) std::swap(ra, rb);
    parent_[ra] = ra;
    parent_[rb] = ra;
  }

 private:
  std::map<std::string, std::string> parent_;
};

}  // namespace detail

/// Pacesetter / follower groups of a validated spec.
///
/// Layers joined through `add` nodes form one residual group led by the
/// earliest of them in topological order (the stem or the projection conv).
/// Every conv whose channels reach a `bn` node leads a dense group whose
/// followers are those BN slices.
inline std::vector<ConstraintGroup> derive_constraint_groups(const NetworkSpec& spec) {
  const SpecAnalysis a = validate(spec);
  const auto src = detail::trace_channels(spec, a);
  std::map<std::string, std::size_t> rank;
  rank[kInputId] = 0;
  for (std::size_t i = 0; i < a.order.size(); ++i) rank[a.order[i]] = i + 1;

  auto whole_producer = [&](const std::string& node, const std::string& where) {
    const auto& v = src.at(node);
    const std::string p = v.front().producer;
    bool whole = v.size() == src.at(p).size();
    for (std::size_t j = 0; whole && j < v.size(); ++j) whole = v[j].producer == p && v[j].channel == j;
    if (!whole)
      throw ConstraintError(where + ": operand '" + node + "' does not carry the full output of a single layer");
    return p;
  };

  detail::UnionFind uf;
  for (const auto& id : a.order) {
    const LayerSpec& l = spec.layer(id);
    if (l.kind != LayerKind::add) continue;
    const std::string where = "add node '" + id + "'";
    const std::string pa = whole_producer(l.inputs[0], where);
    const std::string pb = whole_producer(l.inputs[1], where);
    const std::size_t wa = src.at(l.inputs[0]).size(), wb = src.at(l.inputs[1]).size();
    if (wa != wb)
      throw ConstraintError(where + " adds '" + pa + "' (" + std::to_string(wa) + " channels) to '" + pb + "' (" +
                            std::to_string(wb) + " channels)");
    for (const auto& p : {pa, pb})
      if (p == kInputId || spec.layer(p).kind != LayerKind::conv)
        throw ConstraintError(where + " reads '" + p + "', which is not a prunable conv layer");
    uf.unite(pa, pb, rank);
  }

  std::map<std::string, ConstraintGroup> groups;
  auto group_of = [&](const std::string& pacesetter, GroupKind kind) -> ConstraintGroup& {
    auto it = groups.find(pacesetter);
    if (it == groups.end()) it = groups.emplace(pacesetter, ConstraintGroup{pacesetter, {}, kind}).first;
    return it->second;
  };
  for (const auto& id : a.order) {
    const LayerSpec& l = spec.layer(id);
    if (l.kind != LayerKind::conv) continue;
    const std::string root = uf.find(id);
    if (root != id) group_of(root, GroupKind::residual_stem).followers.push_back({id, 0, l.filters, l.filters});
  }
  for (const auto& id : a.order) {
    const LayerSpec& l = spec.layer(id);
    if (l.kind != LayerKind::bn) continue;
    const auto& v = src.at(l.inputs.at(0));
    std::size_t start = 0;
    while (start < v.size()) {
      const std::string p = v[start].producer;
      std::size_t end = start;
      while (end < v.size() && v[end].producer == p) ++end;
      if (p != kInputId && spec.layer(p).kind == LayerKind::conv) {
        const std::size_t width = spec.layer(p).filters;
        bool whole = end - start == width;
        for (std::size_t j = start; whole && j < end; ++j) whole = v[j].channel == j - start;
        if (!whole)
          throw ConstraintError("bn node '" + id + "' reads a partial or reordered slice of '" + p + "'");
        const std::string root = uf.find(p);
        group_of(root, root == p ? GroupKind::dense_bn : GroupKind::residual_stem)
            .followers.push_back({id, start, width, v.size()});
      }
      start = end;
    }
  }

  std::vector<ConstraintGroup> out;
  for (const auto& id : a.order)
    if (auto it = groups.find(id); it != groups.end()) out.push_back(it->second);
  return out;
}

/// Copies every pacesetter's clusters onto its followers. BN followers get
/// the clusters shifted to their channel offset; channels of a BN layer that
/// no group covers stay singletons.
inline ClusterAssignment propagate_clusters(const std::vector<ConstraintGroup>& groups, const ClusterAssignment& in) {
  ClusterAssignment out = in;
  std::map<std::string, std::vector<std::pair<const FollowerSlot*, const LayerClusters*>>> slots;
  for (const auto& g : groups) {
    if (!in.has(g.pacesetter))
      throw ConstraintError("pacesetter '" + g.pacesetter + "' has no cluster assignment");
    const LayerClusters& p = in.at(g.pacesetter);
    for (const auto& f : g.followers) {
      if (f.width != p.width)
        throw ConstraintError("follower '" + f.id + "' covers " + std::to_string(f.width) + " channels but pacesetter '" +
                              g.pacesetter + "' has " + std::to_string(p.width));
      slots[f.id].push_back({&f, &p});
    }
  }
  for (const auto& [id, list] : slots) {
    const std::size_t width = list.front().first->layer_width;
    std::vector<std::vector<std::size_t>> key(width);
    for (std::size_t j = 0; j < width; ++j) key[j] = {0, j};
    for (std::size_t s = 0; s < list.size(); ++s) {
      const auto& [slot, pc] = list[s];
      const auto idx = pc->cluster_index();
      for (std::size_t j = 0; j < slot->width; ++j) key.at(slot->offset + j) = {s + 1, idx[j]};
    }
    std::map<std::vector<std::size_t>, IndexSet> by_key;
    for (std::size_t j = 0; j < width; ++j) by_key[key[j]].push_back(j);
    LayerClusters lc{width, {}};
    for (auto& [k, h] : by_key) lc.clusters.push_back(std::move(h));
    lc.check(id);
    lc.canonicalize();
    out.set(id, std::move(lc));
  }
  return out;
}

/// Every conv that is not a follower, in topological order.
inline std::vector<std::string> independent_convs(const NetworkSpec& spec, const std::vector<ConstraintGroup>& groups) {
  std::vector<std::string> followers;
  for (const auto& g : groups)
    for (const auto& f : g.followers) followers.push_back(f.id);
  std::vector<std::string> out;
  for (const auto& id : validate(spec).order)
    if (spec.layer(id).kind == LayerKind::conv && std::find(followers.begin(), followers.end(), id) == followers.end())
      out.push_back(id);
  return out;
}

inline void to_json(nlohmann::json& j, const ConstraintGroup& g) {
  j = {{"pacesetter", g.pacesetter}, {"kind", to_string(g.kind)}, {"followers", nlohmann::json::array()}};
  for (const auto& f : g.followers) j["followers"].push_back({{"id", f.id}, {"offset", f.offset}, {"width", f.width}});
}

}  // namespace csgd
