#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "csgd/errors.hpp"
#include "csgd/ops.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

using IndexSet = std::vector<std::size_t>;

/// Partition of one layer's channel indices {0..width-1} into clusters.
/// Canonical form: indices ascending inside a cluster, clusters ordered by
/// their smallest index.
struct LayerClusters {
  std::size_t width = 0;
  std::vector<IndexSet> clusters;

  std::size_t size() const { return clusters.size(); }

  /// cluster_index()[j] is the position in `clusters` of the cluster holding j.
  std::vector<std::size_t> cluster_index() const {
    std::vector<std::size_t> idx(width, 0);
    for (std::size_t k = 0; k < clusters.size(); ++k)
      for (std::size_t j : clusters[k]) idx.at(j) = k;
    return idx;
  }

  /// H(j).
  const IndexSet& cluster_of(std::size_t j) const {
    for (const auto& h : clusters)
      if (std::find(h.begin(), h.end(), j) != h.end()) return h;
    throw ValidationError("channel " + std::to_string(j) + " is in no cluster");
  }

  bool all_singletons() const { return clusters.size() == width; }

  void canonicalize() {
    for (auto& h : clusters) std::sort(h.begin(), h.end());
    std::sort(clusters.begin(), clusters.end(),
              [](const IndexSet& a, const IndexSet& b) { return a.front() < b.front(); });
  }

  /// Throws ValidationError unless the clusters are nonempty, disjoint and
  /// cover {0..width-1}.
  void check(const std::string& layer = "") const {
    const std::string where = layer.empty() ? std::string("clusters") : "clusters of '" + layer + "'";
    std::vector<int> seen(width, 0);
    for (const auto& h : clusters) {
      if (h.empty()) throw ValidationError(where + ": empty cluster");
      for (std::size_t j : h) {
        if (j >= width) throw ValidationError(where + ": index " + std::to_string(j) + " out of range " + std::to_string(width));
        if (seen[j]++) throw ValidationError(where + ": index " + std::to_string(j) + " appears twice");
      }
    }
    for (std::size_t j = 0; j < width; ++j)
      if (!seen[j]) throw ValidationError(where + ": index " + std::to_string(j) + " is not covered");
  }

  bool operator==(const LayerClusters&) const = default;
};

inline LayerClusters make_clusters(std::size_t width, std::vector<IndexSet> clusters) {
  LayerClusters lc{width, std::move(clusters)};
  lc.check();
  lc.canonicalize();
  return lc;
}

/// Per-layer cluster assignment, keyed by layer id.
struct ClusterAssignment {
  std::map<std::string, LayerClusters> layers;

  bool has(const std::string& id) const { return layers.count(id) > 0; }
  const LayerClusters& at(const std::string& id) const {
    auto it = layers.find(id);
    if (it == layers.end()) throw ValidationError("layer '" + id + "' has no cluster assignment");
    return it->second;
  }
  void set(const std::string& id, LayerClusters lc) { layers[id] = std::move(lc); }
  bool operator==(const ClusterAssignment&) const = default;
};

inline void to_json(nlohmann::json& j, const ClusterAssignment& a) {
  j = nlohmann::json::object();
  for (const auto& [id, lc] : a.layers) j[id] = lc.clusters;
}

inline void from_json(const nlohmann::json& j, ClusterAssignment& a) {
  a.layers.clear();
  for (const auto& [id, v] : j.items()) {
    auto clusters = v.get<std::vector<IndexSet>>();
    std::size_t width = 0;
    for (const auto& h : clusters) width += h.size();
    LayerClusters lc{width, std::move(clusters)};
    lc.check(id);
    lc.canonicalize();
    a.layers[id] = std::move(lc);
  }
}

namespace detail {

inline void require_target(std::size_t c, std::size_t r) {
  if (r < 1 || r > c)
    throw ValidationError("cluster target r = " + std::to_string(r) + " must satisfy 1 <= r <= c = " + std::to_string(c));
}

}  // namespace detail

inline LayerClusters singleton_clusters(std::size_t c) {
  LayerClusters lc{c, {}};
  for (std::size_t j = 0; j < c; ++j) lc.clusters.push_back({j});
  return lc;
}

/// Contiguous blocks whose sizes differ by at most one, larger blocks first.
inline LayerClusters even_clusters(std::size_t c, std::size_t r) {
  detail::require_target(c, r);
  LayerClusters lc{c, {}};
  const std::size_t base = c / r, extra = c % r;
  std::size_t next = 0;
  for (std::size_t k = 0; k < r; ++k) {
    IndexSet h;
    for (std::size_t n = 0; n < base + (k < extra ? 1 : 0); ++n) h.push_back(next++);
    lc.clusters.push_back(std::move(h));
  }
  return lc;
}

/// One cluster {0..c-r}, every remaining index alone.
inline LayerClusters imbalanced_clusters(std::size_t c, std::size_t r) {
  detail::require_target(c, r);
  LayerClusters lc{c, {}};
  IndexSet big;
  for (std::size_t j = 0; j <= c - r; ++j) big.push_back(j);
  lc.clusters.push_back(std::move(big));
  for (std::size_t j = c - r + 1; j < c; ++j) lc.clusters.push_back({j});
  return lc;
}

struct KMeansResult {
  std::vector<std::size_t> labels;
  std::vector<double> objective;  // within-cluster sum of squares after each Lloyd iteration
  std::size_t iterations = 0;
};

/// Lloyd's algorithm on the rows of `points` with k-means++ seeding.
/// Ties go to the lower-indexed centroid. A centroid left empty is moved to
/// the point farthest from its own centroid among clusters with more than
/// one member.
inline KMeansResult kmeans(const MatrixRM& points, std::size_t r, std::uint64_t seed, std::size_t max_iters = 100) {
  const std::size_t n = static_cast<std::size_t>(points.rows());
  detail::require_target(n, r);
  const Eigen::MatrixXd x = points.cast<double>();
  std::mt19937_64 rng(seed);

  Eigen::MatrixXd centers(r, x.cols());
  std::vector<char> chosen(n, 0);
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  centers.row(0) = x.row(first);
  chosen[first] = 1;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (x.row(i) - centers.row(0)).squaredNorm();
  for (std::size_t k = 1; k < r; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
    std::size_t pick = n;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i] || d2[i] <= 0.0) continue;
        pick = i;
        if (u < d2[i]) break;
        u -= d2[i];
      }
    }
    if (pick == n) {
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) free.push_back(i);
      pick = free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
    }
    chosen[pick] = 1;
    centers.row(k) = x.row(pick);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], (x.row(i) - centers.row(k)).squaredNorm());
  }

  KMeansResult res;
  res.labels.assign(n, std::numeric_limits<std::size_t>::max());
  std::vector<double> dist(n);
  for (std::size_t it = 0; it < std::max<std::size_t>(max_iters, 1); ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < r; ++k) {
        const double d = (x.row(i) - centers.row(k)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      if (res.labels[i] != best) changed = true;
      res.labels[i] = best;
      dist[i] = best_d;
    }
    std::vector<std::size_t> count(r, 0);
    for (std::size_t l : res.labels) ++count[l];
    for (std::size_t k = 0; k < r; ++k) {
      if (count[k] > 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (count[res.labels[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
      --count[res.labels[far]];
      res.labels[far] = k;
      count[k] = 1;
      dist[far] = 0.0;
      centers.row(k) = x.row(far);
      changed = true;
    }
    centers.setZero();
    for (std::size_t i = 0; i < n; ++i) centers.row(res.labels[i]) += x.row(i);
    for (std::size_t k = 0; k < r; ++k) centers.row(k) /= static_cast<double>(count[k]);
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) obj += (x.row(i) - centers.row(res.labels[i])).squaredNorm();
    res.objective.push_back(obj);
    res.iterations = it + 1;
    if (!changed) break;
  }
  return res;
}

/// Kernel [u,v,c_in,c] viewed as c points of dimension u*v*c_in.
inline MatrixRM filter_points(const Tensor& kernel) {
  if (kernel.rank() != 4) throw ShapeError("filter_points: kernel must be rank 4, got " + shape_str(kernel.shape()));
  const Eigen::Index c = static_cast<Eigen::Index>(kernel.dim(3));
  return CMapRM(kernel.ptr(), static_cast<Eigen::Index>(kernel.numel()) / c, c).transpose();
}

inline LayerClusters clusters_from_labels(const std::vector<std::size_t>& labels, std::size_t r) {
  LayerClusters lc{labels.size(), std::vector<IndexSet>(r)};
  for (std::size_t j = 0; j < labels.size(); ++j) lc.clusters.at(labels[j]).push_back(j);
  lc.check();
  lc.canonicalize();
  return lc;
}

inline LayerClusters kmeans_clusters(const Tensor& kernel, std::size_t r, std::uint64_t seed, std::size_t max_iters = 100) {
  if (kernel.rank() != 4) throw ShapeError("kmeans_clusters: kernel must be rank 4, got " + shape_str(kernel.shape()));
  detail::require_target(kernel.dim(3), r);
  if (r == kernel.dim(3)) return singleton_clusters(r);
  return clusters_from_labels(kmeans(filter_points(kernel), r, seed, max_iters).labels, r);
}

enum class ClusterScheme { kmeans, even, imbalanced };

inline ClusterScheme parse_scheme(const std::string& s) {
  if (s == "kmeans") return ClusterScheme::kmeans;
  if (s == "even") return ClusterScheme::even;
  if (s == "imbalanced") return ClusterScheme::imbalanced;
  throw ValidationError("unknown cluster scheme '" + s + "' (expected kmeans, even or imbalanced)");
}

inline LayerClusters cluster_layer(ClusterScheme scheme, const Tensor& kernel, std::size_t r, std::uint64_t seed,
                                   std::size_t max_iters = 100) {
  switch (scheme) {
    case ClusterScheme::kmeans: return kmeans_clusters(kernel, r, seed, max_iters);
    case ClusterScheme::even: return even_clusters(kernel.dim(3), r);
    case ClusterScheme::imbalanced: return imbalanced_clusters(kernel.dim(3), r);
  }
  throw ValidationError("unknown cluster scheme");
}

}  // namespace csgd
