#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "csgd/clustering.hpp"
#include "csgd/errors.hpp"
#include "csgd/model.hpp"
#include "csgd/ops.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

/// Gamma[m][n] = 1/|H(m)| when m and n share a cluster, else 0.
inline MatrixRM build_gamma(const LayerClusters& lc) {
  MatrixRM g = MatrixRM::Zero(static_cast<Eigen::Index>(lc.width), static_cast<Eigen::Index>(lc.width));
  for (const auto& h : lc.clusters) {
    const float v = 1.0f / static_cast<float>(h.size());
    for (std::size_t m : h)
      for (std::size_t n : h) g(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)) = v;
  }
  return g;
}

/// Lambda[m][m] = eta + eps - eps/|H(m)|, Lambda[m][n] = -eps/|H(m)| within a
/// cluster, else 0.
inline MatrixRM build_lambda(const LayerClusters& lc, float eta, float eps) {
  MatrixRM l = MatrixRM::Zero(static_cast<Eigen::Index>(lc.width), static_cast<Eigen::Index>(lc.width));
  for (const auto& h : lc.clusters) {
    const float share = eps / static_cast<float>(h.size());
    for (std::size_t m : h)
      for (std::size_t n : h)
        l(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)) = m == n ? eta + (eps - share) : -share;
  }
  return l;
}

/// W <- W - tau (G Gamma + W Lambda), with G Gamma formed first, then W Lambda.
inline void csgd_step_matrix(MatrixRM& w, const MatrixRM& grad, const MatrixRM& gamma, const MatrixRM& lambda, float tau) {
  if (grad.rows() != w.rows() || grad.cols() != w.cols() || gamma.rows() != w.cols() || gamma.cols() != w.cols() ||
      lambda.rows() != w.cols() || lambda.cols() != w.cols())
    throw ShapeError("csgd_step_matrix: W is " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()) + ", grad " +
                     std::to_string(grad.rows()) + "x" + std::to_string(grad.cols()) + ", Gamma " +
                     std::to_string(gamma.rows()) + "x" + std::to_string(gamma.cols()) + ", Lambda " +
                     std::to_string(lambda.rows()) + "x" + std::to_string(lambda.cols()));
  MatrixRM gg = grad * gamma;
  MatrixRM wl = w * lambda;
  w.array() -= tau * (gg.array() + wl.array());
}

/// Per-filter update on the columns of W:
/// F_j += tau (-mean_H dL/dF - eta F_j + eps (mean_H F - F_j)), from the old values.
inline void csgd_step_naive(MatrixRM& w, const MatrixRM& grad, const LayerClusters& lc, float tau, float eta, float eps) {
  if (grad.rows() != w.rows() || grad.cols() != w.cols() || static_cast<std::size_t>(w.cols()) != lc.width)
    throw ShapeError("csgd_step_naive: W is " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()) + ", grad " +
                     std::to_string(grad.rows()) + "x" + std::to_string(grad.cols()) + ", clusters cover " +
                     std::to_string(lc.width));
  const MatrixRM old = w;
  for (const auto& h : lc.clusters) {
    Eigen::VectorXf gmean = Eigen::VectorXf::Zero(w.rows());
    Eigen::VectorXf wmean = Eigen::VectorXf::Zero(w.rows());
    for (std::size_t k : h) {
      gmean += grad.col(static_cast<Eigen::Index>(k));
      wmean += old.col(static_cast<Eigen::Index>(k));
    }
    gmean /= static_cast<float>(h.size());
    wmean /= static_cast<float>(h.size());
    for (std::size_t j : h) {
      const auto jj = static_cast<Eigen::Index>(j);
      w.col(jj) = old.col(jj) + tau * (-gmean - eta * old.col(jj) + eps * (wmean - old.col(jj)));
    }
  }
}

/// W <- W - tau (G + eta W).
inline void sgd_step(MatrixRM& w, const MatrixRM& grad, float tau, float eta) {
  w.array() -= tau * (grad.array() + eta * w.array());
}

/// Sum over clusters of the squared distance of each kernel slice to its
/// cluster mean.
inline double chi_layer(const Tensor& kernel, const LayerClusters& lc) {
  const MatrixRM p = filter_points(kernel);
  double total = 0.0;
  for (const auto& h : lc.clusters) {
    if (h.size() < 2) continue;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(p.cols());
    for (std::size_t k : h) mean += p.row(static_cast<Eigen::Index>(k)).cast<double>().transpose();
    mean /= static_cast<double>(h.size());
    for (std::size_t k : h) total += (p.row(static_cast<Eigen::Index>(k)).cast<double>().transpose() - mean).squaredNorm();
  }
  return total;
}

/// Summed over every conv layer with an assignment.
inline double chi(const Model& model, const ClusterAssignment& a) {
  double total = 0.0;
  for (const auto& [id, lc] : a.layers)
    if (model.spec().layer(id).kind == LayerKind::conv) total += chi_layer(model.params(id).kernel, lc);
  return total;
}

using PruneSets = std::map<std::string, IndexSet>;

/// Sum over layers and j in P of ||K_j||^2.
inline double phi(const Model& model, const PruneSets& sets) {
  double total = 0.0;
  for (const auto& [id, p] : sets) {
    const Tensor& k = model.params(id).kernel;
    const std::size_t c = k.dim(3), rows = k.numel() / c;
    for (std::size_t j : p) {
      if (j >= c) throw ValidationError("phi: index " + std::to_string(j) + " out of range for '" + id + "'");
      for (std::size_t r = 0; r < rows; ++r) {
        const double v = k.ptr()[r * c + j];
        total += v * v;
      }
    }
  }
  return total;
}

/// SGD step on the columns of W plus strength * K_j / ||K_j|| for j in P
/// (zero when ||K_j|| = 0).
inline void group_lasso_step(MatrixRM& w, const MatrixRM& grad, const IndexSet& prune, float tau, float eta, float strength) {
  if (grad.rows() != w.rows() || grad.cols() != w.cols())
    throw ShapeError("group_lasso_step: W and grad shapes differ");
  MatrixRM pen = MatrixRM::Zero(w.rows(), w.cols());
  for (std::size_t j : prune) {
    const auto jj = static_cast<Eigen::Index>(j);
    if (jj >= w.cols()) throw ValidationError("group_lasso_step: index " + std::to_string(j) + " out of range");
    const float norm = w.col(jj).norm();
    if (norm > 0.0f) pen.col(jj) = strength * w.col(jj) / norm;
  }
  w.array() -= tau * ((grad.array() + eta * w.array()) + pen.array());
}

/// The r filters with the largest l1 kernel norm, ascending. Ties at the
/// threshold favour the lower index.
inline IndexSet magnitude_remaining_set(const Tensor& kernel, std::size_t r) {
  if (kernel.rank() != 4) throw ShapeError("magnitude_remaining_set: kernel must be rank 4");
  const std::size_t c = kernel.dim(3), rows = kernel.numel() / c;
  if (r > c)
    throw ValidationError("magnitude_remaining_set: r = " + std::to_string(r) + " exceeds c = " + std::to_string(c));
  std::vector<double> l1(c, 0.0);
  for (std::size_t row = 0; row < rows; ++row)
    for (std::size_t j = 0; j < c; ++j) l1[j] += std::abs(kernel.ptr()[row * c + j]);
  IndexSet idx(c);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return l1[a] > l1[b]; });
  idx.resize(r);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Largest |x - cluster mean| over the kernels, gamma and beta of every
/// assigned layer.
inline float max_cluster_deviation(const Model& model, const ClusterAssignment& a) {
  float dev = 0.0f;
  for (const auto& [id, lc] : a.layers) {
    const LayerParams& p = model.params(id);
    for (const Tensor* t : {&p.kernel, &p.gamma, &p.beta}) {
      if (!t->defined()) continue;
      const std::size_t c = t->shape().back(), rows = t->numel() / c;
      for (const auto& h : lc.clusters) {
        if (h.size() < 2) continue;
        for (std::size_t r = 0; r < rows; ++r) {
          double mean = 0.0;
          for (std::size_t k : h) mean += t->ptr()[r * c + k];
          mean /= static_cast<double>(h.size());
          for (std::size_t k : h) dev = std::max(dev, static_cast<float>(std::abs(t->ptr()[r * c + k] - mean)));
        }
      }
    }
  }
  return dev;
}

// ---------------------------------------------------------------------------
// Optimizers over a Model

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// Applies one update with learning rate tau using the gradients currently
  /// stored on the model's parameters.
  virtual void step(Model& model, float tau) = 0;
};

namespace detail {

/// Trainable tensor viewed as [rows, c] with the channel axis last, and its
/// gradient (zeros when the tensor received none).
inline std::pair<MapRM, MatrixRM> as_matrix(Tensor& t) {
  const Eigen::Index c = static_cast<Eigen::Index>(t.rank() == 0 ? 1 : t.shape().back());
  const Eigen::Index rows = static_cast<Eigen::Index>(t.numel()) / c;
  MatrixRM g = t.has_grad() ? MatrixRM(CMapRM(t.grad_ptr(), rows, c)) : MatrixRM::Zero(rows, c);
  return {MapRM(t.ptr(), rows, c), std::move(g)};
}

/// Tensors an optimizer may update, grouped with the layer they belong to.
/// Linear weights are [in,out]; their channel axis is the output axis.
inline std::vector<std::pair<std::string, Tensor>> trainable_by_layer(const Model& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& nt : model.named_tensors())
    if (nt.trainable) out.push_back({nt.name.substr(0, nt.name.rfind('.')), nt.tensor});
  return out;
}

}  // namespace detail

/// Plain SGD with weight decay: W <- W - tau (G + eta W).
class PlainSgd : public Optimizer {
 public:
  explicit PlainSgd(float eta) : eta_(eta) {}
  void step(Model& model, float tau) override {
    for (auto& [layer, t] : detail::trainable_by_layer(model)) {
      auto [w, g] = detail::as_matrix(t);
      MatrixRM wm = w;
      sgd_step(wm, g, tau, eta_);
      w = wm;
    }
  }

 private:
  float eta_;
};

enum class StepForm { matrix, naive };

/// Centripetal SGD. Layers present in the assignment (conv layers and BN
/// nodes) update their kernel, gamma and beta with the clustered rule; every
/// other trainable tensor takes a plain SGD step with the same eta.
class CentripetalSgd : public Optimizer {
 public:
  CentripetalSgd(const ClusterAssignment& assignment, float eta, float eps, StepForm form = StepForm::matrix)
      : assignment_(assignment), eta_(eta), eps_(eps), form_(form) {
    if (eta < 0.0f || eps < 0.0f) throw ValidationError("C-SGD requires eta >= 0 and eps >= 0");
    for (const auto& [id, lc] : assignment_.layers) {
      lc.check(id);
      gamma_[id] = build_gamma(lc);
      lambda_[id] = build_lambda(lc, eta, eps);
    }
  }

  void step(Model& model, float tau) override {
    for (auto& [layer, t] : detail::trainable_by_layer(model)) {
      auto [w, g] = detail::as_matrix(t);
      MatrixRM wm = w;
      auto it = gamma_.find(layer);
      if (it == gamma_.end() || model.spec().layer(layer).kind == LayerKind::linear) {
        sgd_step(wm, g, tau, eta_);
      } else {
        if (static_cast<std::size_t>(wm.cols()) != assignment_.at(layer).width)
          throw ShapeError("C-SGD: layer '" + layer + "' has " + std::to_string(wm.cols()) +
                           " channels but its clusters cover " + std::to_string(assignment_.at(layer).width));
        if (form_ == StepForm::matrix)
          csgd_step_matrix(wm, g, it->second, lambda_.at(layer), tau);
        else
          csgd_step_naive(wm, g, assignment_.at(layer), tau, eta_, eps_);
      }
      w = wm;
    }
  }

  const ClusterAssignment& assignment() const { return assignment_; }

 private:
  ClusterAssignment assignment_;
  float eta_, eps_;
  StepForm form_;
  std::map<std::string, MatrixRM> gamma_, lambda_;
};

/// SGD plus a group-Lasso penalty on the kernels of the filters in each
/// layer's prune set.
class GroupLassoSgd : public Optimizer {
 public:
  GroupLassoSgd(PruneSets sets, float eta, float strength) : sets_(std::move(sets)), eta_(eta), strength_(strength) {}

  void step(Model& model, float tau) override {
    for (auto& nt : model.named_tensors()) {
      if (!nt.trainable) continue;
      Tensor t = nt.tensor;
      auto [w, g] = detail::as_matrix(t);
      MatrixRM wm = w;
      const std::string layer = nt.name.substr(0, nt.name.rfind('.'));
      const bool kernel = nt.name.size() > 7 && nt.name.compare(nt.name.size() - 7, 7, ".kernel") == 0;
      auto it = sets_.find(layer);
      if (kernel && it != sets_.end() && model.spec().layer(layer).kind == LayerKind::conv)
        group_lasso_step(wm, g, it->second, tau, eta_, strength_);
      else
        sgd_step(wm, g, tau, eta_);
      w = wm;
    }
  }

  float strength() const { return strength_; }

 private:
  PruneSets sets_;
  float eta_, strength_;
};

}  // namespace csgd
