#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "csgd/errors.hpp"
#include "csgd/network_spec.hpp"
#include "csgd/ops.hpp"
#include "csgd/tape.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

/// Parameters of one node. Conv layers use all five slots (the kernel is
/// [u,v,c_in,c] and the vectors have length c); bn nodes use the four vectors;
/// linear layers keep their [in,out] weight in `kernel` and bias in `beta`.
/// A conv without BN keeps mu=0, sigma=1, gamma=1 fixed and trains beta as a
/// per-filter bias.
struct LayerParams {
  Tensor kernel;
  Tensor mu, sigma, gamma, beta;
};

/// Scalars of one filter: kernel slice [u,v,c_in] plus mu, sigma, gamma, beta.
struct FilterTuple {
  Tensor kernel_slice;
  float mu = 0.0f, sigma = 1.0f, gamma = 1.0f, beta = 0.0f;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = false;
};

class Model {
 public:
  Model() = default;
  explicit Model(NetworkSpec spec) : spec_(std::move(spec)), analysis_(validate(spec_)) {}

  const NetworkSpec& spec() const { return spec_; }
  const SpecAnalysis& analysis() const { return analysis_; }

  LayerParams& params(const std::string& id) { return at(id); }
  const LayerParams& params(const std::string& id) const { return at(id); }
  bool has_params(const std::string& id) const { return params_.count(id) > 0; }
  void set_params(const std::string& id, LayerParams p) { params_[id] = std::move(p); }

  /// Every stored tensor in a fixed order (spec declaration order, then
  /// kernel, mu, sigma, gamma, beta).
  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& l : spec_.layers) {
      auto it = params_.find(l.id);
      if (it == params_.end()) continue;
      const LayerParams& p = it->second;
      const bool conv = l.kind == LayerKind::conv;
      const bool bias_only = conv && !l.has_bn;
      auto push = [&](const char* slot, const Tensor& t, bool trainable) {
        if (t.defined()) out.push_back({l.id + "." + slot, t, trainable});
      };
      push("kernel", p.kernel, true);
      push("mu", p.mu, false);
      push("sigma", p.sigma, false);
      push("gamma", p.gamma, !bias_only && l.kind != LayerKind::linear);
      push("beta", p.beta, true);
    }
    return out;
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors())
      if (nt.trainable) out.push_back(nt.tensor);
    return out;
  }

  void zero_grad() {
    for (auto& [id, p] : params_)
      for (Tensor* t : {&p.kernel, &p.mu, &p.sigma, &p.gamma, &p.beta})
        if (t->defined()) t->zero_grad();
  }

  FilterTuple filter(const std::string& id, std::size_t j) const {
    const LayerParams& p = at(id);
    if (spec_.layer(id).kind != LayerKind::conv) throw ValidationError("filter(): '" + id + "' is not a conv layer");
    const std::size_t c = p.kernel.dim(3);
    if (j >= c) throw ValidationError("filter(): index " + std::to_string(j) + " out of range for '" + id + "'");
    const std::size_t rows = p.kernel.numel() / c;
    Tensor slice({p.kernel.dim(0), p.kernel.dim(1), p.kernel.dim(2)});
    for (std::size_t r = 0; r < rows; ++r) slice.ptr()[r] = p.kernel.ptr()[r * c + j];
    return FilterTuple{slice, p.mu.ptr()[j], p.sigma.ptr()[j], p.gamma.ptr()[j], p.beta.ptr()[j]};
  }

  Model clone() const {
    Model m;
    m.spec_ = spec_;
    m.analysis_ = analysis_;
    for (const auto& [id, p] : params_) {
      LayerParams q;
      for (auto [src, dst] : {std::pair{&p.kernel, &q.kernel}, std::pair{&p.mu, &q.mu},
                              std::pair{&p.sigma, &q.sigma}, std::pair{&p.gamma, &q.gamma},
                              std::pair{&p.beta, &q.beta}})
        if (src->defined()) *dst = src->clone();
      m.params_[id] = q;
    }
    return m;
  }

  /// Throws ShapeError if any stored tensor disagrees with the spec.
  void check_shapes() const {
    for (const auto& l : spec_.layers) {
      const std::size_t cin = analysis_.dims.at(l.inputs.at(0)).c;
      const std::size_t fin = analysis_.dims.at(l.inputs.at(0)).features();
      auto expect = [&](const char* slot, const Tensor& t, const Shape& s) {
        if (!t.defined() || t.shape() != s)
          throw ShapeError("tensor '" + l.id + "." + slot + "' has shape " + (t.defined() ? shape_str(t.shape()) : "<missing>") +
                           ", spec requires " + shape_str(s));
      };
      if (l.kind == LayerKind::conv) {
        const LayerParams& p = at(l.id);
        expect("kernel", p.kernel, {l.kernel_h, l.kernel_w, cin, l.filters});
        for (auto [n, t] : {std::pair{"mu", &p.mu}, {"sigma", &p.sigma}, {"gamma", &p.gamma}, {"beta", &p.beta}})
          expect(n, *t, {l.filters});
      } else if (l.kind == LayerKind::bn) {
        const LayerParams& p = at(l.id);
        for (auto [n, t] : {std::pair{"mu", &p.mu}, {"sigma", &p.sigma}, {"gamma", &p.gamma}, {"beta", &p.beta}})
          expect(n, *t, {cin});
      } else if (l.kind == LayerKind::linear) {
        const LayerParams& p = at(l.id);
        expect("kernel", p.kernel, {fin, l.filters});
        expect("beta", p.beta, {l.filters});
      }
    }
  }

 private:
  LayerParams& at(const std::string& id) {
    auto it = params_.find(id);
    if (it == params_.end()) throw ValidationError("model has no parameters for layer '" + id + "'");
    return it->second;
  }
  const LayerParams& at(const std::string& id) const { return const_cast<Model*>(this)->at(id); }

  NetworkSpec spec_;
  SpecAnalysis analysis_;
  std::map<std::string, LayerParams> params_;
};

/// Kernels and linear weights ~ U(-b, b) with b = sqrt(6 / fan_in);
/// gamma = 1, beta = 0, mu = 0, sigma = 1.
inline Model build_model(const NetworkSpec& spec, std::uint64_t init_seed) {
  Model model(spec);
  std::mt19937_64 rng(init_seed);
  const SpecAnalysis& a = model.analysis();
  for (const auto& l : spec.layers) {
    const NodeDims& in = a.dims.at(l.inputs.at(0));
    LayerParams p;
    if (l.kind == LayerKind::conv) {
      const std::size_t fan_in = l.kernel_h * l.kernel_w * in.c;
      const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
      p.kernel = uniform_tensor({l.kernel_h, l.kernel_w, in.c, l.filters}, -bound, bound, rng);
      p.mu = Tensor({l.filters}, 0.0f);
      p.sigma = Tensor({l.filters}, 1.0f);
      p.gamma = Tensor({l.filters}, 1.0f);
      p.beta = Tensor({l.filters}, 0.0f);
    } else if (l.kind == LayerKind::bn) {
      p.mu = Tensor({in.c}, 0.0f);
      p.sigma = Tensor({in.c}, 1.0f);
      p.gamma = Tensor({in.c}, 1.0f);
      p.beta = Tensor({in.c}, 0.0f);
    } else if (l.kind == LayerKind::linear) {
      const float bound = std::sqrt(6.0f / static_cast<float>(in.features()));
      p.kernel = uniform_tensor({in.features(), l.filters}, -bound, bound, rng);
      p.beta = Tensor({l.filters}, 0.0f);
    } else {
      continue;
    }
    model.set_params(l.id, p);
  }
  return model;
}

struct ForwardOptions {
  Mode mode = Mode::eval;
  float bn_momentum = 0.1f;
};

/// Runs the graph and returns every node's activation (keyed by layer id,
/// plus "input"). Train mode normalizes with batch statistics and updates the
/// running mu / sigma stored in the model.
inline std::map<std::string, Tensor> forward_all(const Model& model, const Tensor& batch, ForwardOptions opt,
                                                 Tape* tape = nullptr) {
  const NetworkSpec& spec = model.spec();
  if (batch.rank() != 4 || batch.dim(1) != spec.input_h || batch.dim(2) != spec.input_w ||
      batch.dim(3) != spec.input_c)
    throw ShapeError("forward: batch shape " + shape_str(batch.shape()) + " does not match spec input [n," +
                     std::to_string(spec.input_h) + "," + std::to_string(spec.input_w) + "," +
                     std::to_string(spec.input_c) + "]");
  std::map<std::string, Tensor> act;
  act[kInputId] = batch;
  for (const auto& id : model.analysis().order) {
    const LayerSpec& l = spec.layer(id);
    const Tensor& x = act.at(l.inputs.at(0));
    Tensor y;
    switch (l.kind) {
      case LayerKind::conv: {
        const LayerParams& p = model.params(id);
        y = conv2d(x, p.kernel, l.stride, l.padding, tape);
        if (l.has_bn)
          y = batchnorm(y, p.mu, p.sigma, p.gamma, p.beta, opt.mode, opt.bn_momentum, tape);
        else
          y = batchnorm(y, p.mu, p.sigma, p.gamma, p.beta, Mode::eval, 0.0f, tape);
        break;
      }
      case LayerKind::bn: {
        const LayerParams& p = model.params(id);
        y = batchnorm(x, p.mu, p.sigma, p.gamma, p.beta, opt.mode, opt.bn_momentum, tape);
        break;
      }
      case LayerKind::linear: {
        const LayerParams& p = model.params(id);
        y = linear(x.rank() == 2 ? x : flatten(x), p.kernel, p.beta, tape);
        break;
      }
      case LayerKind::pool:
        if (l.pool == PoolKind::global_avg) y = global_avgpool(x, tape);
        else if (l.pool == PoolKind::max) y = maxpool2d(x, l.pool_size, l.pool_size, tape);
        else y = avgpool2d(x, l.pool_size, l.pool_size, tape);
        break;
      case LayerKind::add: y = add(x, act.at(l.inputs.at(1)), tape); break;
      case LayerKind::concat: {
        std::vector<Tensor> parts;
        for (const auto& in : l.inputs) parts.push_back(act.at(in));
        y = concat_channels(parts, tape);
        break;
      }
    }
    if (l.relu) y = relu(y, tape);
    act[id] = y;
  }
  return act;
}

/// Logits [n, classes].
inline Tensor forward(const Model& model, const Tensor& batch, ForwardOptions opt = {}, Tape* tape = nullptr) {
  return forward_all(model, batch, opt, tape).at(model.analysis().output);
}

}  // namespace csgd
