#pragma once

// Differentiable ops over NHWC float tensors. Every op takes an optional tape;
// with a null tape it runs forward only.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "csgd/errors.hpp"
#include "csgd/tape.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using CMapRM = Eigen::Map<const MatrixRM>;

inline constexpr float kBnEpsilon = 1e-5f;

namespace detail {

inline bool wants_grad(const Tensor& t, const Tape* tape) {
  return tape && (t.requires_grad() || tape->produced(t));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
}

inline void require_dim(std::size_t a, std::size_t b, const std::string& what_a, const std::string& what_b,
                        const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": " + what_a + " = " + std::to_string(a) + " does not match " +
                     what_b + " = " + std::to_string(b));
}

/// Output extent of a sliding window; windows that do not reach the far
/// padded edge are dropped (floor semantics).
inline std::size_t window_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                              const char* op) {
  if (stride == 0) throw ValidationError(std::string(op) + ": stride must be positive");
  if (in + 2 * pad < k)
    throw ShapeError(std::string(op) + ": window " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

/// 2-D convolution. `input` is [n,h,w,c_in] (or [h,w,c_in]), `kernel` is
/// [u,v,c_in,c_out]; output channel j is sum_k input[...,k] * kernel[:,:,k,j].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding,
                     Tape* tape = nullptr) {
  if (input.rank() == 3) {
    Tensor out = conv2d(input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}), kernel, stride,
                        padding, tape);
    return out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
  }
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(kernel, 4, "conv2d", "kernel");
  const std::size_t n = input.dim(0), h = input.dim(1), w = input.dim(2), cin = input.dim(3);
  const std::size_t u = kernel.dim(0), v = kernel.dim(1), cout = kernel.dim(3);
  detail::require_dim(kernel.dim(2), cin, "kernel input channels (dim 2)", "input channels (dim 3)", "conv2d");
  const std::size_t oh = detail::window_out(h, u, stride, padding, "conv2d");
  const std::size_t ow = detail::window_out(w, v, stride, padding, "conv2d");
  const std::size_t rows = n * oh * ow;
  const std::size_t patch = u * v * cin;

  const bool direct = (u == 1 && v == 1 && stride == 1 && padding == 0);
  auto cols = std::make_shared<std::vector<float>>();
  if (!direct) {
    cols->assign(rows * patch, 0.0f);
    const float* x = input.ptr();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          float* row = cols->data() + ((b * oh + oy) * ow + ox) * patch;
          for (std::size_t ky = 0; ky < u; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < v; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              std::memcpy(row + (ky * v + kx) * cin, x + ((b * h + iy) * w + ix) * cin, cin * sizeof(float));
            }
          }
        }
  }
  const float* cols_ptr = direct ? input.ptr() : cols->data();

  Tensor out({n, oh, ow, cout});
  MapRM(out.ptr(), rows, cout).noalias() = CMapRM(cols_ptr, rows, patch) * CMapRM(kernel.ptr(), patch, cout);

  if (tape) {
    const bool need_dx = detail::wants_grad(input, tape);
    tape->record(out, [=, x = input, k = kernel, y = out]() mutable {
      CMapRM dy(y.grad().data(), rows, cout);
      const float* cp = direct ? x.ptr() : cols->data();
      MapRM(k.grad_ptr(), patch, cout).noalias() += CMapRM(cp, rows, patch).transpose() * dy;
      if (!need_dx) return;
      if (direct) {
        MapRM(x.grad_ptr(), rows, cin).noalias() += dy * CMapRM(k.ptr(), patch, cout).transpose();
        return;
      }
      MatrixRM dcols = dy * CMapRM(k.ptr(), patch, cout).transpose();
      float* dx = x.grad_ptr();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const float* row = dcols.data() + ((b * oh + oy) * ow + ox) * patch;
            for (std::size_t ky = 0; ky < u; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < v; ++kx) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                float* dst = dx + ((b * h + iy) * w + ix) * cin;
                const float* src = row + (ky * v + kx) * cin;
                for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
          }
    });
  }
  return out;
}

enum class Mode { train, eval };

/// Batch normalization with the literal affine form (x - mu) / sigma * gamma + beta.
///
/// Eval mode uses the supplied mu and sigma (sigma already includes the
/// stabilizer). Train mode normalizes with batch statistics and, when
/// `update_running` is set, folds them into mu and sigma by exponential moving
/// average: mu <- (1-m) mu + m mean, sigma <- sqrt((1-m) sigma^2 + m (var + eps)).
inline Tensor batchnorm(const Tensor& x, Tensor mu, Tensor sigma, const Tensor& gamma, const Tensor& beta,
                        Mode mode, float momentum = 0.1f, Tape* tape = nullptr, bool update_running = true) {
  if (x.rank() < 1) throw ShapeError("batchnorm: input must have a channel axis");
  const std::size_t c = x.shape().back();
  const std::size_t m = x.numel() / std::max<std::size_t>(c, 1);
  for (const Tensor* p : std::initializer_list<const Tensor*>{&mu, &sigma, &gamma, &beta}) {
    detail::require_rank(*p, 1, "batchnorm", "parameter vector");
    detail::require_dim(p->dim(0), c, "parameter length", "input channels", "batchnorm");
  }
  Tensor out(x.shape());
  const float* xp = x.ptr();
  float* yp = out.ptr();
  const float* g = gamma.ptr();
  const float* bt = beta.ptr();

  if (mode == Mode::eval) {
    const float* mp = mu.ptr();
    const float* sp = sigma.ptr();
    for (std::size_t j = 0; j < c; ++j)
      if (!(sp[j] > 0.0f))
        throw ValidationError("batchnorm: sigma[" + std::to_string(j) + "] = " + std::to_string(sp[j]) +
                              " must be positive in eval mode");
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < c; ++j) yp[r * c + j] = (xp[r * c + j] - mp[j]) / sp[j] * g[j] + bt[j];
    if (tape) {
      const bool need_dx = detail::wants_grad(x, tape);
      tape->record(out, [=, xs = x, ms = mu, ss = sigma, gs = gamma, bs = beta, y = out]() mutable {
        const float* dy = y.grad().data();
        float* dg = gs.grad_ptr();
        float* db = bs.grad_ptr();
        float* dx = need_dx ? xs.grad_ptr() : nullptr;
        const float* xv = xs.ptr();
        const float* mv = ms.ptr();
        const float* sv = ss.ptr();
        const float* gv = gs.ptr();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const float d = dy[r * c + j];
            db[j] += d;
            dg[j] += d * (xv[r * c + j] - mv[j]) / sv[j];
            if (dx) dx[r * c + j] += d * gv[j] / sv[j];
          }
      });
    }
    return out;
  }

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < c; ++j) mean[j] += xp[r * c + j];
  for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<double>(m);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xp[r * c + j] - mean[j];
      var[j] += d * d;
    }
  auto inv_std = std::make_shared<std::vector<float>>(c);
  for (std::size_t j = 0; j < c; ++j) {
    var[j] /= static_cast<double>(m);
    (*inv_std)[j] = static_cast<float>(1.0 / std::sqrt(var[j] + kBnEpsilon));
  }
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const float xh = static_cast<float>(xp[r * c + j] - mean[j]) * (*inv_std)[j];
      (*xhat)[r * c + j] = xh;
      yp[r * c + j] = xh * g[j] + bt[j];
    }
  if (update_running) {
    float* mp = mu.ptr();
    float* sp = sigma.ptr();
    for (std::size_t j = 0; j < c; ++j) {
      mp[j] = (1.0f - momentum) * mp[j] + momentum * static_cast<float>(mean[j]);
      const double s2 = (1.0 - momentum) * double(sp[j]) * sp[j] + momentum * (var[j] + kBnEpsilon);
      sp[j] = static_cast<float>(std::sqrt(s2));
    }
  }
  if (tape) {
    const bool need_dx = detail::wants_grad(x, tape);
    tape->record(out, [=, xs = x, gs = gamma, bs = beta, y = out]() mutable {
      const float* dy = y.grad().data();
      std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          sum_dy[j] += dy[r * c + j];
          sum_dy_xhat[j] += double(dy[r * c + j]) * (*xhat)[r * c + j];
        }
      float* dg = gs.grad_ptr();
      float* db = bs.grad_ptr();
      for (std::size_t j = 0; j < c; ++j) {
        dg[j] += static_cast<float>(sum_dy_xhat[j]);
        db[j] += static_cast<float>(sum_dy[j]);
      }
      if (!need_dx) return;
      float* dx = xs.grad_ptr();
      const float* gv = gs.ptr();
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const double t = dy[r * c + j] - sum_dy[j] * inv_m - (*xhat)[r * c + j] * sum_dy_xhat[j] * inv_m;
          dx[r * c + j] += static_cast<float>(gv[j] * (*inv_std)[j] * t);
        }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& x, Tape* tape = nullptr) {
  Tensor out(x.shape());
  const float* xp = x.ptr();
  float* yp = out.ptr();
  for (std::size_t i = 0; i < x.numel(); ++i) yp[i] = xp[i] > 0.0f ? xp[i] : 0.0f;
  if (tape && detail::wants_grad(x, tape)) {
    tape->record(out, [xs = x, y = out]() mutable {
      const float* dy = y.grad().data();
      const float* yv = y.ptr();
      float* dx = xs.grad_ptr();
      for (std::size_t i = 0; i < xs.numel(); ++i)
        if (yv[i] > 0.0f) dx[i] += dy[i];
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  if (a.shape() != b.shape())
    throw ShapeError("add: operand shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  if (tape) {
    const bool ga = detail::wants_grad(a, tape), gb = detail::wants_grad(b, tape);
    tape->record(out, [=, as = a, bs = b, y = out]() mutable {
      const float* dy = y.grad().data();
      if (ga)
        for (std::size_t i = 0; i < y.numel(); ++i) as.grad_ptr()[i] += dy[i];
      if (gb)
        for (std::size_t i = 0; i < y.numel(); ++i) bs.grad_ptr()[i] += dy[i];
    });
  }
  return out;
}

/// Concatenation along the last (channel) axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts, Tape* tape = nullptr) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape l(p.shape().begin(), p.shape().end() - 1);
    if (l != lead)
      throw ShapeError("concat: leading dims " + shape_str(l) + " differ from " + shape_str(lead));
    total += p.shape().back();
  }
  Shape os = lead;
  os.push_back(total);
  Tensor out(os);
  const std::size_t rows = shape_numel(lead);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t c = p.shape().back();
    for (std::size_t r = 0; r < rows; ++r)
      std::memcpy(out.ptr() + r * total + off, p.ptr() + r * c, c * sizeof(float));
    off += c;
  }
  if (tape) {
    std::vector<bool> need;
    for (const Tensor& p : parts) need.push_back(detail::wants_grad(p, tape));
    tape->record(out, [=, ps = parts, y = out]() mutable {
      const float* dy = y.grad().data();
      std::size_t o = 0;
      for (std::size_t k = 0; k < ps.size(); ++k) {
        const std::size_t c = ps[k].shape().back();
        if (need[k]) {
          float* dx = ps[k].grad_ptr();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += dy[r * total + o + j];
        }
        o += c;
      }
    });
  }
  return out;
}

/// Max pooling over k x k windows, no padding. Ties go to the first maximum.
inline Tensor maxpool2d(const Tensor& x, std::size_t k, std::size_t stride, Tape* tape = nullptr) {
  detail::require_rank(x, 4, "maxpool2d", "input");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t oh = detail::window_out(h, k, stride, 0, "maxpool2d");
  const std::size_t ow = detail::window_out(w, k, stride, 0, "maxpool2d");
  Tensor out({n, oh, ow, c});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const float* xp = x.ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t j = 0; j < c; ++j) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_i = 0;
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t i = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + j;
              if (xp[i] > best) {
                best = xp[i];
                best_i = i;
              }
            }
          const std::size_t o = ((b * oh + oy) * ow + ox) * c + j;
          out.ptr()[o] = best;
          (*argmax)[o] = best_i;
        }
  if (tape && detail::wants_grad(x, tape)) {
    tape->record(out, [=, xs = x, y = out]() mutable {
      const float* dy = y.grad().data();
      float* dx = xs.grad_ptr();
      for (std::size_t o = 0; o < y.numel(); ++o) dx[(*argmax)[o]] += dy[o];
    });
  }
  return out;
}

/// Average pooling over k x k windows, no padding.
inline Tensor avgpool2d(const Tensor& x, std::size_t k, std::size_t stride, Tape* tape = nullptr) {
  detail::require_rank(x, 4, "avgpool2d", "input");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t oh = detail::window_out(h, k, stride, 0, "avgpool2d");
  const std::size_t ow = detail::window_out(w, k, stride, 0, "avgpool2d");
  const float scale = 1.0f / static_cast<float>(k * k);
  Tensor out({n, oh, ow, c});
  const float* xp = x.ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        float* dst = out.ptr() + ((b * oh + oy) * ow + ox) * c;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const float* src = xp + ((b * h + oy * stride + ky) * w + ox * stride + kx) * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
          }
        for (std::size_t j = 0; j < c; ++j) dst[j] *= scale;
      }
  if (tape && detail::wants_grad(x, tape)) {
    tape->record(out, [=, xs = x, y = out]() mutable {
      const float* dy = y.grad().data();
      float* dx = xs.grad_ptr();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const float* src = dy + ((b * oh + oy) * ow + ox) * c;
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                float* dst = dx + ((b * h + oy * stride + ky) * w + ox * stride + kx) * c;
                for (std::size_t j = 0; j < c; ++j) dst[j] += src[j] * scale;
              }
          }
    });
  }
  return out;
}

/// Mean over the spatial axes: [n,h,w,c] -> [n,c].
inline Tensor global_avgpool(const Tensor& x, Tape* tape = nullptr) {
  detail::require_rank(x, 4, "global_avgpool", "input");
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  const float scale = 1.0f / static_cast<float>(hw);
  Tensor out({n, c});
  for (std::size_t b = 0; b < n; ++b) {
    float* dst = out.ptr() + b * c;
    for (std::size_t p = 0; p < hw; ++p) {
      const float* src = x.ptr() + (b * hw + p) * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    for (std::size_t j = 0; j < c; ++j) dst[j] *= scale;
  }
  if (tape && detail::wants_grad(x, tape)) {
    tape->record(out, [=, xs = x, y = out]() mutable {
      const float* dy = y.grad().data();
      float* dx = xs.grad_ptr();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p)
          for (std::size_t j = 0; j < c; ++j) dx[(b * hw + p) * c + j] += dy[b * c + j] * scale;
    });
  }
  return out;
}

/// Collapses every axis after the first: [n, ...] -> [n, rest]. Shares storage.
inline Tensor flatten(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("flatten: scalar input");
  return x.reshaped({x.dim(0), x.numel() / x.dim(0)});
}

/// x [n,in] * weight [in,out] + bias [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias, Tape* tape = nullptr) {
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(weight, 2, "linear", "weight");
  detail::require_dim(weight.dim(0), x.dim(1), "weight rows (dim 0)", "input features (dim 1)", "linear");
  detail::require_dim(bias.numel(), weight.dim(1), "bias length", "weight columns (dim 1)", "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), outc = weight.dim(1);
  Tensor out({n, outc});
  MapRM y(out.ptr(), n, outc);
  y.noalias() = CMapRM(x.ptr(), n, in) * CMapRM(weight.ptr(), in, outc);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < outc; ++j) y(r, j) += bias.ptr()[j];
  if (tape) {
    const bool need_dx = detail::wants_grad(x, tape);
    tape->record(out, [=, xs = x, ws = weight, bs = bias, ys = out]() mutable {
      CMapRM dy(ys.grad().data(), n, outc);
      MapRM(ws.grad_ptr(), in, outc).noalias() += CMapRM(xs.ptr(), n, in).transpose() * dy;
      float* db = bs.grad_ptr();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < outc; ++j) db[j] += dy(r, j);
      if (need_dx) MapRM(xs.grad_ptr(), n, in).noalias() += dy * CMapRM(ws.ptr(), in, outc).transpose();
    });
  }
  return out;
}

/// Mean softmax cross-entropy of logits [n,k] against integer labels.
inline Tensor softmax_xent(const Tensor& logits, const std::vector<int>& labels, Tape* tape = nullptr) {
  detail::require_rank(logits, 2, "softmax_xent", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  detail::require_dim(labels.size(), n, "label count", "batch size", "softmax_xent");
  auto probs = std::make_shared<std::vector<float>>(n * k);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int lbl = labels[r];
    if (lbl < 0 || static_cast<std::size_t>(lbl) >= k)
      throw ValidationError("softmax_xent: label " + std::to_string(lbl) + " outside [0," + std::to_string(k) + ")");
    const float* z = logits.ptr() + r * k;
    const float zmax = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(double(z[j]) - zmax);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = static_cast<float>(std::exp(double(z[j]) - zmax) / denom);
    loss += -(double(z[lbl]) - zmax - std::log(denom));
  }
  Tensor out = Tensor::scalar(static_cast<float>(loss / static_cast<double>(n)));
  if (tape) {
    tape->record(out, [=, zs = logits, y = out]() mutable {
      const float g = y.grad()[0] / static_cast<float>(n);
      float* dz = zs.grad_ptr();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < k; ++j)
          dz[r * k + j] += g * ((*probs)[r * k + j] - (static_cast<std::size_t>(labels[r]) == j ? 1.0f : 0.0f));
    });
  }
  return out;
}

inline Tensor sum(const Tensor& x, Tape* tape = nullptr) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  Tensor out = Tensor::scalar(static_cast<float>(s));
  if (tape) {
    tape->record(out, [xs = x, y = out]() mutable {
      const float g = y.grad()[0];
      for (float& d : xs.grad()) d += g;
    });
  }
  return out;
}

/// 0.5 * sum(x^2).
inline Tensor half_sum_squares(const Tensor& x, Tape* tape = nullptr) {
  double s = 0.0;
  for (float v : x.data()) s += double(v) * v;
  Tensor out = Tensor::scalar(static_cast<float>(0.5 * s));
  if (tape) {
    tape->record(out, [xs = x, y = out]() mutable {
      const float g = y.grad()[0];
      auto dx = xs.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * xs.ptr()[i];
    });
  }
  return out;
}

}  // namespace csgd
