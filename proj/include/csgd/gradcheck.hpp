#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "csgd/ops.hpp"
#include "csgd/tape.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

/// Scalar probe: sum over positions of y * r with a fixed random r, built
/// from tape ops so that its gradient flows back into y.
inline Tensor probe(const Tensor& y, const Tensor& r, Tape* tape) {
  Tensor flat = y.rank() >= 2 ? flatten(y) : y.reshaped({1, y.numel()});
  Tensor bias({1}, 0.0f);
  return sum(linear(flat, r, bias, tape), tape);
}

struct GradComparison {
  double diff = 0.0;        // ||numeric - analytic||
  double scale = 0.0;       // max(||numeric||, ||analytic||)
  double rounding = 0.0;    // bound on ||numeric error|| from float32 loss rounding
  std::size_t kinks = 0;    // entries skipped because a relu boundary lies within the step
  std::size_t checked = 0;
};

/// With `skip_kinks`, entries whose one-sided differences disagree by more
/// than rounding and `kink_tol` allow are left out of the comparison.
inline GradComparison compare_grads(const std::function<Tensor(Tape*)>& f, Tensor wrt, float step,
                                    bool skip_kinks = false, double kink_tol = 0.02) {
  Tape tape;
  wrt.zero_grad();
  wrt.set_requires_grad(true);
  Tensor loss = f(&tape);
  tape.backward(loss);
  const std::vector<float> analytic(wrt.grad().begin(), wrt.grad().end());
  const double l0 = loss.item();
  const double ulp = std::abs(l0) * std::numeric_limits<float>::epsilon();
  GradComparison c;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < wrt.numel(); ++i) {
    const float keep = wrt.ptr()[i];
    wrt.ptr()[i] = keep + step;
    const double lp = f(nullptr).item();
    wrt.ptr()[i] = keep - step;
    const double lm = f(nullptr).item();
    wrt.ptr()[i] = keep;
    const double num = (lp - lm) / (2.0 * step);
    if (skip_kinks) {
      const double right = (lp - l0) / step, left = (l0 - lm) / step;
      if (std::abs(right - left) > kink_tol * std::max(std::abs(right), std::abs(left)) + 8.0 * ulp / step) {
        ++c.kinks;
        continue;
      }
    }
    ++c.checked;
    diff2 += (num - analytic[i]) * (num - analytic[i]);
    a2 += double(analytic[i]) * analytic[i];
    n2 += num * num;
  }
  wrt.zero_grad();
  c.diff = std::sqrt(diff2);
  c.scale = std::sqrt(std::max(a2, n2));
  c.rounding = std::sqrt(static_cast<double>(c.checked)) * 4.0 * ulp / step;
  return c;
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of f with respect to every entry of `wrt`.
inline double grad_rel_error(const std::function<Tensor(Tape*)>& f, Tensor wrt, float step = 1e-3f) {
  const GradComparison c = compare_grads(f, std::move(wrt), step);
  return c.diff / std::max(c.scale, 1e-6);
}

/// Values with magnitude at least `gap`, so kinks of relu sit far from them.
inline Tensor away_from_zero(Shape s, std::mt19937_64& rng, float gap = 0.05f) {
  Tensor t = uniform_tensor(std::move(s), -1.0f, 1.0f, rng);
  for (float& v : t.data()) v = v >= 0 ? v + gap : v - gap;
  return t;
}

/// A permutation of well separated values, so max-pool windows have no near ties.
inline Tensor distinct_values(Shape s, std::mt19937_64& rng) {
  Tensor t(std::move(s));
  std::vector<float> vals(t.numel());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05f * static_cast<float>(i) - 1.0f;
  std::shuffle(vals.begin(), vals.end(), rng);
  std::copy(vals.begin(), vals.end(), t.ptr());
  return t;
}

}  // namespace csgd
