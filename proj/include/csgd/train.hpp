#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "csgd/csgd.hpp"
#include "csgd/data.hpp"
#include "csgd/errors.hpp"
#include "csgd/metrics.hpp"
#include "csgd/model.hpp"
#include "csgd/ops.hpp"
#include "csgd/tape.hpp"

namespace csgd {

/// Keeps large activation buffers in the heap between steps instead of
/// returning them to the kernel after every free.
inline void retain_freed_memory() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

/// Piecewise-constant learning rate. Either explicit (epoch, value) points or
/// a base rate multiplied by `factor` at each listed fraction of the budget.
struct LrSchedule {
  float base = 3e-2f;
  std::vector<double> decay_at = {0.5, 0.75};
  float factor = 0.1f;
  std::vector<std::pair<double, float>> points;

  static LrSchedule constant(float lr) { return LrSchedule{lr, {}, 1.0f, {}}; }

  /// Rate at fractional epoch `epoch` of a budget of `epochs`.
  float at(double epoch, double epochs) const {
    if (!points.empty()) {
      float v = points.front().second;
      for (const auto& [e, lr] : points)
        if (epoch >= e) v = lr;
      return v;
    }
    float v = base;
    for (double f : decay_at)
      if (epochs > 0 && epoch >= f * epochs) v *= factor;
    return v;
  }

  void check() const {
    if (!(base > 0.0f)) throw ValidationError("learning rate must be positive");
    for (std::size_t i = 1; i < points.size(); ++i)
      if (!(points[i].first > points[i - 1].first))
        throw ValidationError("learning-rate schedule epochs must be strictly increasing");
    for (const auto& p : points)
      if (!(p.second > 0.0f)) throw ValidationError("learning-rate schedule values must be positive");
    for (std::size_t i = 1; i < decay_at.size(); ++i)
      if (!(decay_at[i] > decay_at[i - 1])) throw ValidationError("decay fractions must be strictly increasing");
  }
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline std::vector<int> predict(const Model& model, const Tensor& x) {
  const Tensor logits = forward(model, x);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

/// Eval-mode mean loss and accuracy.
inline Evaluation evaluate(const Model& model, const Dataset& data, std::size_t batch = 500) {
  Evaluation ev;
  if (data.size() == 0) return ev;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    auto [x, y] = data.batch(idx);
    const Tensor logits = forward(model, x);
    loss += static_cast<double>(softmax_xent(logits, y).item()) * static_cast<double>(n);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const float* row = logits.ptr() + i * k;
      if (std::max_element(row, row + k) - row == y[i]) ++correct;
    }
  }
  ev.loss = loss / static_cast<double>(data.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return ev;
}

struct StepInfo {
  std::size_t epoch = 0;
  std::size_t step = 0;  // 1-based count of completed steps
  float loss = 0.0f;
  float lr = 0.0f;
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  float bn_momentum = 0.1f;
  LrSchedule schedule;
  std::uint64_t shuffle_seed = 1;
  std::size_t max_steps = 0;  // 0: no limit besides the epoch budget
  const Dataset* eval_set = nullptr;
  MetricsLog* log = nullptr;
  std::size_t log_every = 0;  // also log every n steps (0: epoch ends only)
  /// Called after each step; return false to stop training.
  std::function<bool(const Model&, const StepInfo&)> on_step;
  /// Fills chi / phi of a record before it is logged.
  std::function<void(const Model&, MetricsRecord&)> annotate;
};

struct TrainStats {
  std::size_t steps = 0;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  double last_epoch_loss = 0.0;
};

/// Minibatch training: reshuffles every epoch, runs a train-mode forward and
/// backward per batch, then lets `opt` update the model.
inline TrainStats train(Model& model, Optimizer& opt, const Dataset& data, const TrainOptions& o) {
  retain_freed_memory();
  if (o.batch_size == 0) throw ValidationError("batch size must be positive");
  if (data.size() == 0 && o.epochs > 0) throw ValidationError("training set is empty");
  const auto t0 = std::chrono::steady_clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  const std::size_t per_epoch = (data.size() + o.batch_size - 1) / o.batch_size;
  std::mt19937_64 rng(o.shuffle_seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  TrainStats st;
  std::size_t last_logged = static_cast<std::size_t>(-1);

  auto record = [&](std::size_t epoch, double loss, float lr) {
    if (!o.log || last_logged == st.steps) return;
    last_logged = st.steps;
    MetricsRecord r;
    r.epoch = static_cast<long>(epoch);
    r.step = static_cast<long>(st.steps);
    r.loss = loss;
    r.accuracy = o.eval_set ? evaluate(model, *o.eval_set).accuracy : NAN;
    r.lr = lr;
    if (o.annotate) o.annotate(model, r);
    r.seconds = seconds();
    o.log->append(r);
  };

  for (std::size_t epoch = 0; epoch < o.epochs && !st.stopped_early; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    float lr = 0.0f;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const double progress = static_cast<double>(epoch) + static_cast<double>(b) / static_cast<double>(per_epoch);
      lr = o.schedule.at(progress, static_cast<double>(o.epochs));
      const std::size_t start = b * o.batch_size;
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(std::min(start + o.batch_size, data.size())));
      auto [x, y] = data.batch(idx);
      Tape tape;
      model.zero_grad();
      const Tensor logits = forward(model, x, {Mode::train, o.bn_momentum}, &tape);
      const Tensor loss = softmax_xent(logits, y, &tape);
      tape.backward(loss);
      if (!std::isfinite(loss.item())) throw Error("training diverged: non-finite loss at step " + std::to_string(st.steps));
      opt.step(model, lr);
      ++st.steps;
      ++batches;
      epoch_loss += loss.item();
      if (o.log_every && st.steps % o.log_every == 0) record(epoch, loss.item(), lr);
      if (o.on_step && !o.on_step(model, StepInfo{epoch, st.steps, loss.item(), lr})) st.stopped_early = true;
      if (o.max_steps && st.steps >= o.max_steps) st.stopped_early = true;
      if (st.stopped_early) break;
    }
    st.epochs_run = epoch + 1;
    st.last_epoch_loss = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
    record(epoch + 1, st.last_epoch_loss, lr);
  }
  model.zero_grad();
  return st;
}

}  // namespace csgd
