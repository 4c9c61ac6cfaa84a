#pragma once

#include <functional>
#include <unordered_set>
#include <utility>
#include <vector>

#include "csgd/errors.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

/// Ordered record of executed ops. Each entry owns a closure that reads the
/// gradient of the op's output and accumulates into the gradients of its
/// inputs. Replaying entries in reverse order is reverse-mode autodiff.
///
/// A tape is single-writer; do not share one across threads.
class Tape {
 public:
  void record(const Tensor& output, std::function<void()> backward) {
    produced_.insert(output.identity());
    entries_.push_back(Entry{output, std::move(backward)});
  }

  bool produced(const Tensor& t) const { return t.defined() && produced_.count(t.identity()) > 0; }
  std::size_t size() const { return entries_.size(); }

  void clear() {
    entries_.clear();
    produced_.clear();
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure backwards.
  void backward(Tensor loss) {
    if (!produced(loss)) throw Error("backward: loss tensor was not produced on this tape");
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    loss.zero_grad();
    loss.grad()[0] = 1.0f;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      // Outputs that never received a gradient contribute nothing.
      if (!it->output.has_grad()) continue;
      it->backward();
    }
  }

 private:
  struct Entry {
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  std::unordered_set<const void*> produced_;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

}  // namespace csgd
