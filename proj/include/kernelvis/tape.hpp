#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "kernelvis/common.hpp"
#include "kernelvis/tensor.hpp"

namespace kv {

// Reverse-mode tape. Ops append one step per executed operation together with
// the output they produced; backward() replays the steps exactly once in
// reverse execution order. Leaf grads (parameters, inputs) accumulate across
// backward() calls; op-output grads are reset at the start of each call so a
// repeated backward adds one more full gradient.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void()>;

  void record(Tensor<T> output, BackFn fn) {
    steps_.push_back({std::move(output), std::move(fn)});
  }

  size_t num_ops() const { return steps_.size(); }

  void clear() { steps_.clear(); }

  void backward(Tensor<T> loss) {
    if (loss.size() != 1) {
      throw ArgumentError(strfmt("backward requires a scalar loss, got shape %s",
                                 shape_str(loss.shape()).c_str()));
    }
    for (auto& step : steps_) step.output.zero_grad();
    loss.grad()[0] += T(1);
    for (size_t i = steps_.size(); i-- > 0;) steps_[i].fn();
  }

 private:
  struct Step {
    Tensor<T> output;
    BackFn fn;
  };
  std::vector<Step> steps_;
};

template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

}  // namespace kv
