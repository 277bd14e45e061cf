#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "attncap/tensor.hpp"

namespace attncap {

// Per-backward-pass gradient scratch. Leaf gradients are flushed into the
// tensors' own accumulators at the end of backward(), so repeated backward
// calls add up.
class GradStore {
 public:
  std::vector<double>* find(const TensorImpl* t);
  std::vector<double>& get(const TensorImpl* t);

 private:
  std::unordered_map<const TensorImpl*, std::vector<double>> grads_;
  friend class Tape;
};

// Define-by-run tape: every primitive application appends a node holding the
// output and a closure that routes the output gradient to the inputs. The
// tape is rebuilt for every forward pass.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  size_t size() const { return nodes_.size(); }

  // Registers an op output. `backward` receives the scratch store; it must
  // look up its own output gradient and accumulate into the inputs' entries.
  void record(const Tensor& out, std::function<void(GradStore&)> backward);

  // Marks `out` as tracked if any input is, so backward can prune dead paths.
  Tensor make_output(Shape shape, std::span<const Tensor> inputs);

  // Reverse pass from a single-element loss. Accumulates into the grad of
  // every requires_grad tensor reachable from it.
  void backward(const Tensor& loss);

 private:
  struct Node {
    TensorImpl* out;
    std::function<void(GradStore&)> backward;
  };
  bool recording_;
  std::vector<Node> nodes_;
  std::vector<Tensor> keep_alive_;
};

}  // namespace attncap
