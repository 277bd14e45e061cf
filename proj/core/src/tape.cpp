#include "attncap/tape.hpp"

#include <stdexcept>

namespace attncap {

std::vector<double>* GradStore::find(const TensorImpl* t) {
  auto it = grads_.find(t);
  return it == grads_.end() ? nullptr : &it->second;
}

std::vector<double>& GradStore::get(const TensorImpl* t) {
  auto it = grads_.find(t);
  if (it == grads_.end()) {
    it = grads_.emplace(t, std::vector<double>(t->data.size(), 0.0)).first;
  }
  return it->second;
}

void Tape::record(const Tensor& out, std::function<void(GradStore&)> backward) {
  if (!recording_ || !out.impl()->tracked) return;
  keep_alive_.push_back(out);
  nodes_.push_back(Node{out.impl(), std::move(backward)});
}

Tensor Tape::make_output(Shape shape, std::span<const Tensor> inputs) {
  Tensor out = Tensor::zeros(std::move(shape));
  bool tracked = false;
  for (const Tensor& in : inputs) tracked = tracked || in.impl()->tracked;
  out.impl()->tracked = tracked && recording_;
  out.impl()->producer = this;
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward requires a single-element loss tensor");
  }
  GradStore store;
  store.get(loss.impl())[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (store.find(it->out) == nullptr) continue;  // not on a path to the loss
    it->backward(store);
  }
  // Flush into persistent accumulators of requires_grad tensors.
  for (auto& [impl, g] : store.grads_) {
    auto* t = const_cast<TensorImpl*>(impl);
    if (!t->requires_grad) continue;
    if (t->grad.size() != t->data.size()) t->grad.assign(t->data.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
  }
}

}  // namespace attncap
