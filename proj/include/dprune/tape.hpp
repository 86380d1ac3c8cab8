#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dprune/tensor.hpp"

namespace dprune {

template <typename T>
class Gradients;

// Reverse-mode differentiation tape. Nodes are appended in evaluation order,
// so the node list is always topologically sorted. A tape is used by one
// thread at a time.
template <typename T>
class Tape {
 public:
  // Receives the gradient of the node's output and one mutable span per
  // recorded input; spans of untracked inputs are empty. Implementations
  // accumulate (+=) into the input spans.
  using BackwardFn = std::function<void(std::span<const T> grad_out, std::span<std::span<T>> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf (parameter or input) so gradients can be taken w.r.t. it.
  BasicTensor<T> watch(const BasicTensor<T>& leaf) {
    BasicTensor<T> out = leaf.detached();
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{leaf.numel(), {}, nullptr});
    return out;
  }

  // Records the result of an operation. Inputs that are not on this tape are
  // treated as constants.
  BasicTensor<T> record(Shape shape, std::vector<T> data, std::span<const BasicTensor<T>> inputs,
                        BackwardFn backward) {
    BasicTensor<T> out(std::move(shape), std::move(data));
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.tape_ != nullptr && in.tape_ != this) {
        throw std::logic_error("tape: operation mixes tensors from different tapes");
      }
      ids.push_back(in.tape_ == this ? in.node_ : -1);
    }
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{out.numel(), std::move(ids), std::move(backward)});
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

  Gradients<T> backward(const BasicTensor<T>& loss) const;

 private:
  struct Node {
    std::size_t numel;
    std::vector<int> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Gradient store produced by Tape::backward; indexed by tape node.
template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::vector<T>> grads) : grads_(std::move(grads)) {}

  bool reached(const BasicTensor<T>& t) const {
    return t.tracked() && t.node() < static_cast<int>(grads_.size()) && !grads_[t.node()].empty();
  }

  // Gradient w.r.t. t; zeros when t is untracked or unreachable from the loss.
  BasicTensor<T> of(const BasicTensor<T>& t) const {
    if (!reached(t)) return BasicTensor<T>::zeros(t.shape());
    return BasicTensor<T>(t.shape(), grads_[t.node()]);
  }

  std::span<const T> raw(const BasicTensor<T>& t) const {
    if (!reached(t)) return {};
    return grads_[t.node()];
  }

 private:
  std::vector<std::vector<T>> grads_;
};

template <typename T>
Gradients<T> Tape<T>::backward(const BasicTensor<T>& loss) const {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  std::vector<std::vector<T>> grads(nodes_.size());
  // A loss computed only from constants has zero gradient everywhere.
  if (loss.tape_ == nullptr) return Gradients<T>(std::move(grads));
  if (loss.tape_ != this) throw std::invalid_argument("backward: loss is not recorded on this tape");
  grads[loss.node_].assign(1, T(1));
  std::vector<std::span<T>> in_spans;
  for (int id = loss.node_; id >= 0; --id) {
    const Node& node = nodes_[id];
    if (grads[id].empty() || !node.backward) continue;
    in_spans.clear();
    for (int in : node.inputs) {
      if (in < 0) {
        in_spans.emplace_back();
        continue;
      }
      if (grads[in].empty()) grads[in].assign(nodes_[in].numel, T(0));
      in_spans.emplace_back(grads[in]);
    }
    node.backward(grads[id], in_spans);
  }
  return Gradients<T>(std::move(grads));
}

// Returns the tape shared by the tracked inputs, or nullptr when none is tracked.
template <typename T>
Tape<T>* common_tape(std::initializer_list<const BasicTensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const auto* in : inputs) {
    if (in->tape() == nullptr) continue;
    if (tape != nullptr && tape != in->tape()) {
      throw std::logic_error("tape: operation mixes tensors from different tapes");
    }
    tape = in->tape();
  }
  return tape;
}

}  // namespace dprune
