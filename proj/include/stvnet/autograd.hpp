#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stvnet/tensor.hpp"

namespace stvnet {

// A trainable tensor with its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros_like(value)) {}

  void zero_grad() { grad = Tensor<T>::zeros_like(value); }
};

template <class T>
class Tape;

// Handle to a node recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Records a forward computation and replays it backwards.
//
// Nodes are appended in execution order, so every node's inputs precede it and
// a single reverse sweep visits each node once. A tape belongs to one thread.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  // Leaf bound to a parameter. Repeated calls for the same parameter return the
  // same node, so shared weights accumulate into one gradient.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Var<T> v = push(p.value, true, {});
    nodes_[std::size_t(v.id)].param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  // Record an op output. `backward` is only kept if some input needs a gradient.
  Var<T> record(Tensor<T> value, std::vector<int> inputs, BackwardFn backward) {
    bool needs = false;
    for (int i : inputs) needs = needs || nodes_[std::size_t(i)].needs_grad;
    Var<T> v = push(std::move(value), needs, std::move(inputs));
    if (needs) nodes_[std::size_t(v.id)].backward = std::move(backward);
    return v;
  }

  const Tensor<T>& value(int id) const { return nodes_[std::size_t(id)].value; }
  bool needs_grad(int id) const { return nodes_[std::size_t(id)].needs_grad; }

  // Gradient buffer of a node, allocated on first touch.
  Tensor<T>& grad(int id) {
    auto& n = nodes_[std::size_t(id)];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros_like(n.value);
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_[std::size_t(id)].grad.empty(); }

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar node. Parameter gradients are added into
  // Parameter::grad.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw ConfigError("backward: loss belongs to another tape");
    if (value(loss.id).size() != 1) {
      throw ShapeError("backward", "loss", "loss must be scalar, got " + to_string(value(loss.id).shape()));
    }
    grad(loss.id).fill(T(1));
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[std::size_t(id)];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    std::vector<int> inputs;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
  };

  Var<T> push(Tensor<T> value, bool needs, std::vector<int> inputs) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

}  // namespace stvnet
