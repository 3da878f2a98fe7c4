#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "random.hpp"

namespace nr {

/// Named trainable tensors, each with a gradient of the same shape.
/// Iteration order is insertion order, which is also the checkpoint order.
///
/// Leaves handed out by leaf() point at this set's gradient storage; the set
/// must stay alive and structurally unchanged until backward() has run.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  void add(std::string name, Tensor value) {
    if (index_.contains(name)) throw InvalidArgument("duplicate parameter path: " + name);
    index_.emplace(name, entries_.size());
    Tensor grad = zeros_like(value);
    entries_.push_back({std::move(name), std::move(value), std::move(grad)});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  Tensor& value(const std::string& name) { return entries_[find(name)].value; }
  const Tensor& value(const std::string& name) const { return entries_[find(name)].value; }
  Tensor& grad(const std::string& name) { return entries_[find(name)].grad; }
  const Tensor& grad(const std::string& name) const { return entries_[find(name)].grad; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  /// Graph leaf carrying a copy of the parameter value; its gradient lands in grad(name).
  Var leaf(const std::string& name) {
    auto& e = entries_[find(name)];
    Var v = variable(e.value);
    v.node().grad_sink = &e.grad;
    return v;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(0.0);
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value))
        return false;
    }
    return true;
  }

 private:
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter path: " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Zeroes every gradient in `params`, then back-propagates `loss` into them.
/// Parameters the loss does not depend on end with zero gradient.
inline void backward(const Var& loss, ParamSet& params) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  params.zero_grad();
  backward(loss);
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
inline Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace nr
