#pragma once

// Named parameter map with per-parameter gradient accumulators. Parameter
// addresses are stable (deque storage), so tapes may hold raw pointers for
// the duration of a forward/backward round.

#include <deque>
#include <string>
#include <string_view>
#include <unordered_map>

#include "protolab/tensor.hpp"

namespace protolab {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value, accumulated between zero_grads() calls
  bool trainable = true;
};

class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor init) {
    PROTOLAB_REQUIRE(!index_.count(name), "duplicate parameter '", name, "'");
    Parameter p;
    p.name = name;
    p.grad = Tensor(init.shape().empty() ? std::vector<std::size_t>{1}
                                         : init.shape());
    p.value = std::move(init);
    params_.push_back(std::move(p));
    index_.emplace(std::move(name), params_.size() - 1);
    return params_.back();
  }

  bool contains(std::string_view name) const {
    return index_.count(std::string(name)) > 0;
  }

  Parameter& at(std::string_view name) {
    auto it = index_.find(std::string(name));
    PROTOLAB_REQUIRE(it != index_.end(), "unknown parameter '", name, "'");
    return params_[it->second];
  }
  const Parameter& at(std::string_view name) const {
    return const_cast<ParameterStore*>(this)->at(name);
  }

  std::deque<Parameter>& entries() { return params_; }
  const std::deque<Parameter>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void zero_grads() {
    for (auto& p : params_) p.grad.fill(0.0);
  }

  void set_all_trainable(bool on) {
    for (auto& p : params_) p.trainable = on;
  }

  void set_trainable(std::initializer_list<std::string_view> names, bool on) {
    for (auto n : names) at(n).trainable = on;
  }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace protolab
