#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "kernelvis/common.hpp"
#include "kernelvis/rng.hpp"

namespace kv {

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::vector<size_t> row_major_strides(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Dense row-major tensor. Value-semantics handle: copies share the underlying
// buffer (the autodiff tape relies on this), clone() deep-copies. Data is
// immutable after creation by convention; grad is the accumulation buffer.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(numel(t.node_->shape), T(0));
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (T& v : t.node_->data) v = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (numel(shape) != values.size()) {
      throw ShapeError(strfmt("tensor data length %zu does not match shape %s",
                              values.size(), shape_str(shape).c_str()));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (T& v : t.node_->data) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t rank() const { return node_->shape.size(); }
  size_t size() const { return node_->data.size(); }
  size_t dim(size_t i) const { return node_->shape[i]; }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T item() const {
    if (size() != 1) {
      throw ArgumentError(strfmt("item() on non-scalar tensor of shape %s",
                                 shape_str(shape()).c_str()));
    }
    return node_->data[0];
  }

  T& at(std::initializer_list<size_t> idx) {
    return node_->data[flat_index(idx)];
  }
  T at(std::initializer_list<size_t> idx) const {
    return node_->data[flat_index(idx)];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Allocates (zeroed) on first use; same shape as data.
  T* grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return node_->grad; }
  void zero_grad() {
    if (node_) node_->grad.assign(node_->data.size(), T(0));
  }
  void drop_grad() {
    if (node_) node_->grad.clear();
  }

  Tensor clone() const {
    Tensor t;
    t.node_ = std::make_shared<Node>(*node_);
    return t;
  }

  // identity of the underlying buffer (for leaf bookkeeping)
  const void* id() const { return node_.get(); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  size_t flat_index(std::initializer_list<size_t> idx) const {
    const auto st = row_major_strides(node_->shape);
    size_t flat = 0;
    size_t k = 0;
    for (size_t i : idx) flat += i * st[k++];
    return flat;
  }

  std::shared_ptr<Node> node_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

}  // namespace kv
