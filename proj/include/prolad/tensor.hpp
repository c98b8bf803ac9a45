#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "prolad/errors.hpp"

namespace prolad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Shared storage behind Tensor. grad is allocated iff requires_grad; is_leaf
// distinguishes user-created parameters (grads accumulate across backward
// calls) from op outputs (grads reset at the start of each backward pass).
struct TensorData {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
};

// Dense row-major f64 tensor; a thin shared handle, cheap to copy.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->data.assign(shape_numel(d->shape), 0.0);
    d->requires_grad = requires_grad;
    if (requires_grad) d->grad.assign(d->data.size(), 0.0);
    return Tensor(std::move(d));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = value;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->data = std::move(values);
    d->requires_grad = requires_grad;
    if (requires_grad) d->grad.assign(d->data.size(), 0.0);
    return Tensor(std::move(d));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size(std::size_t axis) const { return d_->shape.at(axis); }
  std::size_t numel() const { return d_->data.size(); }

  std::vector<double>& data() { return d_->data; }
  const std::vector<double>& data() const { return d_->data; }

  bool requires_grad() const { return d_->requires_grad; }
  bool is_leaf() const { return d_->is_leaf; }

  std::vector<double>& grad() {
    check_grad();
    return d_->grad;
  }
  const std::vector<double>& grad() const {
    check_grad();
    return d_->grad;
  }

  void set_requires_grad(bool on) {
    if (d_->requires_grad == on) return;  // no-op stays write-free (shared read-only use)
    d_->requires_grad = on;
    if (on && d_->grad.size() != d_->data.size()) d_->grad.assign(d_->data.size(), 0.0);
    if (!on) d_->grad.clear();
  }

  void zero_grad() {
    if (d_->requires_grad) d_->grad.assign(d_->data.size(), 0.0);
  }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item: tensor has " + std::to_string(numel()) + " elements, expected 1");
    }
    return d_->data[0];
  }

  // Value copy that is detached from any autodiff history.
  Tensor detach() const {
    auto d = std::make_shared<TensorData>();
    d->shape = d_->shape;
    d->data = d_->data;
    d->requires_grad = false;
    return Tensor(std::move(d));
  }

  Tensor clone(bool requires_grad) const {
    Tensor t = detach();
    t.set_requires_grad(requires_grad);
    return t;
  }

  const std::shared_ptr<TensorData>& ptr() const { return d_; }

private:
  void check_grad() const {
    if (!d_->requires_grad) throw ContractError("grad: tensor does not require gradients");
  }

  std::shared_ptr<TensorData> d_;
};

}  // namespace prolad
