#include "contseg/tensor.hpp"

#include <cmath>
#include <sstream>

#include "contseg/errors.hpp"

namespace contseg {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (const auto extent : shape) {
    if (extent <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    n *= extent;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool all_finite(std::span<const double> values) {
  for (const double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values.assign(static_cast<std::size_t>(n), 0.0);
  t.impl_->requires_grad = requires_grad;
  t.impl_->grad_path = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.impl_->values) v = value;
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  const auto n = shape_numel(shape);
  if (n != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  t.impl_->requires_grad = requires_grad;
  t.impl_->grad_path = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw StateError("shape() on undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::numel() const {
  return static_cast<std::int64_t>(impl_ ? impl_->values.size() : 0);
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

std::span<const double> Tensor::values() const {
  if (!impl_) throw StateError("values() on undefined tensor");
  return impl_->values;
}

std::span<double> Tensor::values_mut() {
  if (!impl_) throw StateError("values_mut() on undefined tensor");
  return impl_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool requires_grad) {
  if (!impl_) throw StateError("set_requires_grad() on undefined tensor");
  impl_->requires_grad = requires_grad;
  if (requires_grad) impl_->grad_path = true;
}

bool Tensor::on_grad_path() const { return impl_ && impl_->grad_path; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw StateError("grad() on tensor without gradient");
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (!impl_) throw StateError("grad_mut() on undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
}

void Tensor::drop_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = impl_->shape;
  t.impl_->values = impl_->values;
  t.impl_->requires_grad = impl_->requires_grad;
  t.impl_->grad_path = impl_->requires_grad;
  return t;
}

bool Tensor::same_storage(const Tensor& other) const {
  return impl_ && impl_ == other.impl_;
}

}  // namespace contseg
