#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace contseg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool all_finite(std::span<const double> values);

// Dense row-major tensor of 64-bit floats with an optional gradient buffer.
//
// Copying a Tensor copies a handle to shared storage; clone() produces an
// independent deep copy. Gradients live beside the values and are allocated
// lazily on first use.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const;
  int rank() const;

  std::span<const double> values() const;
  std::span<double> values_mut();
  double item() const;  // numel() == 1 only

  bool requires_grad() const;
  void set_requires_grad(bool requires_grad);
  // True when gradients must flow through this tensor during backward:
  // either it requires gradients itself or it was produced from one that does.
  bool on_grad_path() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();  // allocates a zero buffer on first use
  void zero_grad();              // keeps the allocation
  void drop_grad();

  Tensor clone() const;  // deep copy of values; gradient not copied
  bool same_storage(const Tensor& other) const;

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first grad_mut()
    bool requires_grad = false;
    bool grad_path = false;
  };

  const void* key() const { return impl_.get(); }

  std::shared_ptr<Impl> impl_;
  friend class Graph;
};

}  // namespace contseg
