#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "modenorm/rng.hpp"

namespace modenorm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Dense row-major f64 tensor. Factories validate that every dim is nonzero;
// flat indexing follows the last-axis-fastest layout throughout the library.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double v);
  static Tensor randn(const Shape& shape, Rng& rng);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Reinterpret the buffer under a new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class ReduceKind { sum, mean };

// c = a * b for rank-2 operands with matching inner dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// Reduce over the given axes (deduplicated, each < rank); reduced axes are
// removed from the shape, and reducing everything yields shape {1}.
Tensor reduce(const Tensor& x, const std::vector<std::size_t>& axes, ReduceKind kind);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // rejects exact-zero denominators
Tensor scale(const Tensor& x, double s);

bool all_finite(const Tensor& x);

}  // namespace modenorm
