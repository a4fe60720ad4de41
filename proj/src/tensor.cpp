#include "modenorm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "modenorm/kernels.hpp"

namespace modenorm {
namespace {

std::size_t checked_numel(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one dim");
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dims must be nonzero, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape) {
  const std::size_t n = checked_numel(shape);
  shape_ = std::move(shape);
  data_.assign(n, 0.0);
}

Tensor Tensor::zeros(const Shape& shape) { return Tensor(shape); }

Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double v) {
  Tensor t(shape);
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

Tensor Tensor::randn(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data_) v = rng.next_normal();
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw std::invalid_argument("tensor axis " + std::to_string(axis) + " out of range for " +
                                shape_str(shape_));
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (checked_numel(shape) != size())
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                " changes element count");
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul requires rank-2 operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul inner dims differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const std::size_t m = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  Tensor c({m, q});
  kernels::matmul(a.data(), b.data(), c.data(), m, p, q);
  return c;
}

Tensor reduce(const Tensor& x, const std::vector<std::size_t>& axes, ReduceKind kind) {
  const std::size_t rank = x.rank();
  std::vector<bool> reduced(rank, false);
  for (std::size_t axis : axes) {
    if (axis >= rank)
      throw std::invalid_argument("reduce axis " + std::to_string(axis) + " out of range for " +
                                  shape_str(x.shape()));
    if (reduced[axis]) throw std::invalid_argument("reduce axis repeated: " + std::to_string(axis));
    reduced[axis] = true;
  }

  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    if (reduced[i])
      count *= x.shape()[i];
    else
      out_shape.push_back(x.shape()[i]);
  }
  if (out_shape.empty()) out_shape = {1};

  Tensor out(out_shape);
  // Strides of the input; each input element accumulates into the slot
  // addressed by its kept axes.
  std::vector<std::size_t> stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) stride[i - 1] = stride[i] * x.shape()[i];
  std::vector<std::size_t> out_stride(rank, 0);
  std::size_t acc = 1;
  for (std::size_t i = rank; i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = acc;
      acc *= x.shape()[i];
    }
  }

  const double* src = x.data();
  double* dst = out.data();
  const std::size_t n = x.size();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat, slot = 0;
    for (std::size_t i = 0; i < rank; ++i) {
      const std::size_t idx = rem / stride[i];
      rem -= idx * stride[i];
      slot += idx * out_stride[i];
    }
    dst[slot] += src[flat];
  }

  if (kind == ReduceKind::mean) {
    const double inv = 1.0 / static_cast<double>(count);
    kernels::scale(out.data(), inv, out.data(), out.size());
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  kernels::vadd(a.data(), b.data(), out.data(), out.size());
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  kernels::vsub(a.data(), b.data(), out.data(), out.size());
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  kernels::vmul(a.data(), b.data(), out.data(), out.size());
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  const double* d = b.data();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (d[i] == 0.0)
      throw std::invalid_argument("div: exact zero denominator at flat index " + std::to_string(i));
  }
  Tensor out(a.shape());
  kernels::vdiv(a.data(), b.data(), out.data(), out.size());
  return out;
}

Tensor scale(const Tensor& x, double s) {
  Tensor out(x.shape());
  kernels::scale(x.data(), s, out.data(), out.size());
  return out;
}

bool all_finite(const Tensor& x) {
  const double* p = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

}  // namespace modenorm
