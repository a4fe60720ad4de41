#pragma once

#include <cstddef>

namespace modenorm::kernels::detail {

struct Table {
  double (*sum)(const double*, std::size_t);
  double (*sumsq)(const double*, std::size_t);
  void (*moments)(const double*, std::size_t, double*, double*);
  double (*dot)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*scale)(const double*, double, double*, std::size_t);
  void (*vadd)(const double*, const double*, double*, std::size_t);
  void (*vsub)(const double*, const double*, double*, std::size_t);
  void (*vmul)(const double*, const double*, double*, std::size_t);
  void (*vdiv)(const double*, const double*, double*, std::size_t);
  void (*scale_shift)(const double*, double, double, double*, std::size_t);
  void (*mul_add)(const double*, const double*, const double*, double*, std::size_t);
  void (*fused_uxc)(const double*, const double*, double, double, double, double*, std::size_t);
  void (*matmul)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
  void (*relu)(const double*, double*, std::size_t);
  void (*relu_mask)(const double*, const double*, double*, std::size_t);
};

const Table* scalar_table();
const Table* avx2_table();  // nullptr when the binary was built without AVX2

}  // namespace modenorm::kernels::detail
