// Reference lane: plain loops, one accumulator, no fused multiply-add.
// The vector lane is tested against these implementations.

#include "kernels_table.hpp"

namespace modenorm::kernels::detail {
namespace {

double s_sum(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double s_sumsq(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

void s_moments(const double* x, std::size_t n, double* out_sum, double* out_sumsq) {
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s += x[i];
    s2 += x[i] * x[i];
  }
  *out_sum = s;
  *out_sumsq = s2;
}

double s_dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void s_axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void s_scale(const double* x, double a, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i];
}

void s_vadd(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void s_vsub(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void s_vmul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void s_vdiv(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] / b[i];
}

void s_scale_shift(const double* x, double a, double b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i] + b;
}

void s_mul_add(const double* x, const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * a[i] + b[i];
}

void s_fused_uxc(const double* u, const double* x, double cu, double cx, double c0,
                 double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = cu * u[i] + cx * x[i] + c0;
}

void s_matmul(const double* a, const double* b, double* c,
              std::size_t m, std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m * q; ++i) c[i] = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * p;
    double* crow = c + i * q;
    for (std::size_t k = 0; k < p; ++k) {
      const double aik = arow[k];
      const double* brow = b + k * q;
      for (std::size_t j = 0; j < q; ++j) crow[j] += aik * brow[j];
    }
  }
}

void s_relu(const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void s_relu_mask(const double* x, const double* up, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? up[i] : 0.0;
}

const Table kScalarTable = {
    s_sum,  s_sumsq, s_moments,     s_dot,     s_axpy,      s_scale,
    s_vadd, s_vsub,  s_vmul,        s_vdiv,    s_scale_shift, s_mul_add,
    s_fused_uxc, s_matmul, s_relu,  s_relu_mask,
};

}  // namespace

const Table* scalar_table() { return &kScalarTable; }

}  // namespace modenorm::kernels::detail
