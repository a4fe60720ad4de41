#pragma once

#include <cstddef>

namespace modenorm::kernels {

// Instruction-set lane for the numeric kernels. Every kernel has a scalar
// reference implementation and an AVX2 variant; the active lane is picked at
// startup from CPU support (override with the MODENORM_ISA environment
// variable or force() in tests). Lanes agree to rounding error, not bitwise:
// the vector lane reassociates reductions and fuses multiply-adds.
enum class Isa { scalar, avx2 };

Isa detect();             // best lane this CPU supports
Isa active();             // lane currently dispatched to
void force(Isa isa);      // throws std::runtime_error if unsupported
const char* name(Isa isa);

double sum(const double* x, std::size_t n);
double sumsq(const double* x, std::size_t n);
void moments(const double* x, std::size_t n, double* out_sum, double* out_sumsq);
double dot(const double* a, const double* b, std::size_t n);

void axpy(double a, const double* x, double* y, std::size_t n);     // y += a*x
void scale(const double* x, double a, double* out, std::size_t n);  // out = a*x
void vadd(const double* a, const double* b, double* out, std::size_t n);
void vsub(const double* a, const double* b, double* out, std::size_t n);
void vmul(const double* a, const double* b, double* out, std::size_t n);
void vdiv(const double* a, const double* b, double* out, std::size_t n);

// out = a*x + b with scalar coefficients.
void scale_shift(const double* x, double a, double b, double* out, std::size_t n);
// out = x*a + b elementwise over three arrays.
void mul_add(const double* x, const double* a, const double* b, double* out, std::size_t n);
// out = cu*u + cx*x + c0; the fused form every normalization backward reduces to.
void fused_uxc(const double* u, const double* x, double cu, double cx, double c0,
               double* out, std::size_t n);

// c[m x q] = a[m x p] * b[p x q], row-major, c fully overwritten.
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t p, std::size_t q);

void relu(const double* x, double* out, std::size_t n);
// out = up where x > 0, else 0 (subgradient 0 at the kink).
void relu_mask(const double* x, const double* up, double* out, std::size_t n);

}  // namespace modenorm::kernels
