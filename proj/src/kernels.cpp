#include "modenorm/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kernels_table.hpp"

namespace modenorm::kernels {
namespace {

using detail::Table;

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Table* table_for(Isa isa) {
  if (isa == Isa::avx2) {
    const Table* t = detail::avx2_table();
    if (t == nullptr) throw std::runtime_error("kernels: binary built without AVX2 support");
    if (!cpu_has_avx2()) throw std::runtime_error("kernels: CPU lacks AVX2/FMA support");
    return t;
  }
  return detail::scalar_table();
}

Isa initial_isa() {
  if (const char* env = std::getenv("MODENORM_ISA")) {
    const std::string v(env);
    if (v == "scalar") return Isa::scalar;
    if (v == "avx2") return Isa::avx2;
    throw std::runtime_error("MODENORM_ISA must be 'scalar' or 'avx2', got '" + v + "'");
  }
  return (detail::avx2_table() != nullptr && cpu_has_avx2()) ? Isa::avx2 : Isa::scalar;
}

struct Dispatch {
  Isa isa;
  const Table* table;
  Dispatch() : isa(initial_isa()), table(table_for(isa)) {}
};

Dispatch& dispatch() {
  static Dispatch d;
  return d;
}

}  // namespace

Isa detect() {
  return (detail::avx2_table() != nullptr && cpu_has_avx2()) ? Isa::avx2 : Isa::scalar;
}

Isa active() { return dispatch().isa; }

void force(Isa isa) {
  Dispatch& d = dispatch();
  d.table = table_for(isa);
  d.isa = isa;
}

const char* name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

double sum(const double* x, std::size_t n) { return dispatch().table->sum(x, n); }
double sumsq(const double* x, std::size_t n) { return dispatch().table->sumsq(x, n); }
void moments(const double* x, std::size_t n, double* out_sum, double* out_sumsq) {
  dispatch().table->moments(x, n, out_sum, out_sumsq);
}
double dot(const double* a, const double* b, std::size_t n) {
  return dispatch().table->dot(a, b, n);
}
void axpy(double a, const double* x, double* y, std::size_t n) {
  dispatch().table->axpy(a, x, y, n);
}
void scale(const double* x, double a, double* out, std::size_t n) {
  dispatch().table->scale(x, a, out, n);
}
void vadd(const double* a, const double* b, double* out, std::size_t n) {
  dispatch().table->vadd(a, b, out, n);
}
void vsub(const double* a, const double* b, double* out, std::size_t n) {
  dispatch().table->vsub(a, b, out, n);
}
void vmul(const double* a, const double* b, double* out, std::size_t n) {
  dispatch().table->vmul(a, b, out, n);
}
void vdiv(const double* a, const double* b, double* out, std::size_t n) {
  dispatch().table->vdiv(a, b, out, n);
}
void scale_shift(const double* x, double a, double b, double* out, std::size_t n) {
  dispatch().table->scale_shift(x, a, b, out, n);
}
void mul_add(const double* x, const double* a, const double* b, double* out, std::size_t n) {
  dispatch().table->mul_add(x, a, b, out, n);
}
void fused_uxc(const double* u, const double* x, double cu, double cx, double c0,
               double* out, std::size_t n) {
  dispatch().table->fused_uxc(u, x, cu, cx, c0, out, n);
}
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t p, std::size_t q) {
  dispatch().table->matmul(a, b, c, m, p, q);
}
void relu(const double* x, double* out, std::size_t n) { dispatch().table->relu(x, out, n); }
void relu_mask(const double* x, const double* up, double* out, std::size_t n) {
  dispatch().table->relu_mask(x, up, out, n);
}

}  // namespace modenorm::kernels
