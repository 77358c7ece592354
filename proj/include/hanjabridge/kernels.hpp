#pragma once

// Dense inner loops of the model (dot products and axpy updates). A scalar reference
// implementation is always present; AVX2+FMA (x86-64) and NEON (aarch64) variants are compiled
// when the target supports them and picked at startup from what the host CPU reports.
//
// HANJABRIDGE_SIMD=scalar|avx2|neon|auto overrides the choice. The selection is fixed for the
// lifetime of the process unless select() is called, so runs on one machine are bit-reproducible.

#include <cstddef>
#include <string_view>
#include <vector>

namespace hb::kernels {

enum class Isa { scalar, avx2, neon };

struct KernelTable {
  Isa isa;
  float (*dot_f32)(const float* a, const float* b, std::size_t n);
  double (*dot_f64)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy_f32)(float alpha, const float* x, float* y, std::size_t n);
  void (*axpy_f64)(double alpha, const double* x, double* y, std::size_t n);
};

std::string_view name(Isa isa);

// Compiled in and supported by this CPU.
bool supported(Isa isa);
std::vector<Isa> available();

const KernelTable& table(Isa isa);
const KernelTable& active();

// Throws std::invalid_argument when the ISA is unavailable.
void select(Isa isa);
// "scalar", "avx2", "neon" or "auto" (widest available).
void select(std::string_view name);

namespace scalar {
float dot_f32(const float* a, const float* b, std::size_t n);
double dot_f64(const double* a, const double* b, std::size_t n);
void axpy_f32(float alpha, const float* x, float* y, std::size_t n);
void axpy_f64(double alpha, const double* x, double* y, std::size_t n);
}  // namespace scalar

inline float dot(const float* a, const float* b, std::size_t n) { return active().dot_f32(a, b, n); }
inline double dot(const double* a, const double* b, std::size_t n) { return active().dot_f64(a, b, n); }
inline void axpy(float alpha, const float* x, float* y, std::size_t n) { active().axpy_f32(alpha, x, y, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { active().axpy_f64(alpha, x, y, n); }

// y[r] = W[r, :] . x   for a row-major rows x cols matrix
template <typename T>
void matvec(const T* w, const T* x, T* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) y[r] = dot(w + r * cols, x, cols);
}

// x += W^T dy
template <typename T>
void matvec_t_acc(const T* w, const T* dy, T* dx, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (dy[r] != T(0)) axpy(dy[r], w + r * cols, dx, cols);
  }
}

// dW += dy x^T
template <typename T>
void outer_acc(T* dw, const T* dy, const T* x, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (dy[r] != T(0)) axpy(dy[r], x, dw + r * cols, cols);
  }
}

}  // namespace hb::kernels
