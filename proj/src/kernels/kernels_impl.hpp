#pragma once

#include <cstddef>

namespace hb::kernels {

#if defined(HB_HAVE_AVX2)
namespace avx2 {
float dot_f32(const float* a, const float* b, std::size_t n);
double dot_f64(const double* a, const double* b, std::size_t n);
void axpy_f32(float alpha, const float* x, float* y, std::size_t n);
void axpy_f64(double alpha, const double* x, double* y, std::size_t n);
}  // namespace avx2
#endif

#if defined(HB_HAVE_NEON)
namespace neon {
float dot_f32(const float* a, const float* b, std::size_t n);
double dot_f64(const double* a, const double* b, std::size_t n);
void axpy_f32(float alpha, const float* x, float* y, std::size_t n);
void axpy_f64(double alpha, const double* x, double* y, std::size_t n);
}  // namespace neon
#endif

}  // namespace hb::kernels
