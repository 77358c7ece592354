#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "hanjabridge/kernels.hpp"
#include "kernels_impl.hpp"

namespace hb::kernels {

namespace {

constexpr KernelTable kScalar{Isa::scalar, scalar::dot_f32, scalar::dot_f64, scalar::axpy_f32,
                              scalar::axpy_f64};
#if defined(HB_HAVE_AVX2)
constexpr KernelTable kAvx2{Isa::avx2, avx2::dot_f32, avx2::dot_f64, avx2::axpy_f32, avx2::axpy_f64};
#endif
#if defined(HB_HAVE_NEON)
constexpr KernelTable kNeon{Isa::neon, neon::dot_f32, neon::dot_f64, neon::axpy_f32, neon::axpy_f64};
#endif

bool cpu_has(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(HB_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#if defined(HB_HAVE_NEON)
      return true;  // mandatory on aarch64
#else
      return false;
#endif
  }
  return false;
}

const KernelTable* best_for_host() {
  if (const char* env = std::getenv("HANJABRIDGE_SIMD")) {
    const std::string v = env;
    if (v == "scalar") return &kScalar;
    if (v == "avx2" && cpu_has(Isa::avx2)) return &table(Isa::avx2);
    if (v == "neon" && cpu_has(Isa::neon)) return &table(Isa::neon);
  }
  // Widest first.
  for (Isa isa : {Isa::avx2, Isa::neon}) {
    if (cpu_has(isa)) return &table(isa);
  }
  return &kScalar;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{best_for_host()};
  return slot;
}

}  // namespace

std::string_view name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

bool supported(Isa isa) { return cpu_has(isa); }

std::vector<Isa> available() {
  std::vector<Isa> out;
  for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
    if (supported(isa)) out.push_back(isa);
  }
  return out;
}

const KernelTable& table(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return kScalar;
    case Isa::avx2:
#if defined(HB_HAVE_AVX2)
      return kAvx2;
#else
      break;
#endif
    case Isa::neon:
#if defined(HB_HAVE_NEON)
      return kNeon;
#else
      break;
#endif
  }
  throw std::invalid_argument("kernel ISA '" + std::string(name(isa)) + "' not compiled in");
}

const KernelTable& active() { return *active_slot().load(std::memory_order_relaxed); }

void select(Isa isa) {
  if (!supported(isa)) {
    throw std::invalid_argument("kernel ISA '" + std::string(name(isa)) + "' not available");
  }
  active_slot().store(&table(isa), std::memory_order_relaxed);
}

void select(std::string_view which) {
  if (which == "auto") {
    for (Isa isa : {Isa::avx2, Isa::neon}) {
      if (supported(isa)) return select(isa);
    }
    return select(Isa::scalar);
  }
  for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
    if (which == name(isa)) return select(isa);
  }
  throw std::invalid_argument("unknown kernel ISA '" + std::string(which) + "' (scalar|avx2|neon|auto)");
}

}  // namespace hb::kernels
