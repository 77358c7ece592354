#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "hanjabridge/kernels.hpp"

using namespace hb::kernels;

namespace {

template <typename T>
std::vector<T> rand_vec(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

}  // namespace

TEST_CASE("scalar is always available and auto picks something supported") {
  CHECK(supported(Isa::scalar));
  const auto isas = available();
  REQUIRE_FALSE(isas.empty());
  CHECK(isas.front() == Isa::scalar);
  select("auto");
  CHECK(supported(active().isa));
  select("scalar");
  CHECK(active().isa == Isa::scalar);
  CHECK_THROWS_AS(select("sse9"), std::invalid_argument);
  select("auto");
}

TEST_CASE("every compiled variant matches the scalar reference") {
  std::mt19937_64 rng(17);
  for (Isa isa : available()) {
    const auto& t = table(isa);
    INFO("isa ", name(isa));
    for (std::size_t n : {0, 1, 3, 4, 7, 8, 9, 15, 16, 17, 31, 33, 64, 100, 257}) {
      const auto af = rand_vec<float>(rng, n), bf = rand_vec<float>(rng, n);
      const auto ad = rand_vec<double>(rng, n), bd = rand_vec<double>(rng, n);
      const float rf = scalar::dot_f32(af.data(), bf.data(), n);
      const double rd = scalar::dot_f64(ad.data(), bd.data(), n);
      CHECK(std::abs(t.dot_f32(af.data(), bf.data(), n) - rf) <= 1e-5f * (1.0f + static_cast<float>(n)));
      CHECK(std::abs(t.dot_f64(ad.data(), bd.data(), n) - rd) <= 1e-13 * (1.0 + static_cast<double>(n)));

      auto yf = bf, yf_ref = bf;
      auto yd = bd, yd_ref = bd;
      t.axpy_f32(0.37f, af.data(), yf.data(), n);
      scalar::axpy_f32(0.37f, af.data(), yf_ref.data(), n);
      t.axpy_f64(-1.25, ad.data(), yd.data(), n);
      scalar::axpy_f64(-1.25, ad.data(), yd_ref.data(), n);
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(std::abs(yf[i] - yf_ref[i]) <= 1e-6f);
        CHECK(std::abs(yd[i] - yd_ref[i]) <= 1e-15);
      }
    }
  }
}

TEST_CASE("a fixed variant is deterministic") {
  std::mt19937_64 rng(2);
  const auto a = rand_vec<float>(rng, 1000), b = rand_vec<float>(rng, 1000);
  for (Isa isa : available()) {
    const auto& t = table(isa);
    CHECK(t.dot_f32(a.data(), b.data(), a.size()) == t.dot_f32(a.data(), b.data(), a.size()));
  }
}

TEST_CASE("dense helpers") {
  const std::vector<double> w{1, 2, 3, 4, 5, 6};  // 2 x 3
  const std::vector<double> x{1, 0, -1};
  std::vector<double> y(2);
  matvec(w.data(), x.data(), y.data(), 2, 3);
  CHECK(y == std::vector<double>{-2, -2});
  std::vector<double> dx(3, 0.0);
  const std::vector<double> dy{1, 2};
  matvec_t_acc(w.data(), dy.data(), dx.data(), 2, 3);
  CHECK(dx == std::vector<double>{9, 12, 15});
  std::vector<double> dw(6, 0.0);
  outer_acc(dw.data(), dy.data(), x.data(), 2, 3);
  CHECK(dw == std::vector<double>{1, 0, -1, 2, 0, -2});
}
