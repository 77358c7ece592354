#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "hanjabridge/distill.hpp"
#include "oracles.hpp"

using namespace hb;
using namespace hb::fixture;

namespace {

Encoding manual(std::string text, std::vector<Span> spans) {
  Encoding e;
  e.text = std::move(text);
  e.spans = std::move(spans);
  e.ids.assign(e.spans.size(), 3);
  return e;
}

double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double x : p) h -= x > 0 ? x * std::log(x) : 0.0;
  return h;
}

}  // namespace

TEST_CASE("kd_loss matches the brute-force double sum") {
  std::mt19937_64 rng(31);
  DistillConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 4, q = rng() % 6, d = 5;
    InstanceQueue queue(8, d);
    std::vector<std::vector<double>> qv;
    for (std::size_t j = 0; j < q; ++j) {
      qv.push_back(random_vec(rng, d));
      queue.push({100, static_cast<std::uint32_t>(j)}, qv.back());
    }
    std::vector<std::vector<double>> s, t;
    std::vector<QueueKey> keys;
    double oracle_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      s.push_back(random_vec(rng, d));
      t.push_back(random_vec(rng, d));
      keys.push_back({1, static_cast<std::uint32_t>(i)});
      oracle_sum += oracle::kd_position(s[i], t[i], qv, cfg.tau_teacher, cfg.tau_student);
    }
    const auto r = kd_loss(s, t, keys, queue, cfg);
    CHECK(std::abs(r.loss - oracle_sum / static_cast<double>(n)) < 1e-10);
  }
}

TEST_CASE("raw dot products without normalisation") {
  std::mt19937_64 rng(7);
  DistillConfig cfg;
  cfg.normalize = false;
  cfg.tau_teacher = 2.0;
  cfg.tau_student = 3.0;
  InstanceQueue queue(4, 3);
  std::vector<std::vector<double>> qv;
  for (int j = 0; j < 3; ++j) {
    qv.push_back(random_vec(rng, 3, 0.5));
    queue.push({9, static_cast<std::uint32_t>(j)}, qv.back());
  }
  const auto s = random_vec(rng, 3, 0.5), t = random_vec(rng, 3, 0.5);
  const auto r = kd_loss({s}, {t}, {{1, 0}}, queue, cfg);
  CHECK(std::abs(r.loss - oracle::kd_position(s, t, qv, 2.0, 3.0, false)) < 1e-10);
}

TEST_CASE("an empty queue gives zero loss and zero gradient") {
  std::mt19937_64 rng(1);
  InstanceQueue queue(4, 6);
  const auto r = kd_loss({random_vec(rng, 6)}, {random_vec(rng, 6)}, {{0, 0}}, queue, {});
  CHECK(r.loss == 0.0);
  for (double g : r.grad_student[0]) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("loss is bounded below by the teacher entropy and reaches it when pS = pT") {
  std::mt19937_64 rng(5);
  DistillConfig same;
  same.tau_student = same.tau_teacher = 0.5;
  InstanceQueue queue(8, 4);
  for (std::uint32_t j = 0; j < 5; ++j) queue.push({50, j}, random_vec(rng, 4));
  std::vector<std::vector<double>> t{random_vec(rng, 4), random_vec(rng, 4), random_vec(rng, 4)};
  std::vector<QueueKey> keys{{1, 0}, {1, 1}, {1, 2}};
  const auto at_teacher = kd_loss(t, t, keys, queue, same);
  double mean_h = 0;
  for (double h : at_teacher.teacher_entropy) mean_h += h / 3.0;
  CHECK(at_teacher.loss == doctest::Approx(mean_h).epsilon(1e-12));
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> s{random_vec(rng, 4), random_vec(rng, 4), random_vec(rng, 4)};
    CHECK(kd_loss(s, t, keys, queue, same).loss >= mean_h - 1e-12);
    CHECK(kd_loss(s, t, keys, queue, DistillConfig{}).loss >= 0.0);
  }
}

TEST_CASE("a queue entry with the current key is not counted twice") {
  std::mt19937_64 rng(2);
  const auto t = random_vec(rng, 4), s = random_vec(rng, 4), other = random_vec(rng, 4);
  InstanceQueue with_dup(4, 4), without(4, 4);
  with_dup.push({1, 0}, t);
  with_dup.push({2, 0}, other);
  without.push({2, 0}, other);
  CHECK(kd_loss({s}, {t}, {{1, 0}}, with_dup, {}).loss == kd_loss({s}, {t}, {{1, 0}}, without, {}).loss);
}

TEST_CASE("student gradient matches finite differences and touches nothing else") {
  std::mt19937_64 rng(13);
  DistillConfig cfg;
  InstanceQueue queue(8, 6);
  for (std::uint32_t j = 0; j < 5; ++j) queue.push({3, j}, random_vec(rng, 6));
  const QueueSnapshot snap(queue, true);
  auto s = random_vec(rng, 6);
  const auto t = random_vec(rng, 6);
  std::vector<double> g(6, 0.0);
  snap.position_loss(s, t, {0, 0}, cfg, g, 1.0);
  for (std::size_t i = 0; i < 6; ++i) {
    const double e = 1e-5, x = s[i];
    std::vector<double> none;
    s[i] = x + e;
    const double up = snap.position_loss(s, t, {0, 0}, cfg, none, 1.0).first;
    s[i] = x - e;
    const double down = snap.position_loss(s, t, {0, 0}, cfg, none, 1.0).first;
    s[i] = x;
    CHECK(g[i] == doctest::Approx((up - down) / (2 * e)).epsilon(1e-5));
  }
}

TEST_CASE("dimension and temperature errors") {
  InstanceQueue queue(4, 3);
  CHECK_THROWS_AS(queue.push({0, 0}, std::vector<double>{1, 2}), DistillError);
  CHECK_THROWS_AS(kd_loss({{1, 0}}, {{1, 0, 0}}, {{0, 0}}, queue, {}), DistillError);
  CHECK_THROWS_AS(kd_loss({{0, 0, 0}}, {{1, 0, 0}}, {{0, 0}}, queue, {}), DistillError);
  DistillConfig bad;
  bad.tau_teacher = 0;
  CHECK_THROWS_AS(bad.validate(), DistillError);
  CHECK_THROWS_AS(InstanceQueue(0, 3), DistillError);
}

TEST_CASE("queue is FIFO and bounded") {
  InstanceQueue q(4, 1);
  for (std::uint32_t i = 0; i < 6; ++i) q.push({0, i}, std::vector<double>{static_cast<double>(i)});
  REQUIRE(q.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(q.entries()[i].key.position == i + 2);
    CHECK(q.entries()[i].source == InstanceQueue::Source::teacher);
  }
  const auto before = q;
  enqueue_batch(q, {}, {});
  CHECK(q == before);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    q.push({1, static_cast<std::uint32_t>(i)}, random_vec(rng, 1));
    CHECK(q.size() <= q.capacity());
  }
}

TEST_CASE("enqueue_batch pushes aligned teacher vectors in student order") {
  TeacherStates ts;
  ts.sequence = 7;
  ts.dim = 1;
  ts.vectors = {{10}, {11}, {12}};
  AlignmentMap m;
  m.pairs = {{0, 1}, {1, 2}};
  m.skipped = {2};
  InstanceQueue q(8, 1);
  enqueue_batch(q, {ts}, {m});
  REQUIRE(q.size() == 2);
  CHECK(q.entries()[0].vector[0] == 11);
  CHECK(q.entries()[1].vector[0] == 12);
  CHECK(q.entries()[1].key == QueueKey{7, 2});
  CHECK_THROWS_AS(enqueue_batch(q, {ts}, {}), DistillError);
}

TEST_CASE("alignment takes the last teacher sub-word") {
  const auto student = encode(build_vocab({"가격", "을"}), "가격을");
  const auto teacher = encode(build_vocab({"가", "격", "을"}), "가격을");
  const auto m = align(student, teacher);
  CHECK(m.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 2}});
  CHECK(m.skipped.empty());
}

TEST_CASE("identical tokenisations pair one to one") {
  const auto v = build_vocab({"가격", "을"});
  const auto e = encode(v, "가격을 가격");
  const auto m = align(e, e);
  for (std::size_t i = 0; i < e.size(); ++i) CHECK(m.pairs[i] == std::make_pair(i, i));
  CHECK(m.skipped.empty());
}

TEST_CASE("crossing boundaries are skipped") {
  const auto s = manual("abcd", {{0, 3}, {3, 4}});
  const auto t = manual("abcd", {{0, 2}, {2, 4}});
  const auto m = align(s, t);
  CHECK(m.pairs.empty());
  CHECK(m.skipped == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(align(s, manual("abce", {{0, 4}})), DistillError);
}

TEST_CASE("a student token split by whitespace in the teacher is not covered") {
  const auto s = manual("ab c", {{0, 2}, {3, 4}});
  const auto t = manual("ab c", {{0, 1}, {3, 4}});
  const auto m = align(s, t);
  CHECK(m.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}});
  CHECK(m.skipped == std::vector<std::size_t>{0});
}

TEST_CASE("sim_distribution") {
  const std::vector<double> z{1, 0, 0};
  SUBCASE("singleton") {
    const auto p = sim_distribution(z, {std::span<const double>(z)}, 0.2);
    CHECK(p == std::vector<double>{1.0});
  }
  SUBCASE("hand softmax") {
    const std::vector<double> a{1, 0, 0}, b{0, 1, 0}, c{-1, 0, 0};
    const auto p = sim_distribution(z, {a, b, c}, 0.2);
    const double e1 = std::exp(1 / 0.2), e0 = 1.0, em = std::exp(-1 / 0.2);
    const double zsum = e1 + e0 + em;
    CHECK(p[0] == doctest::Approx(e1 / zsum).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(e0 / zsum).epsilon(1e-14));
    CHECK(p[2] == doctest::Approx(em / zsum).epsilon(1e-14));
    CHECK(entropy(p) > 0);
  }
  SUBCASE("high temperature is nearly uniform") {
    const std::vector<double> a{1, 0, 0}, b{0, 1, 0}, c{0, 0, 1};
    for (double x : sim_distribution(z, {a, b, c}, 1e9)) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-8));
  }
  SUBCASE("zero vector") {
    const std::vector<double> zero{0, 0, 0};
    CHECK_THROWS_AS(sim_distribution(zero, {z}, 0.2), DistillError);
  }
}

TEST_CASE("teacher_forward is a pure function with one vector per token") {
  const auto teacher = init_params<float>(tiny_config());
  const auto before = teacher.data;
  const std::vector<TokenId> ids{3, 4, 5, 6};
  const auto a = teacher_forward(teacher, std::span<const TokenId>(ids), 9);
  const auto b = teacher_forward(teacher, std::span<const TokenId>(ids), 9);
  CHECK(a.vectors == b.vectors);
  CHECK(a.size() == ids.size());
  CHECK(a.dim == 8);
  CHECK(a.sequence == 9);
  CHECK(teacher.data == before);
  const auto mid = teacher_forward(teacher, std::span<const TokenId>(ids), 9, 0);
  CHECK(mid.vectors != a.vectors);
  CHECK_THROWS_AS(teacher_forward(teacher, std::span<const TokenId>(ids), 9, 2), DistillError);
}
