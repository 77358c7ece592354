#include <doctest.h>

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "hanjabridge/model.hpp"
#include "hanjabridge/train.hpp"
#include "oracles.hpp"

using namespace hb;
using namespace hb::fixture;

namespace {

// -log softmax(row)[t] by hand, in double.
double nll(const std::vector<double>& logits, std::size_t v, std::size_t pos, TokenId t) {
  double mx = -1e300;
  for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits[pos * v + j]);
  double z = 0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(logits[pos * v + j] - mx);
  return -(logits[pos * v + t] - mx - std::log(z));
}

}  // namespace

TEST_CASE("initialisation and forward are deterministic") {
  const auto a = init_params<double>(tiny_config());
  const auto b = init_params<double>(tiny_config());
  CHECK(a.data == b.data);
  auto other = tiny_config();
  other.seed = 6;
  CHECK(init_params<double>(other).data != a.data);
  const auto aug = toy_sequence();
  const auto mask = build_attention_mask(aug);
  CHECK(forward(a, aug.ids, mask).logits == forward(a, aug.ids, mask).logits);
}

TEST_CASE("layout covers every parameter exactly once") {
  const auto p = init_params<float>(tiny_config());
  std::size_t sum = 0, expect_offset = 0;
  for (const auto& t : p.layout.tensors) {
    CHECK(t.offset == expect_offset);
    std::size_t n = 1;
    for (auto s : t.shape) n *= s;
    CHECK(n == t.size);
    expect_offset += t.size;
    sum += t.size;
  }
  CHECK(sum == p.count());
  CHECK(p.layout.total == p.count());
}

TEST_CASE("blocked attention pairs get exactly zero weight") {
  auto cfg = tiny_config();
  cfg.n_heads = 2;
  cfg.max_positions = 32;
  cfg.vocab_size = 60;
  const auto params = init_params<double>(cfg);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const auto aug = oracle::random_augmented(rng, 24, 3, 4);
    const auto mask = build_attention_mask(aug);
    const auto tr = forward(params, aug.ids, mask).trace;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        for (std::size_t i = 0; i < aug.size(); ++i) {
          double row = 0;
          for (std::size_t j = 0; j < aug.size(); ++j) {
            if (!mask(i, j)) REQUIRE(tr.attention(l, h, i, j) == 0.0);
            row += tr.attention(l, h, i, j);
          }
          CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("a group-free sequence under the HanjaBridge mask is the causal model") {
  const auto params = init_params<double>(tiny_config());
  const std::vector<TokenId> ids{3, 4, 5, 6, 7};
  const auto aug = unaugmented(Encoding{"", ids, {}});
  CHECK(forward(params, ids, build_attention_mask(aug)).logits ==
        forward(params, ids, AttentionMask::causal(ids.size())).logits);
}

TEST_CASE("originals before the first anchor do not see the candidates") {
  const auto params = init_params<double>(tiny_config());
  const auto aug = toy_sequence();
  const auto with = forward(params, aug.ids, build_attention_mask(aug));
  const std::vector<TokenId> prefix{3, 4, 5};
  const auto plain = forward(params, prefix, AttentionMask::causal(3));
  const std::size_t v = params.config.vocab_size;
  for (std::size_t i = 0; i < 2 * v; ++i) CHECK(with.logits[i] == plain.logits[i]);
}

TEST_CASE("loss ignores targets at candidate positions") {
  const auto params = init_params<double>(tiny_config());
  const auto aug = toy_sequence();
  const auto out = forward(params, aug.ids, build_attention_mask(aug));
  const std::size_t v = params.config.vocab_size;
  const auto targets = next_original_targets(aug);
  CHECK(targets.include == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 1, 0});
  CHECK(targets.target[2] == 8);

  auto perturbed = targets;
  perturbed.target[3] = 1;
  perturbed.target[4] = 2;
  const std::span<const double> logits(out.logits);
  CHECK(lm_loss_sum(logits, v, perturbed).sum == lm_loss_sum(logits, v, targets).sum);

  auto control = next_token_targets(aug.ids);
  const double before = lm_loss_sum(logits, v, control).sum;
  control.target[3] = 1;
  CHECK(lm_loss_sum(logits, v, control).sum != before);

  const double hand = (nll(out.logits, v, 0, 4) + nll(out.logits, v, 1, 5) + nll(out.logits, v, 2, 8) +
                       nll(out.logits, v, 5, 9)) / 4.0;
  CHECK(lm_loss(logits, v, aug) == doctest::Approx(hand).epsilon(1e-12));
  CHECK(lm_loss(logits, v, aug, Reduction::sum) == doctest::Approx(4.0 * hand).epsilon(1e-12));
}

TEST_CASE("log_prob agrees with the hand softmax") {
  const auto params = init_params<double>(tiny_config());
  const auto aug = toy_sequence();
  const auto out = forward(params, aug.ids, build_attention_mask(aug));
  for (TokenId t = 0; t < 11; ++t) {
    CHECK(log_prob(std::span<const double>(out.logits), 11, 3, t) == doctest::Approx(-nll(out.logits, 11, 3, t)).epsilon(1e-12));
  }
}

TEST_CASE("too long or mismatched inputs are rejected") {
  const auto params = init_params<double>(tiny_config());
  std::vector<TokenId> ids(13, 3);
  CHECK_THROWS_AS(forward(params, ids, AttentionMask::causal(13)), ModelError);
  CHECK_THROWS_AS(forward(params, std::vector<TokenId>{3, 4}, AttentionMask::causal(3)), ModelError);
  CHECK_THROWS_AS(forward(params, std::vector<TokenId>{3, 40}, AttentionMask::causal(2)), ModelError);
}

TEST_CASE("grow_vocab keeps old rows and the old hidden states") {
  const auto p = init_params<double>(tiny_config());
  const auto g = grow_vocab(p, 15, 9);
  CHECK(g.config.vocab_size == 15);
  for (const auto& t : p.layout.tensors) {
    const auto a = p.tensor(t.name), b = g.tensor(t.name);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
  }
  const std::vector<TokenId> ids{3, 4, 5};
  CHECK(forward(p, ids, AttentionMask::causal(3)).trace.final_hidden ==
        forward(g, ids, AttentionMask::causal(3)).trace.final_hidden);
  CHECK_THROWS_AS(grow_vocab(p, 5, 1), ModelError);
}

TEST_CASE("init_row_from_pieces") {
  auto g = grow_vocab(init_params<double>(tiny_config()), 12, 1);
  const std::vector<TokenId> pieces{4, 7};
  init_row_from_pieces(g, 11, std::span<const TokenId>(pieces));
  const auto emb = g.tensor("tok_emb");
  const auto hw = g.tensor("head.weight");
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(emb[11 * 8 + i] == doctest::Approx((emb[4 * 8 + i] + emb[7 * 8 + i]) / 2));
    CHECK(hw[11 * 8 + i] == hw[4 * 8 + i]);
  }
  CHECK(g.tensor("head.bias")[11] == g.tensor("head.bias")[4]);
  CHECK_THROWS_AS(init_row_from_pieces(g, 12, std::span<const TokenId>(pieces)), ModelError);
}

TEST_CASE("float and double forwards agree closely") {
  const auto pd = init_params<double>(tiny_config());
  const auto pf = convert_params<float>(pd);
  const auto aug = toy_sequence();
  const auto mask = build_attention_mask(aug);
  const auto a = forward(pd, aug.ids, mask).logits;
  const auto b = forward(pf, aug.ids, mask).logits;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-4);
}

TEST_CASE("projection head gradient matches finite differences") {
  auto cfg = tiny_config();
  auto params = with_projection(init_params<double>(cfg), 6, 3);
  std::mt19937_64 rng(12);
  TrainExample ex = make_example(toy_sequence());
  TeacherStates ts;
  ts.sequence = 4;
  ts.dim = 6;
  for (int i = 0; i < 5; ++i) ts.vectors.push_back(random_vec(rng, 6));
  ex.teacher = TrainExample::Teacher{ts, AlignmentMap{{{0, 0}, {1, 1}, {3, 4}}, {}}};
  InstanceQueue queue(16, 6);
  for (std::uint32_t i = 0; i < 4; ++i) queue.push({2, i}, random_vec(rng, 6));
  DistillContext dc{&queue, {}};
  LossConfig loss{0.1};
  const auto mask = trainable_mask(params.config, params.layout, FreezeSpec::parse("embeddings"));
  const auto r = grad_check(params, {ex}, loss, &dc, mask, 1e-4, 1, 1e-6, Stencil::five_point);
  INFO("worst ", r.worst_index, " a=", r.worst_analytic, " n=", r.worst_numeric);
  CHECK(r.max_relative_error < 1e-4);
  CHECK(r.checked < params.count());
}

TEST_CASE("config json round trip and validation") {
  nlohmann::json j = tiny_config();
  CHECK(j.get<ModelConfig>() == tiny_config());
  auto bad = tiny_config();
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ModelError);
}
