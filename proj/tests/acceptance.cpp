// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: acceptance [run_config.json] [--only=1,2,...] [--known-fail=7,...]
// Exit status is the number of failed criteria not listed in --known-fail.
// Known failures still print FAIL and count in the summary line.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "hanjabridge/analysis.hpp"
#include "hanjabridge/checkpoint.hpp"
#include "hanjabridge/experiment.hpp"
#include "hanjabridge/utf8.hpp"
#include "oracles.hpp"

using namespace hb;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const std::filesystem::path kTmp = std::filesystem::temp_directory_path() / "hb_acceptance";

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------------------------------------

Outcome mask_oracle() {
  Stopwatch sw;
  std::mt19937_64 rng(1001);
  std::size_t checked = 0, mismatches = 0, group_free = 0, causal_bad = 0;
  auto compare = [&](const AugmentedSequence& aug) {
    for (bool prefix : {true, false}) {
      const auto m = build_attention_mask(aug, prefix ? CandidateContext::prefix : CandidateContext::anchor_only);
      for (std::size_t i = 0; i < aug.size(); ++i) {
        for (std::size_t j = 0; j < aug.size(); ++j) {
          ++checked;
          if (m(i, j) != oracle::mask_rule(aug, i, j, prefix)) ++mismatches;
        }
      }
      if (aug.groups.empty()) {
        ++group_free;
        if (!(m == AttentionMask::causal(aug.size()))) ++causal_bad;
      }
    }
  };
  for (int t = 0; t < 1000; ++t) compare(oracle::random_augmented(rng, 32, 4, 8));
  for (int t = 0; t < 100; ++t) compare(oracle::random_augmented(rng, 32, 0, 8));
  const double s = sw.seconds();
  return {mismatches == 0 && causal_bad == 0 && group_free > 0 && s < 10.0,
          fmt("%zu entries, %zu mismatches; %zu group-free masks, %zu differ from causal; %.2fs (limit 10s)", checked,
              mismatches, group_free, causal_bad, s)};
}

Outcome loss_exclusivity() {
  auto cfg = fixture::tiny_config();
  cfg.vocab_size = 64;
  cfg.max_positions = 32;
  const auto params = init_params<double>(cfg);
  std::mt19937_64 rng(2002);
  std::size_t batches = 0, changed = 0, control_same = 0, with_candidates = 0;
  while (batches < 100) {
    std::vector<TrainExample> batch, perturbed;
    bool any_candidate = false;
    double control_before = 0, control_after = 0;
    for (int b = 0; b < 4; ++b) {
      auto aug = oracle::random_augmented(rng, 32, 4, 8);
      if (aug.original_positions.size() < 2) continue;
      auto ex = make_example(aug);
      auto px = ex;
      auto control = next_token_targets(aug.ids);
      const auto logits = forward(params, aug.ids, ex.mask).logits;
      const std::span<const double> lg(logits);
      control_before += lm_loss_sum(lg, cfg.vocab_size, control).sum;
      for (std::size_t i = 0; i < aug.size(); ++i) {
        if (aug.origin_mask[i]) continue;
        any_candidate = true;
        const TokenId t = static_cast<TokenId>(3 + (px.targets.target[i] + 1 + rng() % 50) % 60);
        px.targets.target[i] = t;
        control.target[i] = t;
      }
      control_after += lm_loss_sum(lg, cfg.vocab_size, control).sum;
      batch.push_back(std::move(ex));
      perturbed.push_back(std::move(px));
    }
    if (batch.empty()) continue;
    ++batches;
    const auto a = compute_loss_and_grad<double>(params, batch, LossConfig{0.0}, nullptr, nullptr);
    const auto b = compute_loss_and_grad<double>(params, perturbed, LossConfig{0.0}, nullptr, nullptr);
    if (a.lm != b.lm) ++changed;
    if (any_candidate) {
      ++with_candidates;
      if (control_before == control_after) ++control_same;
    }
  }
  return {changed == 0 && control_same == 0 && with_candidates > 0,
          fmt("%zu batches: L_LM changed in %zu; unrestricted control unchanged in %zu of %zu batches with candidates",
              batches, changed, control_same, with_candidates)};
}

Outcome gradient_check() {
  Stopwatch sw;
  const auto params = init_params<double>(fixture::tiny_config());
  std::mt19937_64 rng(3003);
  TrainExample ex = make_example(fixture::toy_sequence());
  TeacherStates ts;
  ts.sequence = 1;
  ts.dim = 8;
  for (int i = 0; i < 5; ++i) ts.vectors.push_back(fixture::random_vec(rng, 8));
  ex.teacher = TrainExample::Teacher{ts, AlignmentMap{{{0, 0}, {2, 2}, {4, 4}}, {}}};
  InstanceQueue queue(8, 8);
  for (std::uint32_t i = 0; i < 5; ++i) queue.push({7, i}, fixture::random_vec(rng, 8));
  DistillContext dc{&queue, {}};
  dc.config.tau_teacher = 0.01;
  dc.config.tau_student = 0.2;
  LossConfig loss{0.1};
  const auto mask = trainable_mask(params.config, params.layout, {});
  const auto r = grad_check(params, {ex}, loss, &dc, mask, 1e-4, 1, 1e-6, Stencil::five_point);
  const double s = sw.seconds();
  return {r.max_relative_error < 1e-4 && params.count() <= 5000 && s < 60.0,
          fmt("%zu parameters, %zu checked, max relative error %.3g (limit 1e-4); %.2fs (limit 60s)", params.count(),
              r.checked, r.max_relative_error, s)};
}

Outcome kd_oracle() {
  // hand-set: 4 positions, 5 queued vectors, dimension 3
  const std::vector<std::vector<double>> s{{1, 0, 0}, {0.5, 0.5, 0}, {0, -1, 2}, {3, 1, -1}};
  const std::vector<std::vector<double>> t{{0, 1, 0}, {1, 1, 1}, {-1, 0, 0.5}, {2, -2, 1}};
  const std::vector<std::vector<double>> q{{1, 2, 0}, {0, 0, 1}, {-1, 1, 1}, {2, 0.5, -0.5}, {0.25, -1, 0}};
  InstanceQueue queue(5, 3);
  for (std::uint32_t j = 0; j < q.size(); ++j) queue.push({90, j}, q[j]);
  std::vector<QueueKey> keys;
  for (std::uint32_t i = 0; i < s.size(); ++i) keys.push_back({1, i});
  double worst = 0;
  for (bool normalize : {true, false}) {
    DistillConfig cfg;
    cfg.normalize = normalize;
    if (!normalize) {  // raw dots need gentler temperatures
      cfg.tau_teacher = 2.0;
      cfg.tau_student = 3.0;
    }
    for (std::size_t n = 1; n <= 4; ++n) {
      std::vector<std::vector<double>> sn(s.begin(), s.begin() + n), tn(t.begin(), t.begin() + n);
      std::vector<QueueKey> kn(keys.begin(), keys.begin() + n);
      double sum = 0;
      for (std::size_t i = 0; i < n; ++i) sum += oracle::kd_position(sn[i], tn[i], q, cfg.tau_teacher, cfg.tau_student, normalize);
      worst = std::max(worst, std::abs(kd_loss(sn, tn, kn, queue, cfg).loss - sum / static_cast<double>(n)));
    }
  }
  // p_S = p_T: student state equal to the teacher's, equal temperatures
  DistillConfig raw;
  raw.normalize = false;
  raw.tau_teacher = 0.5;
  raw.tau_student = 0.5;
  const auto at_teacher = kd_loss(t, t, keys, queue, raw);
  double mean_h = 0;
  for (double h : at_teacher.teacher_entropy) mean_h += h / static_cast<double>(t.size());
  double gap = std::abs(at_teacher.loss - mean_h);
  DistillConfig same;
  same.tau_student = same.tau_teacher = 0.01;
  const auto cos_teacher = kd_loss(t, t, keys, queue, same);
  double mean_h2 = 0;
  for (double h : cos_teacher.teacher_entropy) mean_h2 += h / static_cast<double>(t.size());
  gap = std::max(gap, std::abs(cos_teacher.loss - mean_h2));
  return {worst < 1e-10 && gap < 1e-10,
          fmt("max |kd_loss - oracle| = %.2e (limit 1e-10); |loss - mean H(p_T)| at p_S = p_T: %.2e", worst, gap)};
}

RunConfig small_run(const std::filesystem::path& out) {
  RunConfig c;
  c.seed = 9;
  c.out_dir = out.string();
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.d_model = 16;
  c.model.d_ff = 32;
  c.model.max_positions = 64;
  c.synth.n_sentences = 300;
  c.synth.n_eval = 50;
  c.synth.n_teacher_a = 150;
  c.synth.n_domain_b = 150;
  c.synth.n_domain_b_heldout = 20;
  c.augment.k = 4;
  c.teacher.steps = 30;
  c.teacher.batch_size = 4;
  c.student.steps = 40;
  c.student.batch_size = 4;
  c.student.freeze = "head";
  return c;
}

Outcome lambda_zero() {
  auto c = small_run(kTmp / "l0");
  const auto data = prepare_data(c);
  const auto teacher = train_teacher(c, data);
  const auto teacher_bytes = teacher.data;
  RunHooks ha, hb_;
  ha.metrics_path = kTmp / "lambda0.tsv";
  hb_.metrics_path = kTmp / "plain.tsv";
  c.lambda = 0.0;
  c.distill = true;
  train_student(c, data, teacher, ha);
  bool teacher_same = teacher.data == teacher_bytes;
  c.distill = false;
  train_student(c, data, teacher, hb_);
  c.distill = true;
  c.lambda = 0.1;
  train_student(c, data, teacher);
  teacher_same = teacher_same && teacher.data == teacher_bytes;
  const auto a = slurp(*ha.metrics_path), b = slurp(*hb_.metrics_path);
  return {a == b && !a.empty() && teacher_same,
          fmt("metrics logs %s (%zu bytes); teacher parameters %s after the lambda 0 and lambda 0.1 runs",
              a == b ? "byte-equal" : "DIFFER", a.size(), teacher_same ? "unchanged" : "CHANGED")};
}

Outcome alignment_properties(const RunConfig& config) {
  const auto data = prepare_data(config);
  std::size_t pairs = 0, fragmented = 0, bad_end = 0, not_last = 0, skipped = 0, unaccounted = 0;
  for (const auto& sent : data.corpus.train) {
    const auto s = encode(data.student_vocab, sent.text);
    const auto t = encode(data.teacher_vocab, sent.text);
    const auto m = align(s, t);
    skipped += m.skipped.size();
    if (m.pairs.size() + m.skipped.size() != s.size()) ++unaccounted;
    for (const auto& [si, ti] : m.pairs) {
      ++pairs;
      if (s.spans[si].end != t.spans[ti].end) ++bad_end;
      // the teacher tokens covering the student token
      std::size_t first = ti;
      while (first > 0 && t.spans[first - 1].start >= s.spans[si].start) --first;
      if (first != ti) ++fragmented;
      if (ti + 1 < t.size() && t.spans[ti + 1].end <= s.spans[si].end) ++not_last;
    }
  }
  // crossing boundaries: student "abc|d" against teacher "ab|cd"
  Encoding cs, ct;
  cs.text = ct.text = "abcd";
  cs.spans = {{0, 3}, {3, 4}};
  cs.ids = {3, 4};
  ct.spans = {{0, 2}, {2, 4}};
  ct.ids = {3, 4};
  const auto cross = align(cs, ct);
  const bool cross_ok = cross.pairs.empty() && cross.skipped.size() == 2;
  return {pairs > 0 && fragmented > 0 && bad_end == 0 && not_last == 0 && unaccounted == 0 && cross_ok,
          fmt("%zu pairs (%zu fragmented words), %zu end mismatches, %zu not on the last sub-word, %zu skipped; "
              "crossing fixture %s",
              pairs, fragmented, bad_end, not_last, skipped, cross_ok ? "left unpaired" : "MIS-PAIRED")};
}

using Matrix = std::vector<std::vector<double>>;

Matrix residual_mix(const Matrix& a) {
  Matrix out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < a.size(); ++j) s += out[i][j] = 0.5 * a[i][j] + (i == j ? 0.5 : 0.0);
    for (auto& x : out[i]) x /= s;
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

ForwardTrace trace_from(const std::vector<std::vector<Matrix>>& layers) {
  ForwardTrace t;
  t.n_layers = layers.size();
  t.n_heads = layers[0].size();
  t.length = layers[0][0].size();
  t.d_model = 1;
  for (const auto& layer : layers)
    for (const auto& head : layer)
      for (const auto& row : head) t.attn.insert(t.attn.end(), row.begin(), row.end());
  return t;
}

double max_diff(const RolloutMatrix& r, const Matrix& m) {
  double d = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) d = std::max(d, std::abs(r(i, j) - m[i][j]));
  return d;
}

Outcome rollout_correctness(const RunConfig& config) {
  double worst = 0;
  // single layer, one head
  const Matrix a{{1, 0, 0}, {0.25, 0.75, 0}, {0.2, 0.3, 0.5}};
  worst = std::max(worst, max_diff(rollout(trace_from({{a}})), Matrix{{1, 0, 0}, {0.125, 0.875, 0}, {0.1, 0.15, 0.75}}));
  // two layers, two heads
  const Matrix h1{{1, 0, 0}, {0.5, 0.5, 0}, {0.1, 0.6, 0.3}}, h2{{1, 0, 0}, {0.9, 0.1, 0}, {0.3, 0.2, 0.5}};
  const Matrix g1{{1, 0, 0}, {0.2, 0.8, 0}, {0.4, 0.4, 0.2}}, g2{{1, 0, 0}, {0.6, 0.4, 0}, {0, 0, 1}};
  auto avg = [](const Matrix& x, const Matrix& y) {
    Matrix m = x;
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < x.size(); ++j) m[i][j] = 0.5 * (x[i][j] + y[i][j]);
    return m;
  };
  const Matrix expect = matmul(residual_mix(avg(g1, g2)), residual_mix(avg(h1, h2)));
  worst = std::max(worst, max_diff(rollout(trace_from({{h1, h2}, {g1, g2}})), expect));

  // real traces from a model on augmented corpus sentences
  auto small = config;
  small.synth.n_sentences = 200;
  small.synth.n_eval = 60;
  const auto data = prepare_data(small);
  auto mc = config.model;
  mc.vocab_size = data.student_vocab.size();
  const auto params = init_params<float>(mc);
  const auto items = rq1_items(small, data);
  double row_err = 0;
  std::size_t traces = 0;
  for (const auto& aug : items) {
    for (auto ctx : {CandidateContext::prefix, CandidateContext::anchor_only}) {
      const auto r = rollout(model_tracer(params, ctx)(aug));
      ++traces;
      for (std::size_t i = 0; i < r.size(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < r.size(); ++j) {
          if (r(i, j) < 0) row_err = std::max(row_err, -r(i, j));
          s += r(i, j);
        }
        row_err = std::max(row_err, std::abs(s - 1.0));
      }
    }
  }
  return {worst < 1e-10 && row_err < 1e-9 && traces > 0,
          fmt("hand traces max error %.2e (limit 1e-10); %zu real traces, max row-sum error %.2e", worst, traces,
              row_err)};
}

Outcome probe_properties(const RunConfig& config) {
  auto synth = config;
  synth.synth.n_sentences = 1400;
  synth.synth.n_eval = 1200;
  const auto data = prepare_data(synth);
  const auto& items = data.corpus.probe;
  const oracle::HashLogitScorer random_logits(data.student_vocab.size(), 77);

  // rotation invariance: the averaged scores follow the options under any cyclic shift
  double rot_err = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto& item = items[i];
    const std::size_t k = item.options.size();
    for (std::size_t shift = 1; shift < k; ++shift) {
      ProbeItem rotated = item;
      for (std::size_t p = 0; p < k; ++p) rotated.options[p] = item.options[(p + shift) % k];
      rotated.gold = (item.gold + k - shift) % k;
      for (bool hb : {false, true}) {
        ProbeConfig pc;
        pc.hb_inference = hb;
        pc.augment.k = k;
        const auto a = probe_run(random_logits, {item}, data.student_vocab, data.corpus.lexicon, pc).details[0].scores;
        const auto b = probe_run(random_logits, {rotated}, data.student_vocab, data.corpus.lexicon, pc).details[0].scores;
        for (std::size_t p = 0; p < k; ++p) rot_err = std::max(rot_err, std::abs(b[p] - a[(p + shift) % k]));
      }
    }
  }

  const auto report = probe_run(random_logits, items, data.student_vocab, data.corpus.lexicon, {});
  double chance = 0, var = 0;
  for (const auto& item : items) {
    const double p = 1.0 / static_cast<double>(item.options.size());
    chance += p;
    var += p * (1 - p);
  }
  const double n = static_cast<double>(items.size());
  chance /= n;
  const double sigma = std::sqrt(var) / n;
  const bool at_chance = std::abs(report.accuracy - chance) <= 3 * sigma;

  ProbeConfig hb_cfg;
  hb_cfg.hb_inference = true;
  hb_cfg.augment.k = 16;
  const auto with_hb = probe_run(random_logits, items, data.student_vocab, data.corpus.lexicon, hb_cfg);
  return {rot_err == 0.0 && at_chance && items.size() >= 1000 && with_hb.total_tokens > report.total_tokens,
          fmt("rotation max deviation %.1e; uninformative model %.4f vs chance %.4f, 3 sigma = %.4f over %zu items; "
              "tokens HB %zu > no-HB %zu",
              rot_err, report.accuracy, chance, 3 * sigma, items.size(), with_hb.total_tokens, report.total_tokens)};
}

// The three trained students shared by the toy-scale trend criteria.
struct ToyRuns {
  Rq1Table rq1;
  double hb_probe = 0, full_probe = 0, kl_kd = 0, kl_plain = 0;
  double rq1_seconds = 0, probe_seconds = 0;
  std::size_t steps = 0;
};

ToyRuns toy_runs(const RunConfig& config) {
  ToyRuns out;
  out.steps = config.student.steps;
  Stopwatch sw;
  const auto data = prepare_data(config);
  const auto teacher = train_teacher(config, data);
  const double teacher_s = sw.seconds();

  std::vector<Params<float>> snaps;
  std::vector<std::uint64_t> steps;
  RunHooks hooks;
  hooks.on_checkpoint = [&](std::uint64_t s, const Params<float>& p) {
    snaps.push_back(p);
    steps.push_back(s);
  };
  Stopwatch hb_sw;
  const auto hb = train_student(config, data, teacher, hooks);
  std::vector<Rq1Checkpoint> cks;
  for (std::size_t i = 0; i < snaps.size(); ++i) cks.push_back({steps[i], &snaps[i]});
  out.rq1 = rq1_accuracy(rq1_items(config, data), cks, config.candidate_context, config.score_source);
  const double hb_s = hb_sw.seconds();
  out.rq1_seconds = teacher_s + hb_s;

  Stopwatch probe_sw;
  out.hb_probe = probe_run(ParamsScorer(hb.params), data.corpus.probe, data.student_vocab, data.corpus.lexicon,
                           probe_config(config, false))
                     .accuracy;
  auto full = config;
  full.augment.k = 0;
  full.distill = false;
  full.student.freeze = "none";
  const auto full_student = train_student(full, data, teacher);
  out.full_probe = probe_run(ParamsScorer(full_student.params), data.corpus.probe, data.student_vocab,
                             data.corpus.lexicon, probe_config(full, false))
                       .accuracy;
  out.probe_seconds = teacher_s + hb_s + probe_sw.seconds();

  auto plain = config;
  plain.lambda = 0.0;
  const auto plain_student = train_student(plain, data, teacher);
  out.kl_kd = forgetting_kl(teacher, hb.params, data);
  out.kl_plain = forgetting_kl(teacher, plain_student.params, data);
  return out;
}

Outcome rq1_trend(const RunConfig& config, const ToyRuns& runs) {
  bool ok = config.student.steps >= 2000 && config.model.n_layers == 2 && config.model.n_heads == 2 &&
            config.model.d_model == 64 && config.synth.n_sentences >= 5000 && runs.rq1_seconds <= 15 * 60;
  std::string detail;
  for (std::size_t k : {2, 4}) {
    const auto it = runs.rq1.rows.find(k);
    if (it == runs.rq1.rows.end() || it->second.empty() || !it->second.back()) {
      ok = false;
      detail += fmt("k=%zu missing; ", k);
      continue;
    }
    std::vector<double> acc;
    for (const auto& b : it->second) acc.push_back(b ? b->accuracy() : 0.0);
    std::size_t inversions = 0;
    for (std::size_t i = 1; i < acc.size(); ++i) inversions += acc[i] < acc[i - 1];
    const double margin = acc.back() - 1.0 / static_cast<double>(k);
    const double need = k == 2 ? 0.15 : 0.10;
    ok = ok && margin >= need && inversions <= 1;
    detail += fmt("k=%zu: %.4f -> %.4f (chance + %.4f, need %.2f), %zu inversions; ", k, acc.front(), acc.back(),
                  margin, need, inversions);
  }
  detail += fmt("%zu steps, %.0fs (limit 900s)", runs.steps, runs.rq1_seconds);
  return {ok, detail};
}

Outcome rq2_ordering(const ToyRuns& runs) {
  const double gap = runs.hb_probe - runs.full_probe;
  return {gap >= 0.05 && runs.probe_seconds <= 20 * 60,
          fmt("HB student w/o HB inference %.4f, full-CPT-style student %.4f, gap %.4f (need 0.05); %.0fs (limit 1200s)",
              runs.hb_probe, runs.full_probe, gap, runs.probe_seconds)};
}

Outcome forgetting(const ToyRuns& runs) {
  return {runs.kl_kd < runs.kl_plain,
          fmt("held-out domain-B KL: lambda 0.1 %.5f, lambda 0 %.5f", runs.kl_kd, runs.kl_plain)};
}

std::string random_text(std::mt19937_64& rng) {
  static const std::u32string pool = U"가격사과의나는을모른다醫師價格加擊 \t\n　abcé😀";
  std::u32string s;
  const std::size_t n = rng() % 32;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = rng() % 6;
    if (r == 0) s.push_back(static_cast<char32_t>(0xAC00 + rng() % 11172));
    else if (r == 1) s.push_back(static_cast<char32_t>(0x4E00 + rng() % 20000));
    else s.push_back(pool[rng() % pool.size()]);
  }
  return utf8::encode(s);
}

Outcome round_trips(const RunConfig& config) {
  std::vector<std::string> failures;
  // tokenizer
  const auto v = build_vocab({"가격", "사과", "나는", "을", "의", "醫師", "價格"});
  std::mt19937_64 rng(1212);
  std::size_t tok_bad = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto text = random_text(rng);
    if (decode(encode(v, text)) != text) ++tok_bad;
  }
  if (tok_bad) failures.push_back(fmt("tokenizer %zu", tok_bad));

  // augment then strip, on corpus text
  auto small = config;
  small.synth.n_sentences = 400;
  small.synth.n_eval = 50;
  const auto data = prepare_data(small);
  std::size_t aug_bad = 0;
  for (const auto& sent : data.corpus.train) {
    const auto enc = encode(data.student_vocab, sent.text);
    for (std::size_t k : {0, 1, 2, 4, 16}) {
      if (!(strip(augment(enc, data.corpus.lexicon, data.student_vocab, {k, false, false})) == enc)) ++aug_bad;
    }
  }
  if (aug_bad) failures.push_back(fmt("augment/strip %zu", aug_bad));

  // checkpoint resume
  {
    auto cfg = fixture::tiny_config();
    auto params = init_params<float>(cfg);
    AdamState<float> opt;
    opt.config.lr = 1e-2;
    opt.reset(params.count());
    const auto mask = trainable_mask(cfg, params.layout, {});
    const std::vector<TrainExample> batch{make_example(fixture::toy_sequence())};
    InstanceQueue queue(4, 8);
    queue.push({1, 1}, fixture::random_vec(rng, 8));
    for (int s = 0; s < 3; ++s) train_step(params, batch, LossConfig{0.0}, opt, mask, nullptr);
    const auto path = kTmp / "resume.bin";
    save_checkpoint(path, params, 3, &opt, &queue);
    std::vector<double> straight, resumed;
    for (int s = 0; s < 3; ++s) straight.push_back(train_step(params, batch, LossConfig{0.0}, opt, mask, nullptr).total);
    auto ck = load_checkpoint(path, &cfg);
    for (int s = 0; s < 3; ++s) resumed.push_back(train_step(ck.params, batch, LossConfig{0.0}, *ck.optimizer, mask, nullptr).total);
    if (straight != resumed || ck.params.data != params.data || !(ck.queue && *ck.queue == queue))
      failures.push_back("checkpoint resume");
  }

  // files
  save_lexicon(data.corpus.lexicon, kTmp / "lexicon.tsv");
  if (!(load_lexicon(kTmp / "lexicon.tsv") == data.corpus.lexicon)) failures.push_back("lexicon file");
  save_vocab(data.student_vocab, kTmp / "vocab.txt");
  if (!(load_vocab(kTmp / "vocab.txt") == data.student_vocab)) failures.push_back("vocab file");
  save_annotated(data.corpus.train, kTmp / "train.jsonl");
  if (load_annotated(kTmp / "train.jsonl", &data.corpus.lexicon).sentences != data.corpus.train)
    failures.push_back("annotated corpus file");
  save_lines(data.corpus.teacher_text, kTmp / "teacher.txt");
  if (load_lines(kTmp / "teacher.txt") != data.corpus.teacher_text) failures.push_back("text corpus file");
  save_probe_items(data.corpus.probe, kTmp / "probe.jsonl");
  if (load_probe_items(kTmp / "probe.jsonl") != data.corpus.probe) failures.push_back("probe file");

  std::string bad;
  for (const auto& f : failures) bad += f + "; ";
  return {failures.empty(),
          failures.empty() ? fmt("10000 fuzzed strings, %zu augment/strip cases, checkpoint resume, lexicon/vocab/"
                                 "corpus/probe files all identical",
                                 data.corpus.train.size() * 5)
                           : "failed: " + bad};
}

}  // namespace

int main(int argc, char** argv) {
  std::setvbuf(stdout, nullptr, _IONBF, 0);
  std::filesystem::create_directories(kTmp);
  std::filesystem::path config_path = HB_DATA_DIR "/run_config.json";
  std::set<int> only, known;
  auto parse_ids = [](const std::string& list, std::set<int>& out) {
    std::istringstream is(list);
    for (std::string id; std::getline(is, id, ',');) out.insert(std::stoi(id));
  };
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg.rfind("--only=", 0) == 0) {
      parse_ids(arg.substr(7), only);
    } else if (arg.rfind("--known-fail=", 0) == 0) {
      parse_ids(arg.substr(13), known);
    } else {
      config_path = arg;
    }
  }
  const RunConfig config = load_run_config(config_path);

  int failures = 0;
  int unexpected = 0;
  int ran = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    if (!only.empty() && !only.count(id)) return;
    ++ran;
    Stopwatch sw;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    unexpected += !o.pass && !known.count(id);
    std::printf("%s criterion %2d  %-28s %s [%.1fs]%s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(),
                sw.seconds(), !o.pass && known.count(id) ? " (known failure)" : "");
  };

  report(1, "mask-rule oracle", mask_oracle);
  report(2, "loss-mask exclusivity", loss_exclusivity);
  report(3, "gradient check", gradient_check);
  report(4, "kd-loss oracle", kd_oracle);
  report(5, "lambda=0 equivalence", lambda_zero);
  report(6, "alignment properties", [&] { return alignment_properties(config); });
  std::optional<ToyRuns> runs;
  std::string run_error;
  auto with_runs = [&](auto fn) {
    return [&, fn] {
      if (!runs && run_error.empty()) {
        try {
          runs = toy_runs(config);
        } catch (const std::exception& e) {
          run_error = e.what();
        }
      }
      if (!runs) return Outcome{false, "toy training failed: " + run_error};
      return fn(*runs);
    };
  };
  report(7, "rq1 trend", with_runs([&](const ToyRuns& r) { return rq1_trend(config, r); }));
  report(8, "rollout correctness", [&] { return rollout_correctness(config); });
  report(9, "probe debias and chance", [&] { return probe_properties(config); });
  report(10, "rq2 ordering", with_runs([](const ToyRuns& r) { return rq2_ordering(r); }));
  report(11, "forgetting proxy", with_runs([](const ToyRuns& r) { return forgetting(r); }));
  report(12, "round trips", [&] { return round_trips(config); });

  std::filesystem::remove_all(kTmp);
  std::printf("%d of %d criteria failed, %d unexpected\n", failures, ran, unexpected);
  return unexpected;
}
