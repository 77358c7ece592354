#include "hanjabridge/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "hanjabridge/checkpoint.hpp"
#include "hanjabridge/parallel.hpp"

namespace hb {

// ----- config -----

void RunConfig::validate() const {
  model.validate();
  synth.validate();
  distill_config.validate();
  if (lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
  if (teacher.batch_size == 0 || student.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (model.projection_dim != 0 && model.projection_dim != model.d_model) {
    throw std::invalid_argument("projection_dim must equal the teacher width (d_model) when set");
  }
  PromptTemplate{probe_template}.validate();
  if (new_row_init != "pieces" && new_row_init != "random") throw std::invalid_argument("vocab.new_row_init must be pieces or random");
  FreezeSpec::parse(student.freeze);
  FreezeSpec::parse(teacher.freeze);
}

namespace {

template <typename T>
void opt(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
      throw std::invalid_argument("unknown config key '" + where + it.key() + "'");
    }
  }
}

nlohmann::json schedule_json(const Schedule& s) {
  return {{"steps", s.steps},
          {"batch_size", s.batch_size},
          {"checkpoint_interval", s.checkpoint_interval},
          {"lr", s.adam.lr},
          {"beta1", s.adam.beta1},
          {"beta2", s.adam.beta2},
          {"eps", s.adam.eps},
          {"grad_clip", s.adam.grad_clip},
          {"freeze", s.freeze}};
}

void schedule_from(const nlohmann::json& j, Schedule& s, const std::string& where) {
  reject_unknown(j, {"steps", "batch_size", "checkpoint_interval", "lr", "beta1", "beta2", "eps", "grad_clip", "freeze"},
                 where);
  opt(j, "steps", s.steps);
  opt(j, "batch_size", s.batch_size);
  opt(j, "checkpoint_interval", s.checkpoint_interval);
  opt(j, "lr", s.adam.lr);
  opt(j, "beta1", s.adam.beta1);
  opt(j, "beta2", s.adam.beta2);
  opt(j, "eps", s.adam.eps);
  opt(j, "grad_clip", s.adam.grad_clip);
  opt(j, "freeze", s.freeze);
}

}  // namespace

void to_json(nlohmann::json& j, const RunConfig& c) {
  const auto& s = c.synth;
  j = nlohmann::json{
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"model", c.model},
      {"synth",
       {{"n_homophones", s.n_homophones},
        {"senses_per_homophone", s.senses_per_homophone},
        {"n_cue_words_per_sense", s.n_cue_words_per_sense},
        {"n_filler_words", s.n_filler_words},
        {"n_syllables", s.n_syllables},
        {"n_sentences", s.n_sentences},
        {"n_eval", s.n_eval},
        {"n_probe", s.n_probe},
        {"n_teacher_a", s.n_teacher_a},
        {"teacher_inline_hanja", s.teacher_inline_hanja},
        {"inline_open", s.inline_open},
        {"inline_close", s.inline_close},
        {"n_domain_b_words", s.n_domain_b_words},
        {"n_domain_b", s.n_domain_b},
        {"n_domain_b_heldout", s.n_domain_b_heldout},
        {"domain_b_hanja", s.domain_b_hanja},
        {"prefix_words", s.prefix_words},
        {"suffix_words", s.suffix_words},
        {"seed", s.seed}}},
      {"augment",
       {{"k", c.augment.k},
        {"augment_unambiguous", c.augment.augment_unambiguous},
        {"per_character_tokens", c.augment.per_character_tokens},
        {"candidate_context", c.candidate_context == CandidateContext::prefix ? "prefix" : "anchor_only"}}},
      {"distill",
       {{"enabled", c.distill},
        {"lambda", c.lambda},
        {"tau_teacher", c.distill_config.tau_teacher},
        {"tau_student", c.distill_config.tau_student},
        {"queue_capacity", c.distill_config.queue_capacity},
        {"normalize", c.distill_config.normalize},
        {"teacher_layer", c.distill_config.teacher_layer}}},
      {"vocab", {{"new_row_init", c.new_row_init}}},
      {"reduction", c.reduction == Reduction::mean ? "mean" : "sum"},
      {"teacher", schedule_json(c.teacher)},
      {"student", schedule_json(c.student)},
      {"probe", {{"template", c.probe_template}, {"length_normalize", c.length_normalize}}},
      {"analysis", {{"score_source", to_string(c.score_source)}}},
  };
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  c = RunConfig{};
  reject_unknown(j, {"seed", "out_dir", "model", "synth", "augment", "distill", "vocab", "reduction", "teacher", "student", "probe", "analysis"}, "");
  if (!j.contains("seed")) throw std::invalid_argument("config: 'seed' is mandatory");
  j.at("seed").get_to(c.seed);
  opt(j, "out_dir", c.out_dir);
  c.model.seed = c.seed;
  c.synth.seed = c.seed;
  if (j.contains("model")) {
    const std::uint64_t model_seed = j["model"].value("seed", c.seed);
    c.model = j["model"].get<ModelConfig>();
    c.model.seed = model_seed;
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    reject_unknown(s, {"n_homophones", "senses_per_homophone", "n_cue_words_per_sense", "n_filler_words", "n_syllables", "n_sentences",
                       "n_eval", "n_probe", "n_teacher_a", "teacher_inline_hanja", "inline_open", "inline_close", "n_domain_b_words", "n_domain_b",
                       "n_domain_b_heldout", "domain_b_hanja", "prefix_words", "suffix_words", "seed"},
                   "synth.");
    opt(s, "n_homophones", c.synth.n_homophones);
    opt(s, "senses_per_homophone", c.synth.senses_per_homophone);
    opt(s, "n_cue_words_per_sense", c.synth.n_cue_words_per_sense);
    opt(s, "n_filler_words", c.synth.n_filler_words);
    opt(s, "n_syllables", c.synth.n_syllables);
    opt(s, "n_sentences", c.synth.n_sentences);
    opt(s, "n_eval", c.synth.n_eval);
    opt(s, "n_probe", c.synth.n_probe);
    opt(s, "n_teacher_a", c.synth.n_teacher_a);
    opt(s, "teacher_inline_hanja", c.synth.teacher_inline_hanja);
    opt(s, "inline_open", c.synth.inline_open);
    opt(s, "inline_close", c.synth.inline_close);
    opt(s, "n_domain_b_words", c.synth.n_domain_b_words);
    opt(s, "n_domain_b", c.synth.n_domain_b);
    opt(s, "n_domain_b_heldout", c.synth.n_domain_b_heldout);
    opt(s, "domain_b_hanja", c.synth.domain_b_hanja);
    opt(s, "prefix_words", c.synth.prefix_words);
    opt(s, "suffix_words", c.synth.suffix_words);
    opt(s, "seed", c.synth.seed);
  }
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    reject_unknown(a, {"k", "augment_unambiguous", "per_character_tokens", "candidate_context"}, "augment.");
    opt(a, "k", c.augment.k);
    opt(a, "augment_unambiguous", c.augment.augment_unambiguous);
    opt(a, "per_character_tokens", c.augment.per_character_tokens);
    const std::string ctx = a.value("candidate_context", std::string("prefix"));
    if (ctx == "prefix") {
      c.candidate_context = CandidateContext::prefix;
    } else if (ctx == "anchor_only") {
      c.candidate_context = CandidateContext::anchor_only;
    } else {
      throw std::invalid_argument("augment.candidate_context must be prefix or anchor_only");
    }
  }
  if (j.contains("distill")) {
    const auto& d = j["distill"];
    reject_unknown(d, {"enabled", "lambda", "tau_teacher", "tau_student", "queue_capacity", "normalize", "teacher_layer"},
                   "distill.");
    opt(d, "enabled", c.distill);
    opt(d, "lambda", c.lambda);
    opt(d, "tau_teacher", c.distill_config.tau_teacher);
    opt(d, "tau_student", c.distill_config.tau_student);
    opt(d, "queue_capacity", c.distill_config.queue_capacity);
    opt(d, "normalize", c.distill_config.normalize);
    opt(d, "teacher_layer", c.distill_config.teacher_layer);
  }
  if (j.contains("vocab")) {
    const auto& v = j["vocab"];
    reject_unknown(v, {"new_row_init"}, "vocab.");
    opt(v, "new_row_init", c.new_row_init);
  }
  if (j.contains("reduction")) {
    const std::string r = j["reduction"];
    if (r != "mean" && r != "sum") throw std::invalid_argument("reduction must be mean or sum");
    c.reduction = r == "mean" ? Reduction::mean : Reduction::sum;
  }
  if (j.contains("teacher")) schedule_from(j["teacher"], c.teacher, "teacher.");
  if (j.contains("student")) schedule_from(j["student"], c.student, "student.");
  if (j.contains("probe")) {
    const auto& p = j["probe"];
    reject_unknown(p, {"template", "length_normalize"}, "probe.");
    opt(p, "template", c.probe_template);
    opt(p, "length_normalize", c.length_normalize);
  }
  if (j.contains("analysis")) {
    const auto& a = j["analysis"];
    reject_unknown(a, {"score_source"}, "analysis.");
    if (a.contains("score_source")) c.score_source = parse_score_source(a["score_source"].get<std::string>());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return nlohmann::json::parse(in).get<RunConfig>();
}

// ----- data -----

PreparedData prepare_data(const RunConfig& config) {
  PreparedData d;
  d.corpus = generate(config.synth);
  d.teacher_vocab = teacher_vocab(d.corpus);
  d.student_vocab = student_vocab(d.corpus);
  return d;
}

void save_prepared(const PreparedData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_lexicon(data.corpus.lexicon, dir / "lexicon.tsv");
  save_vocab(data.teacher_vocab, dir / "teacher_vocab.txt");
  save_vocab(data.student_vocab, dir / "student_vocab.txt");
  save_annotated(data.corpus.train, dir / "train.jsonl");
  save_lines(texts(data.corpus.train), dir / "train.txt");
  save_annotated(data.corpus.eval, dir / "eval.jsonl");
  save_probe_items(data.corpus.probe, dir / "probe.jsonl");
  save_lines(data.corpus.teacher_text, dir / "teacher.txt");
  save_lines(data.corpus.domain_b_heldout, dir / "domain_b_heldout.txt");
}

// ----- metrics -----

MetricsLog::MetricsLog(std::filesystem::path path) : path_(std::move(path)) {
  if (!path_.parent_path().empty()) std::filesystem::create_directories(path_.parent_path());
  if (!std::filesystem::exists(path_) || std::filesystem::file_size(path_) == 0) {
    std::ofstream out(path_, std::ios::app);
    out << header();
  }
}

std::string MetricsLog::header() { return "step\tlm\tkd\ttotal\tgrad_norm\tlm_positions\tkd_positions\n"; }

std::string MetricsLog::format(std::uint64_t step, const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu\t%.9g\t%.9g\t%.9g\t%.9g\t%zu\t%zu\n", static_cast<unsigned long long>(step), m.lm,
                m.kd, m.total, m.grad_norm, m.lm_positions, m.kd_positions);
  return buf;
}

void MetricsLog::append(std::uint64_t step, const StepMetrics& m) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path_.string());
  out << format(step, m);
}

// ----- training -----

namespace {

// Epoch-shuffled index stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = n;
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (cursor_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
};

Encoding truncated(Encoding enc, std::size_t max_len) {
  if (enc.ids.size() > max_len) {
    enc.ids.resize(max_len);
    enc.spans.resize(max_len);
  }
  return enc;
}

void maybe_checkpoint(const RunHooks& hooks, const Schedule& schedule, std::uint64_t step, const Params<float>& params,
                      const AdamState<float>& opt, const InstanceQueue* queue, std::vector<std::uint64_t>* steps) {
  const bool due = step == schedule.steps || (schedule.checkpoint_interval && step % schedule.checkpoint_interval == 0);
  if (!due) return;
  if (steps) steps->push_back(step);
  if (hooks.checkpoint_dir) {
    char name[64];
    std::snprintf(name, sizeof name, "ckpt_%06llu.bin", static_cast<unsigned long long>(step));
    save_checkpoint(*hooks.checkpoint_dir / name, params, step, &opt, hooks.save_queue ? queue : nullptr);
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(step, params);
}

}  // namespace

Params<float> train_teacher(const RunConfig& config, const PreparedData& data, const RunHooks& hooks) {
  ModelConfig mc = config.model;
  mc.vocab_size = data.teacher_vocab.size();
  mc.projection_dim = 0;
  auto params = init_params<float>(mc);

  std::vector<TrainExample> examples;
  for (const auto& text : data.corpus.teacher_text) {
    auto enc = truncated(encode(data.teacher_vocab, text), mc.max_positions);
    if (enc.ids.size() < 2) continue;
    examples.push_back(make_example(unaugmented(enc)));
  }
  if (examples.empty() && config.teacher.steps) throw TrainError("teacher corpus is empty");

  AdamState<float> opt;
  opt.config = config.teacher.adam;
  opt.reset(params.count());
  const auto trainable = trainable_mask(mc, params.layout, FreezeSpec::parse(config.teacher.freeze));
  LossConfig loss{0.0, config.reduction};
  std::optional<MetricsLog> log;
  if (hooks.metrics_path) log.emplace(*hooks.metrics_path);
  BatchSampler sampler(examples.size(), config.seed * 1000003ULL + 11);
  maybe_checkpoint(hooks, config.teacher, 0, params, opt, nullptr, nullptr);
  for (std::uint64_t step = 1; step <= config.teacher.steps; ++step) {
    std::vector<TrainExample> batch;
    for (auto i : sampler.next(config.teacher.batch_size)) batch.push_back(examples[i]);
    const auto m = train_step(params, batch, loss, opt, trainable, nullptr);
    if (log) log->append(step, m);
    if (hooks.on_step) hooks.on_step(step, params, m);
    maybe_checkpoint(hooks, config.teacher, step, params, opt, nullptr, nullptr);
  }
  return params;
}

StudentResult train_student(const RunConfig& config, const PreparedData& data, const Params<float>& teacher,
                            const RunHooks& hooks) {
  config.validate();
  const std::size_t teacher_vocab_size = data.teacher_vocab.size();
  if (teacher.config.vocab_size != teacher_vocab_size) throw TrainError("teacher checkpoint does not match the teacher vocab");
  StudentResult result;
  result.params = grow_vocab(teacher, data.student_vocab.size(), config.seed * 7919ULL + 3);
  if (config.new_row_init == "pieces") {
    for (std::size_t id = teacher_vocab_size; id < data.student_vocab.size(); ++id) {
      const Encoding pieces = encode(data.teacher_vocab, data.student_vocab.token(static_cast<TokenId>(id)));
      if (!pieces.ids.empty()) init_row_from_pieces(result.params, static_cast<TokenId>(id), std::span<const TokenId>(pieces.ids));
    }
  }
  if (config.model.projection_dim) result.params = with_projection(result.params, config.model.projection_dim, config.seed + 5);
  auto& params = result.params;
  const std::size_t max_len = params.config.max_positions;

  const bool use_teacher = config.distill;
  std::vector<TrainExample> examples;
  examples.reserve(data.corpus.train.size());
  for (std::size_t i = 0; i < data.corpus.train.size(); ++i) {
    const auto& text = data.corpus.train[i].text;
    const Encoding enc = encode(data.student_vocab, text);
    auto aug = augment(enc, data.corpus.lexicon, data.student_vocab, config.augment);
    if (aug.ids.size() > max_len) throw TrainError("augmented sequence longer than max_positions: " + text);
    if (aug.original_positions.size() < 2) continue;
    TrainExample ex = make_example(std::move(aug), config.candidate_context);
    if (use_teacher) {
      const Encoding tenc = encode(data.teacher_vocab, text);
      if (tenc.ids.size() > teacher.config.max_positions) throw TrainError("teacher sequence too long: " + text);
      TrainExample::Teacher t;
      t.alignment = align(enc, tenc);
      t.states.sequence = i;
      ex.teacher = std::move(t);
    }
    examples.push_back(std::move(ex));
  }
  if (examples.empty() && config.student.steps) throw TrainError("student corpus is empty");

  // The teacher is frozen, so its states are a pure function of the sentence: compute once.
  if (use_teacher) {
    parallel_for(examples.size(), [&](std::size_t e) {
      auto& t = *examples[e].teacher;
      const std::uint64_t sentence = t.states.sequence;
      const Encoding tenc = encode(data.teacher_vocab, data.corpus.train[sentence].text);
      t.states = teacher_forward(teacher, std::span<const TokenId>(tenc.ids), sentence, config.distill_config.teacher_layer);
    });
  }

  InstanceQueue queue(config.distill_config.queue_capacity, teacher.config.d_model);
  DistillContext dctx{&queue, config.distill_config};
  const DistillContext* distill = config.distill ? &dctx : nullptr;
  LossConfig loss{config.distill ? config.lambda : 0.0, config.reduction};

  FreezeSpec freeze = FreezeSpec::parse(config.student.freeze);
  freeze.trainable_rows_from = teacher_vocab_size;
  const auto trainable = trainable_mask(params.config, params.layout, freeze);
  AdamState<float> opt;
  opt.config = config.student.adam;
  opt.reset(params.count());

  std::optional<MetricsLog> log;
  if (hooks.metrics_path) log.emplace(*hooks.metrics_path);
  BatchSampler sampler(examples.size(), config.seed * 1000003ULL + 29);
  maybe_checkpoint(hooks, config.student, 0, params, opt, &queue, &result.checkpoint_steps);
  for (std::uint64_t step = 1; step <= config.student.steps; ++step) {
    std::vector<TrainExample> batch;
    for (auto i : sampler.next(config.student.batch_size)) batch.push_back(examples[i]);
    StepMetrics m;
    try {
      m = train_step(params, batch, loss, opt, trainable, distill);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " [student step " + std::to_string(step) + "]");
    }
    if (use_teacher) {
      std::vector<TeacherStates> states;
      std::vector<AlignmentMap> maps;
      for (const auto& ex : batch) {
        states.push_back(ex.teacher->states);
        maps.push_back(ex.teacher->alignment);
      }
      enqueue_batch(queue, states, maps);
    }
    result.metrics.push_back(m);
    if (log) log->append(step, m);
    if (hooks.on_step) hooks.on_step(step, params, m);
    maybe_checkpoint(hooks, config.student, step, params, opt, &queue, &result.checkpoint_steps);
  }
  return result;
}

std::vector<AugmentedSequence> rq1_items(const RunConfig& config, const PreparedData& data) {
  std::vector<AugmentedSequence> items;
  for (const auto& sent : data.corpus.eval) {
    const auto aug = augment(encode(data.student_vocab, sent.text), data.corpus.lexicon, data.student_vocab, config.augment);
    items.push_back(label_gold(aug, gold_annotations(sent)).sequence);
  }
  return items;
}

double forgetting_kl(const Params<float>& teacher, const Params<float>& student, const PreparedData& data) {
  const std::size_t vt = teacher.config.vocab_size, vs = student.config.vocab_size;
  std::vector<double> sums(data.corpus.domain_b_heldout.size(), 0.0);
  std::vector<std::size_t> counts(sums.size(), 0);
  parallel_for(sums.size(), [&](std::size_t s) {
    const auto& text = data.corpus.domain_b_heldout[s];
    const auto tids = encode(data.teacher_vocab, text).ids;
    const auto sids = encode(data.student_vocab, text).ids;
    if (tids != sids) throw std::logic_error("domain-B text tokenizes differently for teacher and student: " + text);
    if (tids.empty()) return;
    const auto mask = AttentionMask::causal(tids.size());
    const auto zt = forward(teacher, std::span<const TokenId>(tids), mask).logits;
    const auto zs = forward(student, std::span<const TokenId>(sids), mask).logits;
    for (std::size_t t = 0; t < tids.size(); ++t) {
      const float* a = zt.data() + t * vt;
      const float* b = zs.data() + t * vs;
      const double ma = *std::max_element(a, a + vt), mb = *std::max_element(b, b + vt);
      double za = 0.0, zb = 0.0;
      for (std::size_t v = 0; v < vt; ++v) {
        za += std::exp(a[v] - ma);
        zb += std::exp(b[v] - mb);
      }
      const double la = ma + std::log(za), lb = mb + std::log(zb);
      double kl = 0.0;
      for (std::size_t v = 0; v < vt; ++v) {
        const double lpa = a[v] - la, lpb = b[v] - lb;
        kl += std::exp(lpa) * (lpa - lpb);
      }
      sums[s] += kl;
      ++counts[s];
    }
  });
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < sums.size(); ++s) {
    total += sums[s];
    n += counts[s];
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

ProbeConfig probe_config(const RunConfig& config, bool hb_inference) {
  ProbeConfig p;
  p.tmpl.text = config.probe_template;
  p.hb_inference = hb_inference;
  p.augment = config.augment;
  p.context = config.candidate_context;
  p.length_normalize = config.length_normalize;
  return p;
}

}  // namespace hb
