// hanjabridge: command-line entry point.
//
// Exit codes: 0 success, 1 usage error, 2 missing artifact, 3 numerical failure.

#include <glob.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hanjabridge/analysis.hpp"
#include "hanjabridge/checkpoint.hpp"
#include "hanjabridge/experiment.hpp"
#include "hanjabridge/kernels.hpp"
#include "hanjabridge/utf8.hpp"

namespace fs = std::filesystem;
using namespace hb;

namespace {

#ifndef HB_SAMPLE_LEXICON
#define HB_SAMPLE_LEXICON "data/sample_lexicon.tsv"
#endif

constexpr const char* kDemoSentence = "나는 사과의 가격을 모른다";

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifact(what + " not found: " + p.string());
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

std::vector<fs::path> glob_paths(const std::string& pattern) {
  glob_t g{};
  std::vector<fs::path> out;
  if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  std::sort(out.begin(), out.end());
  return out;
}

RunConfig run_config_of(const fs::path& run_dir) {
  return load_run_config(require(run_dir / "config.json", "run config"));
}

// ----- commands -----

struct GenerateArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateArgs& a) {
  RunConfig c = a.config.empty() ? nlohmann::json{{"seed", a.seed.value_or(1)}}.get<RunConfig>()
                                 : load_run_config(require(a.config, "config"));
  if (a.seed) {
    c.seed = *a.seed;
    c.synth.seed = *a.seed;
  }
  const fs::path out = a.out.empty() ? fs::path(c.out_dir) / "data" : fs::path(a.out);
  const auto data = prepare_data(c);
  save_prepared(data, out);
  std::cout << "wrote " << out.string() << ": " << data.corpus.train.size() << " train, " << data.corpus.eval.size()
            << " eval, " << data.corpus.probe.size() << " probe items, " << data.corpus.teacher_text.size()
            << " teacher sentences\n";
  return 0;
}

int cmd_lexicon_stats(const std::string& path) {
  const auto lex = load_lexicon(require(path, "lexicon"));
  const auto s = homophony_stats(lex);
  std::printf("entries\thomophonous\tratio\tmax_candidates\n%zu\t%zu\t%.4f\t%zu\n", s.entries, s.homophonous, s.ratio,
              s.max_candidates);
  return 0;
}

struct ExpandArgs {
  std::string vocab, lexicon, out, tokens;
  bool per_character = false;
};

int cmd_expand_vocab(const ExpandArgs& a) {
  const Vocab v = load_vocab(require(a.vocab, "vocab"));
  std::vector<std::string> add;
  if (!a.lexicon.empty()) {
    const auto lex = load_lexicon(require(a.lexicon, "lexicon"));
    for (const auto& [surface, entry] : lex.entries()) {
      for (const auto& c : entry.candidates) {
        if (a.per_character) {
          for (char32_t ch : utf8::decode(c.hanja)) add.push_back(utf8::encode(ch));
        } else {
          add.push_back(c.hanja);
        }
      }
    }
  }
  std::stringstream ss(a.tokens);
  for (std::string t; std::getline(ss, t, ',');) {
    if (!t.empty()) add.push_back(t);
  }
  const Vocab out = expand_vocab(v, add);
  save_vocab(out, a.out.empty() ? a.vocab : a.out);
  std::cout << "added " << out.size() - v.size() << " tokens (vocab size " << out.size() << ")\n";
  return 0;
}

struct PreviewArgs {
  std::string lexicon = HB_SAMPLE_LEXICON, vocab, text = kDemoSentence;
  std::size_t k = 2;
  bool json = false, per_character = false, unambiguous = false;
};

int cmd_augment_preview(const PreviewArgs& a) {
  const auto lex = load_lexicon(require(a.lexicon, "lexicon"));
  Vocab vocab;
  if (!a.vocab.empty()) {
    vocab = load_vocab(require(a.vocab, "vocab"));
  } else {
    std::vector<std::string> surfaces;
    for (const auto& [s, e] : lex.entries()) surfaces.push_back(s);
    vocab = build_vocab(surfaces);
  }
  std::vector<std::string> cands;
  for (const auto& [s, e] : lex.entries()) {
    for (const auto& c : e.candidates) {
      if (a.per_character) {
        for (char32_t ch : utf8::decode(c.hanja)) cands.push_back(utf8::encode(ch));
      } else {
        cands.push_back(c.hanja);
      }
    }
  }
  vocab = expand_vocab(vocab, cands);
  AugmentConfig cfg{a.k, a.unambiguous, a.per_character};
  const auto aug = augment(encode(vocab, a.text), lex, vocab, cfg);
  if (a.json) {
    std::cout << augmented_to_json(aug, vocab) << "\n";
  } else {
    std::cout << expanded_surface(aug) << "\n";
  }
  return 0;
}

struct TrainArgs {
  std::string config, out, teacher;
  std::optional<std::size_t> k, steps;
  std::optional<double> lambda;
  std::optional<std::string> freeze;
  std::optional<std::uint64_t> seed;
  bool no_distill = false, save_queue = false;
};

int cmd_train(const TrainArgs& a) {
  nlohmann::json j = nlohmann::json::parse(slurp(require(a.config, "config")));
  if (a.seed) {
    // a new seed reseeds everything that was not pinned explicitly
    j["seed"] = *a.seed;
  }
  RunConfig c = j.get<RunConfig>();
  if (a.k) c.augment.k = *a.k;
  if (a.lambda) c.lambda = *a.lambda;
  if (a.no_distill) c.distill = false;
  if (a.freeze) c.student.freeze = *a.freeze;
  if (a.steps) c.student.steps = *a.steps;
  if (!a.out.empty()) c.out_dir = a.out;
  c.validate();

  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_text(out / "config.json", nlohmann::json(c).dump(2) + "\n");
  const auto data = prepare_data(c);
  save_prepared(data, out / "data");

  Params<float> teacher;
  if (!a.teacher.empty()) {
    teacher = load_checkpoint(require(a.teacher, "teacher checkpoint")).params;
    std::cout << "loaded teacher " << a.teacher << "\n";
  } else {
    RunHooks th;
    th.metrics_path = out / "teacher_metrics.tsv";
    fs::remove(*th.metrics_path);
    teacher = train_teacher(c, data, th);
    save_checkpoint(out / "teacher.bin", teacher, c.teacher.steps);
    std::cout << "teacher trained for " << c.teacher.steps << " steps\n";
  }

  RunHooks hooks;
  hooks.metrics_path = out / "metrics.tsv";
  hooks.checkpoint_dir = out / "checkpoints";
  hooks.save_queue = a.save_queue;
  fs::remove(*hooks.metrics_path);
  fs::remove_all(*hooks.checkpoint_dir);
  const auto result = train_student(c, data, teacher, hooks);
  if (!result.metrics.empty()) {
    const auto& m = result.metrics.back();
    std::printf("student step %zu: lm=%.4f kd=%.4f total=%.4f\n", result.metrics.size(), m.lm, m.kd, m.total);
  }
  std::cout << "checkpoints: " << result.checkpoint_steps.size() << " in " << hooks.checkpoint_dir->string() << "\n";
  return 0;
}

struct Rq1Args {
  std::string run, checkpoints, score_source;
  std::size_t heatmaps = 3;
};

int cmd_eval_rq1(const Rq1Args& a) {
  const fs::path run = a.run;
  RunConfig c = run_config_of(run);
  if (!a.score_source.empty()) c.score_source = parse_score_source(a.score_source);
  const std::string pattern = a.checkpoints.empty() ? (run / "checkpoints" / "ckpt_*.bin").string() : a.checkpoints;
  const auto paths = glob_paths(pattern);
  if (paths.empty()) throw MissingArtifact("no checkpoints match " + pattern);
  const auto data = prepare_data(c);
  const auto items = rq1_items(c, data);

  std::vector<Checkpoint> loaded;
  for (const auto& p : paths) loaded.push_back(load_checkpoint(p));
  std::sort(loaded.begin(), loaded.end(), [](const Checkpoint& x, const Checkpoint& y) { return x.step < y.step; });
  std::vector<Rq1Checkpoint> cks;
  for (const auto& ck : loaded) cks.push_back({ck.step, &ck.params});
  const auto table = rq1_accuracy(items, cks, c.candidate_context, c.score_source);
  const std::string tsv = rq1_table_tsv(table);
  write_text(run / "rq1.tsv", tsv);
  std::cout << tsv;

  const auto& last = loaded.back().params;
  const auto tracer = model_tracer(last, c.candidate_context);
  std::size_t written = 0;
  for (std::size_t i = 0; i < items.size() && written < a.heatmaps; ++i) {
    if (items[i].groups.empty() || !items[i].groups.front().gold_candidate) continue;
    const fs::path p = run / "heatmaps" / ("item_" + std::to_string(i) + "_step_" + std::to_string(loaded.back().step) + ".ppm");
    fs::create_directories(p.parent_path());
    emit_heatmap(rollout(tracer(items[i])), items[i], p);
    std::cout << "heatmap " << p.string() << "\n";
    ++written;
  }
  return 0;
}

struct ProbeArgs {
  std::string run, checkpoint, probe_set, vocab, lexicon, tmpl, out;
  bool hb_inference = false, both = false, length_normalize = false;
  std::optional<std::size_t> k;
};

int cmd_probe(const ProbeArgs& a) {
  RunConfig c;
  c.seed = 1;
  fs::path checkpoint = a.checkpoint, probe_set = a.probe_set, vocab = a.vocab, lexicon = a.lexicon, out = a.out;
  if (!a.run.empty()) {
    const fs::path run = a.run;
    c = run_config_of(run);
    if (checkpoint.empty()) {
      const auto paths = glob_paths((run / "checkpoints" / "ckpt_*.bin").string());
      if (paths.empty()) throw MissingArtifact("no checkpoints in " + run.string());
      checkpoint = paths.back();
    }
    if (probe_set.empty()) probe_set = run / "data" / "probe.jsonl";
    if (vocab.empty()) vocab = run / "data" / "student_vocab.txt";
    if (lexicon.empty()) lexicon = run / "data" / "lexicon.tsv";
    if (out.empty()) out = run / "rq2.tsv";
  }
  if (checkpoint.empty() || probe_set.empty() || vocab.empty() || lexicon.empty()) {
    throw UsageError("probe needs --run or all of --checkpoint, --probe-set, --vocab, --lexicon");
  }
  if (a.k) c.augment.k = *a.k;
  if (!a.tmpl.empty()) c.probe_template = PromptTemplate::load(require(a.tmpl, "prompt template")).text;
  if (a.length_normalize) c.length_normalize = true;
  const auto ck = load_checkpoint(require(checkpoint, "checkpoint"));
  const auto items = load_probe_items(require(probe_set, "probe set"));
  const auto v = load_vocab(require(vocab, "vocab"));
  const auto lex = load_lexicon(require(lexicon, "lexicon"));
  if (v.size() != ck.params.config.vocab_size) throw UsageError("vocab size does not match the checkpoint");
  ParamsScorer scorer(ck.params);
  std::vector<std::pair<std::string, ProbeReport>> reports;
  if (a.both || !a.hb_inference) reports.emplace_back("w/o HB-inf.", probe_run(scorer, items, v, lex, probe_config(c, false)));
  if (a.both || a.hb_inference) reports.emplace_back("w/ HB-inf.", probe_run(scorer, items, v, lex, probe_config(c, true)));
  const std::string tsv = probe_report_tsv(reports);
  if (!out.empty()) write_text(out, tsv);
  std::cout << tsv;
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path run = run_dir;
  if (!fs::is_directory(run)) throw MissingArtifact("run directory not found: " + run.string());
  const fs::path metrics = run / "metrics.tsv";
  if (!fs::exists(run / "config.json") || !fs::exists(metrics)) {
    throw MissingArtifact("run directory " + run.string() + " has no config.json / metrics.tsv");
  }
  std::ostringstream md;
  md << "# Run report: " << run.string() << "\n\n";
  const auto config = nlohmann::json::parse(slurp(run / "config.json"));
  md << "k = " << config["augment"]["k"] << ", distillation " << (config["distill"]["enabled"].get<bool>() ? "on" : "off")
     << " (lambda " << config["distill"]["lambda"] << "), freeze = " << config["student"]["freeze"] << ", steps = "
     << config["student"]["steps"] << "\n\n";
  std::ifstream in(metrics);
  std::string line, last;
  std::size_t rows = 0;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (!line.empty()) {
      last = line;
      ++rows;
    }
  }
  md << "## Training\n\n" << rows << " logged steps. Last row (step, lm, kd, total, grad_norm, lm_positions, kd_positions):\n\n    "
     << last << "\n\n";
  const auto ckpts = glob_paths((run / "checkpoints" / "ckpt_*.bin").string());
  md << "Checkpoints: " << ckpts.size() << "\n\n";
  if (fs::exists(run / "rq1.tsv")) md << "## Candidate-focus accuracy (rollout)\n\n```\n" << slurp(run / "rq1.tsv") << "```\n\n";
  if (fs::exists(run / "rq2.tsv")) md << "## Multiple-choice Hanja probe\n\n```\n" << slurp(run / "rq2.tsv") << "```\n\n";
  const auto heatmaps = glob_paths((run / "heatmaps" / "*.ppm").string());
  if (!heatmaps.empty()) {
    md << "## Heatmaps\n\n";
    for (const auto& h : heatmaps) md << "- " << h.string() << "\n";
    md << "\n";
  }
  write_text(run / "report.md", md.str());
  std::cout << md.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HanjaBridge: Hanja-candidate augmentation, distillation and analysis harnesses"};
  app.require_subcommand(1);
  std::string simd;
  app.add_option("--simd", simd, "kernel ISA: scalar|avx2|neon|auto (default: HANJABRIDGE_SIMD or auto)");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "generate the synthetic corpus, lexicon and tokenizers");
  g->add_option("--config", gen.config, "run config JSON");
  g->add_option("--out", gen.out, "output directory (default <out_dir>/data)");
  g->add_option("--seed", gen.seed, "seed override");

  std::string lex_path;
  auto* ls = app.add_subcommand("lexicon-stats", "homophony summary of a lexicon as TSV");
  ls->add_option("--lexicon", lex_path, "lexicon TSV")->required();

  ExpandArgs ex;
  auto* ev = app.add_subcommand("expand-vocab", "append Hanja candidates (or listed tokens) to a vocab file");
  ev->add_option("--vocab", ex.vocab, "vocab file")->required();
  ev->add_option("--lexicon", ex.lexicon, "take every candidate of this lexicon");
  ev->add_option("--tokens", ex.tokens, "comma-separated extra tokens");
  ev->add_option("--out", ex.out, "output path (default: overwrite --vocab)");
  ev->add_flag("--per-character", ex.per_character, "add candidate characters instead of whole candidates");

  PreviewArgs pv;
  auto* ap = app.add_subcommand("augment-preview", "print the in-line expanded form of a sentence");
  ap->add_option("--lexicon", pv.lexicon, "lexicon TSV (default: bundled sample)");
  ap->add_option("--vocab", pv.vocab, "vocab file (default: built from the lexicon)");
  ap->add_option("--text", pv.text, "sentence to expand");
  ap->add_option("--k", pv.k, "max candidates per group");
  ap->add_flag("--json", pv.json, "print the JSON debug dump");
  ap->add_flag("--per-character", pv.per_character, "one token per candidate character");
  ap->add_flag("--augment-unambiguous", pv.unambiguous, "also expand single-candidate entries");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the teacher, then the selected student variant");
  t->add_option("--config", tr.config, "run config JSON")->required();
  t->add_option("--out", tr.out, "run directory (overrides out_dir)");
  t->add_option("--k", tr.k, "max Hanja candidates per group (0 disables augmentation)");
  t->add_option("--lambda", tr.lambda, "distillation weight");
  t->add_flag("--no-distill", tr.no_distill, "train without the distillation term");
  t->add_option("--freeze", tr.freeze, "frozen groups, e.g. embeddings,blocks:0-1,head or none");
  t->add_option("--steps", tr.steps, "student steps");
  t->add_option("--seed", tr.seed, "seed override");
  t->add_option("--teacher", tr.teacher, "reuse a teacher checkpoint instead of pretraining one");
  t->add_flag("--save-queue", tr.save_queue, "store the instance queue in each checkpoint");

  Rq1Args rq;
  auto* r1 = app.add_subcommand("eval-rq1", "rollout candidate-focus accuracy across checkpoints");
  r1->add_option("--run", rq.run, "run directory")->required();
  r1->add_option("--checkpoints", rq.checkpoints, "checkpoint glob (default <run>/checkpoints/ckpt_*.bin)");
  r1->add_option("--score-source", rq.score_source, "final_original|anchor|mean_original");
  r1->add_option("--heatmaps", rq.heatmaps, "number of heatmaps to write for the last checkpoint");

  ProbeArgs pa;
  auto* pr = app.add_subcommand("probe", "multiple-choice Hanja probe with position debiasing");
  pr->add_option("--run", pa.run, "run directory (fills the defaults below)");
  pr->add_option("--checkpoint", pa.checkpoint, "checkpoint (default: last of the run)");
  pr->add_option("--probe-set", pa.probe_set, "probe items JSONL");
  pr->add_option("--vocab", pa.vocab, "student vocab");
  pr->add_option("--lexicon", pa.lexicon, "lexicon TSV");
  pr->add_option("--template", pa.tmpl, "prompt template file");
  pr->add_option("--k", pa.k, "candidates per group in HB-inference mode");
  pr->add_option("--out", pa.out, "report TSV path");
  pr->add_flag("--hb-inference", pa.hb_inference, "augment prompts before scoring");
  pr->add_flag("--both", pa.both, "report both inference modes");
  pr->add_flag("--length-normalize", pa.length_normalize, "divide option log-likelihoods by token count");

  std::string report_dir;
  auto* rp = app.add_subcommand("report", "consolidated report of a run directory");
  rp->add_option("--run", report_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (!simd.empty()) kernels::select(simd);
    if (g->parsed()) return cmd_generate(gen);
    if (ls->parsed()) return cmd_lexicon_stats(lex_path);
    if (ev->parsed()) return cmd_expand_vocab(ex);
    if (ap->parsed()) return cmd_augment_preview(pv);
    if (t->parsed()) return cmd_train(tr);
    if (r1->parsed()) return cmd_eval_rq1(rq);
    if (pr->parsed()) return cmd_probe(pa);
    if (rp->parsed()) return cmd_report(report_dir);
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
