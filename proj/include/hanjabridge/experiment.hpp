#pragma once

// End-to-end runs: synthetic data, teacher pretraining, student continual pretraining with
// HanjaBridge augmentation and distillation, and the metrics both analyses need.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hanjabridge/analysis.hpp"
#include "hanjabridge/augment.hpp"
#include "hanjabridge/corpus.hpp"
#include "hanjabridge/distill.hpp"
#include "hanjabridge/model.hpp"
#include "hanjabridge/probe.hpp"
#include "hanjabridge/train.hpp"

namespace hb {

struct Schedule {
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
  AdamConfig adam;
  std::string freeze = "none";
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  ModelConfig model;  // vocab_size is derived from the tokenizers
  SynthConfig synth;
  // New vocabulary rows: "pieces" starts them from the teacher's rows for the sub-words they
  // replace, "random" from N(0, 0.02).
  std::string new_row_init = "pieces";
  AugmentConfig augment{8, false, false};
  CandidateContext candidate_context = CandidateContext::prefix;
  bool distill = true;
  double lambda = 0.1;
  DistillConfig distill_config;
  Reduction reduction = Reduction::mean;
  Schedule teacher;
  Schedule student;
  std::string probe_template = "{options} {context} {surface}";
  bool length_normalize = false;
  ScoreSource score_source = ScoreSource::final_original;

  // Seeds of the model and the corpus follow `seed` unless set explicitly in the JSON.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

struct PreparedData {
  SynthCorpus corpus;
  Vocab teacher_vocab;
  Vocab student_vocab;
};

PreparedData prepare_data(const RunConfig& config);
void save_prepared(const PreparedData& data, const std::filesystem::path& dir);

// Append-only metrics log: step, lm, kd, total, grad_norm, lm_positions, kd_positions.
class MetricsLog {
 public:
  explicit MetricsLog(std::filesystem::path path);
  void append(std::uint64_t step, const StepMetrics& m);
  static std::string header();
  static std::string format(std::uint64_t step, const StepMetrics& m);

 private:
  std::filesystem::path path_;
};

struct RunHooks {
  std::optional<std::filesystem::path> metrics_path;
  std::optional<std::filesystem::path> checkpoint_dir;  // ckpt_<step>.bin
  bool save_queue = false;
  // Called after every step with the updated parameters.
  std::function<void(std::uint64_t, const Params<float>&, const StepMetrics&)> on_step;
  std::function<void(std::uint64_t, const Params<float>&)> on_checkpoint;
};

// Plain causal pretraining on the teacher text.
Params<float> train_teacher(const RunConfig& config, const PreparedData& data, const RunHooks& hooks = {});

struct StudentResult {
  Params<float> params;
  std::vector<StepMetrics> metrics;
  std::vector<std::uint64_t> checkpoint_steps;
};

// Student = teacher with the vocabulary grown to the student tokenizer, trained on the plain
// domain-A text. `teacher` is only read.
StudentResult train_student(const RunConfig& config, const PreparedData& data, const Params<float>& teacher,
                            const RunHooks& hooks = {});

// Eval sentences augmented with config.augment and gold-labeled.
std::vector<AugmentedSequence> rq1_items(const RunConfig& config, const PreparedData& data);

// Mean per-position KL(p_teacher || p_student) on held-out domain-B text. The student's
// distribution is restricted to the teacher's token ids and renormalized.
double forgetting_kl(const Params<float>& teacher, const Params<float>& student, const PreparedData& data);

ProbeConfig probe_config(const RunConfig& config, bool hb_inference);

}  // namespace hb
