#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hanjabridge/augment.hpp"
#include "hanjabridge/distill.hpp"
#include "hanjabridge/model.hpp"

namespace hb {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss or gradient stopped being finite.
class NumericError : public TrainError {
 public:
  using TrainError::TrainError;
};

// Which parameter groups stay fixed. Text form: comma-separated "embeddings", "blocks:I-J", "blocks:*"
// (or "blocks:I"), "final_norm", "head", "projection", "all"; "none" or "" freezes nothing.
// Rows of the token embedding and of the LM head at or beyond `trainable_rows_from` stay
// trainable even when their group is frozen (the newly expanded vocabulary).
struct FreezeSpec {
  bool embeddings = false;
  std::vector<std::size_t> blocks;
  bool final_norm = false;
  bool head = false;
  bool projection = false;
  std::optional<std::size_t> trainable_rows_from;

  static FreezeSpec parse(const std::string& text);
  static FreezeSpec all(const ModelConfig& config);
  std::string to_string() const;
  bool freezes_anything() const;
};

// 1 for trainable entries of the flat parameter vector.
std::vector<std::uint8_t> trainable_mask(const ModelConfig& config, const ParamLayout& layout, const FreezeSpec& spec);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<T> m, v;
  std::uint64_t step = 0;

  void reset(std::size_t n) {
    m.assign(n, T(0));
    v.assign(n, T(0));
    step = 0;
  }
};

struct LossConfig {
  double lambda = 0.1;  // weight of the distillation term
  Reduction reduction = Reduction::mean;
};

// One training sequence. `teacher` is only consulted when distillation is active.
struct TrainExample {
  AugmentedSequence aug;
  AttentionMask mask;
  LmTargets targets;  // normally next_original_targets(aug)
  struct Teacher {
    TeacherStates states;
    AlignmentMap alignment;  // student source index -> teacher position
  };
  std::optional<Teacher> teacher;
};

TrainExample make_example(AugmentedSequence aug, CandidateContext context = CandidateContext::prefix);

struct DistillContext {
  const InstanceQueue* queue = nullptr;
  DistillConfig config;
};

struct StepMetrics {
  double lm = 0.0;
  double kd = 0.0;
  double total = 0.0;
  std::size_t lm_positions = 0;
  std::size_t kd_positions = 0;
  double grad_norm = 0.0;
};

// L_total = L_LM + lambda * L_KD over the batch, with L_LM averaged over all contributing positions
// and L_KD over all aligned positions of the batch. Fills `grad` (size params.count()).
// lambda == 0 or a null distill context disables the distillation term entirely.
template <typename T>
StepMetrics compute_loss_and_grad(const Params<T>& params, const std::vector<TrainExample>& batch,
                                  const LossConfig& loss, const DistillContext* distill, std::vector<T>* grad);

// One optimizer step. Frozen entries (mask == 0) are never written. Throws TrainError on a
// non-finite loss.
template <typename T>
StepMetrics train_step(Params<T>& params, const std::vector<TrainExample>& batch, const LossConfig& loss,
                       AdamState<T>& optimizer, const std::vector<std::uint8_t>& trainable,
                       const DistillContext* distill);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// three_point: (f(x+e) - f(x-e)) / 2e.  five_point adds the +-2e terms, which cancels the e^2
// truncation error; the low distillation temperatures make that error visible at e = 1e-4.
enum class Stencil { three_point, five_point };

// Central finite differences over every trainable entry (or every `stride`-th one).
// Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const Params<double>& params, const std::vector<TrainExample>& batch,
                           const LossConfig& loss, const DistillContext* distill,
                           const std::vector<std::uint8_t>& trainable, double epsilon = 1e-4,
                           std::size_t stride = 1, double floor = 1e-6,
                           Stencil stencil = Stencil::three_point);

}  // namespace hb
