#pragma once

// Queue-based contrastive token-level distillation from a frozen teacher.
//
// For an aligned original position i with teacher vector zT and student vector zS, the reference
// set is D+ = {zT} followed by the queue contents D. Both vectors are scored against every member
// of D+ with a temperature softmax (teacher tau_T, student tau_S), and the student minimises the
// cross-entropy  -sum_j pT(j) log pS(j), averaged over the aligned positions of the mini-batch.
// Teacher vectors and queue entries are constants: gradients reach only the student states.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hanjabridge/model.hpp"
#include "hanjabridge/tokenizer.hpp"

namespace hb {

class DistillError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DistillConfig {
  double tau_teacher = 0.01;
  double tau_student = 0.2;
  std::size_t queue_capacity = 4096;
  bool normalize = true;
  // Which teacher state to distil: -1 is the normalized final state fed to the LM head,
  // l >= 0 is the residual stream after block l.
  int teacher_layer = -1;

  void validate() const;
};

// (sequence, teacher position) identity of a teacher vector.
struct QueueKey {
  std::uint64_t sequence = 0;
  std::uint32_t position = 0;

  bool operator==(const QueueKey&) const = default;
};

// Per-position hidden vectors produced by a teacher forward pass. Only this type can feed the
// queue, so the queue never holds student outputs.
struct TeacherStates {
  std::uint64_t sequence = 0;
  std::size_t dim = 0;
  std::vector<std::vector<double>> vectors;

  std::size_t size() const { return vectors.size(); }
};

class InstanceQueue {
 public:
  enum class Source { teacher };

  struct Entry {
    QueueKey key;
    Source source = Source::teacher;
    std::vector<double> vector;
  };

  InstanceQueue(std::size_t capacity, std::size_t dim);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<Entry>& entries() const { return entries_; }

  // Appends, evicting the oldest entries so the size never exceeds capacity.
  void push(const QueueKey& key, std::span<const double> teacher_vector);

  bool operator==(const InstanceQueue& o) const;

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::deque<Entry> entries_;
};

// Student original-token index -> teacher representative position.
struct AlignmentMap {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> skipped;
};

// For every student token the covering teacher tokens must tile its span exactly; the last of them
// is the representative. Anything else is skipped. Throws DistillError if the texts differ.
AlignmentMap align(const Encoding& student, const Encoding& teacher);

// p(j) = softmax_j(z . d_j / tau) over `reference` (L2-normalized first when normalize is set).
std::vector<double> sim_distribution(std::span<const double> z,
                                     const std::vector<std::span<const double>>& reference, double tau,
                                     bool normalize = true);

struct KdResult {
  double loss = 0.0;                               // mean over positions
  std::vector<double> per_position;                // cross-entropy at each position
  std::vector<double> teacher_entropy;             // H(pT) at each position
  std::vector<std::vector<double>> grad_student;   // d loss / d student state
};

// Distillation loss averaged over N aligned positions; keys identify the teacher vectors so a
// vector already sitting in the queue is not counted twice.
KdResult kd_loss(const std::vector<std::vector<double>>& student, const std::vector<std::vector<double>>& teacher,
                 const std::vector<QueueKey>& keys, const InstanceQueue& queue, const DistillConfig& config);

// Snapshot of the queue used by one training step: normalized vectors plus keys.
class QueueSnapshot {
 public:
  QueueSnapshot(const InstanceQueue& queue, bool normalize);

  // Cross-entropy for a single position; adds grad_scale * d/d(student) into grad (size dim).
  // Returns {cross_entropy, teacher_entropy}.
  std::pair<double, double> position_loss(std::span<const double> student, std::span<const double> teacher,
                                          const QueueKey& key, const DistillConfig& config,
                                          std::span<double> grad, double grad_scale) const;

 private:
  std::size_t dim_;
  bool normalize_;
  std::vector<QueueKey> keys_;
  std::vector<double> vectors_;  // [size][dim]
};

// Pushes the teacher vectors of every aligned pair, in student order.
void enqueue_batch(InstanceQueue& queue, const std::vector<TeacherStates>& teacher_states,
                   const std::vector<AlignmentMap>& alignments);

// Frozen teacher pass over the unaugmented teacher tokenization (causal mask).
template <typename T>
TeacherStates teacher_forward(const Params<T>& teacher, std::span<const TokenId> ids, std::uint64_t sequence,
                              int teacher_layer = -1);

}  // namespace hb
