#pragma once

// Attention rollout and the candidate-focus accuracy built on it.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hanjabridge/augment.hpp"
#include "hanjabridge/model.hpp"

namespace hb {

class RolloutMatrix {
 public:
  RolloutMatrix() = default;
  explicit RolloutMatrix(std::size_t n) : n_(n), r_(n * n, 0.0) {}

  std::size_t size() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return r_[i * n_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return r_[i * n_ + j]; }
  const std::vector<double>& data() const { return r_; }

 private:
  std::size_t n_ = 0;
  std::vector<double> r_;
};

// Heads averaged per layer, A' = rownorm(0.5 A + 0.5 I), R = A'_L ... A'_1.
// Throws std::invalid_argument when an attention row is not a distribution, std::logic_error if
// the result is not row-stochastic within 1e-6.
RolloutMatrix rollout(const ForwardTrace& trace);

// Which row of R is read when scoring candidates.
enum class ScoreSource {
  final_original,  // the last original position of the sequence
  anchor,          // the group's anchor
  mean_original,   // average over every original row
};

ScoreSource parse_score_source(const std::string& text);
std::string to_string(ScoreSource source);

struct CandidateScores {
  std::vector<double> scores;  // one per candidate: R[row][range] summed
  std::size_t best = 0;        // lowest index attaining the maximum
  bool tie = false;            // another candidate attains the same maximum
};

CandidateScores candidate_scores(const RolloutMatrix& r, const AugmentedSequence& aug, const ExpansionGroup& group,
                                 ScoreSource source = ScoreSource::final_original);

// Gold counts strictly: a tie for the maximum is incorrect.
bool gold_wins(const CandidateScores& scores, const ExpansionGroup& group);

struct Rq1Bucket {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

// candidate count k -> counts; buckets with no groups are absent.
using Rq1Buckets = std::map<std::size_t, Rq1Bucket>;

// Produces the forward trace of one item; lets tests plant attention directly.
using TraceFn = std::function<ForwardTrace(const AugmentedSequence&)>;

// Every gold-labeled group of every item is scored; groups without gold are ignored.
Rq1Buckets rq1_evaluate(const std::vector<AugmentedSequence>& items, const TraceFn& trace,
                        ScoreSource source = ScoreSource::final_original);

TraceFn model_tracer(const Params<float>& params, CandidateContext context = CandidateContext::prefix);

struct Rq1Table {
  std::vector<std::uint64_t> steps;                            // one column per checkpoint
  std::map<std::size_t, std::vector<std::optional<Rq1Bucket>>> rows;  // k -> per-checkpoint bucket
};

struct Rq1Checkpoint {
  std::uint64_t step = 0;
  const Params<float>* params = nullptr;
};

Rq1Table rq1_accuracy(const std::vector<AugmentedSequence>& items, const std::vector<Rq1Checkpoint>& checkpoints,
                      CandidateContext context = CandidateContext::prefix,
                      ScoreSource source = ScoreSource::final_original);

// Rows are k buckets, columns checkpoint steps; absent buckets print as "NA".
std::string rq1_table_tsv(const Rq1Table& table);

struct HeatmapStyle {
  std::size_t cell = 10;  // pixels per matrix entry
};

// Binary PPM (P6). Row 0 of the image is a header strip `cell` pixels tall: blue above candidate
// columns, green above gold candidates. Each matrix cell is gray = round(255 * R[i][j]); cells in
// candidate columns get a one-pixel blue outline, gold columns a green one.
void emit_heatmap(const RolloutMatrix& r, const AugmentedSequence& aug, const std::filesystem::path& path,
                  const HeatmapStyle& style = {});

}  // namespace hb
