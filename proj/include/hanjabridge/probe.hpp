#pragma once

// Zero-shot multiple-choice Hanja probe. Each item is rendered k times with the option list
// rotated so the gold option visits every position once; an option's final score is its mean
// log-likelihood over those k prompts.

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "hanjabridge/augment.hpp"
#include "hanjabridge/lexicon.hpp"
#include "hanjabridge/model.hpp"
#include "hanjabridge/tokenizer.hpp"

namespace hb {

class ProbeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProbeItem {
  std::string context;
  std::string surface;
  std::vector<std::string> options;
  std::size_t gold = 0;

  // Throws ProbeError: k < 2, gold out of range, duplicate or empty options.
  void validate() const;
  bool operator==(const ProbeItem&) const = default;
};

// Slots: {context}, {surface}, {options}. Options are joined with single spaces.
struct PromptTemplate {
  std::string text = "{options} {context} {surface}";

  void validate() const;
  std::string render(const ProbeItem& item, const std::vector<std::size_t>& order) const;
  static PromptTemplate load(const std::filesystem::path& path);
};

// order[r][p] = index of the option shown at position p in prompt r; the gold option sits at
// position r.
std::vector<std::vector<std::size_t>> rotation_orders(std::size_t k, std::size_t gold);

std::vector<std::string> render_prompts(const ProbeItem& item, const PromptTemplate& tmpl = {});

// Anything that can assign next-token log-probabilities to a (possibly augmented) sequence.
class ScoringModel {
 public:
  virtual ~ScoringModel() = default;
  // log P(ids[positions[i] + ...]) : for each i, the log-probability that the prediction made at
  // position `from[i]` equals `target[i]`.
  virtual std::vector<double> log_probs(const AugmentedSequence& seq, const AttentionMask& mask,
                                        const std::vector<std::size_t>& from,
                                        const std::vector<TokenId>& target) const = 0;
};

class ParamsScorer final : public ScoringModel {
 public:
  explicit ParamsScorer(const Params<float>& params) : params_(params) {}
  std::vector<double> log_probs(const AugmentedSequence& seq, const AttentionMask& mask,
                                const std::vector<std::size_t>& from,
                                const std::vector<TokenId>& target) const override;

 private:
  const Params<float>& params_;
};

// Every token equally likely.
class UniformScorer final : public ScoringModel {
 public:
  explicit UniformScorer(std::size_t vocab_size) : vocab_size_(vocab_size) {}
  std::vector<double> log_probs(const AugmentedSequence&, const AttentionMask&, const std::vector<std::size_t>& from,
                                const std::vector<TokenId>&) const override;

 private:
  std::size_t vocab_size_;
};

// Sum over option tokens of log P(token_j | prompt, option tokens < j); each token is predicted
// from the preceding original position, so candidates inserted after the prompt's last word are
// skipped exactly as in training.
double score_option(const ScoringModel& model, const AugmentedSequence& prompt, const std::vector<TokenId>& option,
                    CandidateContext context = CandidateContext::prefix, bool length_normalize = false);
double score_option(const ScoringModel& model, const Vocab& vocab, const std::string& prompt,
                    const std::string& option, bool length_normalize = false);

struct ProbeConfig {
  PromptTemplate tmpl;
  bool hb_inference = false;
  AugmentConfig augment;  // used when hb_inference
  CandidateContext context = CandidateContext::prefix;
  bool length_normalize = false;
};

struct ProbeItemResult {
  std::vector<double> scores;  // per option, averaged over the k prompts
  std::size_t predicted = 0;
  bool tie = false;
  bool correct = false;
  std::size_t prompt_tokens = 0;
};

struct ProbeReport {
  std::string mode;
  std::size_t items = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  std::size_t total_tokens = 0;  // prompt tokens over all rendered prompts, after augmentation
  double avg_tokens_per_sample = 0.0;
  std::vector<ProbeItemResult> details;
};

ProbeReport probe_run(const ScoringModel& model, const std::vector<ProbeItem>& items, const Vocab& vocab,
                      const Lexicon& lexicon, const ProbeConfig& config);

// Columns are reports, rows acc / total_token / avg_token_per_sample.
std::string probe_report_tsv(const std::vector<std::pair<std::string, ProbeReport>>& reports);

std::vector<ProbeItem> load_probe_items(const std::filesystem::path& path);
void save_probe_items(const std::vector<ProbeItem>& items, const std::filesystem::path& path);

}  // namespace hb
