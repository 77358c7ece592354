#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hanjabridge/lexicon.hpp"
#include "hanjabridge/tokenizer.hpp"

namespace hb {

class AugmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// What a candidate position may see besides itself.
enum class CandidateContext {
  prefix,       // its anchor and the anchor's original-token causal prefix
  anchor_only,  // only its anchor
};

struct AugmentConfig {
  std::size_t k = 0;  // max candidates per group; 0 disables augmentation
  bool augment_unambiguous = false;
  bool per_character_tokens = false;
};

// Half-open index range into the expanded sequence.
struct IndexRange {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
  bool contains(std::size_t i) const { return i >= start && i < end; }
  bool operator==(const IndexRange&) const = default;
};

struct ExpansionGroup {
  std::size_t anchor_index = 0;         // position of the Hangul token in the expanded sequence
  std::size_t source_index = 0;         // the anchor's index in the source encoding
  std::vector<IndexRange> candidate_ranges;
  std::vector<std::string> candidates;  // hanja strings, parallel to candidate_ranges
  std::optional<std::size_t> gold_candidate;
  std::string surface;

  std::size_t size() const { return candidate_ranges.size(); }
  IndexRange span() const {
    return {candidate_ranges.front().start, candidate_ranges.back().end};
  }
  bool operator==(const ExpansionGroup&) const = default;
};

struct AugmentedSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> origin_mask;  // m_t: 1 original, 0 inserted candidate
  std::vector<ExpansionGroup> groups;     // sorted by anchor_index
  std::vector<std::size_t> original_positions;
  Encoding source;

  std::size_t size() const { return ids.size(); }
  bool operator==(const AugmentedSequence&) const = default;
};

// Row-major L x L; allowed(i, j) means position i may attend to position j.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t n, bool value = false) : n_(n), bits_(n * n, value) {}

  static AttentionMask causal(std::size_t n);

  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return bits_[i * n_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { bits_[i * n_ + j] = v ? 1 : 0; }
  const std::uint8_t* row(std::size_t i) const { return bits_.data() + i * n_; }
  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

// The identity expansion: every token original, no groups.
AugmentedSequence unaugmented(const Encoding& encoding);

// Inserts top_k candidates right after each token whose surface is a lexicon entry (entries with
// a single candidate only when augment_unambiguous). Throws AugmentError when a candidate is
// missing from the vocab.
AugmentedSequence augment(const Encoding& encoding, const Lexicon& lexicon, const Vocab& vocab,
                          const AugmentConfig& config);

// Rules: originals attend causally to originals; a candidate sees its anchor's original prefix
// (or only the anchor) plus itself; an anchor additionally sees its own candidates.
AttentionMask build_attention_mask(const AugmentedSequence& aug,
                                   CandidateContext context = CandidateContext::prefix);

// Drops candidate positions; throws AugmentError if that does not reproduce the source ids.
Encoding strip(const AugmentedSequence& aug);

// Appends tokens as original positions (used to extend a prompt by a scored continuation).
void append_originals(AugmentedSequence& aug, const std::vector<TokenId>& ids);

struct GoldAnnotation {
  Span span;  // character span of the annotated surface in the source text
  std::string hanja;
};

enum class AnnotationIssueKind { unmatched, truncated };

struct AnnotationIssue {
  std::size_t annotation_index = 0;
  AnnotationIssueKind kind = AnnotationIssueKind::unmatched;
  std::string message;
};

struct LabelResult {
  AugmentedSequence sequence;
  std::vector<AnnotationIssue> issues;
};

// Sets gold_candidate on groups whose anchor span matches an annotation. Annotations without a
// group, or whose hanja was cut off by k, are reported rather than thrown.
LabelResult label_gold(const AugmentedSequence& aug, const std::vector<GoldAnnotation>& annotations);

// In-line surface form, e.g. "나는 사과의 가격價格加擊을 모른다".
std::string expanded_surface(const AugmentedSequence& aug);

// JSON debug dump: ids, m_t, groups, expanded surface.
std::string augmented_to_json(const AugmentedSequence& aug, const Vocab& vocab);

}  // namespace hb
