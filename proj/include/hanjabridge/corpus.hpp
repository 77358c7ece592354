#pragma once

// Synthetic homophone language. Domain A ("Korean") words are two Hangul syllables; each
// homophone surface has several senses, each with its own pseudo-Hanja character, cue words and
// a continuation word. Domain B ("English") words are short Latin strings generated by a sparse
// Markov chain; it is the teacher's home domain and the forgetting probe.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "hanjabridge/lexicon.hpp"
#include "hanjabridge/probe.hpp"
#include "hanjabridge/tokenizer.hpp"

namespace hb {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthConfig {
  std::size_t n_homophones = 4;
  std::vector<std::size_t> senses_per_homophone{2, 4};  // cycled over homophones, each in 2..16
  std::size_t n_cue_words_per_sense = 2;
  std::size_t n_filler_words = 24;
  std::size_t n_syllables = 0;           // pseudo-Hangul alphabet size (0 = twice the word count)
  std::size_t n_sentences = 6000;        // domain-A sentences for the student (train + eval)
  std::size_t n_eval = 600;              // held out from n_sentences
  std::size_t n_probe = 0;               // probe items drawn from eval (0 = all of eval)
  std::size_t n_teacher_a = 3000;        // domain-A sentences in the teacher corpus
  double teacher_inline_hanja = 0.5;     // fraction of those written "surface" + hanja
  std::string inline_open;    // delimiters around an inline hanja; either may be empty
  std::string inline_close;
  std::size_t n_domain_b_words = 40;
  std::size_t n_domain_b = 3000;         // teacher domain-B sentences
  std::size_t n_domain_b_heldout = 200;
  double domain_b_hanja = 0.3;           // domain-B sentences mentioning a hanja and its gloss word
  std::size_t prefix_words = 3;          // words before the homophone (one of them is the cue)
  std::size_t suffix_words = 2;          // filler words after the continuation
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

struct SenseAnnotation {
  Span span;  // code-point span of the surface in the text
  std::string surface;
  std::string hanja;
  bool operator==(const SenseAnnotation&) const = default;
};

struct AnnotatedSentence {
  std::string text;
  std::vector<SenseAnnotation> annotations;
  bool operator==(const AnnotatedSentence&) const = default;
};

struct SynthCorpus {
  Lexicon lexicon;
  std::vector<std::string> domain_a_words;  // every multi-syllable domain-A word
  std::vector<std::string> domain_b_words;
  std::vector<std::string> syllables;
  std::vector<std::string> hanja;           // one per sense
  std::vector<std::vector<std::string>> cues;  // [sense id] -> cue words, sense ids follow `hanja`
  std::vector<AnnotatedSentence> train;     // student CPT text
  std::vector<AnnotatedSentence> eval;
  std::vector<ProbeItem> probe;
  std::vector<std::string> teacher_text;    // domain B interleaved with (partly glossed) domain A
  std::vector<std::string> domain_b_heldout;
  std::string inline_open, inline_close;    // as configured; part of the teacher vocab
};

// Deterministic from config.seed. Throws CorpusError when the alphabets cannot supply the
// requested vocabulary.
SynthCorpus generate(const SynthConfig& config);

// Teacher tokenizer: single characters plus whole domain-B words, so domain-A words fragment.
Vocab teacher_vocab(const SynthCorpus& corpus);
// Student tokenizer: the teacher vocab expanded with the whole domain-A words (and any Hanja
// candidates not already present).
Vocab student_vocab(const SynthCorpus& corpus);

std::vector<GoldAnnotation> gold_annotations(const AnnotatedSentence& sentence);

struct LoadIssue {
  std::size_t line = 0;
  std::string message;
};

struct AnnotatedLoad {
  std::vector<AnnotatedSentence> sentences;
  std::vector<LoadIssue> issues;
};

// JSON Lines: {"text": ..., "annotations": [{"start":, "end":, "surface":, "hanja":}]}. With a
// lexicon, gold hanja must be a candidate of the surface. strict: the first bad line throws
// CorpusError naming it; otherwise bad lines are reported and skipped.
AnnotatedLoad load_annotated(const std::filesystem::path& path, const Lexicon* lexicon = nullptr,
                             bool strict = true);
void save_annotated(const std::vector<AnnotatedSentence>& sentences, const std::filesystem::path& path);

void save_lines(const std::vector<std::string>& lines, const std::filesystem::path& path);
std::vector<std::string> load_lines(const std::filesystem::path& path);
std::vector<std::string> texts(const std::vector<AnnotatedSentence>& sentences);

}  // namespace hb
