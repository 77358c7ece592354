#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hb {

class LexiconError : public std::runtime_error {
 public:
  LexiconError(std::size_t line, const std::string& what)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  // 1-based source line, 0 when not tied to a line.
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct HanjaCandidate {
  std::string hanja;
  std::string gloss;
  double weight = 1.0;

  bool operator==(const HanjaCandidate&) const = default;
};

struct LexiconEntry {
  std::string surface;
  std::vector<HanjaCandidate> candidates;  // weight-descending, ties by code point

  bool operator==(const LexiconEntry&) const = default;
};

// Hangul surface -> ordered Hanja candidates. Immutable once built; safe to share across threads.
class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(std::string source) : source_(std::move(source)) {}

  // Validates, orders candidates, and inserts. Throws LexiconError on duplicates.
  void add(LexiconEntry entry, std::size_t line = 0);

  const LexiconEntry* find(std::string_view surface) const;
  const std::map<std::string, LexiconEntry, std::less<>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::string& source() const { return source_; }

  bool operator==(const Lexicon& other) const { return entries_ == other.entries_; }

 private:
  std::map<std::string, LexiconEntry, std::less<>> entries_;
  std::string source_;
};

// Deterministic candidate order: weight descending, then code-point order of the Hanja string.
void order_candidates(std::vector<HanjaCandidate>& candidates);

// TSV: `surface<TAB>hanja[:weight[:gloss]](;hanja[:weight[:gloss]])*`, `#` comments, CRLF tolerated.
Lexicon parse_lexicon(std::string_view text, std::string source = "<memory>");
Lexicon load_lexicon(const std::filesystem::path& path);
std::string serialize_lexicon(const Lexicon& lexicon);
void save_lexicon(const Lexicon& lexicon, const std::filesystem::path& path);

std::optional<LexiconEntry> lookup(const Lexicon& lexicon, std::string_view surface);

// First min(k, |candidates|) candidates. Throws std::invalid_argument for k == 0.
std::vector<HanjaCandidate> top_k(const LexiconEntry& entry, std::size_t k);

struct HomophonyStats {
  std::size_t entries = 0;
  std::size_t homophonous = 0;  // entries with >= 2 candidates
  double ratio = 0.0;
  std::size_t max_candidates = 0;
};

HomophonyStats homophony_stats(const Lexicon& lexicon);

}  // namespace hb
