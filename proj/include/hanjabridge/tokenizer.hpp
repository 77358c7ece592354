#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace hb {

using TokenId = std::int32_t;

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Half-open character (code point) range [start, end).
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
  bool operator==(const Span&) const = default;
};

// Append-only token table. Ids are dense from 0; the specials occupy ids 0..2.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kBosToken = "<bos>";
  static constexpr std::size_t kNumSpecials = 3;

  Vocab();

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<TokenId> find(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  // Longest non-special token, in code points.
  std::size_t max_token_chars() const { return max_chars_; }

  // Appends when absent; returns the (possibly pre-existing) id.
  TokenId add(std::string_view token);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_chars_ = 0;
};

struct Encoding {
  std::string text;
  std::vector<TokenId> ids;
  std::vector<Span> spans;

  std::size_t size() const { return ids.size(); }
  bool operator==(const Encoding&) const = default;
};

// Specials, every single character of the words (first-occurrence order), then the
// multi-character words in list order. Throws on duplicate, empty, or whitespace-bearing words.
Vocab build_vocab(const std::vector<std::string>& words);

// New tokens get fresh ids at the tail; tokens already present are skipped.
Vocab expand_vocab(const Vocab& vocab, const std::vector<std::string>& new_tokens);

// Greedy longest match inside each whitespace-delimited chunk. Unknown characters become
// UNK with their true span. Throws std::invalid_argument on invalid UTF-8.
Encoding encode(const Vocab& vocab, std::string_view text);

// Rebuilds the text from span substrings and whitespace gaps; throws TokenizerError when the
// spans are inconsistent with the text.
std::string decode(const Encoding& encoding);

// Substring covered by token `index`.
std::string token_surface(const Encoding& encoding, std::size_t index);

// One token per line, line number = id, specials on the first lines.
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);
std::string serialize_vocab(const Vocab& vocab);
Vocab parse_vocab(std::string_view text);

}  // namespace hb
