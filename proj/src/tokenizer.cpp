#include "hanjabridge/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "hanjabridge/utf8.hpp"

namespace hb {

namespace {

void check_token(std::string_view token) {
  if (token.empty()) throw TokenizerError("empty token");
  for (char32_t c : utf8::decode(token)) {
    if (utf8::is_space(c)) throw TokenizerError("token contains whitespace: '" + std::string(token) + "'");
  }
}

bool is_special(std::string_view token) {
  return token == Vocab::kPadToken || token == Vocab::kUnkToken || token == Vocab::kBosToken;
}

}  // namespace

Vocab::Vocab() {
  for (auto s : {kPadToken, kUnkToken, kBosToken}) {
    index_.emplace(std::string(s), static_cast<TokenId>(tokens_.size()));
    tokens_.emplace_back(s);
  }
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::add(std::string_view token) {
  if (auto id = find(token)) return *id;
  check_token(token);
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  index_.emplace(std::string(token), id);
  max_chars_ = std::max(max_chars_, utf8::length(token));
  return id;
}

Vocab build_vocab(const std::vector<std::string>& words) {
  std::unordered_set<std::string_view> seen;
  for (const auto& w : words) {
    check_token(w);
    if (!seen.insert(w).second) throw TokenizerError("duplicate word '" + w + "'");
  }
  Vocab vocab;
  for (const auto& w : words) {
    for (char32_t c : utf8::decode(w)) vocab.add(utf8::encode(c));
  }
  for (const auto& w : words) vocab.add(w);
  return vocab;
}

Vocab expand_vocab(const Vocab& vocab, const std::vector<std::string>& new_tokens) {
  Vocab out = vocab;
  for (const auto& t : new_tokens) {
    if (t.empty()) throw TokenizerError("expand_vocab: empty token");
    out.add(t);
  }
  return out;
}

Encoding encode(const Vocab& vocab, std::string_view text) {
  Encoding enc;
  enc.text = std::string(text);
  const std::u32string cps = utf8::decode(text);
  const std::size_t max_len = std::max<std::size_t>(1, vocab.max_token_chars());
  std::size_t i = 0;
  while (i < cps.size()) {
    if (utf8::is_space(cps[i])) {
      ++i;
      continue;
    }
    std::size_t chunk_end = i;
    while (chunk_end < cps.size() && !utf8::is_space(cps[chunk_end])) ++chunk_end;
    while (i < chunk_end) {
      const std::size_t limit = std::min(max_len, chunk_end - i);
      TokenId id = Vocab::kUnk;
      std::size_t len = 1;
      for (std::size_t n = limit; n >= 1; --n) {
        const std::string piece = utf8::encode(std::u32string_view(cps).substr(i, n));
        if (is_special(piece)) continue;
        if (auto found = vocab.find(piece)) {
          id = *found;
          len = n;
          break;
        }
      }
      enc.ids.push_back(id);
      enc.spans.push_back({i, i + len});
      i += len;
    }
  }
  return enc;
}

std::string decode(const Encoding& encoding) {
  if (encoding.ids.size() != encoding.spans.size()) {
    throw TokenizerError("decode: ids and spans differ in length");
  }
  const std::u32string cps = utf8::decode(encoding.text);
  std::u32string out;
  out.reserve(cps.size());
  std::size_t cursor = 0;
  for (const auto& span : encoding.spans) {
    if (span.end <= span.start || span.start < cursor || span.end > cps.size()) {
      throw TokenizerError("decode: inconsistent spans");
    }
    for (std::size_t k = cursor; k < span.start; ++k) {
      if (!utf8::is_space(cps[k])) throw TokenizerError("decode: non-whitespace gap");
      out.push_back(cps[k]);
    }
    out.append(cps, span.start, span.size());
    cursor = span.end;
  }
  for (std::size_t k = cursor; k < cps.size(); ++k) {
    if (!utf8::is_space(cps[k])) throw TokenizerError("decode: non-whitespace tail");
    out.push_back(cps[k]);
  }
  return utf8::encode(out);
}

std::string token_surface(const Encoding& encoding, std::size_t index) {
  const auto cps = utf8::decode(encoding.text);
  const auto& span = encoding.spans.at(index);
  return utf8::encode(std::u32string_view(cps).substr(span.start, span.size()));
}

std::string serialize_vocab(const Vocab& vocab) {
  std::string out;
  for (const auto& t : vocab.tokens()) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocab parse_vocab(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.emplace_back(line);
    start = end + 1;
  }
  if (lines.size() < Vocab::kNumSpecials || lines[0] != Vocab::kPadToken ||
      lines[1] != Vocab::kUnkToken || lines[2] != Vocab::kBosToken) {
    throw TokenizerError("vocab file must start with <pad>, <unk>, <bos>");
  }
  Vocab vocab;
  for (std::size_t i = Vocab::kNumSpecials; i < lines.size(); ++i) {
    if (vocab.contains(lines[i])) {
      throw TokenizerError("vocab line " + std::to_string(i + 1) + ": duplicate token");
    }
    vocab.add(lines[i]);
  }
  return vocab;
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TokenizerError("cannot write vocab '" + path.string() + "'");
  out << serialize_vocab(vocab);
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TokenizerError("cannot open vocab '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_vocab(ss.str());
}

}  // namespace hb
