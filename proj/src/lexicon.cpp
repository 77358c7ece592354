#include "hanjabridge/lexicon.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "hanjabridge/utf8.hpp"

namespace hb {

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

double parse_weight(std::string_view s, std::size_t line) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(value)) {
    throw LexiconError(line, "bad weight '" + std::string(s) + "'");
  }
  if (value < 0.0) throw LexiconError(line, "negative weight '" + std::string(s) + "'");
  return value;
}

std::string format_weight(double w) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), w);
  return std::string(buf, ptr);
}

}  // namespace

void order_candidates(std::vector<HanjaCandidate>& candidates) {
  // UTF-8 byte order coincides with code-point order.
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const HanjaCandidate& a, const HanjaCandidate& b) {
                     if (a.weight != b.weight) return a.weight > b.weight;
                     return a.hanja < b.hanja;
                   });
}

void Lexicon::add(LexiconEntry entry, std::size_t line) {
  if (entry.surface.empty()) throw LexiconError(line, "empty surface");
  if (!utf8::is_valid(entry.surface)) throw LexiconError(line, "surface is not valid UTF-8");
  if (entry.surface.find_first_of("\t\n") != std::string::npos) throw LexiconError(line, "surface contains a separator");
  if (entry.candidates.empty()) {
    throw LexiconError(line, "entry '" + entry.surface + "' has no candidates");
  }
  std::set<std::string_view> seen;
  for (const auto& c : entry.candidates) {
    if (c.hanja.empty()) throw LexiconError(line, "empty hanja in '" + entry.surface + "'");
    if (!utf8::is_valid(c.hanja)) throw LexiconError(line, "hanja is not valid UTF-8");
    if (c.hanja.find_first_of(":;\t\n") != std::string::npos) throw LexiconError(line, "hanja '" + c.hanja + "' contains a separator");
    if (c.gloss.find_first_of(";\t\n") != std::string::npos) throw LexiconError(line, "gloss '" + c.gloss + "' contains a separator");
    if (c.weight < 0.0 || !std::isfinite(c.weight)) throw LexiconError(line, "bad weight");
    if (!seen.insert(c.hanja).second) {
      throw LexiconError(line, "duplicate hanja '" + c.hanja + "' in '" + entry.surface + "'");
    }
  }
  if (entries_.contains(entry.surface)) {
    throw LexiconError(line, "duplicate surface '" + entry.surface + "'");
  }
  order_candidates(entry.candidates);
  auto key = entry.surface;
  entries_.emplace(std::move(key), std::move(entry));
}

const LexiconEntry* Lexicon::find(std::string_view surface) const {
  auto it = entries_.find(surface);
  return it == entries_.end() ? nullptr : &it->second;
}

Lexicon parse_lexicon(std::string_view text, std::string source) {
  Lexicon lex(std::move(source));
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty() || line.front() == '#') {
      if (end == text.size()) break;
      continue;
    }
    auto cols = split(line, '\t');
    if (cols.size() != 2) throw LexiconError(line_no, "expected 'surface<TAB>candidates'");
    LexiconEntry entry;
    entry.surface = std::string(trim(cols[0]));
    for (auto item : split(cols[1], ';')) {
      item = trim(item);
      if (item.empty()) throw LexiconError(line_no, "empty candidate");
      auto parts = split(item, ':');
      HanjaCandidate cand;
      cand.hanja = std::string(trim(parts[0]));
      if (parts.size() >= 2) cand.weight = parse_weight(trim(parts[1]), line_no);
      if (parts.size() >= 3) {
        // the gloss may itself contain ':'
        auto gloss_start = parts[0].size() + 1 + parts[1].size() + 1;
        cand.gloss = std::string(trim(item.substr(gloss_start)));
      }
      entry.candidates.push_back(std::move(cand));
    }
    lex.add(std::move(entry), line_no);
    if (end == text.size()) break;
  }
  return lex;
}

Lexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LexiconError(0, "cannot open lexicon '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_lexicon(ss.str(), path.string());
}

std::string serialize_lexicon(const Lexicon& lexicon) {
  std::string out;
  for (const auto& [surface, entry] : lexicon.entries()) {
    out += surface;
    out += '\t';
    for (std::size_t i = 0; i < entry.candidates.size(); ++i) {
      const auto& c = entry.candidates[i];
      if (i) out += ';';
      out += c.hanja;
      out += ':';
      out += format_weight(c.weight);
      if (!c.gloss.empty()) {
        out += ':';
        out += c.gloss;
      }
    }
    out += '\n';
  }
  return out;
}

void save_lexicon(const Lexicon& lexicon, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LexiconError(0, "cannot write lexicon '" + path.string() + "'");
  out << serialize_lexicon(lexicon);
}

std::optional<LexiconEntry> lookup(const Lexicon& lexicon, std::string_view surface) {
  if (const auto* e = lexicon.find(surface)) return *e;
  return std::nullopt;
}

std::vector<HanjaCandidate> top_k(const LexiconEntry& entry, std::size_t k) {
  if (k == 0) throw std::invalid_argument("top_k: k must be >= 1");
  const auto n = std::min(k, entry.candidates.size());
  return {entry.candidates.begin(), entry.candidates.begin() + static_cast<std::ptrdiff_t>(n)};
}

HomophonyStats homophony_stats(const Lexicon& lexicon) {
  HomophonyStats s;
  s.entries = lexicon.size();
  for (const auto& [_, e] : lexicon.entries()) {
    if (e.candidates.size() >= 2) ++s.homophonous;
    s.max_candidates = std::max(s.max_candidates, e.candidates.size());
  }
  s.ratio = s.entries ? static_cast<double>(s.homophonous) / static_cast<double>(s.entries) : 0.0;
  return s;
}

}  // namespace hb
