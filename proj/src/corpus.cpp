#include "hanjabridge/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <set>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "hanjabridge/utf8.hpp"

namespace hb {

void SynthConfig::validate() const {
  if (n_homophones == 0) throw CorpusError("n_homophones must be positive");
  if (senses_per_homophone.empty()) throw CorpusError("senses_per_homophone is empty");
  for (auto s : senses_per_homophone) {
    if (s < 2 || s > 16) throw CorpusError("senses_per_homophone entries must be in 2..16");
  }
  if (n_cue_words_per_sense == 0) throw CorpusError("need at least one cue word per sense");
  if (prefix_words == 0) throw CorpusError("prefix_words must leave room for the cue");
  if (n_filler_words == 0) throw CorpusError("need filler words");
  if (n_eval > n_sentences) throw CorpusError("n_eval exceeds n_sentences");
  if (teacher_inline_hanja < 0.0 || teacher_inline_hanja > 1.0) throw CorpusError("teacher_inline_hanja outside [0,1]");
  for (const auto* d : {&inline_open, &inline_close}) {
    if (utf8::length(*d) > 1 || (d->size() && std::isspace(static_cast<unsigned char>((*d)[0]))))
      throw CorpusError("inline delimiters must be empty or one non-space character");
  }
  if (domain_b_hanja < 0.0 || domain_b_hanja > 1.0) throw CorpusError("domain_b_hanja outside [0,1]");
  if (n_domain_b_words < 4) throw CorpusError("need at least 4 domain-B words");
}

namespace {

constexpr char32_t kHangulFirst = 0xAC00;
constexpr std::size_t kHangulCount = 11172;
constexpr char32_t kHanjaFirst = 0x4E00;
constexpr std::size_t kHanjaCount = 0x9FFF - 0x4E00 + 1;

struct Sense {
  std::size_t homophone = 0;
  std::string hanja;
  std::vector<std::string> cues;
  std::string continuation;
  std::string b_gloss;  // domain-B word that follows the hanja in domain-B text
};

class Generator {
 public:
  explicit Generator(const SynthConfig& c) : c_(c), rng_(c.seed) {}

  SynthCorpus run();

 private:
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  bool coin(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }

  std::string fresh_word();
  std::string fresh_b_word();
  AnnotatedSentence domain_a(std::size_t sense, bool inline_hanja);
  std::string domain_b();

  const SynthConfig& c_;
  std::mt19937_64 rng_;
  std::vector<std::string> syllables_;
  std::set<std::string> used_;
  std::vector<std::string> fillers_;
  std::vector<std::string> homophones_;
  std::vector<Sense> senses_;
  std::vector<std::string> b_words_;
  std::vector<std::vector<std::size_t>> b_next_;
  std::vector<std::string> a_words_;
};

std::string Generator::fresh_word() {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::string w = syllables_[pick(syllables_.size())] + syllables_[pick(syllables_.size())];
    if (used_.insert(w).second) {
      a_words_.push_back(w);
      return w;
    }
  }
  throw CorpusError("syllable alphabet too small for the requested vocabulary");
}

std::string Generator::fresh_b_word() {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::string w;
    const std::size_t len = 3 + pick(3);
    for (std::size_t i = 0; i < len; ++i) w += static_cast<char>('a' + pick(26));
    if (used_.insert(w).second) return w;
  }
  throw CorpusError("cannot draw distinct domain-B words");
}

SynthCorpus Generator::run() {
  c_.validate();
  std::size_t total_senses = 0;
  for (std::size_t h = 0; h < c_.n_homophones; ++h) total_senses += c_.senses_per_homophone[h % c_.senses_per_homophone.size()];
  const std::size_t words_needed =
      c_.n_homophones + total_senses * (c_.n_cue_words_per_sense + 1) + c_.n_filler_words;
  // By default most words get syllables of their own, so a fragmenting tokenizer can still tell
  // the words apart from a single piece.
  const std::size_t n_syll = c_.n_syllables ? c_.n_syllables : std::min<std::size_t>(kHangulCount, std::max<std::size_t>(8, 2 * words_needed));
  if (n_syll > kHangulCount || n_syll * n_syll < 2 * words_needed) throw CorpusError("config infeasible: alphabet too small");
  if (total_senses > kHanjaCount) throw CorpusError("config infeasible: more senses than pseudo-Hanja symbols");

  std::vector<std::size_t> order(kHangulCount);
  for (std::size_t i = 0; i < kHangulCount; ++i) order[i] = i;
  for (std::size_t i = 0; i < n_syll; ++i) std::swap(order[i], order[i + pick(kHangulCount - i)]);
  for (std::size_t i = 0; i < n_syll; ++i) syllables_.push_back(utf8::encode(static_cast<char32_t>(kHangulFirst + order[i])));

  std::set<std::size_t> hanja_used;
  for (std::size_t h = 0; h < c_.n_homophones; ++h) homophones_.push_back(fresh_word());
  for (std::size_t h = 0; h < c_.n_homophones; ++h) {
    const std::size_t k = c_.senses_per_homophone[h % c_.senses_per_homophone.size()];
    for (std::size_t s = 0; s < k; ++s) {
      Sense sense;
      sense.homophone = h;
      std::size_t code = 0;
      do {
        code = pick(kHanjaCount);
      } while (!hanja_used.insert(code).second);
      sense.hanja = utf8::encode(static_cast<char32_t>(kHanjaFirst + code));
      for (std::size_t q = 0; q < c_.n_cue_words_per_sense; ++q) sense.cues.push_back(fresh_word());
      sense.continuation = fresh_word();
      senses_.push_back(std::move(sense));
    }
  }
  for (std::size_t f = 0; f < c_.n_filler_words; ++f) fillers_.push_back(fresh_word());

  for (std::size_t b = 0; b < c_.n_domain_b_words; ++b) b_words_.push_back(fresh_b_word());
  b_next_.resize(b_words_.size());
  for (auto& next : b_next_) {
    for (int i = 0; i < 3; ++i) next.push_back(pick(b_words_.size()));
  }
  for (auto& s : senses_) s.b_gloss = b_words_[pick(b_words_.size())];

  SynthCorpus out;
  Lexicon lex("synthetic(seed=" + std::to_string(c_.seed) + ")");
  for (std::size_t h = 0; h < c_.n_homophones; ++h) {
    LexiconEntry e;
    e.surface = homophones_[h];
    std::size_t idx = 0;
    for (const auto& s : senses_) {
      if (s.homophone == h) e.candidates.push_back({s.hanja, "sense " + std::to_string(idx++), 1.0});
    }
    lex.add(std::move(e));
  }

  // Student domain-A text: unique sentences, eval first.
  std::unordered_set<std::string> seen;
  std::vector<AnnotatedSentence> pool;
  std::size_t guard = 0;
  while (pool.size() < c_.n_sentences) {
    if (++guard > 50 * (c_.n_sentences + 10)) throw CorpusError("cannot draw enough distinct sentences");
    auto sent = domain_a(pick(senses_.size()), false);
    if (seen.insert(sent.text).second) pool.push_back(std::move(sent));
  }
  out.eval.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(c_.n_eval));
  out.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(c_.n_eval), pool.end());

  const std::size_t n_probe = c_.n_probe ? std::min(c_.n_probe, out.eval.size()) : out.eval.size();
  for (std::size_t i = 0; i < n_probe; ++i) {
    const auto& sent = out.eval[i];
    const auto& ann = sent.annotations.front();
    const auto* entry = lex.find(ann.surface);
    ProbeItem item;
    item.context = sent.text;
    item.surface = ann.surface;
    for (std::size_t c = 0; c < entry->candidates.size(); ++c) {
      item.options.push_back(entry->candidates[c].hanja);
      if (entry->candidates[c].hanja == ann.hanja) item.gold = c;
    }
    out.probe.push_back(std::move(item));
  }

  // Teacher text: domain B and domain A interleaved in a fixed random order.
  std::vector<std::string> a_text, b_text;
  for (std::size_t i = 0; i < c_.n_teacher_a; ++i) a_text.push_back(domain_a(pick(senses_.size()), coin(c_.teacher_inline_hanja)).text);
  for (std::size_t i = 0; i < c_.n_domain_b; ++i) b_text.push_back(domain_b());
  for (std::size_t i = 0; i < c_.n_domain_b_heldout; ++i) out.domain_b_heldout.push_back(domain_b());
  std::size_t ia = 0, ib = 0;
  while (ia < a_text.size() || ib < b_text.size()) {
    const std::size_t left = (a_text.size() - ia) + (b_text.size() - ib);
    if (pick(left) < a_text.size() - ia) {
      out.teacher_text.push_back(a_text[ia++]);
    } else {
      out.teacher_text.push_back(b_text[ib++]);
    }
  }

  out.lexicon = std::move(lex);
  out.domain_a_words = a_words_;
  out.domain_b_words = b_words_;
  out.syllables = syllables_;
  out.inline_open = c_.inline_open;
  out.inline_close = c_.inline_close;
  for (const auto& s : senses_) {
    out.hanja.push_back(s.hanja);
    out.cues.push_back(s.cues);
  }
  return out;
}

AnnotatedSentence Generator::domain_a(std::size_t sense_id, bool inline_hanja) {
  const auto& sense = senses_[sense_id];
  std::vector<std::string> words;
  const std::size_t cue_at = pick(c_.prefix_words);
  for (std::size_t p = 0; p < c_.prefix_words; ++p) {
    words.push_back(p == cue_at ? sense.cues[pick(sense.cues.size())] : fillers_[pick(fillers_.size())]);
  }
  const std::size_t hom_index = words.size();
  words.push_back(homophones_[sense.homophone]);
  words.push_back(sense.continuation);
  for (std::size_t p = 0; p < c_.suffix_words; ++p) words.push_back(fillers_[pick(fillers_.size())]);

  AnnotatedSentence sent;
  std::size_t chars = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) {
      sent.text += ' ';
      ++chars;
    }
    const std::size_t len = utf8::length(words[i]);
    if (i == hom_index) sent.annotations.push_back({{chars, chars + len}, words[i], sense.hanja});
    sent.text += words[i];
    chars += len;
    if (i == hom_index && inline_hanja) {
      const std::string marked = c_.inline_open + sense.hanja + c_.inline_close;
      sent.text += marked;
      chars += utf8::length(marked);
    }
  }
  return sent;
}

std::string Generator::domain_b() {
  const std::size_t len = 6;
  std::string text;
  std::size_t w = pick(b_words_.size());
  const bool mention = coin(c_.domain_b_hanja);
  const std::size_t mention_at = pick(len - 1);
  for (std::size_t i = 0; i < len; ++i) {
    if (i) text += ' ';
    if (mention && i == mention_at) {
      const auto& s = senses_[pick(senses_.size())];
      text += s.hanja + " " + s.b_gloss;
      w = pick(b_words_.size());
      ++i;
      if (i >= len) break;
      text += ' ';
    }
    text += b_words_[w];
    w = b_next_[w][pick(b_next_[w].size())];
  }
  return text;
}

}  // namespace

SynthCorpus generate(const SynthConfig& config) { return Generator(config).run(); }

Vocab teacher_vocab(const SynthCorpus& corpus) {
  std::vector<std::string> words = corpus.syllables;
  words.insert(words.end(), corpus.hanja.begin(), corpus.hanja.end());
  for (const auto& w : corpus.domain_b_words) words.push_back(w);
  for (const auto* d : {&corpus.inline_open, &corpus.inline_close}) {
    if (!d->empty() && std::find(words.begin(), words.end(), *d) == words.end()) words.push_back(*d);
  }
  return build_vocab(words);
}

Vocab student_vocab(const SynthCorpus& corpus) {
  Vocab v = expand_vocab(teacher_vocab(corpus), corpus.domain_a_words);
  std::vector<std::string> cands;
  for (const auto& [surface, entry] : corpus.lexicon.entries()) {
    for (const auto& c : entry.candidates) cands.push_back(c.hanja);
  }
  return expand_vocab(v, cands);
}

std::vector<GoldAnnotation> gold_annotations(const AnnotatedSentence& sentence) {
  std::vector<GoldAnnotation> out;
  for (const auto& a : sentence.annotations) out.push_back({a.span, a.hanja});
  return out;
}

namespace {

AnnotatedSentence parse_annotated(const std::string& line, const Lexicon* lexicon) {
  const auto j = nlohmann::json::parse(line);
  AnnotatedSentence s;
  s.text = j.at("text").get<std::string>();
  const std::u32string cps = utf8::decode(s.text);
  for (const auto& a : j.value("annotations", nlohmann::json::array())) {
    SenseAnnotation ann;
    ann.span.start = a.at("start").get<std::size_t>();
    ann.span.end = a.at("end").get<std::size_t>();
    ann.surface = a.at("surface").get<std::string>();
    ann.hanja = a.at("hanja").get<std::string>();
    if (ann.span.start >= ann.span.end || ann.span.end > cps.size()) {
      throw CorpusError("span [" + std::to_string(ann.span.start) + "," + std::to_string(ann.span.end) +
                        ") out of bounds for a text of " + std::to_string(cps.size()) + " characters");
    }
    if (utf8::encode(std::u32string_view(cps).substr(ann.span.start, ann.span.size())) != ann.surface) {
      throw CorpusError("span does not cover surface '" + ann.surface + "'");
    }
    if (lexicon) {
      const auto* e = lexicon->find(ann.surface);
      const bool known = e && std::any_of(e->candidates.begin(), e->candidates.end(),
                                          [&](const HanjaCandidate& c) { return c.hanja == ann.hanja; });
      if (!known) throw CorpusError("gold hanja '" + ann.hanja + "' is not a lexicon candidate of '" + ann.surface + "'");
    }
    s.annotations.push_back(std::move(ann));
  }
  return s;
}

}  // namespace

AnnotatedLoad load_annotated(const std::filesystem::path& path, const Lexicon* lexicon, bool strict) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open " + path.string());
  AnnotatedLoad out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.sentences.push_back(parse_annotated(line, lexicon));
    } catch (const std::exception& e) {
      const std::string msg = path.string() + ":" + std::to_string(lineno) + ": " + e.what();
      if (strict) throw CorpusError(msg);
      out.issues.push_back({lineno, msg});
    }
  }
  return out;
}

void save_annotated(const std::vector<AnnotatedSentence>& sentences, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CorpusError("cannot write " + path.string());
  for (const auto& s : sentences) {
    nlohmann::json j;
    j["text"] = s.text;
    j["annotations"] = nlohmann::json::array();
    for (const auto& a : s.annotations) {
      j["annotations"].push_back({{"start", a.span.start}, {"end", a.span.end}, {"surface", a.surface}, {"hanja", a.hanja}});
    }
    out << j.dump() << "\n";
  }
}

void save_lines(const std::vector<std::string>& lines, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CorpusError("cannot write " + path.string());
  for (const auto& l : lines) out << l << "\n";
}

std::vector<std::string> load_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> texts(const std::vector<AnnotatedSentence>& sentences) {
  std::vector<std::string> out;
  for (const auto& s : sentences) out.push_back(s.text);
  return out;
}

}  // namespace hb
