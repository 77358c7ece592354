#include "hanjabridge/augment.hpp"

#include <nlohmann/json.hpp>

#include "hanjabridge/utf8.hpp"

namespace hb {

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

AugmentedSequence unaugmented(const Encoding& encoding) {
  AugmentedSequence aug;
  aug.ids = encoding.ids;
  aug.origin_mask.assign(encoding.ids.size(), 1);
  aug.original_positions.resize(encoding.ids.size());
  for (std::size_t i = 0; i < encoding.ids.size(); ++i) aug.original_positions[i] = i;
  aug.source = encoding;
  return aug;
}

AugmentedSequence augment(const Encoding& encoding, const Lexicon& lexicon, const Vocab& vocab,
                          const AugmentConfig& config) {
  if (config.k == 0) return unaugmented(encoding);

  AugmentedSequence aug;
  aug.source = encoding;
  const std::u32string cps = utf8::decode(encoding.text);

  auto resolve = [&](const std::string& piece) {
    auto id = vocab.find(piece);
    if (!id) {
      throw AugmentError("candidate token '" + piece + "' missing from vocab (run expand_vocab first)");
    }
    return *id;
  };

  for (std::size_t t = 0; t < encoding.ids.size(); ++t) {
    const auto& span = encoding.spans[t];
    aug.original_positions.push_back(aug.ids.size());
    aug.ids.push_back(encoding.ids[t]);
    aug.origin_mask.push_back(1);

    const std::string surface = utf8::encode(std::u32string_view(cps).substr(span.start, span.size()));
    const LexiconEntry* entry = lexicon.find(surface);
    if (!entry) continue;
    if (entry->candidates.size() < 2 && !config.augment_unambiguous) continue;

    ExpansionGroup group;
    group.anchor_index = aug.ids.size() - 1;
    group.source_index = t;
    group.surface = surface;
    for (const auto& cand : top_k(*entry, config.k)) {
      IndexRange range{aug.ids.size(), aug.ids.size()};
      if (config.per_character_tokens) {
        for (char32_t c : utf8::decode(cand.hanja)) {
          aug.ids.push_back(resolve(utf8::encode(c)));
          aug.origin_mask.push_back(0);
        }
      } else {
        aug.ids.push_back(resolve(cand.hanja));
        aug.origin_mask.push_back(0);
      }
      range.end = aug.ids.size();
      group.candidate_ranges.push_back(range);
      group.candidates.push_back(cand.hanja);
    }
    aug.groups.push_back(std::move(group));
  }
  return aug;
}

AttentionMask build_attention_mask(const AugmentedSequence& aug, CandidateContext context) {
  const std::size_t n = aug.ids.size();
  AttentionMask mask(n);
  // owner[i] = group index for candidate positions
  std::vector<std::ptrdiff_t> owner(n, -1);
  for (std::size_t g = 0; g < aug.groups.size(); ++g) {
    for (const auto& r : aug.groups[g].candidate_ranges) {
      for (std::size_t i = r.start; i < r.end; ++i) owner[i] = static_cast<std::ptrdiff_t>(g);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    mask.set(i, i, true);
    if (aug.origin_mask[i]) {
      for (std::size_t j = 0; j < i; ++j) {
        if (aug.origin_mask[j]) mask.set(i, j, true);
      }
    } else {
      const auto& group = aug.groups[static_cast<std::size_t>(owner[i])];
      if (context == CandidateContext::prefix) {
        for (std::size_t j = 0; j <= group.anchor_index; ++j) {
          if (aug.origin_mask[j]) mask.set(i, j, true);
        }
      } else {
        mask.set(i, group.anchor_index, true);
      }
    }
  }
  for (const auto& group : aug.groups) {
    for (const auto& r : group.candidate_ranges) {
      for (std::size_t j = r.start; j < r.end; ++j) mask.set(group.anchor_index, j, true);
    }
  }
  return mask;
}

Encoding strip(const AugmentedSequence& aug) {
  std::vector<TokenId> kept;
  kept.reserve(aug.original_positions.size());
  for (std::size_t i = 0; i < aug.ids.size(); ++i) {
    if (aug.origin_mask[i]) kept.push_back(aug.ids[i]);
  }
  if (kept != aug.source.ids) throw AugmentError("strip: original positions disagree with source");
  return aug.source;
}

void append_originals(AugmentedSequence& aug, const std::vector<TokenId>& ids) {
  for (TokenId id : ids) {
    aug.original_positions.push_back(aug.ids.size());
    aug.ids.push_back(id);
    aug.origin_mask.push_back(1);
  }
}

LabelResult label_gold(const AugmentedSequence& aug, const std::vector<GoldAnnotation>& annotations) {
  LabelResult result{aug, {}};
  for (std::size_t a = 0; a < annotations.size(); ++a) {
    const auto& ann = annotations[a];
    ExpansionGroup* match = nullptr;
    for (auto& g : result.sequence.groups) {
      if (aug.source.spans[g.source_index] == ann.span) {
        match = &g;
        break;
      }
    }
    if (!match) {
      result.issues.push_back({a, AnnotationIssueKind::unmatched,
                               "no expansion group at span [" + std::to_string(ann.span.start) + "," +
                                   std::to_string(ann.span.end) + ")"});
      continue;
    }
    bool found = false;
    for (std::size_t c = 0; c < match->candidates.size(); ++c) {
      if (match->candidates[c] == ann.hanja) {
        match->gold_candidate = c;
        found = true;
        break;
      }
    }
    if (!found) {
      result.issues.push_back({a, AnnotationIssueKind::truncated,
                               "'" + ann.hanja + "' not among the candidates of '" + match->surface + "'"});
    }
  }
  return result;
}

std::string expanded_surface(const AugmentedSequence& aug) {
  const std::u32string cps = utf8::decode(aug.source.text);
  std::u32string out;
  std::size_t cursor = 0;
  std::size_t next_group = 0;
  for (std::size_t t = 0; t < aug.source.spans.size(); ++t) {
    const auto& span = aug.source.spans[t];
    out.append(cps, cursor, span.end - cursor);
    cursor = span.end;
    while (next_group < aug.groups.size() && aug.groups[next_group].source_index == t) {
      for (const auto& c : aug.groups[next_group].candidates) out += utf8::decode(c);
      ++next_group;
    }
  }
  out.append(cps, cursor, cps.size() - cursor);
  return utf8::encode(out);
}

std::string augmented_to_json(const AugmentedSequence& aug, const Vocab& vocab) {
  using nlohmann::json;
  json j;
  j["text"] = aug.source.text;
  j["expanded"] = expanded_surface(aug);
  j["ids"] = aug.ids;
  j["m"] = aug.origin_mask;
  json tokens = json::array();
  for (TokenId id : aug.ids) tokens.push_back(vocab.token(id));
  j["tokens"] = tokens;
  json groups = json::array();
  for (const auto& g : aug.groups) {
    json jg;
    jg["surface"] = g.surface;
    jg["anchor"] = g.anchor_index;
    json ranges = json::array();
    for (const auto& r : g.candidate_ranges) ranges.push_back({r.start, r.end});
    jg["candidate_ranges"] = ranges;
    jg["candidates"] = g.candidates;
    jg["gold"] = g.gold_candidate ? json(*g.gold_candidate) : json(nullptr);
    groups.push_back(jg);
  }
  j["groups"] = groups;
  return j.dump();
}

}  // namespace hb
