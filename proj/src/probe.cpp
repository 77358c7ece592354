#include "hanjabridge/probe.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hanjabridge/parallel.hpp"

namespace hb {

void ProbeItem::validate() const {
  if (options.size() < 2) throw ProbeError("probe item needs at least 2 options");
  if (gold >= options.size()) throw ProbeError("gold index out of range");
  std::set<std::string> seen;
  for (const auto& o : options) {
    if (o.empty()) throw ProbeError("empty option");
    if (!seen.insert(o).second) throw ProbeError("duplicate option '" + o + "'");
  }
  if (surface.empty()) throw ProbeError("empty surface");
}

void PromptTemplate::validate() const {
  for (const char* slot : {"{context}", "{surface}", "{options}"}) {
    if (text.find(slot) == std::string::npos) throw ProbeError(std::string("prompt template lacks the ") + slot + " slot");
  }
}

std::string PromptTemplate::render(const ProbeItem& item, const std::vector<std::size_t>& order) const {
  validate();
  std::string opts;
  for (std::size_t p = 0; p < order.size(); ++p) {
    if (p) opts += ' ';
    opts += item.options.at(order[p]);
  }
  std::string out;
  for (std::size_t i = 0; i < text.size();) {
    if (text.compare(i, 9, "{context}") == 0) {
      out += item.context;
      i += 9;
    } else if (text.compare(i, 9, "{surface}") == 0) {
      out += item.surface;
      i += 9;
    } else if (text.compare(i, 9, "{options}") == 0) {
      out += opts;
      i += 9;
    } else {
      out += text[i++];
    }
  }
  return out;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ProbeError("cannot open prompt template " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  PromptTemplate t;
  t.text = ss.str();
  while (!t.text.empty() && (t.text.back() == '\n' || t.text.back() == '\r')) t.text.pop_back();
  t.validate();
  return t;
}

std::vector<std::vector<std::size_t>> rotation_orders(std::size_t k, std::size_t gold) {
  std::vector<std::vector<std::size_t>> orders(k, std::vector<std::size_t>(k));
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t p = 0; p < k; ++p) orders[r][p] = (gold + p + k - r) % k;
  }
  return orders;
}

std::vector<std::string> render_prompts(const ProbeItem& item, const PromptTemplate& tmpl) {
  item.validate();
  std::vector<std::string> prompts;
  for (const auto& order : rotation_orders(item.options.size(), item.gold)) prompts.push_back(tmpl.render(item, order));
  return prompts;
}

std::vector<double> ParamsScorer::log_probs(const AugmentedSequence& seq, const AttentionMask& mask,
                                            const std::vector<std::size_t>& from,
                                            const std::vector<TokenId>& target) const {
  Activations<float> act;
  forward(params_, std::span<const TokenId>(seq.ids), mask, act);
  std::vector<double> out;
  for (std::size_t i = 0; i < from.size(); ++i) {
    out.push_back(log_prob(std::span<const float>(act.logits), params_.config.vocab_size, from[i], target[i]));
  }
  return out;
}

std::vector<double> UniformScorer::log_probs(const AugmentedSequence&, const AttentionMask&,
                                             const std::vector<std::size_t>& from, const std::vector<TokenId>&) const {
  return std::vector<double>(from.size(), -std::log(static_cast<double>(vocab_size_)));
}

double score_option(const ScoringModel& model, const AugmentedSequence& prompt, const std::vector<TokenId>& option,
                    CandidateContext context, bool length_normalize) {
  if (option.empty()) throw ProbeError("empty option");
  if (prompt.original_positions.empty()) throw ProbeError("empty prompt");
  AugmentedSequence seq = prompt;
  append_originals(seq, option);
  const std::size_t first = prompt.original_positions.size();
  std::vector<std::size_t> from;
  for (std::size_t j = 0; j < option.size(); ++j) from.push_back(seq.original_positions[first + j - 1]);
  const auto lp = model.log_probs(seq, build_attention_mask(seq, context), from, option);
  double s = 0.0;
  for (double x : lp) s += x;
  return length_normalize ? s / static_cast<double>(option.size()) : s;
}

double score_option(const ScoringModel& model, const Vocab& vocab, const std::string& prompt,
                    const std::string& option, bool length_normalize) {
  const auto ids = encode(vocab, option).ids;
  return score_option(model, unaugmented(encode(vocab, prompt)), ids, CandidateContext::prefix, length_normalize);
}

ProbeReport probe_run(const ScoringModel& model, const std::vector<ProbeItem>& items, const Vocab& vocab,
                      const Lexicon& lexicon, const ProbeConfig& config) {
  config.tmpl.validate();
  ProbeReport report;
  report.mode = config.hb_inference ? "hb_inference" : "no_hb_inference";
  report.items = items.size();
  report.details.resize(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& item = items[i];
    item.validate();
    auto& res = report.details[i];
    const std::size_t k = item.options.size();
    std::vector<std::vector<TokenId>> option_ids;
    for (const auto& o : item.options) {
      auto ids = encode(vocab, o).ids;
      if (ids.empty()) throw ProbeError("option '" + o + "' has no tokens");
      option_ids.push_back(std::move(ids));
    }
    res.scores.assign(k, 0.0);
    for (const auto& order : rotation_orders(k, item.gold)) {
      const Encoding enc = encode(vocab, config.tmpl.render(item, order));
      const AugmentedSequence prompt = config.hb_inference ? augment(enc, lexicon, vocab, config.augment) : unaugmented(enc);
      res.prompt_tokens += prompt.ids.size();
      for (std::size_t o = 0; o < k; ++o) {
        res.scores[o] += score_option(model, prompt, option_ids[o], config.context, config.length_normalize);
      }
    }
    for (auto& s : res.scores) s /= static_cast<double>(k);
    for (std::size_t o = 1; o < k; ++o) {
      if (res.scores[o] > res.scores[res.predicted]) res.predicted = o;
    }
    for (std::size_t o = 0; o < k; ++o) {
      if (o != res.predicted && res.scores[o] == res.scores[res.predicted]) res.tie = true;
    }
    res.correct = !res.tie && res.predicted == item.gold;
  });
  for (const auto& d : report.details) {
    report.total_tokens += d.prompt_tokens;
    if (d.correct) ++report.correct;
  }
  if (report.items) {
    report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.items);
    report.avg_tokens_per_sample = static_cast<double>(report.total_tokens) / static_cast<double>(report.items);
  }
  return report;
}

std::string probe_report_tsv(const std::vector<std::pair<std::string, ProbeReport>>& reports) {
  std::ostringstream os;
  os << "metric";
  for (const auto& [label, r] : reports) os << "\t" << label;
  os << "\nacc";
  os.setf(std::ios::fixed);
  os.precision(4);
  for (const auto& [label, r] : reports) os << "\t" << r.accuracy;
  os << "\ntotal_token";
  for (const auto& [label, r] : reports) os << "\t" << r.total_tokens;
  os.precision(2);
  os << "\navg_token_per_sample";
  for (const auto& [label, r] : reports) os << "\t" << r.avg_tokens_per_sample;
  os << "\n";
  return os.str();
}

std::vector<ProbeItem> load_probe_items(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ProbeError("cannot open probe set " + path.string());
  std::vector<ProbeItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ProbeItem item;
      item.context = j.at("context").get<std::string>();
      item.surface = j.at("surface").get<std::string>();
      item.options = j.at("options").get<std::vector<std::string>>();
      item.gold = j.at("gold").get<std::size_t>();
      item.validate();
      items.push_back(std::move(item));
    } catch (const std::exception& e) {
      throw ProbeError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return items;
}

void save_probe_items(const std::vector<ProbeItem>& items, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ProbeError("cannot write probe set " + path.string());
  for (const auto& item : items) {
    nlohmann::json j;
    j["context"] = item.context;
    j["surface"] = item.surface;
    j["options"] = item.options;
    j["gold"] = item.gold;
    out << j.dump() << "\n";
  }
}

}  // namespace hb
