#include "hanjabridge/analysis.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "hanjabridge/parallel.hpp"

namespace hb {

RolloutMatrix rollout(const ForwardTrace& trace) {
  const std::size_t n = trace.length;
  RolloutMatrix r(n);
  for (std::size_t i = 0; i < n; ++i) r(i, i) = 1.0;
  std::vector<double> a(n * n), next(n * n);
  for (std::size_t l = 0; l < trace.n_layers; ++l) {
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t h = 0; h < trace.n_heads; ++h) {
          const double x = trace.attention(l, h, i, j);
          if (!(x >= 0.0)) throw std::invalid_argument("rollout: negative or NaN attention weight");
          s += x;
        }
        double v = 0.5 * s / static_cast<double>(trace.n_heads) + (i == j ? 0.5 : 0.0);
        a[i * n + j] = v;
        row += v;
      }
      const double attn_sum = (row - 0.5) * 2.0 * static_cast<double>(trace.n_heads);
      if (std::abs(attn_sum - static_cast<double>(trace.n_heads)) > 1e-6 * static_cast<double>(trace.n_heads)) {
        throw std::invalid_argument("rollout: attention rows of layer " + std::to_string(l) + " do not sum to 1");
      }
      for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= row;
    }
    // R <- A'_l R
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t m = 0; m < n; ++m) s += a[i * n + m] * r(m, j);
        next[i * n + j] = s;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) r(i, j) = next[i * n + j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (r(i, j) < 0.0) throw std::logic_error("rollout produced a negative entry");
      row += r(i, j);
    }
    if (std::abs(row - 1.0) > 1e-6) throw std::logic_error("rollout row " + std::to_string(i) + " sums to " + std::to_string(row));
  }
  return r;
}

ScoreSource parse_score_source(const std::string& text) {
  if (text == "final_original") return ScoreSource::final_original;
  if (text == "anchor") return ScoreSource::anchor;
  if (text == "mean_original") return ScoreSource::mean_original;
  throw std::invalid_argument("unknown score source '" + text + "' (final_original|anchor|mean_original)");
}

std::string to_string(ScoreSource source) {
  switch (source) {
    case ScoreSource::final_original: return "final_original";
    case ScoreSource::anchor: return "anchor";
    case ScoreSource::mean_original: return "mean_original";
  }
  return "?";
}

CandidateScores candidate_scores(const RolloutMatrix& r, const AugmentedSequence& aug, const ExpansionGroup& group,
                                 ScoreSource source) {
  if (group.candidate_ranges.empty()) throw std::invalid_argument("candidate_scores: empty group");
  if (group.span().end > r.size()) throw std::out_of_range("candidate_scores: group outside the rollout matrix");
  std::vector<std::size_t> rows;
  switch (source) {
    case ScoreSource::final_original:
      if (aug.original_positions.empty()) throw std::invalid_argument("candidate_scores: no original positions");
      rows.push_back(aug.original_positions.back());
      break;
    case ScoreSource::anchor: rows.push_back(group.anchor_index); break;
    case ScoreSource::mean_original: rows = aug.original_positions; break;
  }
  CandidateScores out;
  for (const auto& range : group.candidate_ranges) {
    double s = 0.0;
    for (std::size_t row : rows) {
      for (std::size_t j = range.start; j < range.end; ++j) s += r(row, j);
    }
    out.scores.push_back(s / static_cast<double>(rows.size()));
  }
  for (std::size_t c = 1; c < out.scores.size(); ++c) {
    if (out.scores[c] > out.scores[out.best]) out.best = c;
  }
  for (std::size_t c = 0; c < out.scores.size(); ++c) {
    if (c != out.best && out.scores[c] == out.scores[out.best]) out.tie = true;
  }
  return out;
}

bool gold_wins(const CandidateScores& scores, const ExpansionGroup& group) {
  return group.gold_candidate && !scores.tie && scores.best == *group.gold_candidate;
}

Rq1Buckets rq1_evaluate(const std::vector<AugmentedSequence>& items, const TraceFn& trace, ScoreSource source) {
  // per item: (k, correct) for each gold group, merged afterwards in item order
  std::vector<std::vector<std::pair<std::size_t, bool>>> per_item(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& aug = items[i];
    bool any = false;
    for (const auto& g : aug.groups) any = any || g.gold_candidate.has_value();
    if (!any) return;
    const auto r = rollout(trace(aug));
    for (const auto& g : aug.groups) {
      if (!g.gold_candidate) continue;
      per_item[i].emplace_back(g.size(), gold_wins(candidate_scores(r, aug, g, source), g));
    }
  });
  Rq1Buckets buckets;
  for (const auto& results : per_item) {
    for (const auto& [k, ok] : results) {
      auto& b = buckets[k];
      ++b.total;
      if (ok) ++b.correct;
    }
  }
  return buckets;
}

TraceFn model_tracer(const Params<float>& params, CandidateContext context) {
  return [&params, context](const AugmentedSequence& aug) {
    Activations<float> act;
    forward(params, std::span<const TokenId>(aug.ids), build_attention_mask(aug, context), act);
    return make_trace(act, params.config);
  };
}

Rq1Table rq1_accuracy(const std::vector<AugmentedSequence>& items, const std::vector<Rq1Checkpoint>& checkpoints,
                      CandidateContext context, ScoreSource source) {
  Rq1Table table;
  std::vector<Rq1Buckets> columns;
  for (const auto& ck : checkpoints) {
    table.steps.push_back(ck.step);
    columns.push_back(rq1_evaluate(items, model_tracer(*ck.params, context), source));
  }
  for (const auto& col : columns) {
    for (const auto& [k, b] : col) table.rows[k];
  }
  for (auto& [k, row] : table.rows) {
    for (const auto& col : columns) {
      auto it = col.find(k);
      row.push_back(it == col.end() ? std::nullopt : std::optional<Rq1Bucket>(it->second));
    }
  }
  return table;
}

std::string rq1_table_tsv(const Rq1Table& table) {
  std::ostringstream os;
  os << "k";
  for (auto s : table.steps) os << "\tstep_" << s;
  os << "\n";
  os.setf(std::ios::fixed);
  os.precision(4);
  for (const auto& [k, row] : table.rows) {
    os << k;
    for (const auto& b : row) {
      if (b) {
        os << "\t" << b->accuracy();
      } else {
        os << "\tNA";
      }
    }
    os << "\n";
  }
  return os.str();
}

void emit_heatmap(const RolloutMatrix& r, const AugmentedSequence& aug, const std::filesystem::path& path,
                  const HeatmapStyle& style) {
  const std::size_t n = r.size();
  const std::size_t c = std::max<std::size_t>(style.cell, 3);
  const std::size_t width = n * c, height = (n + 1) * c;
  std::vector<std::uint8_t> px(width * height * 3, 255);
  auto paint = [&](std::size_t x, std::size_t y, std::uint8_t red, std::uint8_t green, std::uint8_t blue) {
    auto* p = &px[(y * width + x) * 3];
    p[0] = red;
    p[1] = green;
    p[2] = blue;
  };

  // 0 plain, 1 candidate, 2 gold candidate
  std::vector<int> kind(n, 0);
  for (const auto& g : aug.groups) {
    for (std::size_t ci = 0; ci < g.candidate_ranges.size(); ++ci) {
      for (std::size_t j = g.candidate_ranges[ci].start; j < g.candidate_ranges[ci].end && j < n; ++j) {
        kind[j] = (g.gold_candidate && *g.gold_candidate == ci) ? 2 : 1;
      }
    }
  }
  for (std::size_t col = 0; col < n; ++col) {
    for (std::size_t y = 0; y < c; ++y) {
      for (std::size_t x = col * c; x < (col + 1) * c; ++x) {
        if (kind[col] == 1) paint(x, y, 0, 0, 255);
        if (kind[col] == 2) paint(x, y, 0, 200, 0);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = std::clamp(r(i, j), 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(255.0 * v));
      const std::size_t x0 = j * c, y0 = (i + 1) * c;
      for (std::size_t y = y0; y < y0 + c; ++y) {
        for (std::size_t x = x0; x < x0 + c; ++x) {
          const bool edge = y == y0 || y == y0 + c - 1 || x == x0 || x == x0 + c - 1;
          if (edge && kind[j] == 1) {
            paint(x, y, 0, 0, 255);
          } else if (edge && kind[j] == 2) {
            paint(x, y, 0, 200, 0);
          } else {
            paint(x, y, g, g, g);
          }
        }
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write heatmap " + path.string());
  out << "P6\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw std::runtime_error("write failed for heatmap " + path.string());
}

}  // namespace hb
