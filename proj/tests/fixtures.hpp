#pragma once

#include <random>
#include <vector>

#include "hanjabridge/augment.hpp"
#include "hanjabridge/model.hpp"

namespace hb::fixture {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 1;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 11;
  c.max_positions = 12;
  c.seed = 5;
  return c;
}

// originals 3 4 5 [cands 6 7] 8 9
inline AugmentedSequence toy_sequence() {
  AugmentedSequence aug;
  aug.ids = {3, 4, 5, 6, 7, 8, 9};
  aug.origin_mask = {1, 1, 1, 0, 0, 1, 1};
  aug.original_positions = {0, 1, 2, 5, 6};
  ExpansionGroup g;
  g.anchor_index = 2;
  g.source_index = 2;
  g.candidate_ranges = {{3, 4}, {4, 5}};
  g.candidates = {"x", "y"};
  g.surface = "a";
  aug.groups.push_back(g);
  aug.source.ids = {3, 4, 5, 8, 9};
  return aug;
}

inline std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

}  // namespace hb::fixture
