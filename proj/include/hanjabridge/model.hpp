#pragma once

// Tiny pre-LayerNorm decoder-only transformer: learned token and position embeddings,
// multi-head attention under an arbitrary boolean mask, GELU feed-forward, final LayerNorm and an
// untied LM head  Z_t = W h_t + b.  Forward caches every activation so that backward() can
// produce exact gradients; both float and double instantiations exist (double for gradient
// checks, float for training).

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "hanjabridge/augment.hpp"
#include "hanjabridge/tokenizer.hpp"

namespace hb {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t vocab_size = Vocab::kNumSpecials;
  std::size_t max_positions = 64;
  std::uint64_t seed = 0;
  // Width of an optional trainable projection of final hidden states (student -> teacher space).
  std::size_t projection_dim = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  // Throws ModelError for impossible shapes.
  void validate() const;
  bool same_shape(const ModelConfig& other) const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class ParamGroup { embeddings, block, final_norm, head, projection };

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  ParamGroup group = ParamGroup::block;
  std::size_t block = 0;  // layer index for ParamGroup::block
  bool is_weight = true;  // drawn from N(0, 0.02); otherwise zero (bias) or one (norm gain)
  bool is_gain = false;
};

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ParamLayout {
  std::size_t tok_emb = 0, pos_emb = 0;
  std::vector<LayerOffsets> layers;
  std::size_t lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0, proj = 0;
  std::size_t total = 0;
  std::vector<TensorInfo> tensors;

  static ParamLayout build(const ModelConfig& config);
  const TensorInfo& find(std::string_view name) const;
};

template <typename T>
struct Params {
  ModelConfig config;
  ParamLayout layout;
  std::vector<T> data;

  T* ptr(std::size_t offset) { return data.data() + offset; }
  const T* ptr(std::size_t offset) const { return data.data() + offset; }
  std::span<T> tensor(std::string_view name);
  std::span<const T> tensor(std::string_view name) const;
  std::size_t count() const { return data.size(); }
};

// Deterministic from config.seed: weights ~ N(0, 0.02), biases 0, norm gains 1.
template <typename T>
Params<T> init_params(const ModelConfig& config);

// Copy with a larger vocabulary; existing rows are preserved, new token-embedding and head rows
// are drawn from N(0, 0.02) with `seed`.
template <typename T>
Params<T> grow_vocab(const Params<T>& params, std::size_t new_vocab_size, std::uint64_t seed);

// Sets an expanded row from the tokens the old vocabulary splits it into: the embedding becomes
// the mean of the pieces' embeddings, the head row and bias those of the first piece.
template <typename T>
void init_row_from_pieces(Params<T>& params, TokenId row, std::span<const TokenId> pieces);

// Copy of the transformer with a projection head added (or replaced) for distillation.
template <typename T>
Params<T> with_projection(const Params<T>& params, std::size_t projection_dim, std::uint64_t seed);

template <typename To, typename From>
Params<To> convert_params(const Params<From>& params);

// Attention probabilities and hidden states of one forward pass.
struct ForwardTrace {
  std::size_t length = 0, n_layers = 0, n_heads = 0, d_model = 0;
  std::vector<double> attn;          // [layer][head][i][j]
  std::vector<double> hidden;        // [layer][pos][d]: residual stream after each block
  std::vector<double> final_hidden;  // [pos][d]: normalized state fed to the LM head

  double attention(std::size_t layer, std::size_t head, std::size_t i, std::size_t j) const {
    return attn[((layer * n_heads + head) * length + i) * length + j];
  }
  std::span<const double> hidden_at(std::size_t layer, std::size_t pos) const {
    return {hidden.data() + (layer * length + pos) * d_model, d_model};
  }
  std::span<const double> final_at(std::size_t pos) const {
    return {final_hidden.data() + pos * d_model, d_model};
  }
};

// Cached activations of a forward pass (reused across calls to avoid reallocations).
template <typename T>
struct Activations {
  std::size_t length = 0;
  struct Layer {
    std::vector<T> x_in, xhat1, rstd1, a, q, k, v, att, ctx, x_mid, xhat2, rstd2, b, u, g;
  };
  std::vector<Layer> layers;
  std::vector<T> x_out, xhatf, rstdf, final_hidden, logits;
};

template <typename T>
void forward(const Params<T>& params, std::span<const TokenId> ids, const AttentionMask& mask,
             Activations<T>& act);

ForwardTrace make_trace(const Activations<float>& act, const ModelConfig& config);
ForwardTrace make_trace(const Activations<double>& act, const ModelConfig& config);

template <typename T>
struct ForwardResult {
  std::vector<T> logits;  // [pos][vocab]
  ForwardTrace trace;
};

// Logits for every position plus the trace. Throws ModelError when the sequence is too long or
// the mask does not match.
template <typename T>
ForwardResult<T> forward(const Params<T>& params, std::span<const TokenId> ids, const AttentionMask& mask);

// Accumulates parameter gradients into `grad` (size params.count()). `dlogits` is [L x V];
// `dhidden` is either empty or [L x d_model], a gradient on the final hidden states.
template <typename T>
void backward(const Params<T>& params, const Activations<T>& act, std::span<const TokenId> ids,
              const AttentionMask& mask, std::span<const T> dlogits, std::span<const T> dhidden,
              std::vector<T>& grad);

// ----- language-model loss -----

enum class Reduction { mean, sum };

struct LmTargets {
  std::vector<TokenId> target;
  std::vector<std::uint8_t> include;

  std::size_t count() const;
};

// Each original position except the last predicts the next ORIGINAL token; candidate positions
// carry the naive next-token label but are excluded.
LmTargets next_original_targets(const AugmentedSequence& aug);
// Plain next-token targets over every position (no restriction).
LmTargets next_token_targets(std::span<const TokenId> ids);

struct LmLossSum {
  double sum = 0.0;  // sum of -log p over included positions
  std::size_t count = 0;
};

// Sum of negative log-likelihoods. When dlogits is non-null, adds grad_scale * d(sum)/d(logits).
template <typename T>
LmLossSum lm_loss_sum(std::span<const T> logits, std::size_t vocab, const LmTargets& targets,
                      std::vector<T>* dlogits = nullptr, double grad_scale = 1.0);

// L_LM for one augmented sequence. Fewer than two original tokens gives 0 and a warning.
template <typename T>
double lm_loss(std::span<const T> logits, std::size_t vocab, const AugmentedSequence& aug,
               Reduction reduction = Reduction::mean);

// log softmax(logits[pos])[id] in double precision.
template <typename T>
double log_prob(std::span<const T> logits, std::size_t vocab, std::size_t pos, TokenId id);

}  // namespace hb
