#include "hanjabridge/model.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>

#include <nlohmann/json.hpp>

#include "hanjabridge/kernels.hpp"

namespace hb {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;

template <typename T>
void layer_norm(const T* x, const T* gain, const T* bias, std::size_t d, T* xhat, T* rstd_out, T* y) {
  double mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  *rstd_out = static_cast<T>(rstd);
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = static_cast<T>((x[i] - mean) * rstd);
    y[i] = gain[i] * xhat[i] + bias[i];
  }
}

// dx += LN'(dy); also accumulates dgain / dbias.
template <typename T>
void layer_norm_backward(const T* dy, const T* xhat, T rstd, const T* gain, std::size_t d, T* dx,
                         T* dgain, T* dbias) {
  double mean_dxhat = 0.0;
  double mean_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double dxh = static_cast<double>(dy[i]) * gain[i];
    mean_dxhat += dxh;
    mean_dxhat_xhat += dxh * xhat[i];
    dgain[i] += dy[i] * xhat[i];
    dbias[i] += dy[i];
  }
  mean_dxhat /= static_cast<double>(d);
  mean_dxhat_xhat /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double dxh = static_cast<double>(dy[i]) * gain[i];
    dx[i] += static_cast<T>(rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
T gelu(T u) {
  const double x = u;
  return static_cast<T>(0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))));
}

template <typename T>
T gelu_grad(T u) {
  const double x = u;
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return static_cast<T>(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x));
}

template <typename T>
void resize(std::vector<T>& v, std::size_t n) {
  v.assign(n, T(0));
}

}  // namespace

// ----- config -----

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || max_positions == 0) {
    throw ModelError("model config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) throw ModelError("model config: d_model must be divisible by n_heads");
  if (vocab_size < Vocab::kNumSpecials) throw ModelError("model config: vocab_size smaller than specials");
}

bool ModelConfig::same_shape(const ModelConfig& o) const {
  return n_layers == o.n_layers && n_heads == o.n_heads && d_model == o.d_model && d_ff == o.d_ff &&
         vocab_size == o.vocab_size && max_positions == o.max_positions && projection_dim == o.projection_dim;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                     {"d_model", c.d_model},       {"d_ff", c.d_ff},
                     {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
                     {"seed", c.seed},             {"projection_dim", c.projection_dim}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("n_layers")) j.at("n_layers").get_to(c.n_layers);
  if (j.contains("n_heads")) j.at("n_heads").get_to(c.n_heads);
  if (j.contains("d_model")) j.at("d_model").get_to(c.d_model);
  if (j.contains("d_ff")) j.at("d_ff").get_to(c.d_ff);
  if (j.contains("vocab_size")) j.at("vocab_size").get_to(c.vocab_size);
  if (j.contains("max_positions")) j.at("max_positions").get_to(c.max_positions);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("projection_dim")) j.at("projection_dim").get_to(c.projection_dim);
}

// ----- layout -----

ParamLayout ParamLayout::build(const ModelConfig& c) {
  c.validate();
  ParamLayout L;
  std::size_t cursor = 0;
  auto add = [&](std::string name, std::vector<std::size_t> shape, ParamGroup group, std::size_t block,
                 bool weight, bool gain) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    TensorInfo info{std::move(name), std::move(shape), cursor, n, group, block, weight, gain};
    L.tensors.push_back(info);
    cursor += n;
    return info.offset;
  };
  const auto d = c.d_model;
  L.tok_emb = add("tok_emb", {c.vocab_size, d}, ParamGroup::embeddings, 0, true, false);
  L.pos_emb = add("pos_emb", {c.max_positions, d}, ParamGroup::embeddings, 0, true, false);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    LayerOffsets o{};
    o.ln1_g = add(p + "ln1.gain", {d}, ParamGroup::block, l, false, true);
    o.ln1_b = add(p + "ln1.bias", {d}, ParamGroup::block, l, false, false);
    o.wq = add(p + "attn.wq", {d, d}, ParamGroup::block, l, true, false);
    o.wk = add(p + "attn.wk", {d, d}, ParamGroup::block, l, true, false);
    o.wv = add(p + "attn.wv", {d, d}, ParamGroup::block, l, true, false);
    o.wo = add(p + "attn.wo", {d, d}, ParamGroup::block, l, true, false);
    o.ln2_g = add(p + "ln2.gain", {d}, ParamGroup::block, l, false, true);
    o.ln2_b = add(p + "ln2.bias", {d}, ParamGroup::block, l, false, false);
    o.w1 = add(p + "ffn.w1", {c.d_ff, d}, ParamGroup::block, l, true, false);
    o.b1 = add(p + "ffn.b1", {c.d_ff}, ParamGroup::block, l, false, false);
    o.w2 = add(p + "ffn.w2", {d, c.d_ff}, ParamGroup::block, l, true, false);
    o.b2 = add(p + "ffn.b2", {d}, ParamGroup::block, l, false, false);
    L.layers.push_back(o);
  }
  L.lnf_g = add("final_norm.gain", {d}, ParamGroup::final_norm, 0, false, true);
  L.lnf_b = add("final_norm.bias", {d}, ParamGroup::final_norm, 0, false, false);
  L.head_w = add("head.weight", {c.vocab_size, d}, ParamGroup::head, 0, true, false);
  L.head_b = add("head.bias", {c.vocab_size}, ParamGroup::head, 0, false, false);
  if (c.projection_dim > 0) {
    L.proj = add("distill.projection", {c.projection_dim, d}, ParamGroup::projection, 0, true, false);
  }
  L.total = cursor;
  return L;
}

const TensorInfo& ParamLayout::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw ModelError("no tensor named '" + std::string(name) + "'");
}

template <typename T>
std::span<T> Params<T>::tensor(std::string_view name) {
  const auto& t = layout.find(name);
  return {data.data() + t.offset, t.size};
}

template <typename T>
std::span<const T> Params<T>::tensor(std::string_view name) const {
  const auto& t = layout.find(name);
  return {data.data() + t.offset, t.size};
}

template <typename T>
Params<T> init_params(const ModelConfig& config) {
  Params<T> p;
  p.config = config;
  p.layout = ParamLayout::build(config);
  p.data.assign(p.layout.total, T(0));
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  for (const auto& t : p.layout.tensors) {
    T* dst = p.data.data() + t.offset;
    if (t.is_weight) {
      for (std::size_t i = 0; i < t.size; ++i) dst[i] = static_cast<T>(normal(rng));
    } else if (t.is_gain) {
      std::fill(dst, dst + t.size, T(1));
    }
  }
  return p;
}

template <typename T>
Params<T> grow_vocab(const Params<T>& params, std::size_t new_vocab_size, std::uint64_t seed) {
  const auto old_vocab = params.config.vocab_size;
  if (new_vocab_size < old_vocab) throw ModelError("grow_vocab: vocabulary cannot shrink");
  ModelConfig cfg = params.config;
  cfg.vocab_size = new_vocab_size;
  Params<T> out;
  out.config = cfg;
  out.layout = ParamLayout::build(cfg);
  out.data.assign(out.layout.total, T(0));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  for (const auto& t : out.layout.tensors) {
    const auto& old = params.layout.find(t.name);
    T* dst = out.data.data() + t.offset;
    const T* src = params.data.data() + old.offset;
    std::copy(src, src + old.size, dst);
    if (t.size > old.size) {
      // Row-extended tensors (tok_emb, head.weight, head.bias).
      for (std::size_t i = old.size; i < t.size; ++i) dst[i] = t.is_weight ? static_cast<T>(normal(rng)) : T(0);
    }
  }
  return out;
}

template <typename T>
void init_row_from_pieces(Params<T>& params, TokenId row, std::span<const TokenId> pieces) {
  const auto& c = params.config;
  if (row >= c.vocab_size) throw ModelError("init_row_from_pieces: row out of range");
  if (pieces.empty()) throw ModelError("init_row_from_pieces: no pieces");
  for (auto p : pieces) {
    if (p >= c.vocab_size) throw ModelError("init_row_from_pieces: piece out of range");
  }
  const std::size_t d = c.d_model;
  T* emb = params.ptr(params.layout.tok_emb);
  std::vector<double> mean(d, 0.0);
  for (auto p : pieces) {
    for (std::size_t i = 0; i < d; ++i) mean[i] += emb[p * d + i];
  }
  for (std::size_t i = 0; i < d; ++i) emb[row * d + i] = static_cast<T>(mean[i] / static_cast<double>(pieces.size()));
  T* hw = params.ptr(params.layout.head_w);
  std::copy(hw + pieces[0] * d, hw + (pieces[0] + 1) * d, hw + row * d);
  T* hb_ = params.ptr(params.layout.head_b);
  hb_[row] = hb_[pieces[0]];
}

template <typename T>
Params<T> with_projection(const Params<T>& params, std::size_t projection_dim, std::uint64_t seed) {
  ModelConfig cfg = params.config;
  cfg.projection_dim = projection_dim;
  Params<T> out;
  out.config = cfg;
  out.layout = ParamLayout::build(cfg);
  out.data.assign(out.layout.total, T(0));
  for (const auto& t : params.layout.tensors) {
    if (t.group == ParamGroup::projection) continue;
    const auto& dst = out.layout.find(t.name);
    std::copy(params.data.begin() + static_cast<std::ptrdiff_t>(t.offset),
              params.data.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size),
              out.data.begin() + static_cast<std::ptrdiff_t>(dst.offset));
  }
  if (projection_dim > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, kInitStd);
    for (std::size_t i = 0; i < projection_dim * cfg.d_model; ++i) {
      out.data[out.layout.proj + i] = static_cast<T>(normal(rng));
    }
  }
  return out;
}

template <typename To, typename From>
Params<To> convert_params(const Params<From>& params) {
  Params<To> out;
  out.config = params.config;
  out.layout = params.layout;
  out.data.assign(params.data.begin(), params.data.end());
  return out;
}

// ----- forward -----

template <typename T>
void forward(const Params<T>& P, std::span<const TokenId> ids, const AttentionMask& mask, Activations<T>& act) {
  const auto& c = P.config;
  const auto& L = P.layout;
  const std::size_t n = ids.size();
  if (n == 0) throw ModelError("forward: empty sequence");
  if (n > c.max_positions) {
    throw ModelError("forward: sequence of " + std::to_string(n) + " exceeds max_positions " +
                     std::to_string(c.max_positions));
  }
  if (mask.size() != n) throw ModelError("forward: mask size does not match sequence");
  const std::size_t d = c.d_model, H = c.n_heads, hd = c.head_dim(), ff = c.d_ff, V = c.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  act.length = n;
  act.layers.resize(c.n_layers);
  std::vector<T> x(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    const auto id = static_cast<std::size_t>(ids[t]);
    if (ids[t] < 0 || id >= V) throw ModelError("forward: token id out of range");
    const T* e = P.ptr(L.tok_emb + id * d);
    const T* pe = P.ptr(L.pos_emb + t * d);
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = e[i] + pe[i];
  }

  std::vector<double> scores(n);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& o = L.layers[l];
    auto& A = act.layers[l];
    A.x_in = x;
    resize(A.xhat1, n * d); resize(A.rstd1, n); resize(A.a, n * d);
    resize(A.q, n * d); resize(A.k, n * d); resize(A.v, n * d);
    resize(A.att, H * n * n); resize(A.ctx, n * d);
    resize(A.xhat2, n * d); resize(A.rstd2, n); resize(A.b, n * d);
    resize(A.u, n * ff); resize(A.g, n * ff);

    for (std::size_t t = 0; t < n; ++t) {
      layer_norm(&x[t * d], P.ptr(o.ln1_g), P.ptr(o.ln1_b), d, &A.xhat1[t * d], &A.rstd1[t], &A.a[t * d]);
      kernels::matvec(P.ptr(o.wq), &A.a[t * d], &A.q[t * d], d, d);
      kernels::matvec(P.ptr(o.wk), &A.a[t * d], &A.k[t * d], d, d);
      kernels::matvec(P.ptr(o.wv), &A.a[t * d], &A.v[t * d], d, d);
    }
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto* row = mask.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          if (!row[j]) continue;
          scores[j] = scale * kernels::dot(&A.q[i * d + h * hd], &A.k[j * d + h * hd], hd);
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!row[j]) continue;
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        T* att = &A.att[(h * n + i) * n];
        T* ctx = &A.ctx[i * d + h * hd];
        for (std::size_t j = 0; j < n; ++j) {
          if (!row[j]) continue;
          att[j] = static_cast<T>(scores[j] / z);
          kernels::axpy(att[j], &A.v[j * d + h * hd], ctx, hd);
        }
      }
    }
    std::vector<T> tmp(std::max(d, ff));
    for (std::size_t t = 0; t < n; ++t) {
      kernels::matvec(P.ptr(o.wo), &A.ctx[t * d], tmp.data(), d, d);
      for (std::size_t i = 0; i < d; ++i) x[t * d + i] += tmp[i];
    }
    A.x_mid = x;
    for (std::size_t t = 0; t < n; ++t) {
      layer_norm(&x[t * d], P.ptr(o.ln2_g), P.ptr(o.ln2_b), d, &A.xhat2[t * d], &A.rstd2[t], &A.b[t * d]);
      kernels::matvec(P.ptr(o.w1), &A.b[t * d], &A.u[t * ff], ff, d);
      const T* b1 = P.ptr(o.b1);
      for (std::size_t i = 0; i < ff; ++i) {
        A.u[t * ff + i] += b1[i];
        A.g[t * ff + i] = gelu(A.u[t * ff + i]);
      }
      kernels::matvec(P.ptr(o.w2), &A.g[t * ff], tmp.data(), d, ff);
      const T* b2 = P.ptr(o.b2);
      for (std::size_t i = 0; i < d; ++i) x[t * d + i] += tmp[i] + b2[i];
    }
  }
  act.x_out = x;
  resize(act.xhatf, n * d);
  resize(act.rstdf, n);
  resize(act.final_hidden, n * d);
  resize(act.logits, n * V);
  for (std::size_t t = 0; t < n; ++t) {
    layer_norm(&x[t * d], P.ptr(L.lnf_g), P.ptr(L.lnf_b), d, &act.xhatf[t * d], &act.rstdf[t],
               &act.final_hidden[t * d]);
    kernels::matvec(P.ptr(L.head_w), &act.final_hidden[t * d], &act.logits[t * V], V, d);
    const T* hb_ = P.ptr(L.head_b);
    for (std::size_t v = 0; v < V; ++v) act.logits[t * V + v] += hb_[v];
  }
}

namespace {

template <typename T>
ForwardTrace make_trace_impl(const Activations<T>& act, const ModelConfig& c) {
  ForwardTrace tr;
  tr.length = act.length;
  tr.n_layers = c.n_layers;
  tr.n_heads = c.n_heads;
  tr.d_model = c.d_model;
  const std::size_t n = act.length, d = c.d_model;
  tr.attn.reserve(c.n_layers * c.n_heads * n * n);
  tr.hidden.reserve(c.n_layers * n * d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& A = act.layers[l];
    tr.attn.insert(tr.attn.end(), A.att.begin(), A.att.end());
    const auto& next = (l + 1 < c.n_layers) ? act.layers[l + 1].x_in : act.x_out;
    tr.hidden.insert(tr.hidden.end(), next.begin(), next.end());
  }
  tr.final_hidden.assign(act.final_hidden.begin(), act.final_hidden.end());
  return tr;
}

}  // namespace

ForwardTrace make_trace(const Activations<float>& act, const ModelConfig& config) {
  return make_trace_impl(act, config);
}
ForwardTrace make_trace(const Activations<double>& act, const ModelConfig& config) {
  return make_trace_impl(act, config);
}

template <typename T>
ForwardResult<T> forward(const Params<T>& params, std::span<const TokenId> ids, const AttentionMask& mask) {
  Activations<T> act;
  forward(params, ids, mask, act);
  ForwardResult<T> r;
  r.trace = make_trace(act, params.config);
  r.logits = std::move(act.logits);
  return r;
}

// ----- backward -----

template <typename T>
void backward(const Params<T>& P, const Activations<T>& act, std::span<const TokenId> ids,
              const AttentionMask& mask, std::span<const T> dlogits, std::span<const T> dhidden,
              std::vector<T>& grad) {
  const auto& c = P.config;
  const auto& L = P.layout;
  const std::size_t n = act.length;
  const std::size_t d = c.d_model, H = c.n_heads, hd = c.head_dim(), ff = c.d_ff, V = c.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (grad.size() != P.data.size()) grad.assign(P.data.size(), T(0));
  if (dlogits.size() != n * V) throw ModelError("backward: dlogits has the wrong size");
  if (!dhidden.empty() && dhidden.size() != n * d) throw ModelError("backward: dhidden has the wrong size");

  // d final_hidden
  std::vector<T> dh(n * d, T(0));
  if (!dhidden.empty()) std::copy(dhidden.begin(), dhidden.end(), dh.begin());
  for (std::size_t t = 0; t < n; ++t) {
    const T* dl = &dlogits[t * V];
    kernels::outer_acc(grad.data() + L.head_w, dl, &act.final_hidden[t * d], V, d);
    for (std::size_t v = 0; v < V; ++v) grad[L.head_b + v] += dl[v];
    kernels::matvec_t_acc(P.ptr(L.head_w), dl, &dh[t * d], V, d);
  }
  std::vector<T> dx(n * d, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    layer_norm_backward(&dh[t * d], &act.xhatf[t * d], act.rstdf[t], P.ptr(L.lnf_g), d, &dx[t * d],
                        grad.data() + L.lnf_g, grad.data() + L.lnf_b);
  }

  std::vector<T> dg(ff), du(ff), db(d), da(n * d), dq(n * d), dk(n * d), dv(n * d), dctx(n * d);
  std::vector<double> datt(n);
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& o = L.layers[li];
    const auto& A = act.layers[li];
    // feed-forward: x_out = x_mid + W2 gelu(W1 LN2(x_mid) + b1) + b2
    for (std::size_t t = 0; t < n; ++t) {
      const T* dy = &dx[t * d];
      for (std::size_t i = 0; i < d; ++i) grad[o.b2 + i] += dy[i];
      kernels::outer_acc(grad.data() + o.w2, dy, &A.g[t * ff], d, ff);
      std::fill(dg.begin(), dg.end(), T(0));
      kernels::matvec_t_acc(P.ptr(o.w2), dy, dg.data(), d, ff);
      for (std::size_t i = 0; i < ff; ++i) du[i] = dg[i] * gelu_grad(A.u[t * ff + i]);
      for (std::size_t i = 0; i < ff; ++i) grad[o.b1 + i] += du[i];
      kernels::outer_acc(grad.data() + o.w1, du.data(), &A.b[t * d], ff, d);
      std::fill(db.begin(), db.end(), T(0));
      kernels::matvec_t_acc(P.ptr(o.w1), du.data(), db.data(), ff, d);
      layer_norm_backward(db.data(), &A.xhat2[t * d], A.rstd2[t], P.ptr(o.ln2_g), d, &dx[t * d],
                          grad.data() + o.ln2_g, grad.data() + o.ln2_b);
    }
    // attention: x_mid = x_in + Wo ctx
    std::fill(dctx.begin(), dctx.end(), T(0));
    for (std::size_t t = 0; t < n; ++t) {
      kernels::outer_acc(grad.data() + o.wo, &dx[t * d], &A.ctx[t * d], d, d);
      kernels::matvec_t_acc(P.ptr(o.wo), &dx[t * d], &dctx[t * d], d, d);
    }
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto* row = mask.row(i);
        const T* att = &A.att[(h * n + i) * n];
        const T* dci = &dctx[i * d + h * hd];
        double weighted = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!row[j]) continue;
          datt[j] = kernels::dot(dci, &A.v[j * d + h * hd], hd);
          weighted += att[j] * datt[j];
          kernels::axpy(att[j], dci, &dv[j * d + h * hd], hd);
        }
        for (std::size_t j = 0; j < n; ++j) {
          if (!row[j]) continue;
          const T ds = static_cast<T>(att[j] * (datt[j] - weighted) * scale);
          if (ds == T(0)) continue;
          kernels::axpy(ds, &A.k[j * d + h * hd], &dq[i * d + h * hd], hd);
          kernels::axpy(ds, &A.q[i * d + h * hd], &dk[j * d + h * hd], hd);
        }
      }
    }
    std::fill(da.begin(), da.end(), T(0));
    for (std::size_t t = 0; t < n; ++t) {
      kernels::outer_acc(grad.data() + o.wq, &dq[t * d], &A.a[t * d], d, d);
      kernels::outer_acc(grad.data() + o.wk, &dk[t * d], &A.a[t * d], d, d);
      kernels::outer_acc(grad.data() + o.wv, &dv[t * d], &A.a[t * d], d, d);
      kernels::matvec_t_acc(P.ptr(o.wq), &dq[t * d], &da[t * d], d, d);
      kernels::matvec_t_acc(P.ptr(o.wk), &dk[t * d], &da[t * d], d, d);
      kernels::matvec_t_acc(P.ptr(o.wv), &dv[t * d], &da[t * d], d, d);
      layer_norm_backward(&da[t * d], &A.xhat1[t * d], A.rstd1[t], P.ptr(o.ln1_g), d, &dx[t * d],
                          grad.data() + o.ln1_g, grad.data() + o.ln1_b);
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    const auto id = static_cast<std::size_t>(ids[t]);
    kernels::axpy(T(1), &dx[t * d], grad.data() + L.tok_emb + id * d, d);
    kernels::axpy(T(1), &dx[t * d], grad.data() + L.pos_emb + t * d, d);
  }
}

// ----- LM loss -----

std::size_t LmTargets::count() const {
  return static_cast<std::size_t>(std::count(include.begin(), include.end(), std::uint8_t{1}));
}

LmTargets next_original_targets(const AugmentedSequence& aug) {
  const std::size_t n = aug.ids.size();
  LmTargets t;
  t.target.assign(n, Vocab::kPad);
  t.include.assign(n, 0);
  for (std::size_t i = 0; i + 1 < n; ++i) t.target[i] = aug.ids[i + 1];
  const auto& O = aug.original_positions;
  for (std::size_t r = 0; r + 1 < O.size(); ++r) {
    t.target[O[r]] = aug.ids[O[r + 1]];
    t.include[O[r]] = 1;
  }
  return t;
}

LmTargets next_token_targets(std::span<const TokenId> ids) {
  LmTargets t;
  t.target.assign(ids.size(), Vocab::kPad);
  t.include.assign(ids.size(), 0);
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    t.target[i] = ids[i + 1];
    t.include[i] = 1;
  }
  return t;
}

template <typename T>
double log_prob(std::span<const T> logits, std::size_t vocab, std::size_t pos, TokenId id) {
  const T* z = logits.data() + pos * vocab;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(z[v]));
  double s = 0.0;
  for (std::size_t v = 0; v < vocab; ++v) s += std::exp(static_cast<double>(z[v]) - mx);
  return static_cast<double>(z[static_cast<std::size_t>(id)]) - mx - std::log(s);
}

template <typename T>
LmLossSum lm_loss_sum(std::span<const T> logits, std::size_t vocab, const LmTargets& targets,
                      std::vector<T>* dlogits, double grad_scale) {
  LmLossSum out;
  const std::size_t n = targets.include.size();
  if (logits.size() != n * vocab) throw ModelError("lm_loss: logits do not match targets");
  if (dlogits && dlogits->size() != logits.size()) dlogits->assign(logits.size(), T(0));
  std::vector<double> p(vocab);
  for (std::size_t t = 0; t < n; ++t) {
    if (!targets.include[t]) continue;
    const T* z = logits.data() + t * vocab;
    const auto y = static_cast<std::size_t>(targets.target[t]);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(z[v]));
    double s = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      p[v] = std::exp(static_cast<double>(z[v]) - mx);
      s += p[v];
    }
    out.sum += -(static_cast<double>(z[y]) - mx - std::log(s));
    ++out.count;
    if (dlogits) {
      T* g = dlogits->data() + t * vocab;
      for (std::size_t v = 0; v < vocab; ++v) {
        const double pv = p[v] / s - (v == y ? 1.0 : 0.0);
        g[v] += static_cast<T>(grad_scale * pv);
      }
    }
  }
  return out;
}

template <typename T>
double lm_loss(std::span<const T> logits, std::size_t vocab, const AugmentedSequence& aug, Reduction reduction) {
  if (aug.original_positions.size() < 2) {
    std::cerr << "warning: lm_loss on a sequence with fewer than two original tokens; loss is 0\n";
    return 0.0;
  }
  const auto s = lm_loss_sum(logits, vocab, next_original_targets(aug));
  return reduction == Reduction::mean ? s.sum / static_cast<double>(s.count) : s.sum;
}

// ----- explicit instantiations -----

#define HB_INSTANTIATE(T)                                                                              \
  template struct Params<T>;                                                                           \
  template Params<T> init_params<T>(const ModelConfig&);                                               \
  template Params<T> grow_vocab<T>(const Params<T>&, std::size_t, std::uint64_t);                      \
  template void init_row_from_pieces<T>(Params<T>&, TokenId, std::span<const TokenId>);                      \
  template Params<T> with_projection<T>(const Params<T>&, std::size_t, std::uint64_t);                 \
  template void forward<T>(const Params<T>&, std::span<const TokenId>, const AttentionMask&,          \
                           Activations<T>&);                                                           \
  template ForwardResult<T> forward<T>(const Params<T>&, std::span<const TokenId>,                     \
                                       const AttentionMask&);                                          \
  template void backward<T>(const Params<T>&, const Activations<T>&, std::span<const TokenId>,         \
                            const AttentionMask&, std::span<const T>, std::span<const T>,              \
                            std::vector<T>&);                                                          \
  template LmLossSum lm_loss_sum<T>(std::span<const T>, std::size_t, const LmTargets&, std::vector<T>*, \
                                    double);                                                           \
  template double lm_loss<T>(std::span<const T>, std::size_t, const AugmentedSequence&, Reduction);    \
  template double log_prob<T>(std::span<const T>, std::size_t, std::size_t, TokenId);

HB_INSTANTIATE(float)
HB_INSTANTIATE(double)
#undef HB_INSTANTIATE

template Params<double> convert_params<double, float>(const Params<float>&);
template Params<float> convert_params<float, double>(const Params<double>&);
template Params<float> convert_params<float, float>(const Params<float>&);
template Params<double> convert_params<double, double>(const Params<double>&);

}  // namespace hb
