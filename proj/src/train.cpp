#include "hanjabridge/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "hanjabridge/kernels.hpp"
#include "hanjabridge/parallel.hpp"

namespace hb {

// ----- freezing -----

FreezeSpec FreezeSpec::parse(const std::string& text) {
  FreezeSpec spec;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }), item.end());
    if (item.empty() || item == "none") continue;
    if (item == "embeddings") {
      spec.embeddings = true;
    } else if (item == "final_norm") {
      spec.final_norm = true;
    } else if (item == "head") {
      spec.head = true;
    } else if (item == "projection") {
      spec.projection = true;
    } else if (item == "all") {
      spec.embeddings = spec.final_norm = spec.head = spec.projection = true;
      spec.blocks.push_back(static_cast<std::size_t>(-1));
    } else if (item == "blocks:*") {
      spec.blocks.push_back(static_cast<std::size_t>(-1));
    } else if (item.rfind("blocks:", 0) == 0) {
      const std::string range = item.substr(7);
      try {
        const auto dash = range.find('-');
        const std::size_t lo = std::stoul(range.substr(0, dash));
        const std::size_t hi = dash == std::string::npos ? lo : std::stoul(range.substr(dash + 1));
        if (hi < lo) throw TrainError("freeze spec: empty block range '" + item + "'");
        for (std::size_t b = lo; b <= hi; ++b) spec.blocks.push_back(b);
      } catch (const std::logic_error&) {
        throw TrainError("freeze spec: bad block range '" + item + "'");
      }
    } else if (item.rfind("new_rows_from:", 0) == 0) {
      try {
        spec.trainable_rows_from = std::stoul(item.substr(14));
      } catch (const std::logic_error&) {
        throw TrainError("freeze spec: bad row index '" + item + "'");
      }
    } else {
      throw TrainError("freeze spec: unknown group '" + item + "'");
    }
  }
  return spec;
}

FreezeSpec FreezeSpec::all(const ModelConfig& config) {
  FreezeSpec spec;
  spec.embeddings = spec.final_norm = spec.head = spec.projection = true;
  for (std::size_t b = 0; b < config.n_layers; ++b) spec.blocks.push_back(b);
  return spec;
}

std::string FreezeSpec::to_string() const {
  std::vector<std::string> parts;
  if (embeddings) parts.emplace_back("embeddings");
  for (auto b : blocks) {
    parts.push_back(b == static_cast<std::size_t>(-1) ? std::string("blocks:*") : "blocks:" + std::to_string(b));
  }
  if (final_norm) parts.emplace_back("final_norm");
  if (head) parts.emplace_back("head");
  if (projection) parts.emplace_back("projection");
  if (trainable_rows_from) parts.push_back("new_rows_from:" + std::to_string(*trainable_rows_from));
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
  return out.empty() ? "none" : out;
}

bool FreezeSpec::freezes_anything() const {
  return embeddings || !blocks.empty() || final_norm || head || projection;
}

std::vector<std::uint8_t> trainable_mask(const ModelConfig& config, const ParamLayout& layout, const FreezeSpec& spec) {
  std::vector<std::uint8_t> mask(layout.total, 1);
  auto block_frozen = [&](std::size_t b) {
    return std::any_of(spec.blocks.begin(), spec.blocks.end(),
                       [&](std::size_t x) { return x == b || x == static_cast<std::size_t>(-1); });
  };
  for (const auto& t : layout.tensors) {
    bool frozen = false;
    switch (t.group) {
      case ParamGroup::embeddings: frozen = spec.embeddings; break;
      case ParamGroup::block: frozen = block_frozen(t.block); break;
      case ParamGroup::final_norm: frozen = spec.final_norm; break;
      case ParamGroup::head: frozen = spec.head; break;
      case ParamGroup::projection: frozen = spec.projection; break;
    }
    if (!frozen) continue;
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(t.offset),
              mask.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size), std::uint8_t{0});
    if (!spec.trainable_rows_from) continue;
    std::size_t row = 0;
    if (t.name == "tok_emb" || t.name == "head.weight") row = config.d_model;
    if (t.name == "head.bias") row = 1;
    if (row) {
      const std::size_t from = std::min(*spec.trainable_rows_from, config.vocab_size) * row;
      std::fill(mask.begin() + static_cast<std::ptrdiff_t>(t.offset + from),
                mask.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size), std::uint8_t{1});
    }
  }
  return mask;
}

TrainExample make_example(AugmentedSequence aug, CandidateContext context) {
  TrainExample ex;
  ex.mask = build_attention_mask(aug, context);
  ex.targets = next_original_targets(aug);
  ex.aug = std::move(aug);
  return ex;
}

// ----- loss and gradient -----

namespace {

struct ExampleResult {
  double lm_sum = 0.0;
  double kd_sum = 0.0;
  std::vector<double> grad_f64;
  std::vector<float> grad_f32;
};

template <typename T>
std::vector<T>& grad_slot(ExampleResult& r) {
  if constexpr (std::is_same_v<T, float>) {
    return r.grad_f32;
  } else {
    return r.grad_f64;
  }
}

}  // namespace

template <typename T>
StepMetrics compute_loss_and_grad(const Params<T>& params, const std::vector<TrainExample>& batch,
                                  const LossConfig& loss, const DistillContext* distill, std::vector<T>* grad) {
  const auto& cfg = params.config;
  const std::size_t d = cfg.d_model;
  const std::size_t V = cfg.vocab_size;
  const bool kd_on = distill && distill->queue && loss.lambda != 0.0;
  if (kd_on) distill->config.validate();

  StepMetrics m;
  for (const auto& ex : batch) {
    m.lm_positions += ex.targets.count();
    if (kd_on && ex.teacher) m.kd_positions += ex.teacher->alignment.pairs.size();
  }
  const double lm_scale =
      loss.reduction == Reduction::mean ? (m.lm_positions ? 1.0 / static_cast<double>(m.lm_positions) : 0.0) : 1.0;
  const double kd_scale = m.kd_positions ? loss.lambda / static_cast<double>(m.kd_positions) : 0.0;

  std::optional<QueueSnapshot> snapshot;
  if (kd_on && m.kd_positions) snapshot.emplace(*distill->queue, distill->config.normalize);
  const std::size_t proj_dim = cfg.projection_dim;

  std::vector<ExampleResult> results(batch.size());
  parallel_for(batch.size(), [&](std::size_t b) {
    const auto& ex = batch[b];
    auto& res = results[b];
    Activations<T> act;
    forward(params, std::span<const TokenId>(ex.aug.ids), ex.mask, act);
    const std::size_t n = ex.aug.ids.size();
    std::vector<T> dlogits;
    if (grad) dlogits.assign(n * V, T(0));
    const auto lm = lm_loss_sum(std::span<const T>(act.logits), V, ex.targets, grad ? &dlogits : nullptr, lm_scale);
    res.lm_sum = lm.sum;

    std::vector<T> dhidden;
    if (snapshot && ex.teacher) {
      if (grad) dhidden.assign(n * d, T(0));
      const T* proj = proj_dim ? params.ptr(params.layout.proj) : nullptr;
      std::vector<double> h(d), z(proj_dim ? proj_dim : d), gz(z.size());
      for (const auto& [src, tpos] : ex.teacher->alignment.pairs) {
        const std::size_t pos = ex.aug.original_positions.at(src);
        for (std::size_t i = 0; i < d; ++i) h[i] = act.final_hidden[pos * d + i];
        if (proj) {
          for (std::size_t r = 0; r < proj_dim; ++r) {
            double acc = 0.0;
            for (std::size_t i = 0; i < d; ++i) acc += static_cast<double>(proj[r * d + i]) * h[i];
            z[r] = acc;
          }
        } else {
          z = h;
        }
        std::fill(gz.begin(), gz.end(), 0.0);
        const QueueKey key{ex.teacher->states.sequence, static_cast<std::uint32_t>(tpos)};
        auto [ce, ent] = snapshot->position_loss(z, ex.teacher->states.vectors.at(tpos), key, distill->config,
                                                 grad ? std::span<double>(gz) : std::span<double>(), kd_scale);
        res.kd_sum += ce;
        if (!grad) continue;
        if (proj) {
          auto& g = grad_slot<T>(res);
          if (g.empty()) g.assign(params.count(), T(0));
          for (std::size_t r = 0; r < proj_dim; ++r) {
            for (std::size_t i = 0; i < d; ++i) {
              g[params.layout.proj + r * d + i] += static_cast<T>(gz[r] * h[i]);
              dhidden[pos * d + i] += static_cast<T>(gz[r] * proj[r * d + i]);
            }
          }
        } else {
          for (std::size_t i = 0; i < d; ++i) dhidden[pos * d + i] += static_cast<T>(gz[i]);
        }
      }
    }
    if (grad) {
      auto& g = grad_slot<T>(res);
      if (g.empty()) g.assign(params.count(), T(0));
      backward(params, act, std::span<const TokenId>(ex.aug.ids), ex.mask, std::span<const T>(dlogits),
               std::span<const T>(dhidden), g);
    }
  });

  double lm_total = 0.0, kd_total = 0.0;
  if (grad) grad->assign(params.count(), T(0));
  for (auto& res : results) {
    lm_total += res.lm_sum;
    kd_total += res.kd_sum;
    if (grad) {
      const auto& g = grad_slot<T>(res);
      kernels::axpy(T(1), g.data(), grad->data(), g.size());
    }
  }
  m.lm = loss.reduction == Reduction::mean ? lm_total * lm_scale : lm_total;
  m.kd = m.kd_positions ? kd_total / static_cast<double>(m.kd_positions) : 0.0;
  m.total = m.lm + (kd_on ? loss.lambda * m.kd : 0.0);
  return m;
}

template <typename T>
StepMetrics train_step(Params<T>& params, const std::vector<TrainExample>& batch, const LossConfig& loss,
                       AdamState<T>& opt, const std::vector<std::uint8_t>& trainable, const DistillContext* distill) {
  if (trainable.size() != params.count()) throw TrainError("train_step: trainable mask has the wrong size");
  std::vector<T> grad;
  auto m = compute_loss_and_grad(params, batch, loss, distill, &grad);
  if (!std::isfinite(m.lm) || !std::isfinite(m.kd) || !std::isfinite(m.total)) {
    throw NumericError("non-finite loss at step " + std::to_string(opt.step + 1) + " (lm=" + std::to_string(m.lm) +
                     ", kd=" + std::to_string(m.kd) + ")");
  }
  if (opt.m.size() != params.count()) opt.reset(params.count());

  double sq = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (trainable[i]) sq += static_cast<double>(grad[i]) * grad[i];
  }
  m.grad_norm = std::sqrt(sq);
  if (!std::isfinite(m.grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(opt.step + 1));
  const double clip = (opt.config.grad_clip > 0.0 && m.grad_norm > opt.config.grad_clip)
                          ? opt.config.grad_clip / m.grad_norm
                          : 1.0;

  opt.step += 1;
  const auto& c = opt.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!trainable[i]) continue;
    const double g = static_cast<double>(grad[i]) * clip;
    const double mi = c.beta1 * opt.m[i] + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * opt.v[i] + (1.0 - c.beta2) * g * g;
    opt.m[i] = static_cast<T>(mi);
    opt.v[i] = static_cast<T>(vi);
    params.data[i] = static_cast<T>(params.data[i] - c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps));
  }
  return m;
}

GradCheckResult grad_check(const Params<double>& params, const std::vector<TrainExample>& batch,
                           const LossConfig& loss, const DistillContext* distill,
                           const std::vector<std::uint8_t>& trainable, double epsilon, std::size_t stride,
                           double floor, Stencil stencil) {
  std::vector<double> analytic;
  compute_loss_and_grad(params, batch, loss, distill, &analytic);
  Params<double> probe = params;
  GradCheckResult r;
  for (std::size_t i = 0; i < probe.count(); i += std::max<std::size_t>(1, stride)) {
    if (!trainable.empty() && !trainable[i]) continue;
    const double orig = probe.data[i];
    auto at = [&](double delta) {
      probe.data[i] = orig + delta;
      return compute_loss_and_grad<double>(probe, batch, loss, distill, nullptr).total;
    };
    double numeric = (at(epsilon) - at(-epsilon)) / (2.0 * epsilon);
    if (stencil == Stencil::five_point) {
      const double wide = (at(2 * epsilon) - at(-2 * epsilon)) / (4.0 * epsilon);
      numeric = (4.0 * numeric - wide) / 3.0;
    }
    probe.data[i] = orig;
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    ++r.checked;
    if (rel > r.max_relative_error) {
      r.max_relative_error = rel;
      r.worst_index = i;
      r.worst_analytic = analytic[i];
      r.worst_numeric = numeric;
    }
  }
  return r;
}

template StepMetrics compute_loss_and_grad<float>(const Params<float>&, const std::vector<TrainExample>&,
                                                  const LossConfig&, const DistillContext*, std::vector<float>*);
template StepMetrics compute_loss_and_grad<double>(const Params<double>&, const std::vector<TrainExample>&,
                                                   const LossConfig&, const DistillContext*, std::vector<double>*);
template StepMetrics train_step<float>(Params<float>&, const std::vector<TrainExample>&, const LossConfig&,
                                       AdamState<float>&, const std::vector<std::uint8_t>&, const DistillContext*);
template StepMetrics train_step<double>(Params<double>&, const std::vector<TrainExample>&, const LossConfig&,
                                        AdamState<double>&, const std::vector<std::uint8_t>&, const DistillContext*);

}  // namespace hb
