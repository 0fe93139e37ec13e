// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint surgery: branching, weight averaging, assembling routed models
// from dense experts, and re-partitioning expert banks.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "btx/errors.hpp"
#include "btx/model.hpp"
#include "btx/moe_model.hpp"

namespace btx {

template <typename S>
struct NamedModel {
  std::string name;
  ModelParams<S> params;
};

template <typename S>
std::vector<ModelParams<S>> branch(const ModelParams<S>& seed, std::size_t n) {
  if (n < 1) throw ContractError("branch needs n >= 1");
  return std::vector<ModelParams<S>>(n, seed);
}

enum class AverageScope { NonFeedForward, All };

namespace detail {

template <typename S>
void require_same_config(const std::vector<const ModelParams<S>*>& models) {
  if (models.empty()) throw SurgeryError("no models to combine");
  for (const auto* m : models)
    if (!(m->config == models.front()->config)) throw SurgeryError("models have different configurations");
}

// Entry-wise mean with 64-bit accumulation.
template <typename S>
Param<S> mean_param(const std::vector<const Param<S>*>& ps) {
  Param<S> out(ps.front()->shape);
  std::vector<double> acc(out.numel(), 0.0);
  for (const auto* p : ps)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(p->value[i]);
  const double inv = 1.0 / static_cast<double>(ps.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.value[i] = static_cast<S>(acc[i] * inv);
  return out;
}

template <typename S>
std::vector<Param<S>*> flatten(ModelParams<S>& m) {
  std::vector<Param<S>*> out;
  m.visit([&](const std::string&, Param<S>& p) { out.push_back(&p); });
  return out;
}

template <typename S>
std::vector<const Param<S>*> flatten(const Backbone<S>& b) {
  std::vector<const Param<S>*> out;
  b.visit([&](const std::string&, const Param<S>& p) { out.push_back(&p); });
  return out;
}

template <typename S>
Param<S> random_param(Shape shape, std::mt19937_64& rng) {
  Param<S> p(std::move(shape));
  std::normal_distribution<double> normal(0.0, 0.02);
  for (S& v : p.value) v = static_cast<S>(normal(rng));
  return p;
}

template <typename S>
void fresh_routers(MoEModel<S>& moe, std::uint64_t rng_seed) {
  std::mt19937_64 rng(rng_seed);
  const std::size_t d = moe.config.d_model;
  for (auto& layer : moe.layers) layer.router = random_param<S>({d, layer.n_experts()}, rng);
}

// Hidden units [lo, hi) of a feedforward block.
template <typename S>
FeedForward<S> slice_hidden(const FeedForward<S>& ff, std::size_t lo, std::size_t hi) {
  const std::size_t d = ff.w1.shape[0], h = ff.w1.shape[1], w = hi - lo;
  FeedForward<S> out;
  out.w1 = Param<S>({d, w});
  out.w3 = Param<S>({d, w});
  out.w2 = Param<S>({w, d});
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      out.w1.value[r * w + c] = ff.w1.value[r * h + lo + c];
      out.w3.value[r * w + c] = ff.w3.value[r * h + lo + c];
    }
  std::copy_n(ff.w2.value.begin() + lo * d, w * d, out.w2.value.begin());
  return out;
}

// Hidden-unit concatenation of feedforward blocks.
template <typename S>
FeedForward<S> concat_hidden(const std::vector<FeedForward<S>>& parts) {
  const std::size_t d = parts.front().w1.shape[0];
  std::size_t total = 0;
  for (const auto& p : parts) total += p.hidden();
  FeedForward<S> out;
  out.w1 = Param<S>({d, total});
  out.w3 = Param<S>({d, total});
  out.w2 = Param<S>({total, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.hidden();
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        out.w1.value[r * total + off + c] = p.w1.value[r * w + c];
        out.w3.value[r * total + off + c] = p.w3.value[r * w + c];
      }
    std::copy(p.w2.value.begin(), p.w2.value.end(), out.w2.value.begin() + off * d);
    off += w;
  }
  return out;
}

}  // namespace detail

template <typename S>
Backbone<S> average_backbones(const std::vector<const ModelParams<S>*>& models) {
  detail::require_same_config(models);
  Backbone<S> out = models.front()->backbone;
  std::vector<std::vector<const Param<S>*>> columns;
  for (const auto* m : models) {
    auto flat = detail::flatten(m->backbone);
    if (columns.empty()) columns.resize(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) columns[i].push_back(flat[i]);
  }
  std::size_t i = 0;
  out.visit([&](const std::string&, Param<S>& p) { p = detail::mean_param(columns[i++]); });
  return out;
}

// Entry-wise mean over `models`. With NonFeedForward scope the feedforward
// blocks are copied from the first model untouched.
template <typename S>
ModelParams<S> average_params(const std::vector<ModelParams<S>>& models, AverageScope scope) {
  std::vector<const ModelParams<S>*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  detail::require_same_config(ptrs);
  ModelParams<S> out = models.front();
  out.backbone = average_backbones(ptrs);
  if (scope == AverageScope::All)
    for (std::size_t l = 0; l < out.ff.size(); ++l) {
      std::vector<const Param<S>*> w1, w3, w2;
      for (const auto* m : ptrs) {
        w1.push_back(&m->ff[l].w1);
        w3.push_back(&m->ff[l].w3);
        w2.push_back(&m->ff[l].w2);
      }
      out.ff[l] = {detail::mean_param(w1), detail::mean_param(w3), detail::mean_param(w2)};
    }
  return out;
}

struct MixOptions {
  // Include the generalist's non-feedforward weights in the average.
  bool average_generalist = true;
};

// Expert i's feedforward becomes bank entry i at every layer (generalist
// last); everything else is averaged; routers are fresh Gaussian(0, 0.02).
template <typename S>
MoEModel<S> mix_to_moe(const std::vector<NamedModel<S>>& experts, const std::optional<NamedModel<S>>& generalist,
                       const RouterConfig& router_cfg, std::uint64_t rng_seed, MixOptions options = {}) {
  std::vector<const NamedModel<S>*> bank;
  for (const auto& e : experts) bank.push_back(&e);
  if (generalist) bank.push_back(&*generalist);
  if (bank.size() < 2) throw SurgeryError("mixing needs at least 2 experts");
  std::vector<const ModelParams<S>*> averaged;
  for (const auto& e : experts) averaged.push_back(&e.params);
  if (generalist && options.average_generalist) averaged.push_back(&generalist->params);
  std::vector<const ModelParams<S>*> all;
  for (const auto* e : bank) all.push_back(&e->params);
  detail::require_same_config(all);
  router_cfg.validate(static_cast<int>(bank.size()));

  MoEModel<S> moe;
  moe.config = bank.front()->params.config;
  moe.backbone = average_backbones(averaged);
  moe.router = router_cfg;
  moe.layers.resize(moe.config.n_layers);
  for (std::size_t l = 0; l < moe.layers.size(); ++l)
    for (const auto* e : bank) moe.layers[l].experts.push_back(e->params.ff[l]);
  for (const auto* e : bank) moe.provenance.push_back(e->name);
  detail::fresh_routers(moe, rng_seed);
  return moe;
}

// Sparse upcycling: N copies of the seed feedforward behind a random router.
template <typename S>
MoEModel<S> upcycle(const ModelParams<S>& seed, std::size_t n_experts, const RouterConfig& router_cfg,
                    std::uint64_t rng_seed, const std::string& seed_name = "seed") {
  if (n_experts < 2) throw SurgeryError("upcycling needs at least 2 experts");
  router_cfg.validate(static_cast<int>(n_experts));
  MoEModel<S> moe;
  moe.config = seed.config;
  moe.backbone = seed.backbone;
  moe.router = router_cfg;
  moe.layers.resize(seed.config.n_layers);
  for (std::size_t l = 0; l < moe.layers.size(); ++l) moe.layers[l].experts.assign(n_experts, seed.ff[l]);
  moe.provenance.assign(n_experts, seed_name);
  detail::fresh_routers(moe, rng_seed);
  return moe;
}

// Expert i's hidden units split into `chunks` contiguous ranges; range c
// becomes expert i*chunks + c. Routers are reinitialized.
template <typename S>
MoEModel<S> split_experts(const MoEModel<S>& moe, std::size_t chunks, std::uint64_t rng_seed) {
  if (chunks < 1) throw SurgeryError("split needs at least one chunk");
  MoEModel<S> out = moe;
  for (std::size_t l = 0; l < moe.layers.size(); ++l) {
    out.layers[l].experts.clear();
    for (const auto& ff : moe.layers[l].experts) {
      const std::size_t h = ff.hidden();
      if (h % chunks != 0)
        throw SurgeryError("feedforward width " + std::to_string(h) + " not divisible into " + std::to_string(chunks) +
                           " chunks");
      const std::size_t w = h / chunks;
      for (std::size_t c = 0; c < chunks; ++c) out.layers[l].experts.push_back(detail::slice_hidden(ff, c * w, (c + 1) * w));
    }
  }
  out.provenance.clear();
  for (const auto& name : moe.provenance)
    for (std::size_t c = 0; c < chunks; ++c) out.provenance.push_back(name + "/" + std::to_string(c));
  if (out.router.method == RoutingMethod::TopK && out.router.k > static_cast<int>(out.n_experts()))
    throw SurgeryError("router k exceeds split expert count");
  detail::fresh_routers(out, rng_seed);
  return out;
}

// Every blended expert n holds chunk n of every domain's feedforward, so each
// expert carries the same amount of every domain.
template <typename S>
MoEModel<S> blend_experts(const std::vector<NamedModel<S>>& experts, const RouterConfig& router_cfg,
                          std::uint64_t rng_seed) {
  const std::size_t n = experts.size();
  if (n < 2) throw SurgeryError("blending needs at least 2 experts");
  MoEModel<S> moe = mix_to_moe<S>(experts, std::nullopt, router_cfg, rng_seed);
  const std::size_t h = moe.config.d_ff;
  if (h % n != 0)
    throw SurgeryError("feedforward width " + std::to_string(h) + " not divisible by " + std::to_string(n) + " experts");
  const std::size_t w = h / n;
  for (std::size_t l = 0; l < moe.layers.size(); ++l)
    for (std::size_t chunk = 0; chunk < n; ++chunk) {
      std::vector<FeedForward<S>> parts;
      for (const auto& e : experts) parts.push_back(detail::slice_hidden(e.params.ff[l], chunk * w, (chunk + 1) * w));
      moe.layers[l].experts[chunk] = detail::concat_hidden(parts);
    }
  for (std::size_t chunk = 0; chunk < n; ++chunk) moe.provenance[chunk] = "blend/" + std::to_string(chunk);
  return moe;
}

// Parameter groups, derived from the parameter name.
inline std::string param_group(const std::string& name) {
  if (name == "embed") return "embed";
  if (name == "head") return "head";
  if (name.find("norm.") != std::string::npos) return "norm";
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.size() >= 6 && name.compare(name.size() - 6, 6, "router") == 0) return "router";
  return "ff";
}

struct FreezeMask {
  std::map<std::string, bool> trainable{
      {"embed", true}, {"attention", true}, {"norm", true}, {"head", true}, {"ff", true}, {"router", true}};

  bool is_trainable(const std::string& param_name) const {
    const std::string group = param_group(param_name);
    if (group == "router") return true;
    auto it = trainable.find(group);
    return it == trainable.end() || it->second;
  }
  bool operator==(const FreezeMask&) const = default;
};

inline FreezeMask build_freeze_mask(bool freeze_ff) {
  FreezeMask mask;
  mask.trainable["ff"] = !freeze_ff;
  return mask;
}

template <typename S>
FreezeMask build_freeze_mask(const MoEModel<S>&, bool freeze_ff) {
  return build_freeze_mask(freeze_ff);
}

}  // namespace btx
