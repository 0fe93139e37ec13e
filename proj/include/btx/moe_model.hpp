// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "btx/model.hpp"
#include "btx/moe.hpp"

namespace btx {

// Transformer whose feedforward sublayers are routed expert banks.
template <typename S>
struct MoEModel {
  ModelConfig config;
  Backbone<S> backbone;
  std::vector<MoELayerParams<S>> layers;
  RouterConfig router;
  std::vector<std::string> provenance;  // source of expert i, in bank order

  std::size_t n_experts() const { return layers.empty() ? 0 : layers.front().n_experts(); }

  template <typename F>
  void visit(F&& f) {
    backbone.visit(f);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit("layers." + std::to_string(l) + ".moe.", f);
  }
  template <typename F>
  void visit(F&& f) const {
    backbone.visit(f);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit("layers." + std::to_string(l) + ".moe.", f);
  }
  bool operator==(const MoEModel&) const = default;
};

template <typename S>
struct MoEForward {
  Tensor<S> logits;
  std::vector<RoutingRecord> records;     // per layer
  std::vector<BalanceStats<S>> stats;     // per layer
  std::vector<RoutingMethod> methods;     // per layer, after first-layer override
  std::size_t expert_evaluations = 0;
};

template <typename S>
MoEForward<S> moe_model_forward(const MoEModel<S>& model, Binding<S>& bind, const Tokens& tokens,
                                const RoutingContext& ctx) {
  MoEForward<S> out;
  out.logits = run_backbone(model.backbone, model.config, bind, tokens, [&](std::size_t l, const Tensor<S>& x) {
    MoEOutput<S> layer = moe_forward(x, model.layers[l], model.router, static_cast<int>(l), ctx, bind);
    out.records.push_back(std::move(layer.record));
    out.stats.push_back(layer.stats);
    out.methods.push_back(layer.method_used);
    out.expert_evaluations += layer.expert_evaluations;
    return layer.y;
  });
  return out;
}

template <typename S>
struct MoELoss {
  Tensor<S> total;
  Tensor<S> lm;
  Tensor<S> balance;  // sum over layers
  MoEForward<S> forward;
};

// LM loss plus the per-layer balance loss summed over layers.
template <typename S>
MoELoss<S> moe_loss(const MoEModel<S>& model, Binding<S>& bind, const Tokens& tokens, const RoutingContext& ctx) {
  MoELoss<S> out;
  out.forward = moe_model_forward(model, bind, tokens, ctx);
  out.lm = next_token_loss(out.forward.logits, tokens);
  out.balance = Tensor<S>::scalar(S(0));
  for (const auto& st : out.forward.stats) out.balance = add(out.balance, load_balance_loss(st, model.router.alpha));
  out.total = add(out.lm, out.balance);
  return out;
}

}  // namespace btx
