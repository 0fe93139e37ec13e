// SPDX-License-Identifier: Apache-2.0
//
// Routed expert feedforward layer:
//   y(x) = sum_i g_i(W x) FF_i(x)
// where only experts with a nonzero routing decision are evaluated.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "btx/errors.hpp"
#include "btx/model.hpp"
#include "btx/ops.hpp"

namespace btx {

enum class RoutingMethod { TopK, Switch, SampleTop1, Soft };

// How u_i in the balance loss is measured.
enum class UsageStat {
  MeanGate,          // batch mean of the gate output g_i (zero when unselected)
  DispatchFraction,  // fraction of routing selections sent to expert i
};

enum class RouteMode { Train, Infer };

inline std::string to_string(RoutingMethod m) {
  switch (m) {
    case RoutingMethod::TopK: return "topk";
    case RoutingMethod::Switch: return "switch";
    case RoutingMethod::SampleTop1: return "sample_top1";
    case RoutingMethod::Soft: return "soft";
  }
  return "?";
}

inline RoutingMethod routing_method_from_string(const std::string& s) {
  if (s == "topk") return RoutingMethod::TopK;
  if (s == "switch") return RoutingMethod::Switch;
  if (s == "sample_top1") return RoutingMethod::SampleTop1;
  if (s == "soft") return RoutingMethod::Soft;
  throw ContractError("unknown routing method '" + s + "'");
}

inline std::string to_string(UsageStat u) { return u == UsageStat::MeanGate ? "mean_gate" : "dispatch_fraction"; }

inline UsageStat usage_stat_from_string(const std::string& s) {
  if (s == "mean_gate") return UsageStat::MeanGate;
  if (s == "dispatch_fraction") return UsageStat::DispatchFraction;
  throw ContractError("unknown usage statistic '" + s + "'");
}

struct RouterConfig {
  RoutingMethod method = RoutingMethod::TopK;
  int k = 2;
  double capacity_factor = 1.5;
  double alpha = 0.01;
  double gumbel_rate = 1e-4;
  // Layer 0 uses soft routing when method is SampleTop1.
  bool first_layer_soft = true;
  UsageStat usage = UsageStat::MeanGate;

  void validate(int n_experts) const {
    if (n_experts < 1) throw ContractError("an MoE layer needs at least one expert");
    if (method == RoutingMethod::TopK && (k < 1 || k > n_experts))
      throw ContractError("top-k routing needs 1 <= k <= N (k=" + std::to_string(k) + ", N=" +
                          std::to_string(n_experts) + ")");
    if (alpha < 0) throw ContractError("load-balance alpha must be >= 0");
    if (!(capacity_factor > 0)) throw ContractError("capacity factor must be > 0");
    if (!(gumbel_rate > 0)) throw ContractError("gumbel rate must be > 0");
  }

  // Experts selected per routed token.
  int selections_per_token(int n_experts) const {
    switch (method) {
      case RoutingMethod::TopK: return k;
      case RoutingMethod::Soft: return n_experts;
      default: return 1;
    }
  }

  bool operator==(const RouterConfig&) const = default;
};

template <typename S>
struct MoELayerParams {
  std::vector<FeedForward<S>> experts;
  Param<S> router;  // [d_model x N], no bias

  std::size_t n_experts() const { return experts.size(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }
  bool operator==(const MoELayerParams&) const = default;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, const std::string& prefix, F& f) {
    for (std::size_t e = 0; e < self.experts.size(); ++e)
      self.experts[e].visit(prefix + "expert." + std::to_string(e) + ".", f);
    f(prefix + "router", self.router);
  }
};

// Routing decision of one token at one layer.
struct TokenRoute {
  int layer = 0;
  std::size_t token = 0;
  std::vector<int> experts;    // empty when the token was dropped
  std::vector<double> gates;   // gate weight of each selected expert
  std::vector<double> probs;   // full softmax over all experts
};

using RoutingRecord = std::vector<TokenRoute>;

// Per-layer batch statistics for the balance loss. usage/probs are [1 x N]
// tensors on the tape so the loss differentiates through them.
template <typename S>
struct BalanceStats {
  Tensor<S> usage;  // u_i
  Tensor<S> probs;  // p_i
};

// tau = max(0.5, exp(-r t))
inline double gumbel_temperature(std::int64_t step, double rate) {
  if (step < 0) throw ContractError("gumbel step must be >= 0");
  return std::max(0.5, std::exp(-rate * static_cast<double>(step)));
}

struct GumbelState {
  std::int64_t step = 0;
  double rate = 1e-4;
  double temperature() const { return gumbel_temperature(step, rate); }
};

// Uniform draw strictly inside (0, 1) from the top 53 bits.
inline double open_uniform(std::mt19937_64& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

inline double gumbel_noise(std::mt19937_64& rng) { return -std::log(-std::log(open_uniform(rng))); }

// Indices of the k largest values, ties to the lowest index, in descending
// order of value.
template <typename T>
std::vector<std::size_t> topk_indices(std::span<const T> values, std::size_t k) {
  if (k > values.size())
    throw ContractError("top-k with k=" + std::to_string(k) + " > N=" + std::to_string(values.size()));
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  order.resize(k);
  return order;
}

struct Route {
  std::vector<std::size_t> indices;
  std::vector<double> weights;
};

template <typename T>
std::vector<double> softmax_values(std::span<const T> logits) {
  double peak = -std::numeric_limits<double>::infinity();
  for (T v : logits) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("router logits contain a non-finite value");
    peak = std::max(peak, static_cast<double>(v));
  }
  std::vector<double> out(logits.size());
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += out[i] = std::exp(static_cast<double>(logits[i]) - peak);
  for (double& v : out) v /= total;
  return out;
}

// SoftMax(TopK(logits)).
inline Route route_topk(std::span<const double> logits, std::size_t k) {
  Route r;
  r.indices = topk_indices(logits, k);
  std::vector<double> picked;
  for (std::size_t i : r.indices) picked.push_back(logits[i]);
  r.weights = softmax_values(std::span<const double>(picked));
  return r;
}

struct SwitchAssignment {
  std::optional<std::size_t> expert;  // nullopt when dropped
  double weight = 0;
};

inline std::size_t switch_capacity(std::size_t tokens, std::size_t n_experts, double capacity_factor) {
  return static_cast<std::size_t>(std::ceil(capacity_factor * static_cast<double>(tokens) / static_cast<double>(n_experts)));
}

// Top-1 with per-expert capacity; tokens claim slots in arrival order.
inline std::vector<SwitchAssignment> route_switch(const std::vector<std::vector<double>>& logits, double capacity_factor) {
  std::vector<SwitchAssignment> out(logits.size());
  if (logits.empty()) return out;
  const std::size_t n = logits.front().size();
  const std::size_t capacity = switch_capacity(logits.size(), n, capacity_factor);
  std::vector<std::size_t> load(n, 0);
  for (std::size_t t = 0; t < logits.size(); ++t) {
    const std::vector<double> probs = softmax_values(std::span<const double>(logits[t]));
    const std::size_t best = topk_indices(std::span<const double>(logits[t]), 1)[0];
    if (load[best] < capacity) {
      ++load[best];
      out[t].expert = best;
      out[t].weight = probs[best];
    }
  }
  return out;
}

// Gumbel-softmax sample at temperature tau, keeping only its largest entry
// (train), or a hard categorical draw with unit weight (infer). Consumes N
// uniforms in train mode and one in infer mode.
inline Route route_sample_top1(std::span<const double> logits, const GumbelState& gumbel, RouteMode mode,
                               std::mt19937_64& rng) {
  Route r;
  if (mode == RouteMode::Train) {
    const double tau = gumbel.temperature();
    std::vector<double> perturbed(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) perturbed[i] = (logits[i] + gumbel_noise(rng)) / tau;
    const std::vector<double> y = softmax_values(std::span<const double>(perturbed));
    const std::size_t best = topk_indices(std::span<const double>(y), 1)[0];
    r.indices = {best};
    r.weights = {y[best]};
  } else {
    const std::vector<double> probs = softmax_values(logits);
    const double u = open_uniform(rng);
    double cum = 0;
    std::size_t pick = probs.size() - 1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) {
        pick = i;
        break;
      }
    }
    r.indices = {pick};
    r.weights = {1.0};
  }
  return r;
}

// Differentiable SoftMax(TopK(.)) over each row of [tokens x N]; unselected
// entries are exactly zero. `selected` receives the chosen indices per row.
template <typename S>
Tensor<S> topk_softmax(const Tensor<S>& logits, std::size_t k, std::vector<std::vector<std::size_t>>& selected) {
  detail::require_rank2(logits.shape(), "topk_softmax");
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  std::vector<S> out(rows * n, S(0));
  selected.assign(rows, {});
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const S> row(logits.data().data() + r * n, n);
    selected[r] = topk_indices(row, k);
    std::vector<S> picked;
    for (std::size_t i : selected[r]) picked.push_back(row[i]);
    const std::vector<double> w = softmax_values(std::span<const S>(picked));
    for (std::size_t j = 0; j < k; ++j) out[r * n + selected[r][j]] = static_cast<S>(w[j]);
  }
  auto ln = logits.node();
  auto gates = out;
  return detail::make_result<S>(logits.shape(), std::move(out), {&logits},
                                [ln, gates = std::move(gates), sel = selected, n](const std::vector<S>& g) {
                                  auto* dl = detail::sink(ln);
                                  if (!dl) return;
                                  for (std::size_t r = 0; r < sel.size(); ++r) {
                                    S dot = S(0);
                                    for (std::size_t i : sel[r]) dot += g[r * n + i] * gates[r * n + i];
                                    for (std::size_t i : sel[r])
                                      (*dl)[r * n + i] += gates[r * n + i] * (g[r * n + i] - dot);
                                  }
                                });
}

// y[row] = sum over experts e of gates[row, e] * outs[e][j] where
// rows[e][j] == row. outs[e] may be undefined when rows[e] is empty.
template <typename S>
Tensor<S> moe_combine(const std::vector<Tensor<S>>& outs, const std::vector<std::vector<std::size_t>>& rows,
                      const Tensor<S>& gates) {
  detail::require_rank2(gates.shape(), "moe_combine");
  const std::size_t n_tokens = gates.dim(0), n = gates.dim(1);
  if (outs.size() != n || rows.size() != n) throw DimensionError("moe_combine: expert count mismatch");
  std::size_t width = 0;
  for (std::size_t e = 0; e < n; ++e)
    if (!rows[e].empty()) {
      if (outs[e].dim(0) != rows[e].size()) throw DimensionError("moe_combine: expert output rows mismatch");
      width = outs[e].dim(1);
    }
  std::vector<S> y(n_tokens * width, S(0));
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t j = 0; j < rows[e].size(); ++j) {
      const std::size_t r = rows[e][j];
      const S gate = gates[r * n + e];
      const S* src = outs[e].data().data() + j * width;
      for (std::size_t c = 0; c < width; ++c) y[r * width + c] += gate * src[c];
    }
  std::vector<const Tensor<S>*> inputs{&gates};
  std::vector<std::shared_ptr<detail::Node<S>>> out_nodes(n);
  for (std::size_t e = 0; e < n; ++e)
    if (!rows[e].empty()) {
      inputs.push_back(&outs[e]);
      out_nodes[e] = outs[e].node();
    }
  auto gn = gates.node();
  return detail::make_result_n<S>(
      {n_tokens, width}, std::move(y), inputs, [gn, out_nodes, rows, n, width](const std::vector<S>& g) {
        auto* dg = detail::sink(gn);
        for (std::size_t e = 0; e < n; ++e) {
          if (!out_nodes[e]) continue;
          auto* dout = detail::sink(out_nodes[e]);
          const auto& ov = out_nodes[e]->value;
          for (std::size_t j = 0; j < rows[e].size(); ++j) {
            const std::size_t r = rows[e][j];
            const S gate = gn->value[r * n + e];
            if (dout)
              for (std::size_t c = 0; c < width; ++c) (*dout)[j * width + c] += gate * g[r * width + c];
            if (dg) {
              S dot = S(0);
              for (std::size_t c = 0; c < width; ++c) dot += ov[j * width + c] * g[r * width + c];
              (*dg)[r * n + e] += dot;
            }
          }
        }
      });
}

// Routing randomness and phase for one forward pass.
struct RoutingContext {
  RouteMode mode = RouteMode::Train;
  std::int64_t step = 0;           // drives the Gumbel temperature
  std::mt19937_64* rng = nullptr;  // required for sample_top1
  bool record = true;              // fill the per-token RoutingRecord
};

template <typename S>
struct MoEOutput {
  Tensor<S> y;
  RoutingRecord record;
  BalanceStats<S> stats;
  std::size_t expert_evaluations = 0;  // (token, expert) FF evaluations
  RoutingMethod method_used = RoutingMethod::TopK;
};

template <typename S>
MoEOutput<S> moe_forward(const Tensor<S>& x, const MoELayerParams<S>& layer, const RouterConfig& cfg, int layer_index,
                         const RoutingContext& ctx, Binding<S>& bind) {
  detail::require_rank2(x.shape(), "moe_forward");
  const std::size_t n = layer.n_experts();
  cfg.validate(static_cast<int>(n));
  if (layer.router.shape.size() != 2 || layer.router.shape[0] != x.dim(1) || layer.router.shape[1] != n)
    throw DimensionError("moe_forward: input " + shape_str(x.shape()) + " incompatible with router " +
                         shape_str(layer.router.shape));
  const std::size_t tokens = x.dim(0);

  RoutingMethod method = cfg.method;
  if (method == RoutingMethod::SampleTop1 && cfg.first_layer_soft && layer_index == 0) method = RoutingMethod::Soft;

  const Tensor<S> logits = matmul(x, bind(layer.router));
  const Tensor<S> probs = softmax(logits);
  std::vector<std::vector<std::size_t>> selected(tokens);
  Tensor<S> gates;

  switch (method) {
    case RoutingMethod::TopK:
      gates = topk_softmax(logits, static_cast<std::size_t>(cfg.k), selected);
      break;
    case RoutingMethod::Soft:
      gates = probs;
      for (auto& s : selected) {
        s.resize(n);
        std::iota(s.begin(), s.end(), std::size_t{0});
      }
      break;
    case RoutingMethod::Switch: {
      const std::size_t capacity = switch_capacity(tokens, n, cfg.capacity_factor);
      std::vector<std::size_t> load(n, 0);
      std::vector<S> mask(tokens * n, S(0));
      for (std::size_t t = 0; t < tokens; ++t) {
        const std::size_t best = topk_indices(std::span<const S>(logits.data().data() + t * n, n), 1)[0];
        if (load[best] < capacity) {
          ++load[best];
          selected[t] = {best};
          mask[t * n + best] = S(1);
        }
      }
      gates = mul(probs, Tensor<S>::constant({tokens, n}, std::move(mask)));
      break;
    }
    case RoutingMethod::SampleTop1: {
      if (ctx.rng == nullptr) throw ContractError("sample_top1 routing needs an rng");
      std::vector<S> mask(tokens * n, S(0));
      if (ctx.mode == RouteMode::Train) {
        const double tau = gumbel_temperature(ctx.step, cfg.gumbel_rate);
        std::vector<S> noise(tokens * n);
        for (S& v : noise) v = static_cast<S>(gumbel_noise(*ctx.rng));
        const Tensor<S> soft = softmax(scale(add(logits, Tensor<S>::constant({tokens, n}, std::move(noise))), S(1 / tau)));
        for (std::size_t t = 0; t < tokens; ++t) {
          const std::size_t best = topk_indices(std::span<const S>(soft.data().data() + t * n, n), 1)[0];
          selected[t] = {best};
          mask[t * n + best] = S(1);
        }
        gates = mul(soft, Tensor<S>::constant({tokens, n}, std::move(mask)));
      } else {
        for (std::size_t t = 0; t < tokens; ++t) {
          std::vector<double> row(logits.data().begin() + t * n, logits.data().begin() + (t + 1) * n);
          const Route r = route_sample_top1(std::span<const double>(row), GumbelState{ctx.step, cfg.gumbel_rate},
                                            RouteMode::Infer, *ctx.rng);
          selected[t] = r.indices;
          mask[t * n + r.indices[0]] = S(1);
        }
        gates = Tensor<S>::constant({tokens, n}, std::move(mask));
      }
      break;
    }
  }

  std::vector<std::vector<std::size_t>> rows(n);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t e : selected[t]) rows[e].push_back(t);

  MoEOutput<S> out;
  out.method_used = method;
  std::vector<Tensor<S>> expert_out(n);
  for (std::size_t e = 0; e < n; ++e) {
    if (rows[e].empty()) continue;
    expert_out[e] = feed_forward(layer.experts[e], bind, gather_rows(x, std::span<const std::size_t>(rows[e])));
    out.expert_evaluations += rows[e].size();
  }
  out.y = moe_combine(expert_out, rows, gates);

  out.stats.probs = mean_rows(probs);
  if (cfg.usage == UsageStat::MeanGate) {
    out.stats.usage = mean_rows(gates);
  } else {
    std::vector<S> frac(n, S(0));
    std::size_t total = 0;
    for (std::size_t e = 0; e < n; ++e) total += rows[e].size();
    for (std::size_t e = 0; e < n; ++e) frac[e] = total ? S(rows[e].size()) / S(total) : S(0);
    out.stats.usage = Tensor<S>::constant({1, n}, std::move(frac));
  }

  if (ctx.record) {
    out.record.resize(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      TokenRoute& tr = out.record[t];
      tr.layer = layer_index;
      tr.token = t;
      tr.probs.assign(probs.data().begin() + t * n, probs.data().begin() + (t + 1) * n);
      for (std::size_t e : selected[t]) {
        tr.experts.push_back(static_cast<int>(e));
        tr.gates.push_back(static_cast<double>(gates[t * n + e]));
      }
    }
  }
  return out;
}

// alpha * N * sum_i u_i p_i for one layer.
template <typename S>
Tensor<S> load_balance_loss(const BalanceStats<S>& stats, double alpha) {
  const std::size_t n = stats.probs.numel();
  if (stats.usage.numel() != n) throw DimensionError("load_balance_loss: usage and probability lengths differ");
  return scale(sum(mul(stats.usage, stats.probs)), static_cast<S>(alpha * static_cast<double>(n)));
}

inline double load_balance_loss(std::span<const double> usage, std::span<const double> probs, double alpha) {
  if (usage.size() != probs.size()) throw DimensionError("load_balance_loss: usage and probability lengths differ");
  double dot = 0;
  for (std::size_t i = 0; i < usage.size(); ++i) dot += usage[i] * probs[i];
  return alpha * static_cast<double>(usage.size()) * dot;
}

}  // namespace btx
