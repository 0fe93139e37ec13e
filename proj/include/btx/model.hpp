// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm decoder-only transformer over bytes: RMSNorm, rotary causal
// attention, SwiGLU feedforward, untied embedding and output head.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "btx/errors.hpp"
#include "btx/ops.hpp"
#include "btx/tensor.hpp"

namespace btx {

struct ModelConfig {
  int vocab_size = 256;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 256;
  double rms_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0 ||
        !(rms_eps > 0))
      throw ContractError("model config fields must be positive");
    if (d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ContractError("head dimension must be even for rotary embedding");
    if (d_ff < d_model) throw ContractError("d_ff must be >= d_model");
  }

  bool operator==(const ModelConfig&) const = default;
};

// A named weight. Value type: copying a model copies every weight.
template <typename S>
struct Param {
  Shape shape;
  std::vector<S> value;

  Param() = default;
  explicit Param(Shape s) : shape(std::move(s)), value(shape_numel(shape), S(0)) {}
  Param(Shape s, std::vector<S> v) : shape(std::move(s)), value(std::move(v)) {}
  std::size_t numel() const { return value.size(); }
  bool operator==(const Param&) const = default;
};

// SwiGLU block: W2 * (silu(W1 x) * W3 x).
template <typename S>
struct FeedForward {
  Param<S> w1, w3, w2;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "w1", w1);
    f(prefix + "w3", w3);
    f(prefix + "w2", w2);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + "w1", w1);
    f(prefix + "w3", w3);
    f(prefix + "w2", w2);
  }
  std::size_t hidden() const { return w1.shape.empty() ? 0 : w1.shape[1]; }
  bool operator==(const FeedForward&) const = default;
};

// Every non-feedforward weight of one layer.
template <typename S>
struct AttentionLayer {
  Param<S> wq, wk, wv, wo, attn_norm, ff_norm;

  template <typename Self, typename F>
  static void visit_impl(Self& self, const std::string& p, F&& f) {
    f(p + "attn.wq", self.wq);
    f(p + "attn.wk", self.wk);
    f(p + "attn.wv", self.wv);
    f(p + "attn.wo", self.wo);
    f(p + "norm.attn", self.attn_norm);
    f(p + "norm.ff", self.ff_norm);
  }
  bool operator==(const AttentionLayer&) const = default;
};

// Parameters shared by dense and MoE models: everything except feedforwards.
template <typename S>
struct Backbone {
  Param<S> embed;  // [V x d]
  std::vector<AttentionLayer<S>> layers;
  Param<S> final_norm;  // [d]
  Param<S> head;        // [d x V]

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }
  bool operator==(const Backbone&) const = default;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("embed"), self.embed);
    for (std::size_t l = 0; l < self.layers.size(); ++l)
      AttentionLayer<S>::visit_impl(self.layers[l], "layers." + std::to_string(l) + ".", f);
    f(std::string("norm.final"), self.final_norm);
    f(std::string("head"), self.head);
  }
};

template <typename S>
struct ModelParams {
  ModelConfig config;
  Backbone<S> backbone;
  std::vector<FeedForward<S>> ff;  // one per layer

  // Calls f(name, param) for every weight in a fixed order.
  template <typename F>
  void visit(F&& f) {
    backbone.visit(f);
    for (std::size_t l = 0; l < ff.size(); ++l) ff[l].visit("layers." + std::to_string(l) + ".ff.", f);
  }
  template <typename F>
  void visit(F&& f) const {
    backbone.visit(f);
    for (std::size_t l = 0; l < ff.size(); ++l) ff[l].visit("layers." + std::to_string(l) + ".ff.", f);
  }
  bool operator==(const ModelParams&) const = default;
};

// Row-major token grid, row b at ids[b*seq, (b+1)*seq).
struct Tokens {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;

  static Tokens single(std::vector<int> row) {
    Tokens t;
    t.batch = 1;
    t.seq = row.size();
    t.ids = std::move(row);
    return t;
  }
  int at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
};

// Per-layer residual stream after the attention sublayer.
template <typename S>
struct ForwardTrace {
  std::vector<Tensor<S>> post_attention;
};

// Maps parameters to tape leaves for one step. Leaves are created lazily and
// track gradients only when the binding was built with track_grads.
template <typename S>
class Binding {
 public:
  explicit Binding(bool track_grads = false) : track_grads_(track_grads) {}

  Tensor<S> operator()(const Param<S>& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    Tensor<S> t = Tensor<S>::leaf(p.shape, p.value, track_grads_);
    leaves_.emplace(&p, t);
    return t;
  }

  // Gradient accumulated into p's leaf; all zeros if p was never used.
  std::vector<S> grad(const Param<S>& p) const {
    auto it = leaves_.find(&p);
    if (it == leaves_.end()) return std::vector<S>(p.numel(), S(0));
    return it->second.grad();
  }

  bool track_grads() const { return track_grads_; }

 private:
  bool track_grads_;
  std::unordered_map<const Param<S>*, Tensor<S>> leaves_;
};

template <typename S>
ModelParams<S> empty_params(const ModelConfig& config) {
  config.validate();
  const std::size_t V = config.vocab_size, d = config.d_model, f = config.d_ff;
  ModelParams<S> p;
  p.config = config;
  p.backbone.embed = Param<S>({V, d});
  p.backbone.layers.resize(config.n_layers);
  for (auto& layer : p.backbone.layers) {
    layer.wq = Param<S>({d, d});
    layer.wk = Param<S>({d, d});
    layer.wv = Param<S>({d, d});
    layer.wo = Param<S>({d, d});
    layer.attn_norm = Param<S>({d});
    layer.ff_norm = Param<S>({d});
  }
  p.backbone.final_norm = Param<S>({d});
  p.backbone.head = Param<S>({d, V});
  p.ff.resize(config.n_layers);
  for (auto& ff : p.ff) {
    ff.w1 = Param<S>({d, f});
    ff.w3 = Param<S>({d, f});
    ff.w2 = Param<S>({f, d});
  }
  return p;
}

inline bool is_norm_weight(const std::string& name) { return name.rfind("norm.", 0) == 0 || name.find(".norm.") != std::string::npos; }

// Gaussian(0, 0.02) weights and unit norm weights, drawn in visit order.
template <typename S>
ModelParams<S> init_seed(const ModelConfig& config, std::uint64_t rng_seed) {
  ModelParams<S> p = empty_params<S>(config);
  std::mt19937_64 rng(rng_seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  p.visit([&](const std::string& name, Param<S>& param) {
    if (is_norm_weight(name)) {
      std::fill(param.value.begin(), param.value.end(), S(1));
    } else {
      for (S& v : param.value) v = static_cast<S>(normal(rng));
    }
  });
  return p;
}

inline std::size_t feedforward_parameter_count(const ModelConfig& c) {
  return static_cast<std::size_t>(c.n_layers) * 3 * c.d_model * c.d_ff;
}

inline std::size_t backbone_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, V = c.vocab_size;
  return 2 * V * d + d + static_cast<std::size_t>(c.n_layers) * (4 * d * d + 2 * d);
}

inline std::size_t parameter_count(const ModelConfig& c) {
  return backbone_parameter_count(c) + feedforward_parameter_count(c);
}

template <typename Model>
std::size_t count_parameters(const Model& m) {
  std::size_t n = 0;
  m.visit([&](const std::string&, const auto& p) { n += p.numel(); });
  return n;
}

template <typename S>
Tensor<S> feed_forward(const FeedForward<S>& ff, Binding<S>& bind, const Tensor<S>& x) {
  const Tensor<S> gate = silu(matmul(x, bind(ff.w1)));
  const Tensor<S> up = matmul(x, bind(ff.w3));
  return matmul(mul(gate, up), bind(ff.w2));
}

// Shared transformer trunk. ff_fn(layer, normed_x) supplies the feedforward
// sublayer so dense and routed models run the same code. Returns logits
// [batch*seq x V] with row b*seq + t.
template <typename S, typename FeedForwardFn>
Tensor<S> run_backbone(const Backbone<S>& bb, const ModelConfig& config, Binding<S>& bind, const Tokens& tokens,
                       FeedForwardFn&& ff_fn, ForwardTrace<S>* trace = nullptr) {
  if (tokens.seq > static_cast<std::size_t>(config.max_seq_len))
    throw ContractError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                        std::to_string(config.max_seq_len));
  if (tokens.ids.size() != tokens.batch * tokens.seq) throw DimensionError("token grid size mismatch");
  if (tokens.ids.empty()) throw ContractError("forward on an empty token grid");
  std::vector<int> positions(tokens.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % tokens.seq);
  const S eps = static_cast<S>(config.rms_eps);
  const std::size_t hd = config.head_dim();

  Tensor<S> x = embedding(bind(bb.embed), std::span<const int>(tokens.ids));
  for (std::size_t l = 0; l < bb.layers.size(); ++l) {
    const AttentionLayer<S>& layer = bb.layers[l];
    const Tensor<S> h = rms_norm(x, bind(layer.attn_norm), eps);
    const Tensor<S> q = rope_rotate(matmul(h, bind(layer.wq)), std::span<const int>(positions), hd);
    const Tensor<S> k = rope_rotate(matmul(h, bind(layer.wk)), std::span<const int>(positions), hd);
    const Tensor<S> v = matmul(h, bind(layer.wv));
    const Tensor<S> attn = causal_attention(q, k, v, tokens.batch, tokens.seq, config.n_heads);
    x = add(x, matmul(attn, bind(layer.wo)));
    if (trace) trace->post_attention.push_back(x);
    x = add(x, ff_fn(l, rms_norm(x, bind(layer.ff_norm), eps)));
  }
  return matmul(rms_norm(x, bind(bb.final_norm), eps), bind(bb.head));
}

template <typename S>
Tensor<S> forward(const ModelParams<S>& params, Binding<S>& bind, const Tokens& tokens,
                  ForwardTrace<S>* trace = nullptr) {
  return run_backbone(
      params.backbone, params.config, bind, tokens,
      [&](std::size_t l, const Tensor<S>& x) { return feed_forward(params.ff[l], bind, x); }, trace);
}

template <typename S>
Tensor<S> forward(const ModelParams<S>& params, const Tokens& tokens) {
  Binding<S> bind;
  return forward(params, bind, tokens);
}

// Next-token cross entropy: logits at positions [0, seq-1) against tokens at
// [1, seq).
template <typename S>
Tensor<S> next_token_loss(const Tensor<S>& logits, const Tokens& tokens) {
  if (tokens.seq < 2) throw ContractError("language-model loss needs at least 2 tokens per row");
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  rows.reserve(tokens.batch * (tokens.seq - 1));
  targets.reserve(rows.capacity());
  for (std::size_t b = 0; b < tokens.batch; ++b)
    for (std::size_t t = 0; t + 1 < tokens.seq; ++t) {
      rows.push_back(b * tokens.seq + t);
      targets.push_back(tokens.at(b, t + 1));
    }
  return cross_entropy(gather_rows(logits, std::span<const std::size_t>(rows)), std::span<const int>(targets));
}

template <typename S>
Tensor<S> lm_loss(const ModelParams<S>& params, Binding<S>& bind, const Tokens& tokens) {
  if (tokens.seq < 2) throw ContractError("language-model loss needs at least 2 tokens per row");
  return next_token_loss(forward(params, bind, tokens), tokens);
}

template <typename S>
S lm_loss(const ModelParams<S>& params, const Tokens& tokens) {
  Binding<S> bind;
  return lm_loss(params, bind, tokens).item();
}

template <typename To, typename From>
Param<To> cast_param(const Param<From>& p) {
  return Param<To>(p.shape, std::vector<To>(p.value.begin(), p.value.end()));
}

template <typename To, typename From>
ModelParams<To> cast_model(const ModelParams<From>& src) {
  ModelParams<To> out = empty_params<To>(src.config);
  std::vector<const Param<From>*> flat;
  src.visit([&](const std::string&, const Param<From>& p) { flat.push_back(&p); });
  std::size_t i = 0;
  out.visit([&](const std::string&, Param<To>& p) { p = cast_param<To>(*flat[i++]); });
  return out;
}

}  // namespace btx
