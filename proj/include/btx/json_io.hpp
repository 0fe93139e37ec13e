// SPDX-License-Identifier: Apache-2.0
//
// JSON mappings for configuration types. Unknown keys are rejected so a
// typo in a config file fails loudly instead of silently using a default.
#pragma once

#include <json.hpp>

#include <set>
#include <string>

#include "btx/data.hpp"
#include "btx/errors.hpp"
#include "btx/model.hpp"
#include "btx/moe.hpp"
#include "btx/train.hpp"

namespace btx {

using json = nlohmann::ordered_json;

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw DataError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw DataError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
           {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
           {"rms_eps", c.rms_eps}};
}
inline void from_json(const json& j, ModelConfig& c) {
  detail::reject_unknown(j, {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "rms_eps"}, "model");
  detail::read_opt(j, "vocab_size", c.vocab_size);
  detail::read_opt(j, "d_model", c.d_model);
  detail::read_opt(j, "n_layers", c.n_layers);
  detail::read_opt(j, "n_heads", c.n_heads);
  detail::read_opt(j, "d_ff", c.d_ff);
  detail::read_opt(j, "max_seq_len", c.max_seq_len);
  detail::read_opt(j, "rms_eps", c.rms_eps);
}

inline void to_json(json& j, const RouterConfig& c) {
  j = json{{"method", to_string(c.method)},
           {"k", c.k},
           {"capacity_factor", c.capacity_factor},
           {"alpha", c.alpha},
           {"gumbel_rate", c.gumbel_rate},
           {"first_layer_soft", c.first_layer_soft},
           {"usage", to_string(c.usage)}};
}
inline void from_json(const json& j, RouterConfig& c) {
  detail::reject_unknown(j, {"method", "k", "capacity_factor", "alpha", "gumbel_rate", "first_layer_soft", "usage"},
                         "router");
  if (j.contains("method")) c.method = routing_method_from_string(j.at("method").get<std::string>());
  detail::read_opt(j, "k", c.k);
  detail::read_opt(j, "capacity_factor", c.capacity_factor);
  detail::read_opt(j, "alpha", c.alpha);
  detail::read_opt(j, "gumbel_rate", c.gumbel_rate);
  detail::read_opt(j, "first_layer_soft", c.first_layer_soft);
  if (j.contains("usage")) c.usage = usage_stat_from_string(j.at("usage").get<std::string>());
}

inline void to_json(json& j, const CorpusSpec& c) {
  j = json{{"name", c.name},
           {"source", to_string(c.source)},
           {"path", c.path},
           {"rng_seed", c.rng_seed},
           {"holdout_fraction", c.holdout_fraction},
           {"n_bytes", c.n_bytes}};
}
inline void from_json(const json& j, CorpusSpec& c) {
  detail::reject_unknown(j, {"name", "source", "path", "rng_seed", "holdout_fraction", "n_bytes"}, "corpus");
  detail::read_opt(j, "name", c.name);
  if (j.contains("source")) c.source = corpus_source_from_string(j.at("source").get<std::string>());
  detail::read_opt(j, "path", c.path);
  detail::read_opt(j, "rng_seed", c.rng_seed);
  detail::read_opt(j, "holdout_fraction", c.holdout_fraction);
  detail::read_opt(j, "n_bytes", c.n_bytes);
  if (c.name.empty()) throw DataError("corpus needs a name");
}

// Mixtures are written as {"corpus": weight, ...}; weights are normalized.
inline void to_json(json& j, const MixtureSpec& m) {
  j = json::object();
  for (const auto& c : m.components) j[c.corpus] = c.probability;
}
inline void from_json(const json& j, MixtureSpec& m) {
  if (!j.is_object()) throw DataError("mixture must be an object of corpus weights");
  std::vector<std::pair<std::string, double>> w;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_number()) throw DataError("mixture weight for '" + k + "' must be a number");
    w.emplace_back(k, v.get<double>());
  }
  m = MixtureSpec::from_weights(w);
}

inline void to_json(json& j, const Schedule& s) {
  j = json{{"peak_lr", s.peak_lr}, {"warmup_steps", s.warmup_steps}, {"total_steps", s.total_steps},
           {"floor_fraction", s.floor_fraction}};
}
inline void from_json(const json& j, Schedule& s) {
  detail::reject_unknown(j, {"peak_lr", "warmup_steps", "total_steps", "floor_fraction"}, "schedule");
  detail::read_opt(j, "peak_lr", s.peak_lr);
  detail::read_opt(j, "warmup_steps", s.warmup_steps);
  detail::read_opt(j, "total_steps", s.total_steps);
  detail::read_opt(j, "floor_fraction", s.floor_fraction);
}

inline void to_json(json& j, const AdamConfig& a) {
  j = json{{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay},
           {"clip_norm", a.clip_norm}};
}
inline void from_json(const json& j, AdamConfig& a) {
  detail::reject_unknown(j, {"beta1", "beta2", "eps", "weight_decay", "clip_norm"}, "adam");
  detail::read_opt(j, "beta1", a.beta1);
  detail::read_opt(j, "beta2", a.beta2);
  detail::read_opt(j, "eps", a.eps);
  detail::read_opt(j, "weight_decay", a.weight_decay);
  detail::read_opt(j, "clip_norm", a.clip_norm);
}

}  // namespace btx
