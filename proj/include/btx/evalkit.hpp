// SPDX-License-Identifier: Apache-2.0
//
// Held-out evaluation, routing analytics and run comparison.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "btx/data.hpp"
#include "btx/digest.hpp"
#include "btx/errors.hpp"
#include "btx/json_io.hpp"
#include "btx/model.hpp"
#include "btx/moe_model.hpp"

namespace btx {

struct EvalOptions {
  std::size_t seq_len = 256;
  std::size_t max_windows = SIZE_MAX;  // per domain
  std::size_t batch = 8;               // windows per forward pass
  std::uint64_t seed = 0;              // sampled routing at inference
};

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

template <typename S>
Tensor<S> eval_logits(const ModelParams<S>& m, const Tokens& t, std::mt19937_64&) {
  Binding<S> bind;
  return forward(m, bind, t);
}

template <typename S>
Tensor<S> eval_logits(const MoEModel<S>& m, const Tokens& t, std::mt19937_64& rng) {
  Binding<S> bind;
  RoutingContext ctx{RouteMode::Infer, 0, &rng, false};
  return moe_model_forward(m, bind, t, ctx).logits;
}

// Summed next-token NLL over every row of a window batch, in 64-bit.
template <typename S>
double nll_sum(const Tensor<S>& logits, const Tokens& tokens) {
  const std::size_t V = logits.dim(1);
  double total = 0;
  for (std::size_t b = 0; b < tokens.batch; ++b)
    for (std::size_t t = 0; t + 1 < tokens.seq; ++t) {
      const S* row = logits.data().data() + (b * tokens.seq + t) * V;
      double mx = -INFINITY;
      for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double z = 0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
      total += mx + std::log(z) - static_cast<double>(row[tokens.at(b, t + 1)]);
    }
  return total;
}

inline std::vector<Tokens> window_batches(const std::vector<std::vector<int>>& windows, std::size_t batch) {
  std::vector<Tokens> out;
  for (std::size_t i = 0; i < windows.size(); i += batch) {
    Tokens t;
    t.seq = windows[i].size();
    for (std::size_t j = i; j < std::min(windows.size(), i + batch); ++j) {
      t.ids.insert(t.ids.end(), windows[j].begin(), windows[j].end());
      ++t.batch;
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

inline std::string config_digest(const ModelConfig& c, const RouterConfig* router = nullptr, std::size_t n_experts = 0) {
  json j{{"model", c}};
  if (router) {
    j["router"] = *router;
    j["n_experts"] = n_experts;
  }
  return sha256_hex(j.dump());
}

template <typename S>
std::string model_digest(const ModelParams<S>& m) {
  return config_digest(m.config);
}
template <typename S>
std::string model_digest(const MoEModel<S>& m) {
  return config_digest(m.config, &m.router, m.n_experts());
}

struct DomainEval {
  std::string domain;
  double nll = 0;
  double perplexity = 0;
  std::uint64_t tokens = 0;  // predicted positions
};

struct EvalReport {
  std::string model;
  std::string config_digest;
  std::vector<DomainEval> domains;

  const DomainEval& at(const std::string& domain) const {
    for (const auto& d : domains)
      if (d.domain == domain) return d;
    throw AlignmentError("report '" + model + "' has no domain '" + domain + "'");
  }
  double average_nll() const {
    double s = 0;
    for (const auto& d : domains) s += d.nll;
    return domains.empty() ? 0 : s / static_cast<double>(domains.size());
  }
  json to_json() const {
    json ds = json::array();
    for (const auto& d : domains)
      ds.push_back({{"domain", d.domain}, {"nll", d.nll}, {"perplexity", d.perplexity}, {"tokens", d.tokens}});
    return json{{"model", model}, {"config_digest", config_digest}, {"domains", ds}};
  }
  static EvalReport from_json(const json& j) {
    EvalReport r;
    try {
      r.model = j.at("model").get<std::string>();
      r.config_digest = j.at("config_digest").get<std::string>();
      for (const auto& d : j.at("domains"))
        r.domains.push_back({d.at("domain").get<std::string>(), d.at("nll").get<double>(), d.at("perplexity").get<double>(),
                             d.at("tokens").get<std::uint64_t>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed evaluation report: ") + e.what());
    }
    return r;
  }
};

inline DomainEval make_domain_eval(const std::string& domain, double nll_total, std::uint64_t tokens) {
  if (tokens == 0) throw DataError("domain '" + domain + "' has no held-out tokens to score");
  const double nll = nll_total / static_cast<double>(tokens);
  return {domain, nll, std::exp(nll), tokens};
}

// Teacher-forced NLL per domain over the deterministic holdout windows.
template <typename Model>
EvalReport eval_perplexity(const Model& model, const std::string& name, const std::vector<Corpus>& corpora,
                           const EvalOptions& opts = {}) {
  EvalReport report;
  report.model = name;
  report.config_digest = model_digest(model);
  for (const auto& c : corpora) {
    std::mt19937_64 rng(opts.seed);
    double total = 0;
    std::uint64_t tokens = 0;
    for (const Tokens& t : detail::window_batches(heldout_stream(c, opts.seq_len, opts.max_windows), opts.batch)) {
      total += detail::nll_sum(detail::eval_logits(model, t, rng), t);
      tokens += t.batch * (t.seq - 1);
    }
    report.domains.push_back(make_domain_eval(c.spec.name, total, tokens));
  }
  return report;
}

// ---- routing analytics ----

inline constexpr double kDeadExpertThreshold = 0.01;
inline constexpr std::size_t kHistogramBins = 20;

struct UtilizationRow {
  std::size_t layer = 0;
  std::string domain;  // "all" aggregates every domain
  std::size_t expert = 0;
  double utilization = 0;
  double gate_mass = 0;
  bool dead = false;
};

struct RoutingStats {
  std::size_t n_layers = 0;
  std::size_t n_experts = 0;
  std::vector<UtilizationRow> rows;
  std::vector<std::vector<std::vector<std::uint64_t>>> histogram;  // [layer][expert][bin]
  std::uint64_t tokens = 0;                                        // routed tokens per layer

  std::vector<double> utilization(std::size_t layer, const std::string& domain = "all") const {
    std::vector<double> out(n_experts, 0.0);
    bool found = false;
    for (const auto& r : rows)
      if (r.layer == layer && r.domain == domain) out[r.expert] = r.utilization, found = true;
    if (!found) throw ContractError("no routing rows for layer " + std::to_string(layer) + " domain '" + domain + "'");
    return out;
  }
  double min_utilization(std::size_t layer, const std::string& domain = "all") const {
    const auto u = utilization(layer, domain);
    return *std::min_element(u.begin(), u.end());
  }

  std::string usage_csv() const {
    std::string out = "layer,domain,expert,utilization,gate_mass,dead_flag\n";
    for (const auto& r : rows)
      out += std::to_string(r.layer) + "," + r.domain + "," + std::to_string(r.expert) + "," + detail::fmt(r.utilization) +
             "," + detail::fmt(r.gate_mass) + "," + (r.dead ? "1" : "0") + "\n";
    return out;
  }
  std::string histogram_csv() const {
    std::string out = "layer,expert,bin_lo,bin_hi,count\n";
    for (std::size_t l = 0; l < histogram.size(); ++l)
      for (std::size_t e = 0; e < histogram[l].size(); ++e)
        for (std::size_t b = 0; b < kHistogramBins; ++b)
          out += std::to_string(l) + "," + std::to_string(e) + "," + detail::fmt(double(b) / kHistogramBins) + "," +
                 detail::fmt(double(b + 1) / kHistogramBins) + "," + std::to_string(histogram[l][e][b]) + "\n";
    return out;
  }
};

struct RoutingAnalysis {
  RoutingStats stats;
  std::string tokens_csv;  // layer,token_position,expert_id,gate_weight,softmax_prob,task_tag
};

inline std::size_t histogram_bin(double p) {
  const auto b = static_cast<std::size_t>(std::floor(p * kHistogramBins));
  return std::min(b, kHistogramBins - 1);
}

// Utilization counts each selection once and normalizes by all selections in
// the (layer, domain) cell; layers that route softly use mean gate weight.
template <typename S>
RoutingAnalysis collect_routing(const MoEModel<S>& moe, const std::vector<Corpus>& corpora, const EvalOptions& opts = {},
                                bool export_tokens = true) {
  if (moe.n_experts() == 0) throw ContractError("routing analytics need an MoE model");
  const std::size_t L = moe.layers.size(), N = moe.n_experts();
  RoutingAnalysis out;
  RoutingStats& st = out.stats;
  st.n_layers = L;
  st.n_experts = N;
  st.histogram.assign(L, std::vector<std::vector<std::uint64_t>>(N, std::vector<std::uint64_t>(kHistogramBins, 0)));
  if (export_tokens) out.tokens_csv = "layer,token_position,expert_id,gate_weight,softmax_prob,task_tag\n";

  using Cell = std::vector<double>;
  std::vector<std::vector<Cell>> sel(L), mass(L);  // [layer][domain] -> per expert
  std::vector<bool> soft_layer(L, false);
  for (const auto& c : corpora) {
    std::mt19937_64 rng(opts.seed);
    for (std::size_t l = 0; l < L; ++l) {
      sel[l].emplace_back(N, 0.0);
      mass[l].emplace_back(N, 0.0);
    }
    std::size_t window0 = 0;
    for (const Tokens& t : detail::window_batches(heldout_stream(c, opts.seq_len, opts.max_windows), opts.batch)) {
      Binding<S> bind;
      RoutingContext ctx{RouteMode::Infer, 0, &rng, true};
      const MoEForward<S> fwd = moe_model_forward(moe, bind, t, ctx);
      for (std::size_t l = 0; l < L; ++l) {
        soft_layer[l] = fwd.methods[l] == RoutingMethod::Soft;
        for (const TokenRoute& r : fwd.records[l]) {
          for (std::size_t e = 0; e < N; ++e) ++st.histogram[l][e][histogram_bin(r.probs[e])];
          for (std::size_t i = 0; i < r.experts.size(); ++i) {
            const auto e = static_cast<std::size_t>(r.experts[i]);
            sel[l].back()[e] += 1;
            mass[l].back()[e] += r.gates[i];
            if (export_tokens)
              out.tokens_csv += std::to_string(l) + "," + std::to_string(window0 * opts.seq_len + r.token) + "," +
                                std::to_string(e) + "," + detail::fmt(r.gates[i]) + "," + detail::fmt(r.probs[e]) + "," +
                                c.spec.name + "\n";
          }
        }
      }
      st.tokens += t.batch * t.seq;
      window0 += t.batch;
    }
  }

  auto emit = [&](std::size_t l, const std::string& domain, const Cell& s, const Cell& m) {
    double ts = 0, tm = 0;
    for (std::size_t e = 0; e < N; ++e) ts += s[e], tm += m[e];
    for (std::size_t e = 0; e < N; ++e) {
      UtilizationRow r{l, domain, e, 0, tm > 0 ? m[e] / tm : 0, false};
      r.utilization = soft_layer[l] ? r.gate_mass : (ts > 0 ? s[e] / ts : 0);
      r.dead = r.utilization < kDeadExpertThreshold;
      st.rows.push_back(r);
    }
  };
  for (std::size_t l = 0; l < L; ++l) {
    Cell s_all(N, 0.0), m_all(N, 0.0);
    for (std::size_t d = 0; d < corpora.size(); ++d) {
      emit(l, corpora[d].spec.name, sel[l][d], mass[l][d]);
      for (std::size_t e = 0; e < N; ++e) s_all[e] += sel[l][d][e], m_all[e] += mass[l][d][e];
    }
    emit(l, "all", s_all, m_all);
  }
  return out;
}

// ---- comparison ----

struct Comparison {
  std::string baseline;
  std::vector<std::string> domains;
  std::vector<std::string> models;
  std::vector<std::vector<double>> nll;    // [model][domain]
  std::vector<std::vector<double>> delta;  // nll - baseline nll

  std::string csv() const {
    std::string out = "model";
    for (const auto& d : domains) out += ",nll_" + d;
    out += ",nll_avg";
    for (const auto& d : domains) out += ",delta_" + d;
    out += ",delta_avg\n";
    for (std::size_t m = 0; m < models.size(); ++m) {
      out += models[m];
      for (double v : nll[m]) out += "," + detail::fmt(v);
      for (double v : delta[m]) out += "," + detail::fmt(v);
      out += "\n";
    }
    return out;
  }
  json to_json() const {
    json rows = json::array();
    for (std::size_t m = 0; m < models.size(); ++m) {
      json r{{"model", models[m]}};
      for (std::size_t d = 0; d < domains.size(); ++d) {
        r["nll"][domains[d]] = nll[m][d];
        r["delta"][domains[d]] = delta[m][d];
      }
      r["nll"]["avg"] = nll[m].back();
      r["delta"]["avg"] = delta[m].back();
      rows.push_back(r);
    }
    return json{{"baseline", baseline}, {"rows", rows}};
  }
};

// Per-domain NLL deltas against the report named `baseline` (the first report
// when empty). Domain order follows the first report.
inline Comparison compare_runs(const std::vector<EvalReport>& reports, std::string baseline = "") {
  if (reports.size() < 2) throw ContractError("comparison needs at least two reports");
  if (baseline.empty()) baseline = reports.front().model;
  Comparison c;
  c.baseline = baseline;
  for (const auto& d : reports.front().domains) c.domains.push_back(d.domain);
  const EvalReport* base = nullptr;
  for (const auto& r : reports) {
    if (r.domains.size() != c.domains.size())
      throw AlignmentError("report '" + r.model + "' covers " + std::to_string(r.domains.size()) + " domains, expected " +
                           std::to_string(c.domains.size()));
    for (const auto& d : c.domains) r.at(d);
    if (r.model == baseline) base = &r;
  }
  if (base == nullptr) throw ContractError("baseline '" + baseline + "' is not among the reports");
  for (const auto& r : reports) {
    c.models.push_back(r.model);
    std::vector<double> n, dl;
    for (const auto& d : c.domains) {
      n.push_back(r.at(d).nll);
      dl.push_back(r.at(d).nll - base->at(d).nll);
    }
    n.push_back(r.average_nll());
    dl.push_back(r.average_nll() - base->average_nll());
    c.nll.push_back(std::move(n));
    c.delta.push_back(std::move(dl));
  }
  return c;
}

}  // namespace btx
