// SPDX-License-Identifier: Apache-2.0
//
// AdamW, the warmup + cosine schedule, and the training drivers for every
// stage: seed pretraining, expert branches, routed finetuning and the dense
// continuation baseline.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "btx/checkpoint.hpp"
#include "btx/data.hpp"
#include "btx/errors.hpp"
#include "btx/merge.hpp"
#include "btx/model.hpp"
#include "btx/moe_model.hpp"

namespace btx {

struct Schedule {
  double peak_lr = 1e-4;
  std::int64_t warmup_steps = 100;
  std::int64_t total_steps = 2000;
  double floor_fraction = 0.1;

  void validate() const {
    if (!(peak_lr > 0)) throw ContractError("peak learning rate must be positive");
    if (warmup_steps < 0 || warmup_steps >= total_steps)
      throw ContractError("warmup (" + std::to_string(warmup_steps) + ") must be below total steps (" +
                          std::to_string(total_steps) + ")");
    if (!(floor_fraction > 0 && floor_fraction < 1)) throw ContractError("floor fraction must lie in (0, 1)");
  }
};

inline double lr_at(const Schedule& s, std::int64_t step) {
  s.validate();
  if (step < 0 || step > s.total_steps)
    throw ContractError("step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  if (step < s.warmup_steps) return s.peak_lr * (static_cast<double>(step) / static_cast<double>(s.warmup_steps));
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return s.peak_lr * (s.floor_fraction + (1.0 - s.floor_fraction) * cosine);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <typename S>
struct OptimState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<S>> m;
  std::map<std::string, std::vector<S>> v;
  bool operator==(const OptimState&) const = default;
};

// Gradients in the model's visit order.
template <typename S>
using GradTable = std::vector<std::vector<S>>;

template <typename S, typename Model>
GradTable<S> collect_grads(const Model& model, const Binding<S>& bind) {
  GradTable<S> out;
  model.visit([&](const std::string&, const Param<S>& p) { out.push_back(bind.grad(p)); });
  return out;
}

template <typename S, typename Model>
void check_finite_grads(const Model& model, const GradTable<S>& grads) {
  std::size_t i = 0;
  model.visit([&](const std::string& name, const Param<S>& p) {
    const auto& g = grads.at(i++);
    if (g.size() != p.numel()) throw DimensionError("gradient for '" + name + "' has the wrong size");
    for (S x : g)
      if (!std::isfinite(static_cast<double>(x)))
        throw NumericError("non-finite gradient in parameter '" + name + "' (group " + param_group(name) + ")");
  });
}

// Scales trainable gradients so their joint L2 norm is at most max_norm.
// Returns the norm before scaling.
template <typename S, typename Model>
double clip_global_norm(const Model& model, GradTable<S>& grads, double max_norm, const FreezeMask& mask = {}) {
  double sq = 0;
  std::size_t i = 0;
  std::vector<bool> live;
  model.visit([&](const std::string& name, const Param<S>&) {
    const bool t = mask.is_trainable(name);
    live.push_back(t);
    if (t)
      for (S g : grads[i]) sq += static_cast<double>(g) * static_cast<double>(g);
    ++i;
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && std::isfinite(norm) && norm > max_norm) {
    const double k = max_norm / norm;
    for (std::size_t j = 0; j < grads.size(); ++j)
      if (live[j])
        for (S& g : grads[j]) g = static_cast<S>(static_cast<double>(g) * k);
  }
  return norm;
}

// Decoupled decay first, then the bias-corrected Adam step. Frozen groups
// are skipped entirely, moments included. Nothing is modified if any
// trainable gradient is non-finite.
template <typename S, typename Model>
void adamw_step(Model& model, const GradTable<S>& grads, OptimState<S>& state, double lr, const AdamConfig& cfg,
                const FreezeMask& mask = {}) {
  check_finite_grads<S>(std::as_const(model), grads);
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  std::size_t i = 0;
  model.visit([&](const std::string& name, Param<S>& p) {
    const auto& g = grads[i++];
    if (!mask.is_trainable(name)) return;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(p.numel(), S(0));
    if (v.empty()) v.assign(p.numel(), S(0));
    if (m.size() != p.numel() || v.size() != p.numel()) throw DimensionError("optimizer moments for '" + name + "' do not match");
    for (std::size_t j = 0; j < p.numel(); ++j) {
      double w = static_cast<double>(p.value[j]);
      w -= lr * cfg.weight_decay * w;
      const double gj = static_cast<double>(g[j]);
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<S>(mj);
      v[j] = static_cast<S>(vj);
      w -= lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps);
      p.value[j] = static_cast<S>(w);
    }
  });
}

// ---- logs ----

struct TrainLog {
  std::vector<std::string> columns{"step", "lr", "lm_loss", "lb_loss"};
  std::vector<std::vector<double>> rows;

  std::string csv() const {
    std::string out;
    for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
    out += '\n';
    char buf[64];
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g", r[i]);
        out += (i ? "," : "") + std::string(buf);
      }
      out += '\n';
    }
    return out;
  }
  void write(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write log '" + path.string() + "'");
    out << csv();
  }
  double first(const std::string& col) const { return rows.empty() ? NAN : rows.front().at(index(col)); }
  double last(const std::string& col) const { return rows.empty() ? NAN : rows.back().at(index(col)); }
  std::size_t index(const std::string& col) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == col) return i;
    throw ContractError("no log column '" + col + "'");
  }
};

struct TrainHyper {
  Schedule schedule;
  AdamConfig adam;
  std::size_t batch_size = 16;
  std::size_t seq_len = 256;
  std::int64_t log_interval = 100;
  std::uint64_t seed = 0;  // batch sampling and Gumbel noise

  std::int64_t steps() const { return schedule.total_steps; }
  std::uint64_t tokens() const { return static_cast<std::uint64_t>(steps()) * batch_size * seq_len; }
};

template <typename S>
struct StepLoss {
  Tensor<S> total;
  double lm = 0;
  double lb = 0;
  std::vector<std::vector<double>> selections;  // [layer][expert] counts, empty for dense
};

template <typename Model>
struct TrainResult {
  Model model;
  OptimState<float> optim;
  TrainLog log;
  std::uint64_t tokens = 0;
  std::string rng_state;
  std::vector<std::string> warnings;
};

inline std::string rng_state_string(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint64_t out = 0;
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  out = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out;
}

// One optimizer step per iteration; `loss(model, bind, step_index, rng)`
// builds the step's loss where step_index counts completed steps.
template <typename Model, typename LossFn>
TrainResult<Model> run_training(Model model, const TrainHyper& h, const FreezeMask& mask, std::size_t n_layers,
                                std::size_t n_experts, std::int64_t step_offset, LossFn&& loss) {
  h.schedule.validate();
  if (h.log_interval < 1) throw ContractError("log interval must be >= 1");
  TrainResult<Model> res{std::move(model), {}, {}, 0, {}, {}};
  for (std::size_t l = 0; l < n_layers && n_experts > 0; ++l)
    for (std::size_t e = 0; e < n_experts; ++e)
      res.log.columns.push_back("util_l" + std::to_string(l) + "_e" + std::to_string(e));

  std::mt19937_64 rng(derive_seed(h.seed, 1));
  double lm_acc = 0, lb_acc = 0;
  std::int64_t n_acc = 0;
  std::vector<std::vector<double>> sel_acc(n_layers, std::vector<double>(n_experts, 0.0));
  for (std::int64_t step = 1; step <= h.steps(); ++step) {
    GradTable<float> grads;
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      Binding<float> bind(true);
      StepLoss<float> out = loss(std::as_const(res.model), bind, step - 1, rng);
      if (!std::isfinite(out.lm) || !std::isfinite(out.lb))
        throw NumericError("loss became non-finite at step " + std::to_string(step_offset + step));
      tape.backward(out.total);
      grads = collect_grads(std::as_const(res.model), bind);
      lm_acc += out.lm;
      lb_acc += out.lb;
      for (std::size_t l = 0; l < out.selections.size(); ++l)
        for (std::size_t e = 0; e < out.selections[l].size(); ++e) sel_acc[l][e] += out.selections[l][e];
    }
    ++n_acc;
    check_finite_grads<float>(std::as_const(res.model), grads);
    clip_global_norm<float>(std::as_const(res.model), grads, h.adam.clip_norm, mask);
    const double lr = lr_at(h.schedule, step);
    adamw_step(res.model, grads, res.optim, lr, h.adam, mask);
    res.tokens += static_cast<std::uint64_t>(h.batch_size) * h.seq_len;

    if (step % h.log_interval == 0 || step == h.steps()) {
      std::vector<double> row{static_cast<double>(step_offset + step), lr, lm_acc / n_acc, lb_acc / n_acc};
      for (auto& layer : sel_acc) {
        double total = 0;
        for (double c : layer) total += c;
        for (double& c : layer) {
          row.push_back(total > 0 ? c / total : 0.0);
          c = 0;
        }
      }
      res.log.rows.push_back(std::move(row));
      lm_acc = lb_acc = 0;
      n_acc = 0;
    }
  }
  res.rng_state = rng_state_string(rng);
  return res;
}

inline void require_corpora(const MixtureSpec& mixture, const std::vector<Corpus>& corpora) {
  mixture.validate();
  for (const auto& c : mixture.components) find_corpus(corpora, c.corpus);
}

}  // namespace detail

// Plain next-token training of a dense model on a mixture.
inline TrainResult<ModelParams<float>> train_dense(ModelParams<float> model, const std::vector<Corpus>& corpora,
                                                   const MixtureSpec& mixture, const TrainHyper& h,
                                                   std::int64_t step_offset = 0) {
  detail::require_corpora(mixture, corpora);
  return detail::run_training(std::move(model), h, FreezeMask{}, 0, 0, step_offset,
                              [&](const ModelParams<float>& m, Binding<float>& bind, std::int64_t, std::mt19937_64& rng) {
                                const TokenBatch b = sample_batch(mixture, corpora, h.batch_size, h.seq_len, rng);
                                StepLoss<float> out;
                                out.total = lm_loss(m, bind, b.tokens);
                                out.lm = out.total.item();
                                return out;
                              });
}

// Fresh initialization followed by training on the (typically uniform)
// mixture of all domains; the result is the model every branch starts from.
inline TrainResult<ModelParams<float>> pretrain_seed(const ModelConfig& config, std::uint64_t init_rng_seed,
                                                     const std::vector<Corpus>& corpora, const MixtureSpec& mixture,
                                                     const TrainHyper& h) {
  return train_dense(init_seed<float>(config, init_rng_seed), corpora, mixture, h);
}

// Continued training of a branch copy on one domain. Touches nothing but
// its own arguments, so any number may run concurrently.
inline TrainResult<ModelParams<float>> train_expert(const ModelParams<float>& seed, const Corpus& corpus,
                                                    const TrainHyper& h) {
  return train_dense(branch(seed, 1).front(), {corpus}, MixtureSpec::single(corpus.spec.name), h);
}

struct ExpertJob {
  const Corpus* corpus = nullptr;
  TrainHyper hyper;
};

// One worker thread per job when `parallel`, otherwise in job order.
inline std::vector<TrainResult<ModelParams<float>>> train_experts(const ModelParams<float>& seed,
                                                                  const std::vector<ExpertJob>& jobs, bool parallel) {
  std::vector<TrainResult<ModelParams<float>>> out(jobs.size());
  if (!parallel) {
    for (std::size_t i = 0; i < jobs.size(); ++i) out[i] = train_expert(seed, *jobs[i].corpus, jobs[i].hyper);
    return out;
  }
  std::vector<std::exception_ptr> errors(jobs.size());
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < jobs.size(); ++i)
    workers.emplace_back([&, i] {
      try {
        out[i] = train_expert(seed, *jobs[i].corpus, jobs[i].hyper);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

namespace detail {

inline std::vector<std::string> provenance_warnings(const std::vector<std::string>& provenance,
                                                    const MixtureSpec& mixture) {
  std::set<std::string> domains;
  for (const auto& p : provenance) {
    const std::string base = p.substr(0, p.find('/'));
    if (base != "seed" && base != "blend") domains.insert(base);
  }
  std::set<std::string> mixed;
  for (const auto& c : mixture.components) mixed.insert(c.corpus);
  std::vector<std::string> out;
  for (const auto& d : domains)
    if (!mixed.count(d)) out.push_back("expert '" + d + "' has no corpus in the finetuning mixture");
  if (!domains.empty())
    for (const auto& m : mixed)
      if (!domains.count(m)) out.push_back("mixture corpus '" + m + "' matches no expert provenance");
  return out;
}

}  // namespace detail

// Finetunes routers and every unfrozen parameter on the mixed stream with
// LM loss plus the per-layer balance loss. The Gumbel temperature follows
// the optimizer step.
inline TrainResult<MoEModel<float>> finetune_moe(MoEModel<float> moe, const std::vector<Corpus>& corpora,
                                                 const MixtureSpec& mixture, const TrainHyper& h,
                                                 const FreezeMask& mask = {}) {
  detail::require_corpora(mixture, corpora);
  if (moe.layers.empty() || moe.n_experts() == 0) throw ContractError("finetuning needs an MoE model with experts");
  moe.router.validate(static_cast<int>(moe.n_experts()));
  auto warnings = detail::provenance_warnings(moe.provenance, mixture);
  const std::size_t L = moe.layers.size(), N = moe.n_experts();
  std::mt19937_64 gumbel(detail::derive_seed(h.seed, 2));
  auto res = detail::run_training(
      std::move(moe), h, mask, L, N, 0,
      [&](const MoEModel<float>& m, Binding<float>& bind, std::int64_t step, std::mt19937_64& rng) {
        const TokenBatch b = sample_batch(mixture, corpora, h.batch_size, h.seq_len, rng);
        RoutingContext ctx{RouteMode::Train, step, &gumbel, true};
        MoELoss<float> loss = moe_loss(m, bind, b.tokens, ctx);
        StepLoss<float> out;
        out.total = loss.total;
        out.lm = loss.lm.item();
        out.lb = loss.balance.item();
        out.selections.assign(L, std::vector<double>(N, 0.0));
        for (std::size_t l = 0; l < loss.forward.records.size(); ++l)
          for (const auto& r : loss.forward.records[l])
            for (int e : r.experts) out.selections[l][static_cast<std::size_t>(e)] += 1;
        return out;
      });
  res.warnings = std::move(warnings);
  return res;
}

struct DenseContinueResult {
  TrainResult<ModelParams<float>> phase1;
  TrainResult<ModelParams<float>> phase2;
  TrainLog log;  // both phases, steps numbered continuously
  std::uint64_t tokens() const { return phase1.tokens + phase2.tokens; }
  const ModelParams<float>& model() const { return phase2.model; }
};

// Data-matched dense baseline: phase 1 sees the union of the expert corpora
// for as many steps as all experts together, phase 2 the finetuning mixture.
// Each phase restarts the schedule and optimizer, as the routed pipeline does.
inline DenseContinueResult train_dense_continue(const ModelParams<float>& seed, const std::vector<Corpus>& corpora,
                                                const std::vector<std::string>& phase1_corpora,
                                                const TrainHyper& phase1, const MixtureSpec& phase2_mixture,
                                                const TrainHyper& phase2) {
  if (phase1_corpora.empty()) throw ContractError("dense baseline needs at least one phase-1 corpus");
  std::vector<std::pair<std::string, double>> w;
  for (const auto& c : phase1_corpora) w.emplace_back(c, 1.0);
  DenseContinueResult out;
  out.phase1 = train_dense(seed, corpora, MixtureSpec::from_weights(w), phase1);
  out.phase2 = train_dense(out.phase1.model, corpora, phase2_mixture, phase2, phase1.steps());
  out.log = out.phase1.log;
  out.log.rows.insert(out.log.rows.end(), out.phase2.log.rows.begin(), out.phase2.log.rows.end());
  return out;
}

// ---- optimizer state in checkpoints ----

inline void attach_optimizer(Checkpoint& ck, const OptimState<float>& st) {
  ck.optim_step = static_cast<std::uint64_t>(st.step);
  for (const auto& [name, m] : st.m) ck.tensors.push_back({"optim.m/" + name, {m.size()}, m});
  for (const auto& [name, v] : st.v) ck.tensors.push_back({"optim.v/" + name, {v.size()}, v});
}

inline OptimState<float> optimizer_from_checkpoint(const Checkpoint& ck) {
  OptimState<float> st;
  if (!ck.optim_step) return st;
  st.step = static_cast<std::int64_t>(*ck.optim_step);
  for (const auto& t : ck.tensors) {
    if (t.name.rfind("optim.m/", 0) == 0) st.m[t.name.substr(8)] = t.values;
    if (t.name.rfind("optim.v/", 0) == 0) st.v[t.name.substr(8)] = t.values;
  }
  return st;
}

template <typename Model>
Checkpoint result_checkpoint(const TrainResult<Model>& r, std::uint64_t step_base = 0) {
  Checkpoint ck = to_checkpoint(r.model);
  ck.step = step_base + static_cast<std::uint64_t>(r.optim.step);
  ck.rng_state = r.rng_state;
  attach_optimizer(ck, r.optim);
  return ck;
}

}  // namespace btx
