// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "btx/checkpoint.hpp"
#include "btx/train.hpp"

namespace btx {
namespace {

namespace fs = std::filesystem;

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 256;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 16;
  return c;
}

Corpus pattern_corpus(const std::string& name, const std::string& unit, std::size_t repeats) {
  Corpus c;
  c.spec.name = name;
  std::string text;
  for (std::size_t i = 0; i < repeats; ++i) text += unit;
  c.train_docs = {text};
  c.holdout_docs = {text.substr(0, unit.size() * 8)};
  c.train_stream = tokenize(text);
  c.holdout_stream = tokenize(c.holdout_docs[0]);
  return c;
}

Corpus synthetic(const std::string& name, CorpusSource src, std::uint64_t seed) {
  CorpusSpec s;
  s.name = name;
  s.source = src;
  s.rng_seed = seed;
  s.n_bytes = 20000;
  return build_corpus(s);
}

TrainHyper quick_hyper(std::int64_t steps, double lr = 1e-2, std::uint64_t seed = 1) {
  TrainHyper h;
  h.schedule = {lr, std::min<std::int64_t>(10, steps - 1), steps, 0.1};
  h.batch_size = 4;
  h.seq_len = 16;
  h.log_interval = 10;
  h.seed = seed;
  return h;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("btx_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---- schedule ----

TEST(Schedule, WarmupPeakIsExact) {
  const Schedule s{1e-4, 100, 1000, 0.1};
  EXPECT_EQ(lr_at(s, 100), 1e-4);
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 5e-5);
}

TEST(Schedule, FinalStepIsExactlyTenPercent) {
  const Schedule s{1e-4, 100, 1000, 0.1};
  EXPECT_EQ(lr_at(s, 1000), 1e-5);
}

TEST(Schedule, CosineMidpoint) {
  const Schedule s{1e-4, 100, 1100, 0.1};
  EXPECT_NEAR(lr_at(s, 600), 0.55e-4, 1e-18);
}

TEST(Schedule, MonotoneDecayAfterWarmup) {
  const Schedule s{1e-3, 10, 200, 0.1};
  for (std::int64_t t = 11; t <= 200; ++t) EXPECT_LE(lr_at(s, t), lr_at(s, t - 1));
}

TEST(Schedule, RejectsBadInputs) {
  EXPECT_THROW(lr_at(Schedule{1e-4, 100, 1000, 0.1}, 1001), ContractError);
  EXPECT_THROW(lr_at(Schedule{1e-4, 100, 1000, 0.1}, -1), ContractError);
  EXPECT_THROW(lr_at(Schedule{1e-4, 100, 100, 0.1}, 0), ContractError);
  EXPECT_THROW(lr_at(Schedule{1e-4, 10, 100, 1.0}, 0), ContractError);
}

// ---- AdamW ----

struct Scalars {
  std::vector<Param<double>> params;
  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < params.size(); ++i) f("p" + std::to_string(i), params[i]);
  }
  template <typename F>
  void visit(F&& f) const {
    for (std::size_t i = 0; i < params.size(); ++i) f("p" + std::to_string(i), params[i]);
  }
};

TEST(AdamW, ZeroGradientNoDecayIsFixedPoint) {
  Scalars s{{Param<double>({3}, {1.0, -2.0, 0.5})}};
  const auto before = s.params;
  OptimState<double> st;
  AdamConfig cfg;
  cfg.weight_decay = 0;
  adamw_step(s, GradTable<double>{{0, 0, 0}}, st, 1e-3, cfg);
  EXPECT_EQ(s.params, before);
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, ZeroGradientDecaysMultiplicatively) {
  Scalars s{{Param<double>({2}, {1.0, -3.0})}};
  OptimState<double> st;
  adamw_step(s, GradTable<double>{{0, 0}}, st, 1e-4, AdamConfig{});
  EXPECT_DOUBLE_EQ(s.params[0].value[0], 1.0 * (1 - 1e-5));
  EXPECT_DOUBLE_EQ(s.params[0].value[1], -3.0 * (1 - 1e-5));
}

TEST(AdamW, MatchesHandRecurrence) {
  Scalars s{{Param<double>({1}, {0.7})}};
  OptimState<double> st;
  const AdamConfig cfg;
  const double lr = 1e-2;
  const double gs[3] = {0.3, -1.2, 0.05};
  double p = 0.7, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    adamw_step(s, GradTable<double>{{gs[t - 1]}}, st, lr, cfg);
    p = p - lr * 0.1 * p;
    m = 0.9 * m + 0.1 * gs[t - 1];
    v = 0.95 * v + 0.05 * gs[t - 1] * gs[t - 1];
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.95, t));
    p = p - lr * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_LT(std::abs(s.params[0].value[0] - p), 1e-12) << "step " << t;
  }
}

TEST(AdamW, NonFiniteGradientNamesParameterAndLeavesStateAlone) {
  auto model = init_seed<float>(tiny_config(), 1);
  const auto before = model;
  GradTable<float> grads;
  model.visit([&](const std::string& name, const Param<float>& p) {
    grads.emplace_back(p.numel(), 0.1f);
    if (name == "layers.0.ff.w3") grads.back()[2] = NAN;
  });
  OptimState<float> st;
  try {
    adamw_step(model, grads, st, 1e-3, AdamConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.0.ff.w3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("ff"), std::string::npos);
  }
  EXPECT_EQ(model, before);
  EXPECT_EQ(st.step, 0);
}

TEST(AdamW, ClipGlobalNorm) {
  Scalars s{{Param<double>({2}), Param<double>({1})}};
  GradTable<double> g{{3, 0}, {4}};
  EXPECT_DOUBLE_EQ(clip_global_norm<double>(s, g, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(g[0][0], 0.6);
  EXPECT_DOUBLE_EQ(g[1][0], 0.8);
  GradTable<double> small{{0.3, 0}, {0.4}};
  clip_global_norm<double>(s, small, 1.0);
  EXPECT_EQ(small[0][0], 0.3);
}

// ---- training drivers ----

TEST(Training, LearnsRepeatingPattern) {
  const Corpus c = pattern_corpus("pattern", "abcdefghijklmnop", 400);
  const auto seed = init_seed<float>(tiny_config(), 2);
  const auto res = train_expert(seed, c, quick_hyper(200));
  const Tokens probe = Tokens::single(std::vector<int>(c.train_stream.begin(), c.train_stream.begin() + 16));
  const double initial = lm_loss(seed, probe);
  const double final_loss = lm_loss(res.model, probe);
  EXPECT_LT(final_loss, 0.5 * initial) << initial << " -> " << final_loss;
  EXPECT_EQ(res.optim.step, 200);
  EXPECT_EQ(res.tokens, 200u * 4 * 16);
  EXPECT_EQ(res.log.columns, (std::vector<std::string>{"step", "lr", "lm_loss", "lb_loss"}));
  EXPECT_EQ(res.log.rows.size(), 20u);
  EXPECT_LT(res.log.last("lm_loss"), res.log.first("lm_loss"));
}

TEST(Training, DeterministicUnderFixedSeeds) {
  const Corpus c = synthetic("arith", CorpusSource::Arith, 3);
  const auto seed = init_seed<float>(tiny_config(), 3);
  const auto a = train_expert(seed, c, quick_hyper(20));
  const auto b = train_expert(seed, c, quick_hyper(20));
  EXPECT_EQ(serialize_checkpoint(result_checkpoint(a)), serialize_checkpoint(result_checkpoint(b)));
  EXPECT_EQ(a.log.csv(), b.log.csv());
  const auto other = train_expert(seed, c, quick_hyper(20, 1e-2, 99));
  EXPECT_NE(other.model, a.model);
}

TEST(Training, ParallelExpertsMatchSerial) {
  const std::vector<Corpus> corpora{synthetic("arith", CorpusSource::Arith, 4), synthetic("code", CorpusSource::Code, 5),
                                    synthetic("text", CorpusSource::Text, 6)};
  const auto seed = init_seed<float>(tiny_config(), 4);
  std::vector<ExpertJob> jobs;
  for (std::size_t i = 0; i < corpora.size(); ++i) jobs.push_back({&corpora[i], quick_hyper(15, 1e-2, 10 + i)});
  const auto serial = train_experts(seed, jobs, false);
  const auto parallel = train_experts(seed, jobs, true);
  ASSERT_EQ(serial.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(serialize_checkpoint(result_checkpoint(serial[i])), serialize_checkpoint(result_checkpoint(parallel[i])));
}

TEST(Training, NonFiniteLossAborts) {
  const Corpus c = pattern_corpus("pattern", "abcdefghijklmnop", 40);
  auto seed = init_seed<float>(tiny_config(), 5);
  seed.backbone.head.value[0] = NAN;
  EXPECT_THROW(train_expert(seed, c, quick_hyper(5)), NumericError);
}

TEST(Finetune, LogsDecomposedLossAndUtilization) {
  const std::vector<Corpus> corpora{synthetic("arith", CorpusSource::Arith, 7), synthetic("text", CorpusSource::Text, 8)};
  const auto seed = init_seed<float>(tiny_config(), 6);
  RouterConfig rc;
  const auto moe = mix_to_moe<float>({{"arith", seed}, {"text", seed}}, NamedModel<float>{"seed", seed}, rc, 7);
  const auto mix = MixtureSpec::from_weights({{"arith", 1}, {"text", 1}});
  const auto res = finetune_moe(moe, corpora, mix, quick_hyper(20));
  EXPECT_TRUE(res.warnings.empty());
  EXPECT_EQ(res.log.columns.size(), 4u + 3u);
  EXPECT_EQ(res.log.columns.back(), "util_l0_e2");
  for (const auto& row : res.log.rows) {
    EXPECT_GT(row[3], 0.0);
    EXPECT_NEAR(row[4] + row[5] + row[6], 1.0, 1e-9);
  }
  // Balance loss is logged separately; with uniform-ish routing it sits near alpha per layer.
  EXPECT_NEAR(res.log.last("lb_loss"), 0.01, 0.01);
}

TEST(Finetune, FrozenFeedForwardBytesUnchanged) {
  const std::vector<Corpus> corpora{synthetic("arith", CorpusSource::Arith, 9)};
  const auto seed = init_seed<float>(tiny_config(), 8);
  const auto moe = upcycle(seed, 2, RouterConfig{}, 9);
  const auto res = finetune_moe(moe, corpora, MixtureSpec::single("arith"), quick_hyper(5), build_freeze_mask(moe, true));
  for (std::size_t l = 0; l < moe.layers.size(); ++l) {
    EXPECT_EQ(res.model.layers[l].experts, moe.layers[l].experts);
    EXPECT_NE(res.model.layers[l].router, moe.layers[l].router);
  }
  EXPECT_NE(res.model.backbone, moe.backbone);
}

TEST(Finetune, ProvenanceMismatchWarnsButRuns) {
  const std::vector<Corpus> corpora{synthetic("arith", CorpusSource::Arith, 10)};
  const auto seed = init_seed<float>(tiny_config(), 10);
  RouterConfig rc;
  rc.k = 1;
  const auto moe = mix_to_moe<float>({{"code", seed}, {"text", seed}}, std::nullopt, rc, 11);
  const auto res = finetune_moe(moe, corpora, MixtureSpec::single("arith"), quick_hyper(2));
  EXPECT_EQ(res.warnings.size(), 3u);
}

TEST(Finetune, SampleTop1Trains) {
  const std::vector<Corpus> corpora{synthetic("arith", CorpusSource::Arith, 11)};
  const auto seed = init_seed<float>(tiny_config(), 12);
  RouterConfig rc;
  rc.method = RoutingMethod::SampleTop1;
  const auto moe = upcycle(seed, 2, rc, 13);
  const auto a = finetune_moe(moe, corpora, MixtureSpec::single("arith"), quick_hyper(12));
  const auto b = finetune_moe(moe, corpora, MixtureSpec::single("arith"), quick_hyper(12));
  EXPECT_EQ(a.model, b.model);
  EXPECT_LT(a.log.last("lm_loss"), a.log.first("lm_loss"));
}

TEST(DenseContinue, TokenAccountingAndBothPhasesImprove) {
  const std::vector<Corpus> corpora{synthetic("arith", CorpusSource::Arith, 12), synthetic("text", CorpusSource::Text, 13)};
  const auto seed = init_seed<float>(tiny_config(), 14);
  const auto expert_h = quick_hyper(30);
  const auto ft_h = quick_hyper(20);
  const auto mix = MixtureSpec::from_weights({{"arith", 1}, {"text", 1}});
  // Two experts of 30 steps each, then finetuning.
  TrainHyper p1 = expert_h;
  p1.schedule.total_steps = 2 * expert_h.steps();
  const auto res = train_dense_continue(seed, corpora, {"arith", "text"}, p1, mix, ft_h);
  EXPECT_EQ(res.tokens(), 2 * expert_h.tokens() + ft_h.tokens());
  EXPECT_LT(res.phase1.log.last("lm_loss"), res.phase1.log.first("lm_loss"));
  EXPECT_LT(res.phase2.log.last("lm_loss"), res.phase1.log.first("lm_loss"));
  EXPECT_EQ(res.log.rows.back()[0], 80.0);
  const auto again = train_dense_continue(seed, corpora, {"arith", "text"}, p1, mix, ft_h);
  EXPECT_EQ(again.model(), res.model());
}

// ---- checkpoints ----

TEST(Checkpoint, DenseRoundTripIsBitExact) {
  const auto dir = temp_dir("dense");
  const auto model = init_seed<float>(tiny_config(), 20);
  Checkpoint ck = to_checkpoint(model);
  ck.step = 42;
  ck.rng_state = rng_state_string(std::mt19937_64(3));
  save_checkpoint(dir / "a.btx", ck);
  const Checkpoint back = load_checkpoint(dir / "a.btx");
  EXPECT_EQ(back, ck);
  EXPECT_EQ(dense_from_checkpoint(back), model);
  save_checkpoint(dir / "b.btx", back);
  std::ifstream a(dir / "a.btx", std::ios::binary), b(dir / "b.btx", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
  fs::remove_all(dir);
}

TEST(Checkpoint, MoEMetadataSurvives) {
  const auto seed = init_seed<float>(tiny_config(), 21);
  RouterConfig rc;
  rc.method = RoutingMethod::Switch;
  rc.k = 1;
  rc.capacity_factor = 1.25;
  rc.alpha = 0.0;
  rc.usage = UsageStat::DispatchFraction;
  auto moe = split_experts(mix_to_moe<float>({{"arith", seed}, {"code", seed}}, NamedModel<float>{"seed", seed}, rc, 1), 2, 2);
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(to_checkpoint(moe)));
  ASSERT_TRUE(back.moe.has_value());
  EXPECT_EQ(back.moe->n_experts, 6u);
  EXPECT_EQ(back.moe->provenance, moe.provenance);
  EXPECT_EQ(back.moe->router, rc);
  EXPECT_EQ(moe_from_checkpoint(back), moe);
  EXPECT_THROW(dense_from_checkpoint(back), ContractError);
  EXPECT_THROW(moe_from_checkpoint(to_checkpoint(seed)), ContractError);
}

TEST(Checkpoint, OptimizerStateRoundTrips) {
  const Corpus c = pattern_corpus("pattern", "abcdefghijklmnop", 40);
  const auto res = train_expert(init_seed<float>(tiny_config(), 22), c, quick_hyper(3));
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(result_checkpoint(res)));
  EXPECT_EQ(optimizer_from_checkpoint(back), res.optim);
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.rng_state, res.rng_state);
  EXPECT_EQ(dense_from_checkpoint(back), res.model);
}

TEST(Checkpoint, TruncationAndCorruptionDetected) {
  const std::string bytes = serialize_checkpoint(to_checkpoint(init_seed<float>(tiny_config(), 23)));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{11}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, cut)), CorruptionError) << cut;
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(flipped), CorruptionError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(magic), CorruptionError);
}

TEST(Checkpoint, UnknownVersionRejected) {
  Checkpoint ck = to_checkpoint(init_seed<float>(tiny_config(), 24));
  ck.version = 7;
  EXPECT_THROW(deserialize_checkpoint(serialize_checkpoint(ck)), VersionError);
}

TEST(Checkpoint, MissingFileIsDataError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.btx"), DataError);
}

}  // namespace
}  // namespace btx
