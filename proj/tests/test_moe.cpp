// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "btx/moe.hpp"
#include "support/gradcheck.hpp"

namespace btx {
namespace {

template <typename S>
Param<S> gaussian(Shape shape, std::mt19937_64& rng, double stddev) {
  Param<S> p(std::move(shape));
  std::normal_distribution<double> normal(0, stddev);
  for (S& v : p.value) v = static_cast<S>(normal(rng));
  return p;
}

template <typename S>
FeedForward<S> random_ff(std::size_t d, std::size_t f, std::mt19937_64& rng) {
  return {gaussian<S>({d, f}, rng, 0.5), gaussian<S>({d, f}, rng, 0.5), gaussian<S>({f, d}, rng, 0.5)};
}

template <typename S>
MoELayerParams<S> random_layer(std::size_t n, std::size_t d, std::size_t f, std::uint64_t seed, bool identical = false) {
  std::mt19937_64 rng(seed);
  MoELayerParams<S> layer;
  const auto first = random_ff<S>(d, f, rng);
  for (std::size_t e = 0; e < n; ++e) layer.experts.push_back(identical || e == 0 ? first : random_ff<S>(d, f, rng));
  layer.router = gaussian<S>({d, n}, rng, 1.0);
  return layer;
}

template <typename S>
Tensor<S> random_input(std::size_t tokens, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<S> v(tokens * d);
  for (S& x : v) x = static_cast<S>(normal(rng));
  return Tensor<S>::constant({tokens, d}, std::move(v));
}

RouterConfig router(RoutingMethod m, int k = 2) {
  RouterConfig c;
  c.method = m;
  c.k = k;
  return c;
}

// ---- routing functions ----

TEST(RouteTopK, PicksLargestWithSoftmaxWeights) {
  const std::vector<double> logits{2, 1, 0, -1};
  const Route r = route_topk(logits, 2);
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(r.weights[0], 0.7311, 1e-4);
  EXPECT_NEAR(r.weights[1], 0.2689, 1e-4);
}

TEST(RouteTopK, TiesGoToLowestIndex) {
  const std::vector<double> logits{1, 1, 0, 0};
  const Route r = route_topk(logits, 2);
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0, 1}));
  EXPECT_DOUBLE_EQ(r.weights[0], 0.5);
  EXPECT_DOUBLE_EQ(r.weights[1], 0.5);
  const std::vector<double> flat{0, 0, 0};
  EXPECT_EQ(route_topk(flat, 2).indices, (std::vector<std::size_t>{0, 1}));
}

TEST(RouteTopK, FullKRecoversSoftmax) {
  const std::vector<double> logits{0.3, -1.2, 2.0, 0.1};
  const Route r = route_topk(logits, 4);
  const auto full = softmax_values(std::span<const double>(logits));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.weights[j], full[r.indices[j]], 1e-15);
}

TEST(RouteTopK, KLargerThanNRejected) {
  const std::vector<double> logits{1, 2};
  EXPECT_THROW(route_topk(logits, 3), ContractError);
}

TEST(RouteSwitch, CapacityArithmetic) { EXPECT_EQ(switch_capacity(8, 4, 1.5), 3u); }

TEST(RouteSwitch, OverflowIsDropped) {
  std::vector<std::vector<double>> logits(8, {5, 0, 0, 0});
  const auto out = route_switch(logits, 1.5);
  int routed = 0, dropped = 0;
  for (std::size_t t = 0; t < out.size(); ++t) {
    if (out[t].expert) {
      ++routed;
      EXPECT_EQ(*out[t].expert, 0u);
      EXPECT_LT(t, 3u);
    } else {
      ++dropped;
    }
  }
  EXPECT_EQ(routed, 3);
  EXPECT_EQ(dropped, 5);
}

TEST(RouteSwitch, UniformLogitsGiveOneOverN) {
  std::vector<std::vector<double>> logits(4, {0, 0, 0, 0});
  for (const auto& a : route_switch(logits, 4.0)) {
    ASSERT_TRUE(a.expert);
    EXPECT_DOUBLE_EQ(a.weight, 0.25);
  }
}

TEST(RouteSampleTop1, SharpTemperatureFavoursDominantLogit) {
  const std::vector<double> logits{10, 0, 0, 0};
  std::mt19937_64 rng(1);
  const GumbelState cold{100000, 1e-4};
  ASSERT_DOUBLE_EQ(cold.temperature(), 0.5);
  int hits = 0;
  for (int i = 0; i < 10000; ++i) hits += route_sample_top1(logits, cold, RouteMode::Train, rng).indices[0] == 0;
  EXPECT_GT(hits / 10000.0, 0.99);
}

TEST(RouteSampleTop1, InferenceOnOneHotIsDeterministic) {
  const std::vector<double> logits{-1e4, -1e4, 0, -1e4};
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const Route r = route_sample_top1(logits, GumbelState{}, RouteMode::Infer, rng);
    EXPECT_EQ(r.indices[0], 2u);
    EXPECT_EQ(r.weights[0], 1.0);
  }
}

TEST(RouteSampleTop1, TrainWeightInUnitInterval) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal(0, 3);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> logits(5);
    for (double& v : logits) v = normal(rng);
    const Route r = route_sample_top1(logits, GumbelState{i, 1e-4}, RouteMode::Train, rng);
    EXPECT_GT(r.weights[0], 0.0);
    EXPECT_LE(r.weights[0], 1.0);
  }
}

TEST(GumbelTemperature, Schedule) {
  EXPECT_EQ(gumbel_temperature(0, 1e-4), 1.0);
  EXPECT_NEAR(gumbel_temperature(5000, 1e-4), std::exp(-0.5), 1e-15);
  EXPECT_NEAR(gumbel_temperature(5000, 1e-4), 0.6065, 1e-4);
  EXPECT_EQ(gumbel_temperature(10000, 1e-4), 0.5);
  EXPECT_THROW(gumbel_temperature(-1, 1e-4), ContractError);
}

// ---- moe_forward ----

TEST(MoEForward, IdenticalExpertsMatchDenseFeedForward) {
  const auto layer = random_layer<float>(4, 8, 16, 1, true);
  const auto x = random_input<float>(12, 8, 2);
  Binding<float> bind;
  const auto dense = feed_forward(layer.experts[0], bind, x);
  std::mt19937_64 rng(4);
  for (auto cfg : {router(RoutingMethod::TopK, 1), router(RoutingMethod::TopK, 2), router(RoutingMethod::TopK, 4),
                   router(RoutingMethod::Soft), router(RoutingMethod::SampleTop1)}) {
    RoutingContext ctx{RouteMode::Infer, 0, &rng};
    const auto out = moe_forward(x, layer, cfg, 1, ctx, bind);
    for (std::size_t i = 0; i < dense.numel(); ++i) ASSERT_NEAR(out.y[i], dense[i], 1e-5) << to_string(cfg.method);
  }
}

TEST(MoEForward, SingleSoftExpertIsExactlyDense) {
  const auto layer = random_layer<double>(1, 6, 12, 3);
  const auto x = random_input<double>(5, 6, 4);
  Binding<double> bind;
  const auto dense = feed_forward(layer.experts[0], bind, x);
  const auto out = moe_forward(x, layer, router(RoutingMethod::Soft), 0, RoutingContext{}, bind);
  for (std::size_t i = 0; i < dense.numel(); ++i) EXPECT_EQ(out.y[i], dense[i]);
}

TEST(MoEForward, SoftMatchesExplicitAllExpertsSum) {
  const std::size_t n = 3, d = 6, f = 12, tokens = 7;
  const auto layer = random_layer<double>(n, d, f, 5);
  const auto x = random_input<double>(tokens, d, 6);
  Binding<double> bind;
  const auto out = moe_forward(x, layer, router(RoutingMethod::Soft), 0, RoutingContext{}, bind);
  // Oracle: every expert on every token, weighted by the router softmax.
  for (std::size_t t = 0; t < tokens; ++t) {
    std::vector<double> logit(n, 0.0);
    for (std::size_t e = 0; e < n; ++e)
      for (std::size_t i = 0; i < d; ++i) logit[e] += x.at(t, i) * layer.router.value[i * n + e];
    const auto prob = softmax_values(std::span<const double>(logit));
    std::vector<double> y(d, 0.0);
    for (std::size_t e = 0; e < n; ++e) {
      const auto& ff = layer.experts[e];
      for (std::size_t h = 0; h < f; ++h) {
        double a = 0, b = 0;
        for (std::size_t i = 0; i < d; ++i) {
          a += x.at(t, i) * ff.w1.value[i * f + h];
          b += x.at(t, i) * ff.w3.value[i * f + h];
        }
        const double act = a / (1 + std::exp(-a)) * b;
        for (std::size_t i = 0; i < d; ++i) y[i] += prob[e] * act * ff.w2.value[h * d + i];
      }
    }
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(out.y.at(t, i), y[i], 1e-10);
  }
}

TEST(MoEForward, SparsityCounter) {
  const std::size_t n = 4, tokens = 16;
  const auto layer = random_layer<float>(n, 8, 16, 7);
  const auto x = random_input<float>(tokens, 8, 8);
  Binding<float> bind;
  std::mt19937_64 rng(1);
  RoutingContext train{RouteMode::Train, 0, &rng};
  EXPECT_EQ(moe_forward(x, layer, router(RoutingMethod::TopK, 2), 1, train, bind).expert_evaluations, tokens * 2);
  EXPECT_EQ(moe_forward(x, layer, router(RoutingMethod::Soft), 1, train, bind).expert_evaluations, tokens * n);
  EXPECT_EQ(moe_forward(x, layer, router(RoutingMethod::SampleTop1), 1, train, bind).expert_evaluations, tokens);
  const auto sw = moe_forward(x, layer, router(RoutingMethod::Switch), 1, train, bind);
  std::size_t routed = 0;
  for (const auto& r : sw.record) routed += r.experts.size();
  EXPECT_EQ(sw.expert_evaluations, routed);
  for (const auto& r : sw.record) EXPECT_LE(r.experts.size(), 1u);
}

TEST(MoEForward, GatesAndProbabilitiesNormalized) {
  const auto layer = random_layer<float>(4, 8, 16, 9);
  const auto x = random_input<float>(20, 8, 10);
  Binding<float> bind;
  std::mt19937_64 rng(2);
  for (auto cfg : {router(RoutingMethod::TopK, 2), router(RoutingMethod::Soft), router(RoutingMethod::SampleTop1)}) {
    const auto out = moe_forward(x, layer, cfg, 1, RoutingContext{RouteMode::Infer, 0, &rng}, bind);
    for (const auto& r : out.record) {
      EXPECT_NEAR(std::accumulate(r.gates.begin(), r.gates.end(), 0.0), 1.0, 1e-6);
      EXPECT_NEAR(std::accumulate(r.probs.begin(), r.probs.end(), 0.0), 1.0, 1e-6);
      EXPECT_EQ(r.layer, 1);
    }
  }
}

TEST(MoEForward, SwitchDropsOverflowTokens) {
  auto layer = random_layer<double>(4, 6, 12, 11);
  // Router sends everything to expert 2.
  std::fill(layer.router.value.begin(), layer.router.value.end(), 0.0);
  for (std::size_t i = 0; i < 6; ++i) layer.router.value[i * 4 + 2] = 1.0;
  std::vector<double> xs(8 * 6, 1.0);
  const auto x = Tensor<double>::constant({8, 6}, xs);
  Binding<double> bind;
  const auto out = moe_forward(x, layer, router(RoutingMethod::Switch), 0, RoutingContext{}, bind);
  for (std::size_t t = 0; t < 8; ++t) {
    if (t < 3) {
      ASSERT_EQ(out.record[t].experts, std::vector<int>{2});
      EXPECT_LT(out.record[t].gates[0], 1.0);
    } else {
      EXPECT_TRUE(out.record[t].experts.empty());
      for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out.y.at(t, i), 0.0);
    }
  }
}

TEST(MoEForward, SampleTop1UsesSoftRoutingOnFirstLayer) {
  const auto layer = random_layer<float>(4, 8, 16, 12);
  const auto x = random_input<float>(6, 8, 13);
  Binding<float> bind;
  std::mt19937_64 rng(3);
  RoutingContext ctx{RouteMode::Train, 0, &rng};
  auto cfg = router(RoutingMethod::SampleTop1);
  EXPECT_EQ(moe_forward(x, layer, cfg, 0, ctx, bind).method_used, RoutingMethod::Soft);
  EXPECT_EQ(moe_forward(x, layer, cfg, 1, ctx, bind).method_used, RoutingMethod::SampleTop1);
  cfg.first_layer_soft = false;
  EXPECT_EQ(moe_forward(x, layer, cfg, 0, ctx, bind).method_used, RoutingMethod::SampleTop1);
}

TEST(MoEForward, SampleTop1OutputScalesWithRetainedWeight) {
  const auto layer = random_layer<double>(4, 6, 12, 14);
  const auto x = random_input<double>(10, 6, 15);
  Binding<double> bind;
  std::mt19937_64 rng(4);
  auto cfg = router(RoutingMethod::SampleTop1);
  const auto out = moe_forward(x, layer, cfg, 1, RoutingContext{RouteMode::Train, 50, &rng}, bind);
  for (std::size_t t = 0; t < 10; ++t) {
    const auto& r = out.record[t];
    ASSERT_EQ(r.experts.size(), 1u);
    EXPECT_GT(r.gates[0], 0.0);
    EXPECT_LE(r.gates[0], 1.0);
    const std::vector<std::size_t> row{t};
    const auto full = feed_forward(layer.experts[r.experts[0]], bind, gather_rows(x, std::span<const std::size_t>(row)));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.y.at(t, i), r.gates[0] * full[i], 1e-12);
  }
}

TEST(MoEForward, DimensionMismatchRejected) {
  const auto layer = random_layer<float>(2, 8, 16, 1);
  Binding<float> bind;
  EXPECT_THROW(moe_forward(random_input<float>(3, 6, 1), layer, router(RoutingMethod::TopK), 0, RoutingContext{}, bind),
               DimensionError);
}

// Gradients through W_l and expert weights.
struct LayerModel {
  MoELayerParams<double> layer;
  Param<double> input;
  template <typename F>
  void visit(F&& f) {
    layer.visit("moe.", f);
    f("input", input);
  }
  template <typename F>
  void visit(F&& f) const {
    layer.visit("moe.", f);
    f("input", input);
  }
};

void expect_moe_gradients(RouterConfig cfg, double tol = 1e-5) {
  const RouteMode mode = RouteMode::Train;
  std::mt19937_64 init(21);
  LayerModel m{random_layer<double>(4, 6, 8, 22), gaussian<double>({9, 6}, init, 1.0)};
  auto loss = [&](const LayerModel& model, Binding<double>& b) {
    std::mt19937_64 rng(5);  // same noise for every evaluation
    RoutingContext ctx{mode, 100, &rng};
    const auto out = moe_forward(b(model.input), model.layer, cfg, 1, ctx, b);
    return add(testing::contract(out.y), load_balance_loss(out.stats, 0.5));
  };
  const auto report = testing::check_gradients(m, loss);
  EXPECT_LT(report.max_rel_error, tol) << to_string(cfg.method) << ": " << report.worst;
}

TEST(MoEGradients, TopK) { expect_moe_gradients(router(RoutingMethod::TopK, 2)); }
TEST(MoEGradients, Soft) { expect_moe_gradients(router(RoutingMethod::Soft)); }
TEST(MoEGradients, Switch) { expect_moe_gradients(router(RoutingMethod::Switch)); }
// The tempered softmax leaves some router gradients near 1e-6, where
// round-off in the difference quotient dominates.
TEST(MoEGradients, SampleTop1Train) { expect_moe_gradients(router(RoutingMethod::SampleTop1), 1e-4); }

TEST(MoEGradients, DispatchFractionUsageIsConstant) {
  auto cfg = router(RoutingMethod::TopK, 2);
  cfg.usage = UsageStat::DispatchFraction;
  expect_moe_gradients(cfg);
}

// ---- load balancing ----

TEST(LoadBalance, UniformStatisticsGiveAlpha) {
  for (std::size_t n : {2u, 4u, 8u}) {
    const std::vector<double> u(n, 1.0 / n);
    EXPECT_DOUBLE_EQ(load_balance_loss(u, u, 0.01), 0.01) << n;
    BalanceStats<double> st{Tensor<double>::constant({1, n}, u), Tensor<double>::constant({1, n}, u)};
    EXPECT_DOUBLE_EQ(load_balance_loss(st, 0.01).item(), 0.01) << n;
  }
}

TEST(LoadBalance, CollapsedStatisticsGiveAlphaN) {
  const std::vector<double> onehot{0, 1, 0, 0};
  EXPECT_DOUBLE_EQ(load_balance_loss(onehot, onehot, 0.01), 0.04);
}

TEST(LoadBalance, SkewedUsageAgainstUniformProbs) {
  const std::vector<double> u{.4, .3, .2, .1}, p{.25, .25, .25, .25};
  EXPECT_NEAR(load_balance_loss(u, p, 0.01), 0.01, 1e-15);
}

TEST(LoadBalance, SoftRoutingUsageEqualsProbabilityMean) {
  const auto layer = random_layer<double>(3, 6, 8, 30);
  Binding<double> bind;
  const auto out = moe_forward(random_input<double>(9, 6, 31), layer, router(RoutingMethod::Soft), 0, RoutingContext{}, bind);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out.stats.usage[i], out.stats.probs[i], 1e-15);
}

TEST(RouterConfig, Validation) {
  EXPECT_THROW(router(RoutingMethod::TopK, 5).validate(4), ContractError);
  EXPECT_THROW(router(RoutingMethod::TopK, 0).validate(4), ContractError);
  auto c = router(RoutingMethod::TopK);
  c.alpha = -1;
  EXPECT_THROW(c.validate(4), ContractError);
  EXPECT_EQ(routing_method_from_string("sample_top1"), RoutingMethod::SampleTop1);
  EXPECT_THROW(routing_method_from_string("expert_choice"), ContractError);
}

}  // namespace
}  // namespace btx
