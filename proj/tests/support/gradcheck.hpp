// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle, independent of the tape: it only ever
// evaluates the loss forward.
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "btx/model.hpp"
#include "btx/tensor.hpp"

namespace btx::testing {

struct GradReport {
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
};

// Loose parameter bundle for op-level checks.
struct Leaves {
  std::vector<Param<double>> params;

  Leaves& add(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    Param<double> p(std::move(shape));
    std::normal_distribution<double> normal(0.0, scale);
    for (double& v : p.value) v = normal(rng);
    params.push_back(std::move(p));
    return *this;
  }
  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < params.size(); ++i) f("leaf" + std::to_string(i), params[i]);
  }
  template <typename F>
  void visit(F&& f) const {
    for (std::size_t i = 0; i < params.size(); ++i) f("leaf" + std::to_string(i), params[i]);
  }
};

// loss(model, binding) must return a scalar tensor. Every entry of every
// parameter is checked with |a - n| / (|a| + 1e-8); `stride` > 1 subsamples.
template <typename Model, typename LossFn>
GradReport check_gradients(Model& model, LossFn&& loss, double h = 1e-5, std::size_t stride = 1) {
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Binding<double> bind(true);
    Tensor<double> value = loss(static_cast<const Model&>(model), bind);
    tape.backward(value);
    model.visit([&](const std::string&, const Param<double>& p) { analytic.push_back(bind.grad(p)); });
  }
  GradReport report;
  std::size_t index = 0;
  model.visit([&](const std::string& name, Param<double>& p) {
    const auto& a = analytic[index++];
    for (std::size_t i = 0; i < p.value.size(); i += stride) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      double plus, minus;
      {
        Binding<double> bind(false);
        plus = loss(static_cast<const Model&>(model), bind).item();
      }
      p.value[i] = saved - h;
      {
        Binding<double> bind(false);
        minus = loss(static_cast<const Model&>(model), bind).item();
      }
      p.value[i] = saved;
      const double numeric = (plus - minus) / (2 * h);
      const double rel = std::abs(a[i] - numeric) / (std::abs(a[i]) + 1e-8);
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a[i]) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  });
  return report;
}

// Random constant used to contract an op output to a scalar.
inline Tensor<double> random_constant(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = normal(rng);
  return Tensor<double>::constant(shape, std::move(v));
}

inline Tensor<double> contract(const Tensor<double>& t, std::uint64_t seed = 99) {
  return sum(mul(t, random_constant(t.shape(), seed)));
}

}  // namespace btx::testing
