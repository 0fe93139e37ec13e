// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor<S>. Matrices are row-major; a tensor
// of rank 2 is [rows x cols] and most model code works on [tokens x width].
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "btx/errors.hpp"
#include "btx/tensor.hpp"

namespace btx {

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using StridedMap = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(s));
}

// b is either a's shape or a row vector broadcast over a's rows.
inline bool is_row_broadcast(const Shape& a, const Shape& b) {
  if (a == b) return false;
  const std::size_t cols = a.empty() ? 1 : a.back();
  if (shape_numel(b) == cols && (b.size() == 1 || (b.size() == 2 && b[0] == 1))) return true;
  throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
}

}  // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<S> out(m * n);
  detail::MatMap<S>(out.data(), m, n).noalias() =
      detail::ConstMatMap<S>(a.data().data(), m, k) * detail::ConstMatMap<S>(b.data().data(), k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<S>({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](const std::vector<S>& g) {
    detail::ConstMatMap<S> dc(g.data(), m, n);
    if (auto* da = detail::sink(an))
      detail::MatMap<S>(da->data(), m, k).noalias() += dc * detail::ConstMatMap<S>(bn->value.data(), k, n).transpose();
    if (auto* db = detail::sink(bn))
      detail::MatMap<S>(db->data(), k, n).noalias() += detail::ConstMatMap<S>(an->value.data(), m, k).transpose() * dc;
  });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const bool bcast = detail::is_row_broadcast(a.shape(), b.shape());
  const std::size_t n = a.numel(), cols = bcast ? b.numel() : n;
  std::vector<S> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < n; ++i) out[i] += b[i % cols];
  auto an = a.node(), bn = b.node();
  return detail::make_result<S>(a.shape(), std::move(out), {&a, &b}, [an, bn, n, cols](const std::vector<S>& g) {
    if (auto* da = detail::sink(an))
      for (std::size_t i = 0; i < n; ++i) (*da)[i] += g[i];
    if (auto* db = detail::sink(bn))
      for (std::size_t i = 0; i < n; ++i) (*db)[i % cols] += g[i];
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  const bool bcast = detail::is_row_broadcast(a.shape(), b.shape());
  const std::size_t n = a.numel(), cols = bcast ? b.numel() : n;
  std::vector<S> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i % cols];
  auto an = a.node(), bn = b.node();
  return detail::make_result<S>(a.shape(), std::move(out), {&a, &b}, [an, bn, n, cols](const std::vector<S>& g) {
    if (auto* da = detail::sink(an))
      for (std::size_t i = 0; i < n; ++i) (*da)[i] += g[i] * bn->value[i % cols];
    if (auto* db = detail::sink(bn))
      for (std::size_t i = 0; i < n; ++i) (*db)[i % cols] += g[i] * an->value[i];
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  std::vector<S> out(a.data().begin(), a.data().end());
  for (S& v : out) v *= factor;
  auto an = a.node();
  return detail::make_result<S>(a.shape(), std::move(out), {&a}, [an, factor](const std::vector<S>& g) {
    if (auto* da = detail::sink(an))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * factor;
  });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  const std::size_t n = x.numel();
  std::vector<S> out(n), sig(n);
  for (std::size_t i = 0; i < n; ++i) {
    sig[i] = S(1) / (S(1) + std::exp(-x[i]));
    out[i] = x[i] * sig[i];
  }
  auto xn = x.node();
  return detail::make_result<S>(x.shape(), std::move(out), {&x}, [xn, sig = std::move(sig)](const std::vector<S>& g) {
    if (auto* dx = detail::sink(xn))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const S v = xn->value[i];
        (*dx)[i] += g[i] * sig[i] * (S(1) + v * (S(1) - sig[i]));
      }
  });
}

// Sum of all entries as a 1-element tensor.
template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = S(0);
  for (S v : x.data()) total += v;
  auto xn = x.node();
  return detail::make_result<S>({1}, {total}, {&x}, [xn](const std::vector<S>& g) {
    if (auto* dx = detail::sink(xn))
      for (S& d : *dx) d += g[0];
  });
}

// Column means of a [rows x cols] matrix, shape [1 x cols].
template <typename S>
Tensor<S> mean_rows(const Tensor<S>& x) {
  detail::require_rank2(x.shape(), "mean_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(cols, S(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += x.at(r, c);
  const S inv = rows > 0 ? S(1) / S(rows) : S(0);
  for (S& v : out) v *= inv;
  auto xn = x.node();
  return detail::make_result<S>({1, cols}, std::move(out), {&x}, [xn, rows, cols, inv](const std::vector<S>& g) {
    if (auto* dx = detail::sink(xn))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*dx)[r * cols + c] += g[c] * inv;
  });
}

// Numerically stable softmax along `axis` (negative counts from the back).
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  const Shape& shape = x.shape();
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax axis out of range for " + shape_str(shape));
  const std::size_t len = shape[axis];
  if (len == 0) throw DimensionError("softmax over an empty axis");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[i];
  for (S v : x.data())
    if (!std::isfinite(v)) throw NumericError("softmax input contains a non-finite value");

  std::vector<S> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      S peak = -std::numeric_limits<S>::infinity();
      for (std::size_t j = 0; j < len; ++j) peak = std::max(peak, x[base + j * inner]);
      S total = S(0);
      for (std::size_t j = 0; j < len; ++j) total += out[base + j * inner] = std::exp(x[base + j * inner] - peak);
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  auto xn = x.node();
  auto probs = out;
  return detail::make_result<S>(shape, std::move(out), {&x},
                                [xn, probs = std::move(probs), outer, inner, len](const std::vector<S>& g) {
                                  auto* dx = detail::sink(xn);
                                  if (!dx) return;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t in = 0; in < inner; ++in) {
                                      const std::size_t base = o * len * inner + in;
                                      S dot = S(0);
                                      for (std::size_t j = 0; j < len; ++j)
                                        dot += g[base + j * inner] * probs[base + j * inner];
                                      for (std::size_t j = 0; j < len; ++j) {
                                        const std::size_t i = base + j * inner;
                                        (*dx)[i] += probs[i] * (g[i] - dot);
                                      }
                                    }
                                });
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> targets) {
  detail::require_rank2(logits.shape(), "cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  if (rows == 0) throw ContractError("cross_entropy over zero rows");
  std::vector<S> probs(rows * vocab);
  S loss = S(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw IndexError("target " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab));
    const S* row = logits.data().data() + r * vocab;
    const S peak = *std::max_element(row, row + vocab);
    S total = S(0);
    for (std::size_t v = 0; v < vocab; ++v) total += probs[r * vocab + v] = std::exp(row[v] - peak);
    const S lse = peak + std::log(total);
    loss += lse - row[t];
    for (std::size_t v = 0; v < vocab; ++v) probs[r * vocab + v] /= total;
  }
  const S inv = S(1) / S(rows);
  std::vector<int> tg(targets.begin(), targets.end());
  auto ln = logits.node();
  return detail::make_result<S>(
      {1}, {loss * inv}, {&logits},
      [ln, probs = std::move(probs), tg = std::move(tg), rows, vocab, inv](const std::vector<S>& g) {
        auto* dl = detail::sink(ln);
        if (!dl) return;
        const S s = g[0] * inv;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t v = 0; v < vocab; ++v) (*dl)[r * vocab + v] += s * probs[r * vocab + v];
          (*dl)[r * vocab + tg[r]] -= s;
        }
      });
}

// x / sqrt(mean(x^2) + eps) * weight, row-wise over [rows x d].
template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& weight, S eps) {
  detail::require_rank2(x.shape(), "rms_norm");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (weight.numel() != d)
    throw DimensionError("rms_norm weight " + shape_str(weight.shape()) + " does not match input " +
                         shape_str(x.shape()));
  if (!(eps > S(0))) throw ContractError("rms_norm requires eps > 0");
  std::vector<S> out(rows * d), inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    S ms = S(0);
    for (std::size_t c = 0; c < d; ++c) ms += x[r * d + c] * x[r * d + c];
    inv_rms[r] = S(1) / std::sqrt(ms / S(d) + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[r * d + c] * inv_rms[r] * weight[c];
  }
  auto xn = x.node(), wn = weight.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {&x, &weight},
      [xn, wn, inv_rms = std::move(inv_rms), rows, d](const std::vector<S>& g) {
        auto* dx = detail::sink(xn);
        auto* dw = detail::sink(wn);
        const auto& xv = xn->value;
        const auto& wv = wn->value;
        for (std::size_t r = 0; r < rows; ++r) {
          const S ir = inv_rms[r];
          if (dw)
            for (std::size_t c = 0; c < d; ++c) (*dw)[c] += g[r * d + c] * xv[r * d + c] * ir;
          if (dx) {
            S dot = S(0);
            for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * wv[c] * xv[r * d + c];
            const S k = ir * ir * ir * dot / S(d);
            for (std::size_t c = 0; c < d; ++c) (*dx)[r * d + c] += ir * wv[c] * g[r * d + c] - xv[r * d + c] * k;
          }
        }
      });
}

// Rotary position embedding: within every head of width head_dim, channel
// pair (2i, 2i+1) of row r is rotated by positions[r] * base^(-2i/head_dim).
template <typename S>
Tensor<S> rope_rotate(const Tensor<S>& x, std::span<const int> positions, std::size_t head_dim, S base = S(10000)) {
  detail::require_rank2(x.shape(), "rope_rotate");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (positions.size() != rows) throw DimensionError("rope_rotate: positions do not match rows of " + shape_str(x.shape()));
  if (head_dim == 0 || head_dim % 2 != 0 || d % head_dim != 0)
    throw DimensionError("rope_rotate: head_dim " + std::to_string(head_dim) + " incompatible with " +
                         shape_str(x.shape()));
  const std::size_t half = head_dim / 2;
  std::vector<S> cosv(rows * half), sinv(rows * half);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(positions[r]) * freq;
      cosv[r * half + i] = static_cast<S>(std::cos(angle));
      sinv[r * half + i] = static_cast<S>(std::sin(angle));
    }
  std::vector<S> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t h = 0; h < d; h += head_dim)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t j = r * d + h + 2 * i;
        const S c = cosv[r * half + i], s = sinv[r * half + i];
        out[j] = x[j] * c - x[j + 1] * s;
        out[j + 1] = x[j] * s + x[j + 1] * c;
      }
  auto xn = x.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {&x},
      [xn, cosv = std::move(cosv), sinv = std::move(sinv), rows, d, head_dim, half](const std::vector<S>& g) {
        auto* dx = detail::sink(xn);
        if (!dx) return;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t h = 0; h < d; h += head_dim)
            for (std::size_t i = 0; i < half; ++i) {
              const std::size_t j = r * d + h + 2 * i;
              const S c = cosv[r * half + i], s = sinv[r * half + i];
              (*dx)[j] += g[j] * c + g[j + 1] * s;
              (*dx)[j + 1] += -g[j] * s + g[j + 1] * c;
            }
      });
}

// Rows of `table` selected by `ids`.
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const int> ids) {
  detail::require_rank2(table.shape(), "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<S> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab)
      throw IndexError("token id " + std::to_string(ids[r]) + " outside vocabulary of size " + std::to_string(vocab));
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  auto tn = table.node();
  return detail::make_result<S>({ids.size(), d}, std::move(out), {&table}, [tn, idx = std::move(idx), d](const std::vector<S>& g) {
    if (auto* dt = detail::sink(tn))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*dt)[static_cast<std::size_t>(idx[r]) * d + c] += g[r * d + c];
  });
}

// Rows of x picked by index (repeats allowed).
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::span<const std::size_t> rows) {
  detail::require_rank2(x.shape(), "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<S> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw IndexError("gather_rows index " + std::to_string(rows[r]) + " >= " + std::to_string(n));
    std::copy_n(x.data().data() + rows[r] * d, d, out.data() + r * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  auto xn = x.node();
  return detail::make_result<S>({rows.size(), d}, std::move(out), {&x}, [xn, idx = std::move(idx), d](const std::vector<S>& g) {
    if (auto* dx = detail::sink(xn))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*dx)[idx[r] * d + c] += g[r * d + c];
  });
}

// Multi-head causal scaled dot-product attention. q, k, v are [batch*seq x d]
// with row b*seq + t; heads occupy contiguous column blocks of width d/heads.
template <typename S>
Tensor<S> causal_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, std::size_t batch,
                           std::size_t seq, std::size_t heads) {
  detail::require_rank2(q.shape(), "causal_attention");
  const std::size_t d = q.dim(1);
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw DimensionError("causal_attention q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  if (q.dim(0) != batch * seq || heads == 0 || d % heads != 0)
    throw DimensionError("causal_attention layout mismatch for " + shape_str(q.shape()));
  const std::size_t hd = d / heads;
  const S scale_factor = S(1) / std::sqrt(static_cast<S>(hd));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

  std::vector<S> out(batch * seq * d, S(0));
  std::vector<S> probs(batch * heads * seq * seq, S(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * d + h * hd;
      detail::ConstStridedMap<S> Q(q.data().data() + off, seq, hd, stride);
      detail::ConstStridedMap<S> K(k.data().data() + off, seq, hd, stride);
      detail::ConstStridedMap<S> V(v.data().data() + off, seq, hd, stride);
      detail::MatMap<S> P(probs.data() + (b * heads + h) * seq * seq, seq, seq);
      P.noalias() = (Q * K.transpose()) * scale_factor;
      for (std::size_t i = 0; i < seq; ++i) {
        S peak = P(i, 0);
        for (std::size_t j = 1; j <= i; ++j) peak = std::max(peak, P(i, j));
        S total = S(0);
        for (std::size_t j = 0; j <= i; ++j) total += P(i, j) = std::exp(P(i, j) - peak);
        for (std::size_t j = 0; j <= i; ++j) P(i, j) /= total;
        for (std::size_t j = i + 1; j < seq; ++j) P(i, j) = S(0);
      }
      detail::StridedMap<S>(out.data() + off, seq, hd, stride).noalias() = P * V;
    }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return detail::make_result<S>(
      q.shape(), std::move(out), {&q, &k, &v},
      [qn, kn, vn, probs = std::move(probs), batch, seq, heads, d, hd, scale_factor](const std::vector<S>& g) {
        auto* dq = detail::sink(qn);
        auto* dk = detail::sink(kn);
        auto* dv = detail::sink(vn);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        detail::RowMat<S> dP(seq, seq), dS(seq, seq);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq * d + h * hd;
            detail::ConstStridedMap<S> Q(qn->value.data() + off, seq, hd, stride);
            detail::ConstStridedMap<S> K(kn->value.data() + off, seq, hd, stride);
            detail::ConstStridedMap<S> V(vn->value.data() + off, seq, hd, stride);
            detail::ConstStridedMap<S> dO(g.data() + off, seq, hd, stride);
            detail::ConstMatMap<S> P(probs.data() + (b * heads + h) * seq * seq, seq, seq);
            if (dv) detail::StridedMap<S>(dv->data() + off, seq, hd, stride).noalias() += P.transpose() * dO;
            if (!dq && !dk) continue;
            dP.noalias() = dO * V.transpose();
            for (std::size_t i = 0; i < seq; ++i) {
              S dot = S(0);
              for (std::size_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
              for (std::size_t j = 0; j < seq; ++j) dS(i, j) = j <= i ? P(i, j) * (dP(i, j) - dot) * scale_factor : S(0);
            }
            if (dq) detail::StridedMap<S>(dq->data() + off, seq, hd, stride).noalias() += dS * K;
            if (dk) detail::StridedMap<S>(dk->data() + off, seq, hd, stride).noalias() += dS.transpose() * Q;
          }
      });
}

}  // namespace btx
