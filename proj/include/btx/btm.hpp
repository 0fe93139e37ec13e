// SPDX-License-Identifier: Apache-2.0
//
// Ensemble baseline: experts stay separate, a tf-idf match between
// the context and each expert's training data picks which ones to ensemble.
#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "btx/checkpoint.hpp"
#include "btx/data.hpp"
#include "btx/errors.hpp"
#include "btx/evalkit.hpp"
#include "btx/model.hpp"

namespace btx {

struct TfIdfStats {
  std::size_t ngram = 2;
  std::vector<std::string> terms;  // vocabulary, sorted
  std::vector<std::uint64_t> df;
  std::vector<double> idf;
  std::uint64_t n_docs = 0;
  std::unordered_map<std::string, std::size_t> index;

  std::size_t size() const { return terms.size(); }
  void rebuild_index() {
    index.clear();
    for (std::size_t i = 0; i < terms.size(); ++i) index.emplace(terms[i], i);
  }
};

// Smoothed idf: ln((1 + D) / (1 + df)) + 1.
inline double smoothed_idf(std::uint64_t n_docs, std::uint64_t df) {
  return std::log((1.0 + static_cast<double>(n_docs)) / (1.0 + static_cast<double>(df))) + 1.0;
}

inline TfIdfStats fit_tfidf(const std::vector<std::string>& docs, std::size_t ngram = 2) {
  if (docs.empty()) throw DataError("tf-idf needs at least one document");
  if (ngram < 1) throw ContractError("n-gram length must be >= 1");
  std::map<std::string, std::uint64_t> df;
  for (const auto& d : docs) {
    std::set<std::string_view> seen;
    for (std::size_t i = 0; i + ngram <= d.size(); ++i) seen.insert(std::string_view(d).substr(i, ngram));
    for (auto t : seen) ++df[std::string(t)];
  }
  TfIdfStats s;
  s.ngram = ngram;
  s.n_docs = docs.size();
  for (const auto& [term, count] : df) {
    s.terms.push_back(term);
    s.df.push_back(count);
    s.idf.push_back(smoothed_idf(s.n_docs, count));
  }
  s.rebuild_index();
  return s;
}

inline TfIdfStats fit_tfidf(const std::vector<Corpus>& corpora, std::size_t ngram = 2) {
  std::vector<std::string> docs;
  for (const auto& c : corpora) docs.insert(docs.end(), c.train_docs.begin(), c.train_docs.end());
  return fit_tfidf(docs, ngram);
}

// Dense over the fitted vocabulary; raw counts times idf, unit-normalized.
// Out-of-vocabulary n-grams are dropped; no match gives the zero vector.
inline std::vector<double> embed(std::string_view text, const TfIdfStats& s) {
  std::vector<double> v(s.size(), 0.0);
  for (std::size_t i = 0; i + s.ngram <= text.size(); ++i) {
    auto it = s.index.find(std::string(text.substr(i, s.ngram)));
    if (it != s.index.end()) v[it->second] += 1.0;
  }
  double sq = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] *= s.idf[i];
    sq += v[i] * v[i];
  }
  if (sq > 0) {
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : v) x *= inv;
  }
  return v;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return (na > 0 && nb > 0) ? dot / std::sqrt(na * nb) : 0.0;
}

struct ExpertCentroid {
  std::string name;
  std::vector<double> vec;  // unit norm
};

inline ExpertCentroid fit_centroid(const std::string& name, const std::vector<std::string>& docs, const TfIdfStats& s) {
  if (docs.empty()) throw DataError("expert '" + name + "' has no training documents for its centroid");
  std::vector<double> mean(s.size(), 0.0);
  for (const auto& d : docs) {
    const auto v = embed(d, s);
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i];
  }
  double sq = 0;
  for (double x : mean) sq += x * x;
  if (!(sq > 0)) throw DataError("expert '" + name + "' centroid is the zero vector");
  const double inv = 1.0 / std::sqrt(sq);
  for (double& x : mean) x *= inv;
  return {name, std::move(mean)};
}

struct Selection {
  std::vector<std::size_t> experts;  // indices into the centroid list, best first
  std::vector<double> similarity;
  bool fallback = false;  // context had no known n-gram
};

inline Selection select_experts(const std::vector<double>& context, const std::vector<ExpertCentroid>& centroids,
                                std::size_t k) {
  if (k < 1 || k > centroids.size())
    throw ContractError("k=" + std::to_string(k) + " must lie in [1, " + std::to_string(centroids.size()) + "]");
  Selection sel;
  std::vector<double> sims;
  for (const auto& c : centroids) sims.push_back(cosine(context, c.vec));
  const bool zero = std::all_of(context.begin(), context.end(), [](double x) { return x == 0.0; });
  std::vector<std::size_t> order(centroids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (!zero) std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  sel.fallback = zero;
  for (std::size_t i = 0; i < k; ++i) {
    sel.experts.push_back(order[i]);
    sel.similarity.push_back(sims[order[i]]);
  }
  return sel;
}

inline Selection select_experts(std::string_view context, const TfIdfStats& s,
                                const std::vector<ExpertCentroid>& centroids, std::size_t k) {
  return select_experts(embed(context, s), centroids, k);
}

// Mixing weights over the selected experts: uniform by default, or
// proportional to (positive) similarity when requested.
inline std::vector<double> ensemble_weights(const Selection& sel, bool similarity_weighted) {
  std::vector<double> w(sel.experts.size(), 1.0 / static_cast<double>(sel.experts.size()));
  if (!similarity_weighted) return w;
  double total = 0;
  for (double s : sel.similarity) total += std::max(s, 0.0);
  if (total <= 0) return w;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::max(sel.similarity[i], 0.0) / total;
  return w;
}

namespace detail {
template <typename S>
std::vector<double> softmax_row(const Tensor<S>& logits, std::size_t row) {
  const std::size_t V = logits.dim(1);
  const S* p = logits.data().data() + row * V;
  double mx = -INFINITY;
  for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(p[v]));
  std::vector<double> out(V);
  double z = 0;
  for (std::size_t v = 0; v < V; ++v) z += (out[v] = std::exp(static_cast<double>(p[v]) - mx));
  for (double& x : out) x /= z;
  return out;
}
}  // namespace detail

// Distribution over the byte after `context`: weighted mean of the selected
// experts' final-position softmaxes, reduced in selection order.
template <typename S>
std::vector<double> btm_next_token(const std::vector<int>& context, const std::vector<const ModelParams<S>*>& experts,
                                   const Selection& sel, bool similarity_weighted = false) {
  if (context.empty()) throw ContractError("next-token prediction needs a non-empty context");
  const auto w = ensemble_weights(sel, similarity_weighted);
  std::vector<double> out;
  for (std::size_t i = 0; i < sel.experts.size(); ++i) {
    const ModelParams<S>& m = *experts.at(sel.experts[i]);
    const std::size_t keep = std::min<std::size_t>(context.size(), m.config.max_seq_len);
    const Tokens t = Tokens::single(std::vector<int>(context.end() - keep, context.end()));
    const auto p = detail::softmax_row(forward(m, t), keep - 1);
    if (out.empty()) out.assign(p.size(), 0.0);
    if (p.size() != out.size()) throw DimensionError("experts disagree on vocabulary size");
    for (std::size_t v = 0; v < p.size(); ++v) out[v] += w[i] * p[v];
  }
  return out;
}

// ---- centroid store ----

inline constexpr std::uint32_t kCentroidVersion = 1;

struct CentroidStore {
  TfIdfStats stats;
  std::vector<ExpertCentroid> centroids;
};

// "BTXC" u32 version, u32 ngram, u64 n_docs, u32 vocab, per term (str term,
// u64 df, f32 idf), u32 experts, per expert (str name, f32[vocab]), u32 crc32.
inline std::string serialize_centroids(const CentroidStore& store) {
  detail::ByteWriter w;
  w.raw("BTXC", 4);
  w.u32(kCentroidVersion);
  w.u32(static_cast<std::uint32_t>(store.stats.ngram));
  w.u64(store.stats.n_docs);
  w.u32(static_cast<std::uint32_t>(store.stats.size()));
  for (std::size_t i = 0; i < store.stats.size(); ++i) {
    w.str(store.stats.terms[i]);
    w.u64(store.stats.df[i]);
    w.f32(static_cast<float>(store.stats.idf[i]));
  }
  w.u32(static_cast<std::uint32_t>(store.centroids.size()));
  for (const auto& c : store.centroids) {
    w.str(c.name);
    for (double x : c.vec) w.f32(static_cast<float>(x));
  }
  std::string bytes = w.bytes();
  const std::uint32_t crc = detail::crc32_of(bytes.data(), bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(crc >> (8 * i))));
  return bytes;
}

inline CentroidStore deserialize_centroids(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "BTXC") != 0) throw CorruptionError("not a centroid store");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[body + i])) << (8 * i);
  if (stored != detail::crc32_of(bytes.data(), body)) throw CorruptionError("centroid store checksum mismatch");
  detail::ByteReader r(bytes, body);
  for (int i = 0; i < 4; ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != kCentroidVersion) throw VersionError("centroid store version " + std::to_string(version) + " is not supported");
  CentroidStore s;
  s.stats.ngram = r.u32();
  s.stats.n_docs = r.u64();
  const std::uint32_t vocab = r.u32();
  for (std::uint32_t i = 0; i < vocab; ++i) {
    s.stats.terms.push_back(r.str());
    s.stats.df.push_back(r.u64());
    s.stats.idf.push_back(r.f32());
  }
  s.stats.rebuild_index();
  const std::uint32_t n = r.u32();
  for (std::uint32_t e = 0; e < n; ++e) {
    ExpertCentroid c;
    c.name = r.str();
    c.vec.resize(vocab);
    for (double& x : c.vec) x = r.f32();
    s.centroids.push_back(std::move(c));
  }
  if (!r.done()) throw CorruptionError("trailing bytes in centroid store");
  return s;
}

inline void save_centroids(const std::filesystem::path& path, const CentroidStore& s) {
  const std::string bytes = serialize_centroids(s);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("cannot write centroid store '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline CentroidStore load_centroids(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read centroid store '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_centroids(ss.str());
}

// Experts are (name, training documents); a generalist can be passed with
// the union of all documents.
inline CentroidStore fit_btm(const std::vector<std::pair<std::string, std::vector<std::string>>>& experts,
                             std::size_t ngram = 2) {
  std::vector<std::string> all;
  for (const auto& [_, docs] : experts) all.insert(all.end(), docs.begin(), docs.end());
  CentroidStore store;
  store.stats = fit_tfidf(all, ngram);
  for (const auto& [name, docs] : experts) store.centroids.push_back(fit_centroid(name, docs, store.stats));
  return store;
}

struct BtmEvalOptions {
  EvalOptions eval;
  std::size_t k = 1;
  bool similarity_weighted = false;
};

// Held-out NLL of the ensemble. Window w is scored by the experts selected
// from the text of window w-1 (the preceding context); window 0 has no
// context and uses the first k experts.
template <typename S>
EvalReport btm_eval(const CentroidStore& store, const std::vector<const ModelParams<S>*>& experts,
                    const std::vector<Corpus>& corpora, const std::string& name, const BtmEvalOptions& opts) {
  if (experts.size() != store.centroids.size())
    throw ContractError("expected " + std::to_string(store.centroids.size()) + " expert models, got " +
                        std::to_string(experts.size()));
  EvalReport report;
  report.model = name;
  report.config_digest = config_digest(experts.front()->config);
  for (const auto& c : corpora) {
    const auto windows = heldout_stream(c, opts.eval.seq_len, opts.eval.max_windows);
    double total = 0;
    std::uint64_t tokens = 0;
    for (std::size_t w = 0; w < windows.size(); ++w) {
      const std::vector<double> ctx =
          w == 0 ? std::vector<double>(store.stats.size(), 0.0) : embed(detokenize(windows[w - 1]), store.stats);
      const Selection sel = select_experts(ctx, store.centroids, opts.k);
      const auto mix = ensemble_weights(sel, opts.similarity_weighted);
      const Tokens t = Tokens::single(windows[w]);
      std::vector<double> target(t.seq - 1, 0.0);  // ensemble probability of each next byte
      for (std::size_t i = 0; i < sel.experts.size(); ++i) {
        const Tensor<S> logits = forward(*experts[sel.experts[i]], t);
        for (std::size_t p = 0; p + 1 < t.seq; ++p) target[p] += mix[i] * detail::softmax_row(logits, p)[t.at(0, p + 1)];
      }
      for (double q : target) total -= std::log(q);
      tokens += t.seq - 1;
    }
    report.domains.push_back(make_domain_eval(c.spec.name, total, tokens));
  }
  return report;
}

}  // namespace btx
