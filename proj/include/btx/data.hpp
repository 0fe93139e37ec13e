// SPDX-License-Identifier: Apache-2.0
//
// Domain corpora, byte tokenization and mixture sampling.
//
// Three synthetic domains stand in for math, code and encyclopedic text:
//   arith  "37 * 4 = 148" equation lines
//   code   single-line statements with nested (), [], {} delimiters
//   text   sentences from a small template grammar
// File corpora hold one document per blank-line-separated block.
#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "btx/errors.hpp"
#include "btx/model.hpp"
#include "btx/moe.hpp"

namespace btx {

inline std::vector<int> tokenize(std::string_view bytes) {
  std::vector<int> out(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<unsigned char>(bytes[i]);
  return out;
}

inline std::string detokenize(const std::vector<int>& ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 255) throw IndexError("token " + std::to_string(ids[i]) + " is not a byte");
    out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

enum class CorpusSource { Arith, Code, Text, File };

inline std::string to_string(CorpusSource s) {
  switch (s) {
    case CorpusSource::Arith: return "synthetic:arith";
    case CorpusSource::Code: return "synthetic:code";
    case CorpusSource::Text: return "synthetic:text";
    case CorpusSource::File: return "file";
  }
  return "?";
}

inline CorpusSource corpus_source_from_string(const std::string& s) {
  if (s == "synthetic:arith") return CorpusSource::Arith;
  if (s == "synthetic:code") return CorpusSource::Code;
  if (s == "synthetic:text") return CorpusSource::Text;
  if (s == "file") return CorpusSource::File;
  throw DataError("unknown corpus source '" + s + "'");
}

struct CorpusSpec {
  std::string name;
  CorpusSource source = CorpusSource::Text;
  std::string path;  // for File sources
  std::uint64_t rng_seed = 0;
  double holdout_fraction = 0.1;
  std::size_t n_bytes = 200000;  // synthetic size target
};

namespace detail {

inline std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

inline std::string arith_line(std::mt19937_64& rng) {
  static const char ops[] = {'+', '-', '*'};
  const long a = static_cast<long>(pick(rng, 100)), b = static_cast<long>(pick(rng, 100));
  const char op = ops[pick(rng, 3)];
  const long c = op == '+' ? a + b : op == '-' ? a - b : a * b;
  return std::to_string(a) + " " + op + " " + std::to_string(b) + " = " + std::to_string(c);
}

inline std::string code_name(std::mt19937_64& rng) {
  static const char* names[] = {"x", "y", "z", "acc", "idx", "buf", "tmp", "val", "res", "cnt"};
  return std::string(names[pick(rng, 10)]) + std::to_string(pick(rng, 4));
}

inline std::string code_expr(std::mt19937_64& rng, int depth) {
  static const char* ops[] = {" + ", " - ", " * ", " / "};
  auto atom = [&]() { return pick(rng, 3) == 0 ? std::to_string(pick(rng, 10)) : code_name(rng); };
  if (depth <= 0 || pick(rng, 3) == 0) return atom();
  std::string inner = code_expr(rng, depth - 1) + ops[pick(rng, 4)] + code_expr(rng, depth - 1);
  switch (pick(rng, 3)) {
    case 0: return "(" + inner + ")";
    case 1: return "[" + inner + "]";
    default: return "f(" + inner + ", {" + atom() + "})";
  }
}

inline std::string code_line(std::mt19937_64& rng) {
  if (pick(rng, 4) == 0)
    return "if (" + code_name(rng) + " < " + std::to_string(pick(rng, 10)) + ") { " + code_name(rng) + " = " +
           code_expr(rng, 2) + "; }";
  return code_name(rng) + " = " + code_expr(rng, 3) + ";";
}

inline std::string text_line(std::mt19937_64& rng) {
  static const char* dets[] = {"the", "a", "every", "one", "that"};
  static const char* adjs[] = {"old", "quiet", "bright", "small", "famous", "northern", "ancient", "green"};
  static const char* nouns[] = {"river", "city", "king", "garden", "mountain", "painter", "village", "island",
                                "library", "forest"};
  static const char* verbs[] = {"borders", "visits", "describes", "follows", "remembers", "crosses", "founded"};
  static const char* preps[] = {"near", "beyond", "under", "beside", "within"};
  auto np = [&]() {
    std::string s = dets[pick(rng, 5)];
    if (pick(rng, 2)) s += std::string(" ") + adjs[pick(rng, 8)];
    return s + " " + nouns[pick(rng, 10)];
  };
  std::string s = np() + " " + verbs[pick(rng, 7)] + " " + np();
  if (pick(rng, 2)) s += std::string(" ") + preps[pick(rng, 5)] + " " + np();
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s + ".";
}

inline std::vector<std::string> split_blank_lines(const std::string& text) {
  std::vector<std::string> docs;
  std::istringstream in(text);
  std::string line, current;
  auto flush = [&]() {
    if (!current.empty()) docs.push_back(std::move(current));
    current.clear();
  };
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      flush();
    } else {
      current += line;
      current += '\n';
    }
  }
  flush();
  return docs;
}

}  // namespace detail

// Documents of several lines each until n_bytes is reached. Deterministic in
// spec.rng_seed.
inline std::vector<std::string> generate_domain_corpus(const CorpusSpec& spec, std::size_t n_bytes) {
  if (n_bytes == 0) throw DataError("corpus size must be positive");
  if (spec.source == CorpusSource::File) throw DataError("file corpora are loaded, not generated");
  std::mt19937_64 rng(spec.rng_seed);
  std::vector<std::string> docs;
  std::size_t total = 0;
  while (total < n_bytes) {
    const std::size_t lines = 4 + detail::pick(rng, 6);
    std::string doc;
    for (std::size_t i = 0; i < lines; ++i) {
      switch (spec.source) {
        case CorpusSource::Arith: doc += detail::arith_line(rng); break;
        case CorpusSource::Code: doc += detail::code_line(rng); break;
        default: doc += detail::text_line(rng); break;
      }
      doc += '\n';
    }
    total += doc.size();
    docs.push_back(std::move(doc));
  }
  return docs;
}

inline std::vector<std::string> load_corpus_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read corpus file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  auto docs = detail::split_blank_lines(ss.str());
  if (docs.empty()) throw DataError("corpus file '" + path + "' has no documents");
  return docs;
}

// A corpus split at document granularity into training and holdout parts.
struct Corpus {
  CorpusSpec spec;
  std::vector<std::string> train_docs;
  std::vector<std::string> holdout_docs;
  std::vector<int> train_stream;    // documents joined by a blank line
  std::vector<int> holdout_stream;
};

namespace detail {
inline std::vector<int> join_docs(const std::vector<std::string>& docs) {
  std::vector<int> out;
  for (const auto& d : docs) {
    const auto t = tokenize(d);
    out.insert(out.end(), t.begin(), t.end());
    out.push_back('\n');
  }
  return out;
}
}  // namespace detail

inline Corpus build_corpus(const CorpusSpec& spec) {
  if (spec.holdout_fraction < 0 || spec.holdout_fraction >= 1)
    throw DataError("holdout fraction must be in [0, 1) for corpus '" + spec.name + "'");
  std::vector<std::string> docs =
      spec.source == CorpusSource::File ? load_corpus_file(spec.path) : generate_domain_corpus(spec, spec.n_bytes);
  // Seeded Fisher-Yates decides which documents are held out.
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(spec.rng_seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[detail::pick(rng, i)]);
  std::size_t n_hold = static_cast<std::size_t>(std::llround(spec.holdout_fraction * static_cast<double>(docs.size())));
  if (spec.holdout_fraction > 0 && n_hold == 0 && docs.size() > 1) n_hold = 1;
  std::vector<bool> held(docs.size(), false);
  for (std::size_t i = 0; i < n_hold; ++i) held[order[i]] = true;

  Corpus c;
  c.spec = spec;
  for (std::size_t i = 0; i < docs.size(); ++i) (held[i] ? c.holdout_docs : c.train_docs).push_back(docs[i]);
  c.train_stream = detail::join_docs(c.train_docs);
  c.holdout_stream = detail::join_docs(c.holdout_docs);
  return c;
}

struct MixtureComponent {
  std::string corpus;
  double probability = 0;
};

struct MixtureSpec {
  std::vector<MixtureComponent> components;

  // Accepts arbitrary positive weights and rescales them to sum to one.
  static MixtureSpec from_weights(const std::vector<std::pair<std::string, double>>& weights) {
    double total = 0;
    for (const auto& [name, w] : weights) {
      if (!(w > 0)) throw DataError("mixture weight for '" + name + "' must be positive");
      total += w;
    }
    MixtureSpec m;
    for (const auto& [name, w] : weights) m.components.push_back({name, w / total});
    m.validate();
    return m;
  }

  static MixtureSpec single(const std::string& corpus) { return from_weights({{corpus, 1.0}}); }

  void validate() const {
    if (components.empty()) throw DataError("empty mixture");
    double total = 0;
    for (const auto& c : components) {
      if (!(c.probability > 0)) throw DataError("mixture probability for '" + c.corpus + "' must be positive");
      total += c.probability;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DataError("mixture probabilities sum to " + std::to_string(total));
  }
};

struct TokenBatch {
  Tokens tokens;
  std::vector<std::string> domain;  // per row
};

inline const Corpus& find_corpus(const std::vector<Corpus>& corpora, const std::string& name) {
  for (const auto& c : corpora)
    if (c.spec.name == name) return c;
  throw DataError("mixture references unknown corpus '" + name + "'");
}

// Each row picks a corpus from the mixture, then a uniformly random window of
// `seq` tokens from that corpus's training stream.
inline TokenBatch sample_batch(const MixtureSpec& mixture, const std::vector<Corpus>& corpora, std::size_t batch,
                               std::size_t seq, std::mt19937_64& rng) {
  mixture.validate();
  std::vector<const Corpus*> chosen;
  for (const auto& comp : mixture.components) {
    const Corpus& c = find_corpus(corpora, comp.corpus);
    if (c.train_stream.size() < seq) throw DataError("corpus '" + c.spec.name + "' is shorter than one window");
    chosen.push_back(&c);
  }
  TokenBatch out;
  out.tokens.batch = batch;
  out.tokens.seq = seq;
  out.tokens.ids.reserve(batch * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const double u = open_uniform(rng);
    std::size_t which = chosen.size() - 1;
    double cum = 0;
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      cum += mixture.components[i].probability;
      if (u < cum) {
        which = i;
        break;
      }
    }
    const auto& stream = chosen[which]->train_stream;
    const std::size_t offset = detail::pick(rng, stream.size() - seq + 1);
    out.tokens.ids.insert(out.tokens.ids.end(), stream.begin() + offset, stream.begin() + offset + seq);
    out.domain.push_back(chosen[which]->spec.name);
  }
  return out;
}

// Consecutive non-overlapping windows over the holdout stream, optionally
// capped at max_windows.
inline std::vector<std::vector<int>> heldout_stream(const Corpus& corpus, std::size_t seq,
                                                    std::size_t max_windows = SIZE_MAX) {
  if (corpus.holdout_stream.size() < seq) throw DataError("holdout of '" + corpus.spec.name + "' is shorter than one window");
  std::vector<std::vector<int>> out;
  for (std::size_t off = 0; off + seq <= corpus.holdout_stream.size() && out.size() < max_windows; off += seq)
    out.emplace_back(corpus.holdout_stream.begin() + off, corpus.holdout_stream.begin() + off + seq);
  return out;
}

}  // namespace btx
