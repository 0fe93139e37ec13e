// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>

#include "btx/data.hpp"

namespace btx {
namespace {

CorpusSpec spec(const std::string& name, CorpusSource src, std::uint64_t seed = 1, std::size_t bytes = 20000) {
  CorpusSpec s;
  s.name = name;
  s.source = src;
  s.rng_seed = seed;
  s.n_bytes = bytes;
  return s;
}

std::vector<std::string> lines_of(const std::vector<std::string>& docs) {
  std::vector<std::string> out;
  for (const auto& d : docs) {
    std::istringstream in(d);
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
  }
  return out;
}

TEST(Tokenize, Bytes) {
  EXPECT_EQ(tokenize("ab"), (std::vector<int>{97, 98}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(detokenize({}), "");
}

TEST(Tokenize, RoundTripRandomBytes) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s(rng() % 300, '\0');
    for (char& c : s) c = static_cast<char>(rng() & 0xff);
    EXPECT_EQ(detokenize(tokenize(s)), s);
  }
  EXPECT_THROW(detokenize({256}), IndexError);
}

TEST(Generators, ArithLinesEvaluateCorrectly) {
  const std::regex eq(R"((\d+) ([-+*]) (\d+) = (-?\d+))");
  const auto lines = lines_of(generate_domain_corpus(spec("arith", CorpusSource::Arith), 20000));
  ASSERT_GT(lines.size(), 100u);
  for (const auto& line : lines) {
    std::smatch m;
    ASSERT_TRUE(std::regex_match(line, m, eq)) << line;
    const long a = std::stol(m[1]), b = std::stol(m[3]), c = std::stol(m[4]);
    const char op = m[2].str()[0];
    EXPECT_EQ(op == '+' ? a + b : op == '-' ? a - b : a * b, c) << line;
  }
}

TEST(Generators, CodeLinesHaveBalancedDelimiters) {
  const auto lines = lines_of(generate_domain_corpus(spec("code", CorpusSource::Code), 20000));
  ASSERT_GT(lines.size(), 100u);
  int with_nesting = 0;
  for (const auto& line : lines) {
    std::vector<char> stack;
    std::size_t deepest = 0;
    for (char c : line) {
      if (c == '(' || c == '[' || c == '{') stack.push_back(c);
      if (c == ')' || c == ']' || c == '}') {
        ASSERT_FALSE(stack.empty()) << line;
        const char open = stack.back();
        stack.pop_back();
        EXPECT_TRUE((open == '(' && c == ')') || (open == '[' && c == ']') || (open == '{' && c == '}')) << line;
      }
      deepest = std::max(deepest, stack.size());
    }
    EXPECT_TRUE(stack.empty()) << line;
    EXPECT_NE(line.find(" = "), std::string::npos) << line;
    with_nesting += deepest >= 2;
  }
  EXPECT_GT(with_nesting, 10);
}

std::map<std::pair<int, int>, double> bigram_histogram(const std::vector<std::string>& docs) {
  std::map<std::pair<int, int>, double> h;
  double total = 0;
  for (const auto& d : docs)
    for (std::size_t i = 0; i + 1 < d.size(); ++i) {
      h[{static_cast<unsigned char>(d[i]), static_cast<unsigned char>(d[i + 1])}] += 1;
      total += 1;
    }
  for (auto& [k, v] : h) v /= total;
  return h;
}

TEST(Generators, DomainsHaveDistinctBigramStatistics) {
  const auto a = bigram_histogram(generate_domain_corpus(spec("a", CorpusSource::Arith), 20000));
  const auto c = bigram_histogram(generate_domain_corpus(spec("c", CorpusSource::Code), 20000));
  const auto t = bigram_histogram(generate_domain_corpus(spec("t", CorpusSource::Text), 20000));
  auto tv = [](const auto& p, const auto& q) {
    std::set<std::pair<int, int>> keys;
    for (const auto& [k, v] : p) keys.insert(k);
    for (const auto& [k, v] : q) keys.insert(k);
    double d = 0;
    for (const auto& k : keys) {
      const double pv = p.count(k) ? p.at(k) : 0, qv = q.count(k) ? q.at(k) : 0;
      d += std::abs(pv - qv);
    }
    return d / 2;
  };
  EXPECT_GT(tv(a, c), 0.2);
  EXPECT_GT(tv(a, t), 0.2);
  EXPECT_GT(tv(c, t), 0.2);
}

TEST(Generators, DeterministicPerSeed) {
  const auto s = spec("t", CorpusSource::Text, 9);
  EXPECT_EQ(generate_domain_corpus(s, 5000), generate_domain_corpus(s, 5000));
  EXPECT_NE(generate_domain_corpus(s, 5000), generate_domain_corpus(spec("t", CorpusSource::Text, 10), 5000));
  EXPECT_THROW(generate_domain_corpus(s, 0), DataError);
}

TEST(Corpus, HoldoutDisjointDeterministicAndSized) {
  const Corpus c = build_corpus(spec("code", CorpusSource::Code, 4, 30000));
  const std::set<std::string> train(c.train_docs.begin(), c.train_docs.end());
  for (const auto& d : c.holdout_docs) EXPECT_FALSE(train.count(d)) << d;
  const double total = static_cast<double>(c.train_docs.size() + c.holdout_docs.size());
  EXPECT_NEAR(static_cast<double>(c.holdout_docs.size()), 0.1 * total, 1.0);
  const Corpus again = build_corpus(c.spec);
  EXPECT_EQ(heldout_stream(c, 32), heldout_stream(again, 32));
  EXPECT_EQ(c.train_stream, again.train_stream);
}

TEST(Corpus, FileIngestionSplitsOnBlankLines) {
  const auto path = std::filesystem::temp_directory_path() / "btx_corpus_test.txt";
  {
    std::ofstream out(path);
    out << "first doc line one\nline two\n\n\nsecond doc\n   \nthird doc\n";
  }
  const auto docs = load_corpus_file(path.string());
  ASSERT_EQ(docs.size(), 3u);
  EXPECT_EQ(docs[0], "first doc line one\nline two\n");
  EXPECT_EQ(docs[2], "third doc\n");
  std::filesystem::remove(path);
  EXPECT_THROW(load_corpus_file("/nonexistent/btx/corpus.txt"), DataError);
}

TEST(Mixture, SamplingFollowsProbabilities) {
  std::vector<Corpus> corpora;
  const std::vector<std::string> names{"math", "code", "wiki", "generalist"};
  for (std::size_t i = 0; i < names.size(); ++i) corpora.push_back(build_corpus(spec(names[i], CorpusSource::Text, i, 3000)));
  const auto mix = MixtureSpec::from_weights({{"math", 0.3016}, {"code", 0.4031}, {"wiki", 0.1030}, {"generalist", 0.1923}});
  std::mt19937_64 rng(12);
  const auto batch = sample_batch(mix, corpora, 100000, 2, rng);
  std::map<std::string, double> freq;
  for (const auto& d : batch.domain) freq[d] += 1.0 / 100000;
  for (const auto& comp : mix.components) EXPECT_NEAR(freq[comp.corpus], comp.probability, 0.01) << comp.corpus;
}

TEST(Mixture, SingleCorpusTagsEveryRow) {
  std::vector<Corpus> corpora{build_corpus(spec("arith", CorpusSource::Arith, 1, 3000))};
  std::mt19937_64 rng(1);
  const auto batch = sample_batch(MixtureSpec::single("arith"), corpora, 16, 32, rng);
  for (const auto& d : batch.domain) EXPECT_EQ(d, "arith");
  EXPECT_EQ(batch.tokens.ids.size(), 16u * 32u);
}

TEST(Mixture, RenormalizesRawWeights) {
  const auto mix = MixtureSpec::from_weights({{"AlgebraicStack", 13.57},
                                              {"OpenWebMath", 54.27},
                                              {"Arxiv", 27.14},
                                              {"Github", 2.99},
                                              {"Commoncrawl", 5.01}});
  double total = 0;
  for (const auto& c : mix.components) total += c.probability;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(mix.components[1].probability, 54.27 / 102.98, 1e-12);
  EXPECT_THROW(MixtureSpec::from_weights({{"a", 0.0}}), DataError);
  MixtureSpec bad{{{"a", 0.5}, {"b", 0.6}}};
  EXPECT_THROW(bad.validate(), DataError);
}

TEST(Mixture, MissingOrShortCorpusIsDataError) {
  std::vector<Corpus> corpora{build_corpus(spec("arith", CorpusSource::Arith, 1, 200))};
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_batch(MixtureSpec::single("code"), corpora, 1, 8, rng), DataError);
  EXPECT_THROW(sample_batch(MixtureSpec::single("arith"), corpora, 1, 100000, rng), DataError);
}

}  // namespace
}  // namespace btx
