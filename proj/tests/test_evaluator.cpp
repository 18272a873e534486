#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "laffi/evaluator.hpp"

using namespace laffi;

namespace {

// Brute-force oracle: sort both lists and count matches with two pointers.
PRF sorted_count_prf(std::vector<std::string> p, std::vector<std::string> g) {
  if (p.empty() && g.empty()) return {1, 1, 1};
  if (p.empty() || g.empty()) return {0, 0, 0};
  std::sort(p.begin(), p.end());
  std::sort(g.begin(), g.end());
  std::size_t i = 0, j = 0, k = 0;
  while (i < p.size() && j < g.size()) {
    if (p[i] == g[j]) ++k, ++i, ++j;
    else if (p[i] < g[j]) ++i;
    else ++j;
  }
  if (k == 0) return {0, 0, 0};
  const double pr = double(k) / p.size(), rc = double(k) / g.size();
  return {pr, rc, 2 * pr * rc / (pr + rc)};
}

std::vector<std::string> random_tokens(std::mt19937_64& rng) {
  static const char* alphabet[] = {"x", "y", "z", "u", "v", "w"};
  std::vector<std::string> out(rng() % 13);
  for (auto& t : out) t = alphabet[rng() % 6];
  return out;
}

QAExample answerable(std::string id, std::vector<std::string> golds) {
  return {std::move(id), "passage", "question", std::move(golds), true};
}

QAExample unanswerable(std::string id) { return {std::move(id), "passage", "question", {}, false}; }

}  // namespace

TEST(Normalize, Rules) {
  EXPECT_EQ(normalize("The Cat!"), (std::vector<std::string>{"cat"}));
  EXPECT_TRUE(normalize("").empty());
  EXPECT_TRUE(normalize("a an the").empty());
  EXPECT_EQ(normalize("  Theory of\tan ANT, a-b "), (std::vector<std::string>{"theory", "of", "ant", "ab"}));
}

TEST(Prf, HandCases) {
  const auto same = prf({"x", "y"}, {"x", "y"});
  EXPECT_EQ(same.precision, 1.0);
  EXPECT_EQ(same.f1, 1.0);
  const auto disjoint = prf({"x"}, {"y"});
  EXPECT_EQ(disjoint.f1, 0.0);
  EXPECT_EQ(disjoint.precision, 0.0);
  const auto b = prf({"beyonce", "giselle"}, {"beyonce"});
  EXPECT_DOUBLE_EQ(b.precision, 0.5);
  EXPECT_DOUBLE_EQ(b.recall, 1.0);
  EXPECT_DOUBLE_EQ(b.f1, 2.0 / 3.0);
  EXPECT_EQ(prf({}, {}).f1, 1.0);
  EXPECT_EQ(prf({"x"}, {}).f1, 0.0);
  EXPECT_EQ(prf({}, {"x"}).recall, 0.0);
}

TEST(Prf, AgreesWithSortedCountOracle) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto p = random_tokens(rng), g = random_tokens(rng);
    const auto a = prf(p, g), o = sorted_count_prf(p, g);
    ASSERT_EQ(a.precision, o.precision);
    ASSERT_EQ(a.recall, o.recall);
    ASSERT_NEAR(a.f1, o.f1, 1e-12);
    // Symmetry.
    ASSERT_EQ(prf(g, p).recall, a.precision);
  }
}

TEST(Unanswerable, Classification) {
  EXPECT_TRUE(classify_unanswerable("The answer cannot be found."));
  EXPECT_FALSE(classify_unanswerable("Beyonce"));
  EXPECT_TRUE(classify_unanswerable("I think the answer cannot be found here"));
  EXPECT_FALSE(classify_unanswerable("the answer can be found"));
  EXPECT_FALSE(classify_unanswerable("cannot be found answer"));
}

TEST(ScoreExample, Rules) {
  auto s = score_example("the answer cannot be found", unanswerable("u"));
  EXPECT_EQ(s.exact_match, 1);
  EXPECT_EQ(s.f1, 1.0);
  s = score_example("Paris", unanswerable("u"));
  EXPECT_EQ(s.exact_match, 0);
  EXPECT_EQ(s.recall, 0.0);
  s = score_example("the answer cannot be found", answerable("a", {"Beyonce"}));
  EXPECT_EQ(s.exact_match, 0);
  EXPECT_EQ(s.f1, 0.0);
  EXPECT_TRUE(s.predicted_unanswerable);
  s = score_example("2010", answerable("a", {"in 2010", "2010"}));
  EXPECT_EQ(s.exact_match, 1);
  EXPECT_EQ(s.f1, 1.0);
}

TEST(ScoreExample, ExactMatchImpliesFullF1) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<std::string> golds;
    for (std::size_t k = 0; k < 1 + rng() % 3; ++k) {
      auto t = random_tokens(rng);
      if (t.empty()) t.push_back("x");
      std::string g;
      for (auto& w : t) g += w + " ";
      golds.push_back(g);
    }
    auto toks = random_tokens(rng);
    std::string pred;
    for (auto& w : toks) pred += w + " ";
    const auto s = score_example(pred, answerable("r", golds));
    if (s.exact_match) ASSERT_EQ(s.f1, 1.0);
    ASSERT_GE(s.f1, 0.0);
    ASSERT_LE(s.f1, 1.0);
  }
}

TEST(Aggregate, HandScoredFixture) {
  const std::vector<QAExample> corpus{answerable("e1", {"Beyonce"}), unanswerable("e2"),
                                      answerable("e3", {"in 2010", "2010"}), answerable("e4", {"Paris"})};
  const std::vector<Prediction> preds{
      {"e1", "Beyonce Giselle"}, {"e2", "The answer cannot be found."}, {"e3", "2010"}, {"e4", "London"}};
  const auto r = evaluate(preds, corpus);
  EXPECT_EQ(r.n, 4u);
  // e1: p 1/2, r 1, f1 2/3; e2, e3 perfect; e4 zero.
  EXPECT_NEAR(r.accuracy, 50.0, 1e-9);
  EXPECT_NEAR(r.f1, 100.0 * (2.0 / 3.0 + 2.0) / 4.0, 1e-9);
  EXPECT_NEAR(r.precision, 62.5, 1e-9);
  EXPECT_NEAR(r.recall, 75.0, 1e-9);

  auto shuffled_preds = preds;
  std::reverse(shuffled_preds.begin(), shuffled_preds.end());
  const auto r2 = evaluate(shuffled_preds, corpus);
  EXPECT_NEAR(r2.f1, r.f1, 1e-12);
  EXPECT_EQ(r2.scores.front().example_id, "e4");
}

TEST(Aggregate, SimpleCasesAndErrors) {
  EXPECT_THROW(aggregate({}), UsageError);
  const std::vector<QAExample> corpus{answerable("a", {"x"}), answerable("b", {"y"})};
  EXPECT_EQ(evaluate({{"a", "x"}, {"b", "y"}}, corpus).accuracy, 100.0);
  EXPECT_EQ(evaluate({{"a", "x"}, {"b", "q"}}, corpus).accuracy, 50.0);
  EXPECT_THROW(evaluate({{"zzz", "x"}}, corpus), DataError);
}

TEST(Predictions, JsonlFieldsAndOutputs) {
  const auto p = parse_predictions("{\"example_id\":\"a\",\"prediction\":\"x\"}\n"
                                   "{\"example_id\":\"b\",\"predicted_answer\":\"y, z\",\"schema_version\":1}\n");
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[1].text, "y, z");
  EXPECT_THROW(parse_predictions("{\"example_id\":\"a\"}"), ParseError);
  const std::vector<QAExample> corpus{answerable("a", {"x"}), answerable("b", {"y, \"z\""})};
  const auto r = evaluate(p, corpus);
  const auto j = report_json(r);
  EXPECT_EQ(j["n"], 2);
  EXPECT_EQ(j["scores"].size(), 2u);
  const auto csv = report_csv(r);
  EXPECT_TRUE(csv.starts_with("example_id,exact_match,f1,precision,recall,predicted_unanswerable\n"));
  EXPECT_NE(csv.find("a,1,1.000000,1.000000,1.000000,false\n"), std::string::npos);
}
