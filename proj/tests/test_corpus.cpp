#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "laffi/corpus.hpp"

using namespace laffi;

namespace {

const std::filesystem::path kData = LAFFI_BUNDLED_DATA_DIR;
const std::filesystem::path kFixtures = LAFFI_TEST_FIXTURE_DIR;

std::vector<FeedbackRecord> feedback_pool(std::size_t n, FeedbackSource src) {
  std::vector<FeedbackRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    FeedbackRecord r;
    r.example_id = (src == FeedbackSource::AI ? "ai-" : "hu-") + std::to_string(i);
    r.predicted_answer = "p";
    r.feedback_text = "f";
    r.source = src;
    if (src == FeedbackSource::HUMAN) r.annotator_id = "annotator-1", r.accepted_ai = (i % 2 == 0);
    out.push_back(r);
  }
  return out;
}

// Reference oracle: a complete Fisher-Yates pass written independently with
// the same draw rule, whose prefix must equal the partial sample.
std::vector<std::size_t> reference_shuffle(std::size_t size, std::uint64_t seed) {
  std::vector<std::size_t> v(size);
  std::iota(v.begin(), v.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i + 1 < size; ++i) {
    const std::uint64_t bound = size - i;
    std::uint64_t x;
    // Reject draws from the incomplete top bucket.
    const std::uint64_t buckets = (UINT64_MAX / bound) * bound;
    do x = rng();
    while (x >= buckets && buckets != 0);
    std::swap(v[i], v[i + x % bound]);
  }
  return v;
}

}  // namespace

TEST(Squad, BundledFixture) {
  const auto ds = load_squad(kData / "fixtures" / "squad_fixture.json");
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds[0].id, "fx-1");
  EXPECT_TRUE(ds[0].is_answerable);
  EXPECT_EQ(ds[0].gold_answers, (std::vector<std::string>{"County Wexford", "Wexford"}));
  EXPECT_TRUE(ds[1].is_answerable);
  EXPECT_FALSE(ds[2].is_answerable);
  EXPECT_TRUE(ds[2].gold_answers.empty());
  for (const auto& e : ds)
    for (const auto& g : e.gold_answers) EXPECT_NE(e.passage.find(g), std::string::npos);
}

TEST(Squad, Errors) {
  EXPECT_THROW(load_squad(kFixtures / "squad_bad_answer.json"), ValidationError);
  try {
    load_squad(kFixtures / "squad_missing_field.json");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("$.data[0].paragraphs[0].qas[2].question"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_squad("{\"data\": [}"), ParseError);
  EXPECT_THROW(parse_squad("{\"version\": 1}"), ParseError);
  EXPECT_THROW(load_squad("/nonexistent.json"), IoError);
}

TEST(Jsonl, RoundTripAllRecordTypes) {
  const auto ex = make_synthetic_corpus(20, 3);
  EXPECT_EQ(parse_jsonl<QAExample>(to_jsonl(ex)), ex);
  std::vector<PredictedAnswerRecord> preds{{"a", "m", "ff", ""}, {"b", "m", "ee", "x,\"y\"\n"}};
  EXPECT_EQ(parse_jsonl<PredictedAnswerRecord>(to_jsonl(preds)), preds);
  auto fb = feedback_pool(3, FeedbackSource::HUMAN);
  auto ai = feedback_pool(2, FeedbackSource::AI);
  ai[1].fallback = true;
  fb.insert(fb.end(), ai.begin(), ai.end());
  EXPECT_EQ(parse_jsonl<FeedbackRecord>(to_jsonl(fb)), fb);

  const auto path = std::filesystem::temp_directory_path() / "laffi_corpus_test" / "fb.jsonl";
  write_jsonl(path, fb);
  EXPECT_EQ(read_jsonl<FeedbackRecord>(path), fb);
  std::filesystem::remove_all(path.parent_path());
}

TEST(Jsonl, SchemaVersionAndInvariants) {
  EXPECT_NE(to_jsonl(make_synthetic_corpus(1, 1)).find("\"schema_version\":1"), std::string::npos);
  EXPECT_THROW(parse_jsonl<QAExample>(R"({"id":"x","passage":"p","question":"q","gold_answers":[],"is_answerable":false})"),
               ParseError);
  EXPECT_THROW(
      parse_jsonl<QAExample>(
          R"({"schema_version":1,"id":"x","passage":"p","question":"q","gold_answers":[],"is_answerable":true})"),
      ValidationError);
  EXPECT_THROW(parse_jsonl<FeedbackRecord>(
                   R"({"schema_version":1,"example_id":"x","predicted_answer":"","feedback_text":"f","source":"HUMAN"})"),
               ValidationError);
  EXPECT_THROW(parse_jsonl<FeedbackRecord>(
                   R"({"schema_version":1,"example_id":"x","predicted_answer":"","feedback_text":"","source":"AI"})"),
               ValidationError);
  EXPECT_THROW(parse_jsonl<FeedbackRecord>(
                   R"({"schema_version":1,"example_id":"x","predicted_answer":"","feedback_text":"f","source":"AI","accepted_ai":true})"),
               ValidationError);
}

TEST(SampleSubset, FullSizeIsPermutation) {
  std::vector<int> ds(50);
  std::iota(ds.begin(), ds.end(), 0);
  auto s = sample_subset(ds, 50, 9);
  std::sort(s.begin(), s.end());
  EXPECT_EQ(s, ds);
  EXPECT_THROW(sample_subset(ds, 51, 9), SizeError);
  EXPECT_TRUE(sample_subset(ds, 0, 9).empty());
}

TEST(SampleSubset, MatchesReferenceShuffleOracle) {
  std::vector<int> ds(10);
  std::iota(ds.begin(), ds.end(), 0);
  for (std::uint64_t seed : {1ULL, 2ULL, 77ULL, 123456789ULL}) {
    const auto s = sample_subset(ds, 3, seed);
    const auto ref = reference_shuffle(10, seed);
    EXPECT_EQ(s, (std::vector<int>{int(ref[0]), int(ref[1]), int(ref[2])}));
    EXPECT_EQ(s, sample_subset(ds, 3, seed));
  }
  EXPECT_NE(sample_subset(ds, 3, 1), sample_subset(ds, 3, 2));
}

TEST(SampleSubset, RoughlyUniform) {
  // Each of 10 items should be picked about 3/10 of the time.
  std::vector<int> ds(10);
  std::iota(ds.begin(), ds.end(), 0);
  std::vector<int> hits(10, 0);
  for (std::uint64_t seed = 0; seed < 4000; ++seed)
    for (int v : sample_subset(ds, 3, seed)) ++hits[v];
  for (int h : hits) EXPECT_NEAR(h / 4000.0, 0.3, 0.03);
}

TEST(Mix, CompositionAcrossGrid) {
  const auto human = feedback_pool(932, FeedbackSource::HUMAN);
  const auto ai = feedback_pool(932, FeedbackSource::AI);
  // Hand-computed round-half-up counts.
  const std::map<std::pair<double, std::size_t>, std::size_t> expected{
      {{0.0, 200}, 0},   {{0.2, 200}, 40},  {{0.5, 200}, 100}, {{0.8, 200}, 160}, {{1.0, 200}, 200},
      {{0.0, 400}, 0},   {{0.2, 400}, 80},  {{0.5, 400}, 200}, {{0.8, 400}, 320}, {{1.0, 400}, 400},
      {{0.0, 932}, 0},   {{0.2, 932}, 186}, {{0.5, 932}, 466}, {{0.8, 932}, 746}, {{1.0, 932}, 932}};
  for (const auto& [key, nh] : expected) {
    const auto [fraction, total] = key;
    const auto out = mix(human, ai, {total, fraction, 5});
    ASSERT_EQ(out.size(), total);
    const auto h = std::count_if(out.begin(), out.end(), [](auto& r) { return r.source == FeedbackSource::HUMAN; });
    EXPECT_EQ(static_cast<std::size_t>(h), nh) << fraction << " x " << total;
    std::set<std::string> ids;
    for (const auto& r : out) ids.insert(r.example_id);
    EXPECT_EQ(ids.size(), total) << "sampled with replacement";
  }
}

TEST(Mix, HalfUpAndErrors) {
  const auto human = feedback_pool(10, FeedbackSource::HUMAN);
  const auto ai = feedback_pool(10, FeedbackSource::AI);
  EXPECT_EQ(human_count({5, 0.5, 0}), 3u);
  EXPECT_EQ(human_count({5, 0.7, 0}), 4u);
  EXPECT_EQ(human_count({932, 0.2, 0}), 186u);
  EXPECT_EQ(mix(human, ai, {6, 0.5, 1}), mix(human, ai, {6, 0.5, 1}));
  try {
    mix(human, ai, {15, 1.0, 1});
    FAIL();
  } catch (const SizeError& e) {
    EXPECT_NE(std::string(e.what()).find("human"), std::string::npos);
  }
  try {
    mix(human, ai, {15, 0.0, 1});
    FAIL();
  } catch (const SizeError& e) {
    EXPECT_NE(std::string(e.what()).find("AI"), std::string::npos);
  }
  EXPECT_THROW(mix(human, ai, {5, 1.5, 1}), ConfigError);
  EXPECT_THROW(mix(ai, ai, {5, 0.5, 1}), ValidationError);
}

TEST(Segment, SizesAndPartition) {
  EXPECT_EQ(segment_sizes(932, 6), (std::vector<std::size_t>{156, 156, 155, 155, 155, 155}));
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 60, k = 1 + rng() % n;
    std::vector<int> ds(n);
    std::iota(ds.begin(), ds.end(), 0);
    const auto parts = segment(ds, k, rng());
    ASSERT_EQ(parts.size(), k);
    std::vector<int> all;
    std::size_t lo = n, hi = 0;
    for (std::size_t i = 0; i < k; ++i) {
      lo = std::min(lo, parts[i].size());
      hi = std::max(hi, parts[i].size());
      if (i > 0) EXPECT_GE(parts[i - 1].size(), parts[i].size());
      all.insert(all.end(), parts[i].begin(), parts[i].end());
    }
    EXPECT_LE(hi - lo, 1u);
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, ds);
  }
  EXPECT_THROW(segment(std::vector<int>{1, 2}, 3, 0), SizeError);
  EXPECT_THROW(segment(std::vector<int>{1, 2}, 0, 0), SizeError);
}

TEST(Template, BundledAnswerTemplateTwoShot) {
  const auto t = load_template(kData / "templates" / "answer.txt");
  EXPECT_EQ(t.kind, TemplateKind::Answer);
  ASSERT_EQ(t.exemplars.size(), 2u);
  const auto out = render_prompt(t, {{"passage", "P"}, {"question", "Q"}}, 2);
  for (const auto& ex : t.exemplars) EXPECT_NE(out.find(ex), std::string::npos);
  EXPECT_EQ(t.exemplars[0].find(kUnanswerablePhrase), std::string::npos);
  EXPECT_NE(t.exemplars[1].find(kUnanswerablePhrase), std::string::npos);
  const auto query = out.substr(out.rfind("\n\n") + 2);
  EXPECT_EQ(query, "Passage: P\nQuestion: Q\nAnswer:\n");
  EXPECT_TRUE(out.ends_with("Answer:\n"));
}

TEST(Template, BindingsAppearExactlyOnce) {
  const auto t = load_template(kData / "templates" / "feedback.txt");
  const Bindings b{{"passage", "<<PASSAGE>>"}, {"question", "<<Q>>"}, {"predicted_answer", "<<PRED>>"},
                   {"gold_answer", "<<GOLD>>"}};
  const auto out = render_prompt(t, b, 1);
  for (const auto& [k, v] : b) {
    const auto first = out.find(v);
    ASSERT_NE(first, std::string::npos) << k;
    EXPECT_EQ(out.find(v, first + 1), std::string::npos) << k;
  }
  auto missing = b;
  missing.erase("gold_answer");
  try {
    render_prompt(t, missing, 1);
    FAIL();
  } catch (const TemplateError& e) {
    EXPECT_NE(std::string(e.what()).find("{gold_answer}"), std::string::npos);
  }
  EXPECT_THROW(render_prompt(t, b, 2), TemplateError);
}

TEST(Template, ValuesAreNotRescanned) {
  const auto t = parse_template("#! kind: laffi\nQ: {question}\n");
  EXPECT_EQ(render_prompt(t, {{"question", "{passage}"}}, 0), "Q: {passage}\n");
}

TEST(Template, ParseErrors) {
  EXPECT_THROW(parse_template("#! kind: laffi\nHello {name}\n"), TemplateError);
  EXPECT_THROW(parse_template("#! kind: poem\nx\n"), TemplateError);
  // Answer templates need both exemplar kinds.
  EXPECT_THROW(parse_template("#! kind: answer\npre\n###\nA: Lima\n###\n{question}\n"), TemplateError);
  EXPECT_NO_THROW(parse_template("#! kind: answer\npre\n###\nA: Lima\n###\nA: the answer cannot be found\n###\n{question}\n"));
  EXPECT_THROW(parse_template("#! kind: feedback\npre\n###\n\n"), TemplateError);
}

TEST(Synthetic, DeterministicAndWellFormed) {
  for (std::size_t n : {1u, 2u, 3u, 5u, 7u, 100u, 200u, 932u}) {
    const auto ds = make_synthetic_corpus(n, 11);
    ASSERT_EQ(ds.size(), n);
    EXPECT_EQ(ds, make_synthetic_corpus(n, 11));
    std::size_t unanswerable = 0;
    std::set<std::string> ids;
    for (const auto& e : ds) {
      validate(e);
      ids.insert(e.id);
      if (!e.is_answerable) ++unanswerable;
      for (const auto& g : e.gold_answers) EXPECT_NE(e.passage.find(g), std::string::npos) << e.id;
    }
    EXPECT_EQ(ids.size(), n);
    // round(0.25 n) with halves rounded up, computed independently.
    const auto expected = static_cast<std::size_t>(std::floor(0.25 * n + 0.5));
    EXPECT_EQ(unanswerable, expected) << n;
  }
  EXPECT_NE(make_synthetic_corpus(20, 1), make_synthetic_corpus(20, 2));
}

TEST(Synthetic, PromptsFitNanoContext) {
  const auto t = load_template(kData / "templates" / "answer.txt");
  for (const auto& e : make_synthetic_corpus(200, 4)) {
    const auto p = render_prompt(t, {{"passage", e.passage}, {"question", e.question}}, 2);
    EXPECT_LT(p.size() + 1 + 48, 512u);
  }
}

TEST(Fingerprint, Sha256) {
  EXPECT_EQ(prompt_fingerprint("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}
