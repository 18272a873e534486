#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <sstream>

#include "laffi/attention.hpp"

using namespace laffi;

namespace {

// Minimal independent readers for the two export formats.
std::vector<std::vector<double>> parse_csv_values(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

std::vector<std::vector<int>> parse_pgm(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  std::size_t w = 0, h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P2");
  EXPECT_EQ(maxval, 255);
  std::vector<std::vector<int>> px(h, std::vector<int>(w));
  for (auto& row : px)
    for (auto& v : row) in >> v;
  return px;
}

AttentionTrace trace_from(const std::vector<std::vector<double>>& heads, std::size_t t) {
  AttentionTrace tr(1, heads.size(), t);
  for (std::size_t h = 0; h < heads.size(); ++h) std::copy(heads[h].begin(), heads[h].end(), tr.head(0, h).begin());
  tr.tokens.assign(t, 'a');
  return tr;
}

std::vector<double> random_causal_stochastic(std::size_t t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    double s = 0;
    for (std::size_t j = 0; j <= i; ++j) s += (m[i * t + j] = u(rng));
    for (std::size_t j = 0; j <= i; ++j) m[i * t + j] /= s;
  }
  return m;
}

ModelConfig small_config(std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 2, c.n_heads = 4, c.d_model = 16, c.d_ff = 32, c.max_seq_len = 64, c.init_seed = seed;
  return c;
}

}  // namespace

TEST(MeanAttention, HandExample) {
  const auto m = mean_attention(trace_from({{1, 0, 0.5, 0.5}, {1, 0, 0.1, 0.9}}, 2));
  EXPECT_DOUBLE_EQ(m.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(m.at(0, 1), 0.0);
  EXPECT_NEAR(m.at(1, 0), 0.3, 1e-15);
  EXPECT_NEAR(m.at(1, 1), 0.7, 1e-15);
  EXPECT_EQ(m.tokens, (std::vector<std::string>{"a", "a"}));
}

TEST(MeanAttention, SingleHeadIdentityAndLayerErrors) {
  const std::vector<double> h{1, 0, 0.25, 0.75};
  const auto m = mean_attention(trace_from({h}, 2));
  EXPECT_EQ(m.matrix, h);
  EXPECT_THROW(mean_attention(trace_from({h}, 2), 1), IndexError);
  EXPECT_NO_THROW(mean_attention(trace_from({h}, 2), 0));
}

TEST(MeanAttention, HeadPermutationAndConvexity) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + rng() % 9, heads = 1 + rng() % 5;
    std::vector<std::vector<double>> hs;
    for (std::size_t h = 0; h < heads; ++h) hs.push_back(random_causal_stochastic(t, rng));
    const auto a = mean_attention(trace_from(hs, t));
    std::shuffle(hs.begin(), hs.end(), rng);
    const auto b = mean_attention(trace_from(hs, t));
    for (std::size_t i = 0; i < t; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < t; ++j) {
        ASSERT_NEAR(a.at(i, j), b.at(i, j), 1e-12);
        if (j > i) ASSERT_EQ(a.at(i, j), 0.0);
        s += a.at(i, j);
      }
      ASSERT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(MeanAttention, ModelTracesSatisfyInvariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = init_model(small_config(seed));
    const auto out = forward(w, prompt_tokens("Where does Ana live?"), nullptr, {.capture_trace = true});
    for (std::size_t l = 0; l < 2; ++l) {
      const auto m = mean_attention(*out.trace, l);
      ASSERT_EQ(m.tokens.front(), "<bos>");
      for (std::size_t i = 0; i < m.size; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < m.size; ++j) {
          ASSERT_GE(m.at(i, j), 0.0);
          ASSERT_LE(m.at(i, j), 1.0);
          if (j > i) ASSERT_EQ(m.at(i, j), 0.0);
          s += m.at(i, j);
        }
        ASSERT_NEAR(s, 1.0, 1e-5);
      }
    }
  }
}

TEST(CompareRuns, SharedLabelsAndZeroInitIdentity) {
  const auto base = init_model(small_config(1));
  const auto zero = attach(base, LoraConfig{.rank = 2, .seed = 3});
  auto trained = zero;
  for (auto& ad : trained) {
    ad.b = ad.b.clone();  // copies of an adapter share storage
    for (auto& v : ad.b.mutable_data()) v = 0.3f;
  }
  const auto maps = compare_runs("Q: hi?", {{"baseline", &base, nullptr}, {"zero", &base, &zero}, {"tuned", &base, &trained}});
  ASSERT_EQ(maps.size(), 3u);
  EXPECT_EQ(maps[0].tokens, maps[1].tokens);
  EXPECT_EQ(maps[0].tokens, maps[2].tokens);
  EXPECT_EQ(maps[0].matrix, maps[1].matrix);
  EXPECT_NE(maps[0].matrix, maps[2].matrix);
  EXPECT_THROW(compare_runs(std::string(64, 'x'), {{"baseline", &base, nullptr}}), LengthError);
}

TEST(Export, PgmHandPixels) {
  const auto m = mean_attention(trace_from({{1, 0, 0.3, 0.7}}, 2));
  EXPECT_EQ(parse_pgm(attention_pgm(m)), (std::vector<std::vector<int>>{{255, 0}, {77, 179}}));
  EXPECT_EQ(attention_pgm(m), "P2\n2 2\n255\n255 0\n77 179\n");
}

TEST(Export, RoundTripsAndDeterminism) {
  std::mt19937_64 rng(8);
  const auto dir = std::filesystem::temp_directory_path() / "laffi_attn_test";
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 1 + rng() % 12;
    auto tr = trace_from({random_causal_stochastic(t, rng), random_causal_stochastic(t, rng)}, t);
    tr.tokens.assign(t, ',');
    const auto m = mean_attention(tr);
    export_attention(m, dir / "m.csv", HeatmapFormat::CSV);
    export_attention(m, dir / "m.pgm", HeatmapFormat::PGM);
    const auto csv = read_text_file(dir / "m.csv");
    EXPECT_TRUE(csv.starts_with("\",\""));
    // Header cells are quoted commas; drop the header before parsing values.
    const auto values = parse_csv_values(csv);
    const auto px = parse_pgm(read_text_file(dir / "m.pgm"));
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) {
        ASSERT_NEAR(values[i][j], m.at(i, j), 1e-6);
        ASSERT_LE(std::abs(px[i][j] / 255.0 - m.at(i, j)), 1.0 / 255);
      }
    export_attention(m, dir / "again.csv", HeatmapFormat::CSV);
    EXPECT_EQ(read_text_file(dir / "again.csv"), csv);
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(export_attention(mean_attention(trace_from({{1}}, 1)), "/proc/laffi/x.csv", HeatmapFormat::CSV), IoError);
}
