#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "laffi/checkpoint.hpp"
#include "laffi/lora.hpp"
#include "laffi/transformer.hpp"

using namespace laffi;

namespace {

std::vector<TokenId> random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::vector<TokenId> ids(n);
  for (auto& t : ids) t = static_cast<TokenId>(rng() % 256);
  return ids;
}

void randomize_b(AdapterSet& adapters, std::uint64_t seed, double spread = 0.05) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-spread, spread);
  for (auto& ad : adapters)
    for (auto& v : ad.b.mutable_data()) v = static_cast<float>(u(rng));
}

}  // namespace

TEST(Attach, CountsOrderAndInit) {
  const auto w = init_model(preset_config("small", 1));
  const auto adapters = attach(w, LoraConfig{});
  ASSERT_EQ(adapters.size(), 12u);
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    EXPECT_EQ(adapters[i].layer, static_cast<int>(i / 3));
    EXPECT_EQ(adapters[i].projection, static_cast<Projection>(i % 3));
    EXPECT_EQ(adapters[i].a.shape(), (Shape{8, 64}));
    EXPECT_EQ(adapters[i].b.shape(), (Shape{64, 8}));
    for (float v : adapters[i].b.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_TRUE(adapters[i].a.requires_grad());
    EXPECT_TRUE(adapters[i].b.requires_grad());
  }
  for (const auto& [name, t] : w.named_tensors()) EXPECT_FALSE(t.requires_grad()) << name;
}

TEST(Attach, SeededAndValidated) {
  const auto w = init_model(preset_config("nano", 1));
  const auto a = attach(w, LoraConfig{.seed = 5});
  const auto b = attach(w, LoraConfig{.seed = 5});
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::equal(a[i].a.data().begin(), a[i].a.data().end(), b[i].a.data().begin()));
  EXPECT_THROW(attach(w, LoraConfig{.targets = {}}), ConfigError);
  EXPECT_THROW(attach(w, LoraConfig{.rank = 0}), ConfigError);
  EXPECT_THROW(attach(w, LoraConfig{.rank = 33}), ConfigError);
  EXPECT_EQ(attach(w, LoraConfig{.targets = {Projection::V}}).size(), 2u);
}

TEST(AdaptedProjection, HandExample) {
  LoraAdapter ad;
  ad.rank = 1;
  ad.alpha = 1.0;
  ad.a = Tensor::matrix(1, 2, {1, 0});
  ad.b = Tensor::matrix(2, 1, {0, 1});
  auto y = adapted_projection(Tensor::zeros({2, 2}), ad, Tensor({2}, {3, 5}));
  EXPECT_EQ(y.shape(), (Shape{2}));
  EXPECT_EQ(y[0], 0.0f);
  EXPECT_EQ(y[1], 3.0f);
}

TEST(AdaptedProjection, ZeroBAndAlphaLinearity) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> wv(16), xv(4), av(8), bv(8);
  for (auto* v : {&wv, &xv, &av, &bv})
    for (auto& e : *v) e = u(rng);
  const auto w = Tensor::matrix(4, 4, wv);
  const auto x = Tensor({4}, xv);
  LoraAdapter ad{.layer = 0, .projection = Projection::Q, .rank = 2, .alpha = 3.0,
                 .a = Tensor::matrix(2, 4, av), .b = Tensor::zeros({4, 2})};
  const auto base = matmul(w, reshape(x, {4, 1}));
  auto y0 = adapted_projection(w, ad, x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y0[i], base[i]);

  ad.b = Tensor::matrix(4, 2, bv);
  auto y1 = adapted_projection(w, ad, x);
  ad.alpha = 6.0;
  auto y2 = adapted_projection(w, ad, x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y2[i] - base[i], 2 * (y1[i] - base[i]), 1e-5);
}

TEST(AdaptedProjection, GradientsReachOnlyAdapter) {
  auto w = Tensor::matrix(2, 2, {1, 2, 3, 4});
  LoraAdapter ad{.layer = 0, .projection = Projection::K, .rank = 1, .alpha = 1.0,
                 .a = Tensor::matrix(1, 2, {0.5f, -1}, true), .b = Tensor::matrix(2, 1, {1, 2}, true)};
  backward(sum(adapted_projection(w, ad, Tensor({2}, {1, 1}))));
  EXPECT_FALSE(w.has_grad());
  EXPECT_TRUE(ad.a.has_grad());
  EXPECT_TRUE(ad.b.has_grad());
}

TEST(ZeroInitIdentity, AllPresetsBitIdentical) {
  std::mt19937_64 rng(1);
  for (const auto& name : preset_names()) {
    const auto w = init_model(preset_config(name, 3));
    const auto adapters = attach(w, LoraConfig{.seed = 4});
    const auto ids = random_tokens(20, rng);
    const auto base = forward(w, ids).logits;
    const auto adapted = forward(w, ids, &adapters).logits;
    ASSERT_TRUE(std::equal(base.data().begin(), base.data().end(), adapted.data().begin())) << name;
  }
}

TEST(Merge, MatchesAdaptedForward) {
  std::mt19937_64 rng(7);
  const auto w = init_model(preset_config("nano", 2));
  auto adapters = attach(w, LoraConfig{.seed = 1});
  randomize_b(adapters, 3);
  const auto merged = merge(w, adapters);
  for (int trial = 0; trial < 5; ++trial) {
    const auto ids = random_tokens(16, rng);
    const auto a = forward(w, ids, &adapters).logits;
    const auto m = forward(merged, ids).logits;
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], m[i], 1e-5);
  }
}

TEST(Merge, ZeroAdaptersAndIdempotence) {
  const auto w = init_model(preset_config("nano", 2));
  const auto adapters = attach(w, LoraConfig{});
  const auto merged = merge(w, adapters);
  EXPECT_EQ(weights_checksum(merged), weights_checksum(w));
  const auto again = merge(merged, attach(merged, LoraConfig{.seed = 9}));
  EXPECT_EQ(weights_checksum(again), weights_checksum(merged));
}

TEST(Merge, LayerOutOfRange) {
  const auto w = init_model(preset_config("nano", 2));
  auto adapters = attach(w, LoraConfig{});
  adapters[0].layer = 5;
  EXPECT_THROW(merge(w, adapters), ConfigError);
}

TEST(TrainableFraction, SmallPresetEnumeration) {
  const auto w = init_model(preset_config("small", 1));
  const auto adapters = attach(w, LoraConfig{.rank = 4});
  EXPECT_EQ(adapter_parameter_count(adapters), 4u * 3 * 2 * 4 * 64);
  // Independent enumeration over every tensor's requires_grad flag.
  std::size_t trainable = 0, total = 0;
  for (const auto& [name, t] : w.named_tensors()) {
    total += t.size();
    if (t.requires_grad()) trainable += t.size();
  }
  for (const auto& ad : adapters)
    for (const auto& t : {ad.a, ad.b}) {
      total += t.size();
      if (t.requires_grad()) trainable += t.size();
    }
  EXPECT_EQ(trainable, 6144u);
  EXPECT_EQ(trainable_fraction(w, adapters), double(trainable) / double(total));
}

TEST(TrainableFraction, NominalSevenBillionGeometry) {
  EXPECT_EQ(2.0 * 8 * 4096 * 32 * 3, 6291456.0);
  const double f = nominal_trainable_fraction(7.0e9, 32, 4096, 3, 8);
  EXPECT_GE(f * 100, 0.085);
  EXPECT_LE(f * 100, 0.095);
  EXPECT_NEAR(f * 100, 0.0899, 1e-4);
  EXPECT_EQ(f, 6291456.0 / 7.0e9);
}

TEST(TrainableFraction, NoAdapters) {
  const auto w = init_model(preset_config("nano", 1));
  EXPECT_EQ(trainable_fraction(w, AdapterSet{}), 0.0);
}

TEST(AdapterCheckpoint, RoundTrip) {
  const auto w = init_model(preset_config("nano", 2));
  auto adapters = attach(w, LoraConfig{.rank = 4, .alpha = 8, .seed = 2});
  randomize_b(adapters, 11);
  const auto bytes = serialize_adapters(w.config, adapters);
  const auto back = deserialize_adapters(bytes);
  EXPECT_EQ(back.config, w.config);
  ASSERT_EQ(back.adapters.size(), adapters.size());
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    EXPECT_EQ(back.adapters[i].layer, adapters[i].layer);
    EXPECT_EQ(back.adapters[i].projection, adapters[i].projection);
    EXPECT_EQ(back.adapters[i].rank, 4);
    EXPECT_EQ(back.adapters[i].alpha, 8.0);
  }
  EXPECT_EQ(serialize_adapters(back.config, back.adapters), bytes);
  EXPECT_THROW(deserialize_weights(bytes), ParseError);
}
