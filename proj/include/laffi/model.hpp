#pragma once

// Configuration and parameter storage for the decoder-only transformer.
//
// Layout conventions: activations are row vectors (T×d). Attention
// projections are stored as d_out×d_in and applied as x·Wᵀ, i.e. y = W·x per
// token, which keeps them addressable in the same orientation as LoRA's
// ΔW = B·A. The MLP and output head are stored as d_in×d_out and applied
// as x·W.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "laffi/errors.hpp"
#include "laffi/tensor.hpp"
#include "laffi/tokenizer.hpp"

namespace laffi {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 32;
  int d_ff = 128;
  int vocab_size = kByteVocabSize;
  int max_seq_len = 512;
  std::uint64_t init_seed = 0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1) throw ConfigError("model config: n_layers must be >= 1");
    if (n_heads < 1) throw ConfigError("model config: n_heads must be >= 1");
    if (d_model < 1 || d_model % n_heads != 0)
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " must be a positive multiple of n_heads " + std::to_string(n_heads));
    if (d_ff < 1) throw ConfigError("model config: d_ff must be >= 1");
    if (vocab_size < kByteVocabSize)
      throw ConfigError("model config: vocab_size must be >= " + std::to_string(kByteVocabSize));
    if (max_seq_len < 2) throw ConfigError("model config: max_seq_len must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Desk-scale stand-ins for a small / medium / large model axis.
inline ModelConfig preset_config(std::string_view name, std::uint64_t seed = 0) {
  ModelConfig c;
  c.init_seed = seed;
  if (name == "nano") {
    c.n_layers = 2, c.n_heads = 2, c.d_model = 32;
  } else if (name == "small") {
    c.n_layers = 4, c.n_heads = 4, c.d_model = 64;
  } else if (name == "medium") {
    c.n_layers = 6, c.n_heads = 8, c.d_model = 128;
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "' (expected nano, small, medium)");
  }
  c.d_ff = 4 * c.d_model;
  return c;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"nano", "small", "medium"};
  return names;
}

// Closed-form parameter count for a configuration.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size, s = c.max_seq_len;
  const std::size_t per_layer = 4 * d * d + 2 * d * f + 4 * d;
  return v * d + s * d + c.n_layers * per_layer + 2 * d + d * v;
}

enum class Projection { Q, K, V };

inline char projection_letter(Projection p) {
  switch (p) {
    case Projection::Q: return 'q';
    case Projection::K: return 'k';
    case Projection::V: return 'v';
  }
  return '?';
}

inline Projection parse_projection(std::string_view s) {
  if (s == "q" || s == "Q") return Projection::Q;
  if (s == "k" || s == "K") return Projection::K;
  if (s == "v" || s == "V") return Projection::V;
  throw ConfigError("unknown projection '" + std::string(s) + "' (expected q, k or v)");
}

template <typename T>
struct BasicLayerWeights {
  BasicTensor<T> q_proj, k_proj, v_proj, o_proj;  // d×d each
  BasicTensor<T> mlp_in;                          // d×d_ff
  BasicTensor<T> mlp_out;                         // d_ff×d
  BasicTensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  const BasicTensor<T>& projection(Projection p) const {
    switch (p) {
      case Projection::Q: return q_proj;
      case Projection::K: return k_proj;
      case Projection::V: return v_proj;
    }
    throw ConfigError("invalid projection");
  }
  BasicTensor<T>& projection(Projection p) {
    return const_cast<BasicTensor<T>&>(std::as_const(*this).projection(p));
  }
};

template <typename T>
struct BasicTransformerWeights {
  ModelConfig config;
  BasicTensor<T> token_embedding;     // vocab×d
  BasicTensor<T> position_embedding;  // max_seq_len×d
  std::vector<BasicLayerWeights<T>> layers;
  BasicTensor<T> final_ln_gain, final_ln_bias;
  BasicTensor<T> head;  // d×vocab

  // Every parameter tensor with a stable name, in a fixed order. The order
  // defines initialization draws and checkpoint layout.
  std::vector<std::pair<std::string, BasicTensor<T>>> named_tensors() const {
    std::vector<std::pair<std::string, BasicTensor<T>>> out;
    out.emplace_back("token_embedding", token_embedding);
    out.emplace_back("position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      out.emplace_back(p + "q_proj", L.q_proj);
      out.emplace_back(p + "k_proj", L.k_proj);
      out.emplace_back(p + "v_proj", L.v_proj);
      out.emplace_back(p + "o_proj", L.o_proj);
      out.emplace_back(p + "mlp_in", L.mlp_in);
      out.emplace_back(p + "mlp_out", L.mlp_out);
      out.emplace_back(p + "ln1_gain", L.ln1_gain);
      out.emplace_back(p + "ln1_bias", L.ln1_bias);
      out.emplace_back(p + "ln2_gain", L.ln2_gain);
      out.emplace_back(p + "ln2_bias", L.ln2_bias);
    }
    out.emplace_back("final_ln_gain", final_ln_gain);
    out.emplace_back("final_ln_bias", final_ln_bias);
    out.emplace_back("head", head);
    return out;
  }

  std::vector<BasicTensor<T>> parameters() const {
    std::vector<BasicTensor<T>> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_tensors()) n += t.size();
    return n;
  }

  void set_trainable(bool on) const {
    for (auto [name, t] : named_tensors()) t.set_requires_grad(on);
  }

  BasicTransformerWeights clone() const {
    BasicTransformerWeights w;
    w.config = config;
    w.token_embedding = token_embedding.clone();
    w.position_embedding = position_embedding.clone();
    for (const auto& L : layers) {
      w.layers.push_back({L.q_proj.clone(), L.k_proj.clone(), L.v_proj.clone(), L.o_proj.clone(),
                          L.mlp_in.clone(), L.mlp_out.clone(), L.ln1_gain.clone(),
                          L.ln1_bias.clone(), L.ln2_gain.clone(), L.ln2_bias.clone()});
    }
    w.final_ln_gain = final_ln_gain.clone();
    w.final_ln_bias = final_ln_bias.clone();
    w.head = head.clone();
    return w;
  }
};

using TransformerWeights = BasicTransformerWeights<float>;

namespace detail {

template <typename T>
BasicTensor<T> gaussian(Shape shape, std::mt19937_64& rng, double std_dev) {
  std::normal_distribution<double> dist(0.0, std_dev);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return BasicTensor<T>(std::move(shape), std::move(v));
}

}  // namespace detail

inline constexpr double kInitStd = 0.02;

// Gaussian(0, 0.02) for every matrix, unit gains and zero biases for the
// layer norms. Deterministic in config.init_seed. Weights start frozen.
template <typename T = float>
BasicTransformerWeights<T> init_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.init_seed);
  const std::size_t d = config.d_model, f = config.d_ff, v = config.vocab_size;
  BasicTransformerWeights<T> w;
  w.config = config;
  w.token_embedding = detail::gaussian<T>({v, d}, rng, kInitStd);
  w.position_embedding = detail::gaussian<T>({static_cast<std::size_t>(config.max_seq_len), d}, rng, kInitStd);
  for (int l = 0; l < config.n_layers; ++l) {
    BasicLayerWeights<T> L;
    L.q_proj = detail::gaussian<T>({d, d}, rng, kInitStd);
    L.k_proj = detail::gaussian<T>({d, d}, rng, kInitStd);
    L.v_proj = detail::gaussian<T>({d, d}, rng, kInitStd);
    L.o_proj = detail::gaussian<T>({d, d}, rng, kInitStd);
    L.mlp_in = detail::gaussian<T>({d, f}, rng, kInitStd);
    L.mlp_out = detail::gaussian<T>({f, d}, rng, kInitStd);
    L.ln1_gain = BasicTensor<T>::full({d}, T(1));
    L.ln1_bias = BasicTensor<T>::zeros({d});
    L.ln2_gain = BasicTensor<T>::full({d}, T(1));
    L.ln2_bias = BasicTensor<T>::zeros({d});
    w.layers.push_back(std::move(L));
  }
  w.final_ln_gain = BasicTensor<T>::full({d}, T(1));
  w.final_ln_bias = BasicTensor<T>::zeros({d});
  w.head = detail::gaussian<T>({d, v}, rng, kInitStd);
  return w;
}

// Bitwise FNV-1a over every parameter value in named order; used to assert
// that frozen weights are untouched.
template <typename T>
std::uint64_t weights_checksum(const BasicTransformerWeights<T>& w) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : w.named_tensors()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace laffi
