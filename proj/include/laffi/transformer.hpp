#pragma once

// Causal pre-norm transformer forward pass, attention capture and decoding.

#include <cmath>
#include <cstdint>
#include <optional>
#include <type_traits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "laffi/errors.hpp"
#include "laffi/lora.hpp"
#include "laffi/model.hpp"
#include "laffi/tensor.hpp"
#include "laffi/tokenizer.hpp"

namespace laffi {

// Post-softmax attention scores for every layer and head of one forward pass.
struct AttentionTrace {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> tokens;
  std::vector<double> scores;  // [layer][head][row][col]

  AttentionTrace() = default;
  AttentionTrace(std::size_t layers, std::size_t heads, std::size_t t)
      : n_layers(layers), n_heads(heads), seq_len(t), scores(layers * heads * t * t, 0.0) {}

  std::span<const double> head(std::size_t layer, std::size_t h) const {
    return {scores.data() + (layer * n_heads + h) * seq_len * seq_len, seq_len * seq_len};
  }
  std::span<double> head(std::size_t layer, std::size_t h) {
    return {scores.data() + (layer * n_heads + h) * seq_len * seq_len, seq_len * seq_len};
  }
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;  // T×vocab (1×vocab when only the last position was requested)
  std::optional<AttentionTrace> trace;
};

struct ForwardOptions {
  bool capture_trace = false;
  bool last_position_only = false;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
ForwardResult<T> forward(const BasicTransformerWeights<T>& w, std::span<const TokenId> tokens,
                         const std::type_identity_t<BasicAdapterSet<T>>* adapters = nullptr,
                         ForwardOptions options = {}) {
  const auto& cfg = w.config;
  const std::size_t seq = tokens.size();
  if (seq == 0) throw LengthError("forward: empty token sequence");
  if (seq > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw LengthError("forward: sequence of " + std::to_string(seq) + " tokens exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  const std::size_t dh = cfg.head_dim();
  const T eps = static_cast<T>(kLayerNormEps);
  const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<TokenId> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = static_cast<TokenId>(i);

  ForwardResult<T> result;
  if (options.capture_trace) {
    result.trace.emplace(cfg.n_layers, cfg.n_heads, seq);
    result.trace->tokens.assign(tokens.begin(), tokens.end());
  }

  auto x = add(gather_rows(w.token_embedding, tokens), gather_rows(w.position_embedding, positions));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = w.layers[l];
    auto h = layer_norm(x, L.ln1_gain, L.ln1_bias, eps);
    auto q = adapted_linear(h, L.q_proj, find_adapter(adapters, l, Projection::Q));
    auto k = adapted_linear(h, L.k_proj, find_adapter(adapters, l, Projection::K));
    auto v = adapted_linear(h, L.v_proj, find_adapter(adapters, l, Projection::V));
    std::vector<T> probs;
    auto att = causal_attention(q, k, v, cfg.n_heads, att_scale, result.trace ? &probs : nullptr);
    if (result.trace) {
      for (std::size_t hd = 0; hd < static_cast<std::size_t>(cfg.n_heads); ++hd) {
        auto dst = result.trace->head(l, hd);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(probs[hd * seq * seq + i]);
      }
    }
    x = add(x, matmul_nt(att, L.o_proj));
    auto h2 = layer_norm(x, L.ln2_gain, L.ln2_bias, eps);
    x = add(x, matmul(gelu(matmul(h2, L.mlp_in)), L.mlp_out));
  }
  if (options.last_position_only) x = slice_rows(x, seq - 1, 1);
  result.logits = matmul(layer_norm(x, w.final_ln_gain, w.final_ln_bias, eps), w.head);
  return result;
}

// Incremental inference with cached keys and values. Computes the same
// function as forward() one position at a time, without building a graph.
template <typename T>
class KvCache {
 public:
  KvCache(const BasicTransformerWeights<T>& w, const BasicAdapterSet<T>* adapters)
      : w_(w), d_(static_cast<std::size_t>(w.config.d_model)) {
    const std::size_t cap = static_cast<std::size_t>(w.config.max_seq_len);
    keys_.assign(w.config.n_layers, std::vector<T>(cap * d_));
    values_.assign(w.config.n_layers, std::vector<T>(cap * d_));
    adapters_.resize(w.config.n_layers * 3, nullptr);
    for (int l = 0; l < w.config.n_layers; ++l)
      for (auto p : {Projection::Q, Projection::K, Projection::V})
        adapters_[l * 3 + static_cast<int>(p)] = find_adapter(adapters, l, p);
    logits_.resize(w.config.vocab_size);
  }

  std::size_t size() const { return len_; }

  // Appends one token at the next position; returns the next-token logits.
  const std::vector<T>& push(TokenId id) {
    const auto& cfg = w_.config;
    if (len_ >= static_cast<std::size_t>(cfg.max_seq_len)) {
      throw LengthError("decode: sequence exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    if (id < 0 || id >= cfg.vocab_size) throw IndexError("decode: token id " + std::to_string(id) + " out of range");
    const std::size_t d = d_, pos = len_, nh = cfg.n_heads, dh = cfg.head_dim();
    const T eps = static_cast<T>(kLayerNormEps);
    const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<T> x(d), h(d), q(d), att(d), scores(pos + 1), ff(cfg.d_ff);
    for (std::size_t c = 0; c < d; ++c)
      x[c] = w_.token_embedding.data()[id * d + c] + w_.position_embedding.data()[pos * d + c];
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& L = w_.layers[l];
      norm(x, L.ln1_gain, L.ln1_bias, eps, h);
      T* kc = keys_[l].data() + pos * d;
      T* vc = values_[l].data() + pos * d;
      project(L.q_proj, adapters_[l * 3 + 0], h, q.data());
      project(L.k_proj, adapters_[l * 3 + 1], h, kc);
      project(L.v_proj, adapters_[l * 3 + 2], h, vc);
      std::fill(att.begin(), att.end(), T(0));
      for (std::size_t hd = 0; hd < nh; ++hd) {
        const std::size_t off = hd * dh;
        for (std::size_t j = 0; j <= pos; ++j) {
          const T* kr = keys_[l].data() + j * d + off;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += q[off + c] * kr[c];
          scores[j] = s * att_scale;
        }
        detail::softmax_row(scores.data(), scores.data(), pos + 1);
        for (std::size_t j = 0; j <= pos; ++j)
          detail::axpy(att.data() + off, values_[l].data() + j * d + off, scores[j], dh);
      }
      const T* o = L.o_proj.data().data();
      for (std::size_t r = 0; r < d; ++r) {
        T s = T(0);
        for (std::size_t c = 0; c < d; ++c) s += o[r * d + c] * att[c];
        x[r] += s;
      }
      norm(x, L.ln2_gain, L.ln2_bias, eps, h);
      std::fill(ff.begin(), ff.end(), T(0));
      for (std::size_t i = 0; i < d; ++i) detail::axpy(ff.data(), L.mlp_in.data().data() + i * ff.size(), h[i], ff.size());
      for (auto& f : ff) f = gelu_scalar(f);
      for (std::size_t i = 0; i < ff.size(); ++i) detail::axpy(x.data(), L.mlp_out.data().data() + i * d, ff[i], d);
    }
    norm(x, w_.final_ln_gain, w_.final_ln_bias, eps, h);
    std::fill(logits_.begin(), logits_.end(), T(0));
    for (std::size_t i = 0; i < d; ++i) detail::axpy(logits_.data(), w_.head.data().data() + i * logits_.size(), h[i], logits_.size());
    ++len_;
    return logits_;
  }

 private:
  static T gelu_scalar(T x) {
    constexpr T kC = T(0.7978845608028654), kA = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
  }

  static void norm(const std::vector<T>& x, const BasicTensor<T>& g, const BasicTensor<T>& b, T eps,
                   std::vector<T>& out) {
    const std::size_t d = x.size();
    T mean = T(0), var = T(0);
    for (const T v : x) mean += v;
    mean /= T(d);
    for (const T v : x) var += (v - mean) * (v - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out[c] = g[c] * ((x[c] - mean) * inv) + b[c];
  }

  // y = W·h + (alpha/r)·B·(A·h)
  void project(const BasicTensor<T>& w, const BasicLoraAdapter<T>* ad, const std::vector<T>& h, T* y) const {
    const std::size_t d = d_;
    const T* wd = w.data().data();
    for (std::size_t r = 0; r < d; ++r) {
      T s = T(0);
      for (std::size_t c = 0; c < d; ++c) s += wd[r * d + c] * h[c];
      y[r] = s;
    }
    if (!ad) return;
    const std::size_t rank = ad->a.rows();
    std::vector<T> ah(rank, T(0));
    for (std::size_t k = 0; k < rank; ++k)
      for (std::size_t c = 0; c < d; ++c) ah[k] += ad->a.data()[k * d + c] * h[c];
    const T sc = ad->scaling();
    for (std::size_t r = 0; r < d; ++r) {
      T s = T(0);
      for (std::size_t k = 0; k < rank; ++k) s += ad->b.data()[r * rank + k] * ah[k];
      y[r] += sc * s;
    }
  }

  const BasicTransformerWeights<T>& w_;
  std::size_t d_;
  std::size_t len_ = 0;
  std::vector<const BasicLoraAdapter<T>*> adapters_;
  std::vector<std::vector<T>> keys_, values_;
  std::vector<T> logits_;
};

enum class DecodeMode { Greedy, Temperature };

struct GenerationConfig {
  std::size_t max_new_tokens = 64;
  DecodeMode mode = DecodeMode::Greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::vector<std::string> stop_sequences;
};

// Token ids fed to the model for a prompt: BOS followed by the prompt bytes.
inline std::vector<TokenId> prompt_tokens(std::string_view prompt) {
  std::vector<TokenId> ids{kBos};
  const auto body = tokenize(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

namespace detail {

template <typename T>
TokenId pick_token(std::span<const T> logits, const GenerationConfig& g, std::mt19937_64& rng) {
  if (g.mode == DecodeMode::Greedy) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j)
      if (logits[j] > logits[best]) best = j;
    return static_cast<TokenId>(best);
  }
  if (!(g.temperature > 0)) throw ConfigError("generate: temperature must be positive");
  double mx = logits[0];
  for (const T v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double total = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    p[j] = std::exp((static_cast<double>(logits[j]) - mx) / g.temperature);
    total += p[j];
  }
  std::uniform_real_distribution<double> u(0.0, total);
  double r = u(rng), acc = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    acc += p[j];
    if (r < acc) return static_cast<TokenId>(j);
  }
  return static_cast<TokenId>(p.size() - 1);
}

}  // namespace detail

// Autoregressive decoding. Stops at EOS, at the first occurrence of any stop
// sequence (which is cut from the output) or after max_new_tokens.
template <typename T>
std::string generate(const BasicTransformerWeights<T>& w, const BasicAdapterSet<T>* adapters,
                     std::string_view prompt, const GenerationConfig& g) {
  std::vector<TokenId> ids = prompt_tokens(prompt);
  if (ids.size() + g.max_new_tokens > static_cast<std::size_t>(w.config.max_seq_len)) {
    throw LengthError("generate: prompt of " + std::to_string(ids.size()) + " tokens plus " +
                      std::to_string(g.max_new_tokens) + " new tokens exceeds max_seq_len " +
                      std::to_string(w.config.max_seq_len));
  }
  const std::size_t prompt_len = ids.size();
  std::mt19937_64 rng(g.seed);
  KvCache<T> cache(w, adapters);
  for (std::size_t i = 0; i + 1 < prompt_len; ++i) cache.push(ids[i]);
  std::string text;
  for (std::size_t step = 0; step < g.max_new_tokens; ++step) {
    const auto& logits = cache.push(ids.back());
    const TokenId next = detail::pick_token<T>(logits, g, rng);
    if (next == kEos) break;
    ids.push_back(next);
    text = detokenize(std::span<const TokenId>(ids).subspan(prompt_len));
    std::size_t cut = std::string::npos;
    for (const auto& s : g.stop_sequences) {
      if (s.empty()) continue;
      cut = std::min(cut, text.find(s));
    }
    if (cut != std::string::npos) {
      text.resize(cut);
      break;
    }
  }
  return text;
}

}  // namespace laffi
