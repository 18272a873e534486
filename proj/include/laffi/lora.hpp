#pragma once

// Low-rank adapters on the attention Q/K/V projections.
//
// An adapter replaces a frozen projection W (d×d) by W + (alpha/r)·B·A with
// A: r×d and B: d×r. B starts at zero, so an attached but untrained adapter
// leaves the model's outputs bit-identical.

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "laffi/errors.hpp"
#include "laffi/model.hpp"
#include "laffi/tensor.hpp"

namespace laffi {

template <typename T>
struct BasicLoraAdapter {
  int layer = 0;
  Projection projection = Projection::Q;
  int rank = 8;
  double alpha = 16.0;
  BasicTensor<T> a;  // rank×d, trainable
  BasicTensor<T> b;  // d×rank, trainable

  T scaling() const { return static_cast<T>(alpha / rank); }
  std::size_t parameter_count() const { return a.size() + b.size(); }
};

using LoraAdapter = BasicLoraAdapter<float>;

template <typename T>
using BasicAdapterSet = std::vector<BasicLoraAdapter<T>>;
using AdapterSet = BasicAdapterSet<float>;

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  std::vector<Projection> targets{Projection::Q, Projection::K, Projection::V};
  std::uint64_t seed = 0;
};

// One adapter per (layer, target) in layer-major, Q-K-V order. Marks every
// base tensor frozen.
template <typename T>
BasicAdapterSet<T> attach(const BasicTransformerWeights<T>& weights, const LoraConfig& config) {
  if (config.targets.empty()) throw ConfigError("lora: target set is empty");
  const int d = weights.config.d_model;
  if (config.rank < 1 || config.rank > d) {
    throw ConfigError("lora: rank " + std::to_string(config.rank) + " outside [1, " +
                      std::to_string(d) + "]");
  }
  if (!(config.alpha > 0)) throw ConfigError("lora: alpha must be positive");
  const std::set<Projection> targets(config.targets.begin(), config.targets.end());

  weights.set_trainable(false);
  std::mt19937_64 rng(config.seed);
  const auto r = static_cast<std::size_t>(config.rank);
  const auto dd = static_cast<std::size_t>(d);
  BasicAdapterSet<T> out;
  for (int l = 0; l < weights.config.n_layers; ++l) {
    for (const Projection p : targets) {
      BasicLoraAdapter<T> ad;
      ad.layer = l;
      ad.projection = p;
      ad.rank = config.rank;
      ad.alpha = config.alpha;
      ad.a = detail::gaussian<T>({r, dd}, rng, kInitStd);
      ad.a.set_requires_grad(true);
      ad.b = BasicTensor<T>::zeros({dd, r}, true);
      out.push_back(std::move(ad));
    }
  }
  return out;
}

template <typename T>
const BasicLoraAdapter<T>* find_adapter(const BasicAdapterSet<T>* adapters, int layer, Projection p) {
  if (!adapters) return nullptr;
  for (const auto& a : *adapters)
    if (a.layer == layer && a.projection == p) return &a;
  return nullptr;
}

// Row-batched projection: X·Wᵀ + (alpha/r)·(X·Aᵀ)·Bᵀ, i.e. W·x + (alpha/r)·B·(A·x)
// for every row x of X. Without an adapter this is X·Wᵀ.
template <typename T>
BasicTensor<T> adapted_linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                              const BasicLoraAdapter<T>* adapter) {
  auto base = matmul_nt(x, w);
  if (!adapter) return base;
  if (adapter->a.cols() != w.cols() || adapter->b.rows() != w.rows()) {
    throw DimensionError("lora: adapter A " + shape_str(adapter->a.shape()) + " / B " +
                         shape_str(adapter->b.shape()) + " incompatible with W " +
                         shape_str(w.shape()));
  }
  auto delta = matmul_nt(matmul_nt(x, adapter->a), adapter->b);
  return add(base, scale(delta, adapter->scaling()));
}

// Single-vector form: W·x + (alpha/r)·B·(A·x).
template <typename T>
BasicTensor<T> adapted_projection(const BasicTensor<T>& w, const BasicLoraAdapter<T>& adapter,
                                  const BasicTensor<T>& x) {
  if (x.size() != w.cols()) {
    throw DimensionError("lora: input " + shape_str(x.shape()) + " incompatible with W " +
                         shape_str(w.shape()));
  }
  auto row = reshape(x, {1, x.size()});
  auto y = adapted_linear(row, w, &adapter);
  return reshape(y, {w.rows()});
}

// Returns frozen weights with each target W replaced by W + (alpha/r)·B·A.
template <typename T>
BasicTransformerWeights<T> merge(const BasicTransformerWeights<T>& weights,
                                 const BasicAdapterSet<T>& adapters) {
  auto merged = weights.clone();
  for (const auto& ad : adapters) {
    if (ad.layer < 0 || ad.layer >= weights.config.n_layers) {
      throw ConfigError("lora merge: adapter layer " + std::to_string(ad.layer) +
                        " out of range for " + std::to_string(weights.config.n_layers) + " layers");
    }
    auto& w = merged.layers[ad.layer].projection(ad.projection);
    const std::size_t d_out = w.rows(), d_in = w.cols(), r = ad.a.rows();
    if (ad.b.rows() != d_out || ad.a.cols() != d_in || ad.b.cols() != r) {
      throw DimensionError("lora merge: adapter shapes do not match " + shape_str(w.shape()));
    }
    std::vector<T> delta(d_out * d_in, T(0));
    detail::gemm_nn(ad.b.data().data(), ad.a.data().data(), delta.data(), d_out, r, d_in);
    auto data = w.mutable_data();
    const T s = ad.scaling();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += s * delta[i];
    detail::check_finite<T>(data, "lora merge");
  }
  merged.set_trainable(false);
  return merged;
}

template <typename T>
std::size_t adapter_parameter_count(const BasicAdapterSet<T>& adapters) {
  std::size_t n = 0;
  for (const auto& a : adapters) n += a.parameter_count();
  return n;
}

// Share of all parameters (base + adapters) that the adapters hold.
template <typename T>
double trainable_fraction(const BasicTransformerWeights<T>& weights,
                          const BasicAdapterSet<T>& adapters) {
  const double lora = static_cast<double>(adapter_parameter_count(adapters));
  if (lora == 0) return 0.0;
  return lora / (static_cast<double>(weights.parameter_count()) + lora);
}

// Same accounting for a model described only by its geometry and a nominal
// size such as "7B": each target matrix contributes 2·r·d_model adapter
// parameters, counted against the nominal total.
inline double nominal_trainable_fraction(double nominal_parameters, int n_layers, int d_model,
                                         int targets_per_layer, int rank) {
  const double lora = 2.0 * rank * d_model * static_cast<double>(n_layers) * targets_per_layer;
  return lora / nominal_parameters;
}

}  // namespace laffi
