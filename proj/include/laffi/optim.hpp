#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "laffi/errors.hpp"
#include "laffi/tensor.hpp"

namespace laffi {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("adamw: lr must be positive");
    if (!(beta1 > 0 && beta1 < 1)) throw ConfigError("adamw: beta1 must lie in (0, 1)");
    if (!(beta2 > 0 && beta2 < 1)) throw ConfigError("adamw: beta2 must lie in (0, 1)");
    if (!(eps > 0)) throw ConfigError("adamw: eps must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("adamw: weight_decay must be non-negative");
  }
};

// AdamW with decoupled weight decay: p <- p * (1 - lr * wd) is applied before
// the bias-corrected adaptive update.
template <typename T>
class BasicAdamW {
 public:
  BasicAdamW(std::vector<BasicTensor<T>> params, AdamWConfig config)
      : params_(std::move(params)), config_(config) {
    config_.validate();
    for (const auto& p : params_) {
      if (!p.requires_grad()) throw UsageError("adamw: parameter does not require a gradient");
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) {
        throw UsageError("adamw: parameter " + std::to_string(i) + " " +
                         shape_str(params_[i].shape()) + " has no gradient");
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - config_.lr * config_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto data = params_[i].mutable_data();
      const auto grad = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = grad[j];
        m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
        v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        const double p = static_cast<double>(data[j]) * decay;
        data[j] = static_cast<T>(p - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
      }
      detail::check_finite<T>(data, "adamw update");
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::int64_t steps() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return config_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<BasicTensor<T>> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

using AdamW = BasicAdamW<float>;

}  // namespace laffi
