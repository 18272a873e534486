#pragma once

// Central finite-difference oracle for the autodiff engine. It only ever
// evaluates the forward function, so it stays independent of every backward
// rule it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "laffi/tensor.hpp"

namespace laffi::testing {

struct GradCheckResult {
  // ||a - n|| / max(||a||, ||n||) over the concatenation of all parameter gradients.
  double relative_error = 0;
  // Same measure per parameter tensor, worst case.
  double worst_tensor_error = 0;
};

template <typename T>
GradCheckResult gradcheck(std::vector<BasicTensor<T>> params,
                          const std::function<BasicTensor<T>()>& loss_fn, double step) {
  for (auto& p : params) p.zero_grad();
  auto loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    const auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  double total_diff2 = 0, total_a2 = 0, total_n2 = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].mutable_data();
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T saved = data[i];
      // Central difference at h and h/2, combined by Richardson extrapolation
      // to cancel the O(h^2) truncation term.
      auto central = [&](double h) {
        data[i] = static_cast<T>(saved + h);
        const double x_up = data[i];
        const double up = loss_fn().item();
        data[i] = static_cast<T>(saved - h);
        const double x_down = data[i];
        const double down = loss_fn().item();
        data[i] = saved;
        return (up - down) / (x_up - x_down);
      };
      const double numeric = (4 * central(step / 2) - central(step)) / 3;
      diff2 += (analytic[k][i] - numeric) * (analytic[k][i] - numeric);
      a2 += analytic[k][i] * analytic[k][i];
      n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    const double rel = denom == 0 ? 0 : std::sqrt(diff2) / denom;
    result.worst_tensor_error = std::max(result.worst_tensor_error, rel);
    total_diff2 += diff2;
    total_a2 += a2;
    total_n2 += n2;
  }
  const double denom = std::max(std::sqrt(total_a2), std::sqrt(total_n2));
  result.relative_error = denom == 0 ? 0 : std::sqrt(total_diff2) / denom;
  return result;
}

}  // namespace laffi::testing
