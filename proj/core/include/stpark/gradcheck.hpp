#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "stpark/tensor.hpp"

namespace stpark {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

inline constexpr double kFiniteDiffStep = 1e-5;

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// on every entry of every tensor in `params`. Relative error per entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// `loss_fn` must be deterministic and return a scalar; it is re-evaluated
/// twice per parameter entry. Parameters are restored bit-exactly.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                  double step = kFiniteDiffStep);

}  // namespace stpark
