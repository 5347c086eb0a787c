#include "stpark/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "stpark/errors.hpp"

namespace stpark {
namespace {

double eval_scalar(const std::function<Tensor()>& loss_fn) {
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params, double step) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: loss is not finite");
  loss.backward();

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const std::vector<double> analytic = params[pi].grad();
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = eval_scalar(loss_fn);
      values[i] = saved - step;
      const double down = eval_scalar(loss_fn);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++result.entries_checked;
      if (rel > result.max_relative_error || result.entries_checked == 1) {
        result.max_relative_error = std::max(rel, result.max_relative_error);
        if (rel >= result.max_relative_error) {
          result.worst_param = pi;
          result.worst_entry = i;
          result.worst_analytic = analytic[i];
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace stpark
