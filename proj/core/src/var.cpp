#include <Eigen/Dense>

#include <cmath>

#include "stpark/errors.hpp"
#include "stpark/train.hpp"

namespace stpark {

VarModel::VarModel(std::span<const double> values, std::size_t lots, std::size_t begin, std::size_t end,
                   std::size_t lag, double ridge)
    : lots_(lots), lag_(lag) {
  if (lag == 0) throw DataError("VAR: lag must be positive");
  if (lots * lag > kMaxRegressors) {
    throw DataError("VAR: lots * lag = " + std::to_string(lots * lag) + " exceeds " + std::to_string(kMaxRegressors));
  }
  if (values.size() % lots != 0 || end * lots > values.size() || begin > end) {
    throw DimensionError("VAR: fit range does not match the series");
  }
  if (end - begin <= lag) throw DataError("VAR: not enough rows to fit lag " + std::to_string(lag));

  const auto k = static_cast<Eigen::Index>(1 + lots * lag);
  const auto n = static_cast<Eigen::Index>(lots);
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(k, k);
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(k, n);
  Eigen::VectorXd z(k);
  for (std::size_t t = begin + lag; t < end; ++t) {
    z[0] = 1.0;
    for (std::size_t i = 1; i <= lag; ++i) {
      for (std::size_t j = 0; j < lots; ++j) z[static_cast<Eigen::Index>(1 + (i - 1) * lots + j)] = values[(t - i) * lots + j];
    }
    gram.selfadjointView<Eigen::Lower>().rankUpdate(z);
    const Eigen::Map<const Eigen::RowVectorXd> y(values.data() + t * lots, n);
    cross.noalias() += z * y;
  }
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  for (Eigen::Index d = 1; d < k; ++d) gram(d, d) += ridge;

  const Eigen::LDLT<Eigen::MatrixXd> solver(gram);
  if (solver.info() != Eigen::Success) throw NumericError("VAR: normal equations could not be factored");
  const Eigen::MatrixXd beta = solver.solve(cross);
  if (!beta.allFinite()) throw NumericError("VAR: design is rank deficient beyond ridge rescue");
  const Eigen::MatrixXd check = gram * beta - cross;
  if (check.norm() > 1e-6 * (1.0 + cross.norm())) {
    throw NumericError("VAR: design is rank deficient beyond ridge rescue");
  }

  intercept_.resize(lots);
  for (std::size_t j = 0; j < lots; ++j) intercept_[j] = beta(0, static_cast<Eigen::Index>(j));
  coef_.assign(lag, std::vector<double>(lots * lots));
  for (std::size_t i = 0; i < lag; ++i) {
    for (std::size_t row = 0; row < lots; ++row) {
      for (std::size_t col = 0; col < lots; ++col) {
        coef_[i][row * lots + col] =
            beta(static_cast<Eigen::Index>(1 + i * lots + col), static_cast<Eigen::Index>(row));
      }
    }
  }
}

std::vector<double> VarModel::forecast(std::span<const double> history, std::size_t steps) const {
  if (history.size() % lots_ != 0 || history.size() / lots_ < lag_) {
    throw DimensionError("VAR: forecast needs at least " + std::to_string(lag_) + " rows of history");
  }
  std::vector<double> buf(history.end() - static_cast<std::ptrdiff_t>(lag_ * lots_), history.end());
  std::vector<double> out;
  out.reserve(steps * lots_);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t rows = buf.size() / lots_;
    for (std::size_t row = 0; row < lots_; ++row) {
      double v = intercept_[row];
      for (std::size_t i = 1; i <= lag_; ++i) {
        const double* prev = buf.data() + (rows - i) * lots_;
        const double* a = coef_[i - 1].data() + row * lots_;
        for (std::size_t col = 0; col < lots_; ++col) v += a[col] * prev[col];
      }
      out.push_back(v);
    }
    buf.insert(buf.end(), out.end() - static_cast<std::ptrdiff_t>(lots_), out.end());
  }
  return out;
}

WindowForecasts VarModel::forecast(const WindowedDataset& data) const {
  WindowForecasts f = window_targets(data);
  const auto& raw = data.series().raw;
  f.pred.reserve(f.target.size());
  for (std::size_t w = 0; w < f.windows; ++w) {
    const std::size_t end = data.start(w) + data.history();
    const std::span<const double> history(raw.data() + (end - lag_) * lots_, lag_ * lots_);
    const auto pred = forecast(history, f.horizon);
    f.pred.insert(f.pred.end(), pred.begin(), pred.end());
  }
  return f;
}

}  // namespace stpark
