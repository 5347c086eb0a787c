#include "stpark/spectral.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <string>
#include <tuple>

#include "kernels.hpp"
#include "stpark/errors.hpp"
#include "stpark/ops.hpp"

namespace stpark::spectral {
namespace {

struct Layout {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

Layout layout_of(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw DimensionError("dct: axis out of range for " + to_string(shape));
  Layout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  if (l.n == 0) throw DimensionError("dct: transform length is 0");
  return l;
}

bool use_fast(std::size_t n, DctMethod method) {
  switch (method) {
    case DctMethod::Matrix:
      return false;
    case DctMethod::Fast:
      return true;
    case DctMethod::Auto:
      break;
  }
  return n > kFastDctThreshold;
}

// FFTW's planner is not reentrant; executing a finished plan is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

fftw_plan cached_plan(std::size_t n, std::size_t inner, bool inverse) {
  static std::map<std::tuple<std::size_t, std::size_t, bool>, fftw_plan> plans;
  std::lock_guard lock(planner_mutex());
  auto key = std::make_tuple(n, inner, inverse);
  if (auto it = plans.find(key); it != plans.end()) return it->second;
  std::vector<double> scratch_in(n * inner);
  std::vector<double> scratch_out(n * inner);
  const int len = static_cast<int>(n);
  const fftw_r2r_kind kind = inverse ? FFTW_REDFT01 : FFTW_REDFT10;
  fftw_plan plan = fftw_plan_many_r2r(1, &len, static_cast<int>(inner), scratch_in.data(), nullptr,
                                      static_cast<int>(inner), 1, scratch_out.data(), nullptr,
                                      static_cast<int>(inner), 1, &kind, FFTW_ESTIMATE | FFTW_UNALIGNED);
  if (!plan) throw std::runtime_error("fftw: failed to plan DCT of length " + std::to_string(n));
  plans.emplace(key, plan);
  return plan;
}

void fast_forward(const Layout& l, const double* in, double* out) {
  fftw_plan plan = cached_plan(l.n, l.inner, false);
  const double dc = 1.0 / std::sqrt(4.0 * static_cast<double>(l.n));
  const double ac = 1.0 / std::sqrt(2.0 * static_cast<double>(l.n));
  const std::size_t block = l.n * l.inner;
  for (std::size_t o = 0; o < l.outer; ++o) {
    // fftw_execute_r2r takes a non-const input; REDFT10 leaves it intact.
    fftw_execute_r2r(plan, const_cast<double*>(in + o * block), out + o * block);
    double* y = out + o * block;
    for (std::size_t i = 0; i < l.inner; ++i) y[i] *= dc;
    for (std::size_t j = l.inner; j < block; ++j) y[j] *= ac;
  }
}

void fast_inverse(const Layout& l, const double* in, double* out) {
  fftw_plan plan = cached_plan(l.n, l.inner, true);
  const double dc = 1.0 / std::sqrt(static_cast<double>(l.n));
  const double ac = 1.0 / std::sqrt(2.0 * static_cast<double>(l.n));
  const std::size_t block = l.n * l.inner;
  std::vector<double> scaled(block);
  for (std::size_t o = 0; o < l.outer; ++o) {
    const double* x = in + o * block;
    for (std::size_t i = 0; i < l.inner; ++i) scaled[i] = x[i] * dc;
    for (std::size_t j = l.inner; j < block; ++j) scaled[j] = x[j] * ac;
    fftw_execute_r2r(plan, scaled.data(), out + o * block);
  }
}

void matrix_apply(const Layout& l, const double* in, double* out, bool inverse) {
  const auto basis = dct_matrix(l.n);
  kernels::ConstMap m(basis->data(), l.n, l.n);
  const std::size_t block = l.n * l.inner;
  for (std::size_t o = 0; o < l.outer; ++o) {
    kernels::ConstMap x(in + o * block, l.n, l.inner);
    kernels::MutMap y(out + o * block, l.n, l.inner);
    if (inverse) {
      y.noalias() = m.transpose() * x;
    } else {
      y.noalias() = m * x;
    }
  }
}

void apply(const Layout& l, const double* in, double* out, bool inverse, DctMethod method) {
  if (use_fast(l.n, method)) {
    if (inverse) {
      fast_inverse(l, in, out);
    } else {
      fast_forward(l, in, out);
    }
  } else {
    matrix_apply(l, in, out, inverse);
  }
}

Tensor transform(const char* name, const Tensor& x, std::size_t axis, DctMethod method, bool inverse) {
  const Layout l = layout_of(x.shape(), axis);
  std::vector<double> out(x.numel());
  apply(l, x.data().data(), out.data(), inverse, method);
  check_no_nan(name, out);
  // Orthonormal: the adjoint of the transform is its inverse.
  return make_result(name, x.shape(), std::move(out), {x}, [l, method, inverse](detail::Node& self) {
    std::vector<double> back(self.grad.size());
    apply(l, self.grad.data(), back.data(), !inverse, method);
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += back[i];
  });
}

}  // namespace

std::shared_ptr<const std::vector<double>> dct_matrix(std::size_t n) {
  if (n == 0) throw DimensionError("dct_matrix: n = 0");
  static std::mutex mutex;
  static std::map<std::size_t, std::shared_ptr<const std::vector<double>>> cache;
  std::lock_guard lock(mutex);
  if (auto it = cache.find(n); it != cache.end()) return it->second;
  auto m = std::make_shared<std::vector<double>>(n * n);
  const double nd = static_cast<double>(n);
  const double norm = std::sqrt(2.0 / nd);
  for (std::size_t k = 0; k < n; ++k) {
    const double ck = k == 0 ? std::numbers::sqrt2 / 2.0 : 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      (*m)[k * n + j] = ck * norm *
                        std::cos(std::numbers::pi * (2.0 * static_cast<double>(j) + 1.0) * static_cast<double>(k) /
                                 (2.0 * nd));
    }
  }
  cache.emplace(n, m);
  return m;
}

Tensor dct2(const Tensor& x, std::size_t axis, DctMethod method) { return transform("dct2", x, axis, method, false); }

Tensor idct2(const Tensor& coeffs, std::size_t axis, DctMethod method) {
  return transform("idct2", coeffs, axis, method, true);
}

std::vector<double> dct2(std::span<const double> x, DctMethod method) {
  return dct2(Tensor::from({x.size()}, {x.begin(), x.end()}), 0, method).to_vector();
}

std::vector<double> idct2(std::span<const double> coeffs, DctMethod method) {
  return idct2(Tensor::from({coeffs.size()}, {coeffs.begin(), coeffs.end()}), 0, method).to_vector();
}

Tensor truncate_modes(const Tensor& coeffs, std::size_t k_modes, std::size_t axis) {
  const Layout l = layout_of(coeffs.shape(), axis);
  if (k_modes < 1 || k_modes > l.n) {
    throw DimensionError("truncate_modes: k_modes " + std::to_string(k_modes) + " outside [1, " + std::to_string(l.n) +
                         "]");
  }
  if (k_modes == l.n) return coeffs;
  Shape mask_shape(coeffs.dim(), 1);
  mask_shape[axis] = l.n;
  std::vector<double> keep(l.n, 0.0);
  for (std::size_t k = 0; k < k_modes; ++k) keep[k] = 1.0;
  return mul(coeffs, Tensor::from(std::move(mask_shape), std::move(keep)));
}

std::vector<double> path_laplacian_eigenvalues(std::size_t n) {
  if (n == 0) throw DimensionError("path_laplacian_eigenvalues: n = 0");
  std::vector<double> lambda(n);
  for (std::size_t k = 0; k < n; ++k) {
    lambda[k] = 2.0 - 2.0 * std::cos(std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
  }
  return lambda;
}

std::vector<double> path_laplacian_apply(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 2) throw DimensionError("path_laplacian_apply: need n >= 2, got " + std::to_string(n));
  std::vector<double> y(n);
  y[0] = x[0] - x[1];
  y[n - 1] = x[n - 1] - x[n - 2];
  for (std::size_t i = 1; i + 1 < n; ++i) y[i] = 2.0 * x[i] - x[i - 1] - x[i + 1];
  return y;
}

std::vector<double> spectral_laplacian_apply(std::span<const double> x, std::span<const double> eigenvalues) {
  if (eigenvalues.size() != x.size()) {
    throw DimensionError("spectral_laplacian_apply: " + std::to_string(eigenvalues.size()) + " eigenvalues for " +
                         std::to_string(x.size()) + " nodes");
  }
  std::vector<double> coeffs = dct2(x);
  for (std::size_t k = 0; k < coeffs.size(); ++k) coeffs[k] *= eigenvalues[k];
  return idct2(coeffs);
}

std::vector<double> spectral_laplacian_apply(std::span<const double> x) {
  const auto lambda = path_laplacian_eigenvalues(x.size());
  return spectral_laplacian_apply(x, lambda);
}

SpectralBasis SpectralBasis::path_graph(std::size_t n_nodes, std::size_t k_modes) {
  if (k_modes < 1 || k_modes > n_nodes) {
    throw DimensionError("SpectralBasis: k_modes " + std::to_string(k_modes) + " outside [1, " +
                         std::to_string(n_nodes) + "]");
  }
  return SpectralBasis{n_nodes, path_laplacian_eigenvalues(n_nodes), k_modes};
}

}  // namespace stpark::spectral
