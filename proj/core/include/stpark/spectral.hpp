#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "stpark/tensor.hpp"

namespace stpark::spectral {

/// How dct2/idct2 evaluate the transform. `Matrix` multiplies by a cached
/// n x n basis; `Fast` runs an O(n log n) real-to-real FFT. `Auto` picks the
/// matrix for small n.
enum class DctMethod { Auto, Matrix, Fast };

inline constexpr std::size_t kFastDctThreshold = 64;

/// Orthonormal DCT-II matrix, row-major, entry (k, m) =
/// c_k sqrt(2/n) cos(pi (2m+1) k / (2n)), c_0 = 1/sqrt(2), c_k = 1 otherwise.
/// Built once per n and shared.
std::shared_ptr<const std::vector<double>> dct_matrix(std::size_t n);

/// Orthonormal DCT-II along `axis`. Backward is idct2 of the gradient.
Tensor dct2(const Tensor& x, std::size_t axis, DctMethod method = DctMethod::Auto);
/// Orthonormal DCT-III (inverse of dct2) along `axis`.
Tensor idct2(const Tensor& coeffs, std::size_t axis, DctMethod method = DctMethod::Auto);

std::vector<double> dct2(std::span<const double> x, DctMethod method = DctMethod::Auto);
std::vector<double> idct2(std::span<const double> coeffs, DctMethod method = DctMethod::Auto);

/// Zeroes coefficients with index >= k_modes along `axis`.
Tensor truncate_modes(const Tensor& coeffs, std::size_t k_modes, std::size_t axis);

/// Eigenvalues of the unweighted n-node path-graph Laplacian in DCT-II order:
/// 2 - 2 cos(pi k / n), k = 0..n-1.
std::vector<double> path_laplacian_eigenvalues(std::size_t n);

/// (L x)_i = deg(i) x_i - sum_{j~i} x_j for the n-node path graph.
std::vector<double> path_laplacian_apply(std::span<const double> x);

/// idct2(eigenvalues * dct2(x)).
std::vector<double> spectral_laplacian_apply(std::span<const double> x, std::span<const double> eigenvalues);
/// Same, with the path-graph eigenvalues.
std::vector<double> spectral_laplacian_apply(std::span<const double> x);

struct SpectralBasis {
  std::size_t n_nodes = 0;
  std::vector<double> eigenvalues;
  std::size_t k_modes = 0;

  static SpectralBasis path_graph(std::size_t n_nodes, std::size_t k_modes);
  static SpectralBasis path_graph(std::size_t n_nodes) { return path_graph(n_nodes, n_nodes); }
};

}  // namespace stpark::spectral
