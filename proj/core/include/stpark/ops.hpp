#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "stpark/tensor.hpp"

namespace stpark {

enum class Activation { Gelu, Relu, Identity };

// Elementwise, numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor activate(const Tensor& a, Activation kind);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// Batched matrix product [..., m, k] x [..., k, n] with broadcast batch extents.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., in] * weight[in, out] (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return linear(x, weight, &bias); }

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
/// Swap the last two axes.
Tensor transpose(const Tensor& a);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes, std::size_t axis);

/// Max-stabilized softmax. -inf inputs get exactly zero weight; a slice that
/// is entirely -inf is an error.
Tensor softmax(const Tensor& a, std::size_t axis);

inline constexpr double kLayerNormEps = 1e-5;
/// Normalizes over the last axis, then applies gain[C] and bias[C].
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

/// Row gather: table[V, D] at ids -> [ids.size(), D].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

/// y = M x along `axis` where M is a dense n x n row-major matrix (or its
/// transpose). The adjoint is the transposed application.
Tensor transform_along_axis(const Tensor& a, std::shared_ptr<const std::vector<double>> matrix, std::size_t axis,
                            bool transpose_matrix);

/// Mean |pred - target| over entries where mask != 0. Subgradient 0 at ties.
Tensor masked_mae(const Tensor& pred, const Tensor& target, const Tensor& mask);

}  // namespace stpark
