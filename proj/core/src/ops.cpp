#include "stpark/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "kernels.hpp"
#include "stpark/errors.hpp"

namespace stpark {
namespace {

using detail::Node;

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast plan;
  plan.out.assign(rank, 1);
  plan.stride_a.assign(rank, 0);
  plan.stride_b.assign(rank, 0);
  const auto sa = row_major_strides(a);
  const auto sb = row_major_strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t oa = rank - a.size();
    const std::size_t ob = rank - b.size();
    const std::size_t da = i >= oa ? a[i - oa] : 1;
    const std::size_t db = i >= ob ? b[i - ob] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                           " are not broadcastable");
    }
    plan.out[i] = std::max(da, db);
    if (da == 0 || db == 0) plan.out[i] = 0;
    if (i >= oa && da != 1) plan.stride_a[i] = sa[i - oa];
    if (i >= ob && db != 1) plan.stride_b[i] = sb[i - ob];
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& plan, F&& f) {
  const std::size_t rank = plan.out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t total = numel(plan.out);
  if (total == 0) return;
  const std::size_t inner = plan.out.back();
  const std::size_t ia_step = plan.stride_a.back();
  const std::size_t ib_step = plan.stride_b.back();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t io = 0; io < total; io += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(io + j, oa + j * ia_step, ob + j * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += plan.stride_a[d];
      ob += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      oa -= plan.stride_a[d] * plan.out[d];
      ob -= plan.stride_b[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class Back>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Back back) {
  Broadcast plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<double> out(numel(plan.out));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) { out[io] = fwd(pa[ia], pb[ib]); });
  }
  check_no_nan(name, out);
  Shape shape = plan.out;
  return make_result(name, std::move(shape), std::move(out), {a, b}, [plan = std::move(plan), back](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    double* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
    double* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
    const double* g = self.grad.data();
    const double* xa = na.data.data();
    const double* xb = nb.data.data();
    for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
      back(g[io], xa[ia], xb[ib], ga ? &ga[ia] : nullptr, gb ? &gb[ib] : nullptr);
    });
  });
}

template <class Fwd, class Deriv>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  check_no_nan(name, out);
  return make_result(name, a.shape(), std::move(out), {a}, [deriv](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(in.data[i]);
  });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      "scale", a, [factor](double x) { return x * factor; }, [factor](double) { return factor; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double kInvSqrt2Pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary_op(
      "gelu", a, [&](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [kInvSqrt2Pi](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor activate(const Tensor& a, Activation kind) {
  switch (kind) {
    case Activation::Gelu:
      return gelu(a);
    case Activation::Relu:
      return relu(a);
    case Activation::Identity:
      return a;
  }
  return a;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2 || a.shape()[a.dim() - 1] != b.shape()[b.dim() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.dim() - 2];
  const std::size_t k = a.shape()[a.dim() - 1];
  const std::size_t n = b.shape()[b.dim() - 1];
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Broadcast plan = plan_broadcast(batch_a, batch_b, "matmul");
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(numel(out_shape));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
    kernels::gemm_nn(m, n, k, pa + ia * m * k, pb + ib * k * n, out.data() + io * m * n, false);
  });
  check_no_nan("matmul", out);
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [plan = std::move(plan), m, n, k](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       double* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
                       double* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
                       const double* g = self.grad.data();
                       for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                         const double* gc = g + io * m * n;
                         if (ga) kernels::gemm_nt_acc(m, k, n, gc, nb.data.data() + ib * k * n, ga + ia * m * k);
                         if (gb) kernels::gemm_tn_acc(k, n, m, na.data.data() + ia * m * k, gc, gb + ib * k * n);
                       });
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  if (x.dim() < 1 || weight.dim() != 2 || x.shape().back() != weight.shape()[0]) {
    throw DimensionError("linear: incompatible shapes " + to_string(x.shape()) + " and " + to_string(weight.shape()));
  }
  const std::size_t in = weight.shape()[0];
  const std::size_t out_dim = weight.shape()[1];
  if (bias && (bias->dim() != 1 || bias->shape()[0] != out_dim)) {
    throw DimensionError("linear: bias shape " + to_string(bias->shape()) + " does not match output " +
                         std::to_string(out_dim));
  }
  const std::size_t rows = in == 0 ? 0 : x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<double> out(rows * out_dim);
  kernels::gemm_nn(rows, out_dim, in, x.data().data(), weight.data().data(), out.data(), false);
  if (bias) {
    const auto b = bias->data();
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = out.data() + r * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) row[j] += b[j];
    }
  }
  check_no_nan("linear", out);
  std::vector<Tensor> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result("linear", std::move(out_shape), std::move(out), std::move(inputs),
                     [rows, in, out_dim](Node& self) {
                       Node& nx = *self.inputs[0];
                       Node& nw = *self.inputs[1];
                       const double* g = self.grad.data();
                       if (nx.requires_grad) {
                         kernels::gemm_nt_acc(rows, in, out_dim, g, nw.data.data(), nx.grad_buffer().data());
                       }
                       if (nw.requires_grad) {
                         kernels::gemm_tn_acc(in, out_dim, rows, nx.data.data(), g, nw.grad_buffer().data());
                       }
                       if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                         auto& gb = self.inputs[2]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                         }
                       }
                     });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result("sum", {}, {total}, {a}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  return make_result("reshape", std::move(shape), a.to_vector(), {a}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t rank = a.dim();
  if (axes.size() != rank) throw DimensionError("permute: axis list rank mismatch for " + to_string(a.shape()));
  std::vector<bool> seen(rank, false);
  for (std::size_t ax : axes) {
    if (ax >= rank || seen[ax]) throw DimensionError("permute: invalid axis list for " + to_string(a.shape()));
    seen[ax] = true;
  }
  const auto in_strides = row_major_strides(a.shape());
  Shape out_shape(rank);
  std::vector<std::size_t> gather(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = a.shape()[axes[i]];
    gather[i] = in_strides[axes[i]];
  }
  // Source offset for every output element, reused by the backward pass.
  auto source = std::make_shared<std::vector<std::size_t>>(a.numel());
  if (rank == 0) {
    if (!source->empty()) (*source)[0] = 0;
  } else if (a.numel() > 0) {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t io = 0; io < source->size(); ++io) {
      (*source)[io] = off;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        off += gather[d];
        if (idx[d] < out_shape[d]) break;
        off -= gather[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*source)[i]];
  return make_result("permute", std::move(out_shape), std::move(out), {a}, [source](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < source->size(); ++i) g[(*source)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  if (a.dim() < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(a.shape()));
  std::vector<std::size_t> axes(a.dim());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[a.dim() - 1], axes[a.dim() - 2]);
  return permute(a, axes);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of an empty list");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: extent mismatch " + to_string(first) + " vs " + to_string(s));
    out_shape[axis] += s[axis];
    extents.push_back(s[axis]);
  }
  const AxisSplit layout = split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t pos = 0;
  for (std::size_t o = 0; o < layout.outer; ++o) {
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t block = extents[p] * layout.inner;
      const double* src = parts[p].data().data() + o * block;
      std::copy(src, src + block, out.begin() + static_cast<std::ptrdiff_t>(pos));
      pos += block;
    }
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat", std::move(out_shape), std::move(out), std::move(inputs),
                     [layout, extents](Node& self) {
                       std::size_t pos = 0;
                       for (std::size_t o = 0; o < layout.outer; ++o) {
                         for (std::size_t p = 0; p < extents.size(); ++p) {
                           const std::size_t block = extents[p] * layout.inner;
                           Node& in = *self.inputs[p];
                           if (in.requires_grad) {
                             double* dst = in.grad_buffer().data() + o * block;
                             for (std::size_t j = 0; j < block; ++j) dst[j] += self.grad[pos + j];
                           }
                           pos += block;
                         }
                       }
                     });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit layout = split_at(a.shape(), axis);
  if (begin > end || end > layout.extent) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                         to_string(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t block = (end - begin) * layout.inner;
  const std::size_t stride = layout.extent * layout.inner;
  const std::size_t offset = begin * layout.inner;
  std::vector<double> out(numel(out_shape));
  const double* x = a.data().data();
  for (std::size_t o = 0; o < layout.outer; ++o) {
    std::copy(x + o * stride + offset, x + o * stride + offset + block, out.begin() + static_cast<std::ptrdiff_t>(o * block));
  }
  return make_result("slice", std::move(out_shape), std::move(out), {a}, [layout, block, stride, offset](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t o = 0; o < layout.outer; ++o) {
      for (std::size_t j = 0; j < block; ++j) g[o * stride + offset + j] += self.grad[o * block + j];
    }
  });
}

std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes, std::size_t axis) {
  const AxisSplit layout = split_at(a.shape(), axis);
  std::size_t total = 0;
  for (std::size_t s : sizes) total += s;
  if (total != layout.extent) {
    throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis extent is " +
                         std::to_string(layout.extent));
  }
  std::vector<Tensor> parts;
  std::size_t begin = 0;
  for (std::size_t s : sizes) {
    parts.push_back(slice(a, axis, begin, begin + s));
    begin += s;
  }
  return parts;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit layout = split_at(a.shape(), axis);
  std::vector<double> out(a.numel());
  const double* x = a.data().data();
  const std::size_t n = layout.extent;
  const std::size_t inner = layout.inner;
  for (std::size_t o = 0; o < layout.outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) peak = std::max(peak, x[base + j * inner]);
      if (std::isinf(peak) && peak < 0) throw NumericError("softmax: fully masked slice");
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - peak);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  check_no_nan("softmax", out);
  return make_result("softmax", a.shape(), out, {a}, [layout](Node& self) {
    const std::size_t n = layout.extent;
    const std::size_t inner = layout.inner;
    const double* y = self.data.data();
    const double* g = self.grad.data();
    double* gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t o = 0; o < layout.outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
      }
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  if (a.dim() == 0 || a.shape().back() == 0) throw DimensionError("layer_norm: channel extent is 0");
  const std::size_t c = a.shape().back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw DimensionError("layer_norm: gain/bias must be (" + std::to_string(c) + "), got " + to_string(gain.shape()) +
                         " and " + to_string(bias.shape()));
  }
  const std::size_t rows = a.numel() / c;
  auto xhat = std::make_shared<std::vector<double>>(a.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(a.numel());
  const double* x = a.data().data();
  const double* g = gain.data().data();
  const double* b = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * inv;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * g[j] + b[j];
    }
  }
  check_no_nan("layer_norm", out);
  return make_result("layer_norm", a.shape(), std::move(out), {a, gain, bias}, [xhat, rstd, rows, c](Node& self) {
    Node& nx = *self.inputs[0];
    Node& ng = *self.inputs[1];
    Node& nb = *self.inputs[2];
    const double* dy = self.grad.data();
    const double* gain_v = ng.data.data();
    if (ng.requires_grad) {
      auto& gg = ng.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gg[j] += dy[r * c + j] * (*xhat)[r * c + j];
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += dy[r * c + j];
    }
    if (nx.requires_grad) {
      auto& gx = nx.grad_buffer();
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = dy[r * c + j] * gain_v[j];
          mean_d += d;
          mean_dx += d * (*xhat)[r * c + j];
        }
        mean_d *= inv_c;
        mean_dx *= inv_c;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = dy[r * c + j] * gain_v[j];
          gx[r * c + j] += (*rstd)[r] * (d - mean_d - (*xhat)[r * c + j] * mean_dx);
        }
      }
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.dim() != 2) throw DimensionError("embedding table must be 2-D, got " + to_string(table.shape()));
  const std::size_t vocab = table.shape()[0];
  const std::size_t width = table.shape()[1];
  std::vector<double> out(ids.size() * width);
  const double* t = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw DimensionError("embedding id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy(t + ids[i] * width, t + (ids[i] + 1) * width, out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  std::vector<std::size_t> kept(ids.begin(), ids.end());
  return make_result("embedding", {ids.size(), width}, std::move(out), {table},
                     [kept = std::move(kept), width](Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < kept.size(); ++i) {
                         for (std::size_t j = 0; j < width; ++j) g[kept[i] * width + j] += self.grad[i * width + j];
                       }
                     });
}

namespace {

// y_o = M x_o for each outer slice, where x_o is an (n x inner) block.
void apply_along_axis(const AxisSplit& layout, const double* matrix, bool transpose_matrix, const double* x, double* y,
                      bool accumulate) {
  const std::size_t n = layout.extent;
  const std::size_t inner = layout.inner;
  kernels::ConstMap m(matrix, n, n);
  for (std::size_t o = 0; o < layout.outer; ++o) {
    kernels::ConstMap xo(x + o * n * inner, n, inner);
    kernels::MutMap yo(y + o * n * inner, n, inner);
    if (transpose_matrix) {
      if (accumulate) {
        yo.noalias() += m.transpose() * xo;
      } else {
        yo.noalias() = m.transpose() * xo;
      }
    } else {
      if (accumulate) {
        yo.noalias() += m * xo;
      } else {
        yo.noalias() = m * xo;
      }
    }
  }
}

}  // namespace

Tensor transform_along_axis(const Tensor& a, std::shared_ptr<const std::vector<double>> matrix, std::size_t axis,
                            bool transpose_matrix) {
  const AxisSplit layout = split_at(a.shape(), axis);
  if (!matrix || matrix->size() != layout.extent * layout.extent) {
    throw DimensionError("transform_along_axis: matrix does not match axis extent " + std::to_string(layout.extent));
  }
  std::vector<double> out(a.numel());
  if (layout.inner == 1) {
    // Axis is innermost: Y (outer x n) = X M^T, or X M when transposed.
    kernels::ConstMap x(a.data().data(), layout.outer, layout.extent);
    kernels::ConstMap m(matrix->data(), layout.extent, layout.extent);
    kernels::MutMap y(out.data(), layout.outer, layout.extent);
    if (transpose_matrix) {
      y.noalias() = x * m;
    } else {
      y.noalias() = x * m.transpose();
    }
  } else {
    apply_along_axis(layout, matrix->data(), transpose_matrix, a.data().data(), out.data(), false);
  }
  check_no_nan("transform_along_axis", out);
  return make_result("transform_along_axis", a.shape(), std::move(out), {a},
                     [layout, matrix, transpose_matrix](Node& self) {
                       double* g = self.inputs[0]->grad_buffer().data();
                       if (layout.inner == 1) {
                         kernels::ConstMap dy(self.grad.data(), layout.outer, layout.extent);
                         kernels::ConstMap m(matrix->data(), layout.extent, layout.extent);
                         kernels::MutMap dx(g, layout.outer, layout.extent);
                         if (transpose_matrix) {
                           dx.noalias() += dy * m.transpose();
                         } else {
                           dx.noalias() += dy * m;
                         }
                       } else {
                         apply_along_axis(layout, matrix->data(), !transpose_matrix, self.grad.data(), g, true);
                       }
                     });
}

Tensor masked_mae(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  if (pred.shape() != target.shape() || pred.shape() != mask.shape()) {
    throw DimensionError("masked_mae: shapes " + to_string(pred.shape()) + ", " + to_string(target.shape()) + ", " +
                         to_string(mask.shape()) + " differ");
  }
  const auto p = pred.data();
  const auto t = target.data();
  const auto m = mask.data();
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] != 0.0) {
      total += std::abs(p[i] - t[i]);
      ++count;
    }
  }
  if (count == 0) throw DataError("masked_mae: mask selects no entries");
  const double inv = 1.0 / static_cast<double>(count);
  check_no_nan("masked_mae", std::span<const double>(&total, 1));
  return make_result("masked_mae", {}, {total * inv}, {pred, target, mask}, [inv](Node& self) {
    Node& np = *self.inputs[0];
    Node& nt = *self.inputs[1];
    const auto& m = self.inputs[2]->data;
    const double g = self.grad[0] * inv;
    auto sign = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
    if (np.requires_grad) {
      auto& gp = np.grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i)
        if (m[i] != 0.0) gp[i] += g * sign(np.data[i] - nt.data[i]);
    }
    if (nt.requires_grad) {
      auto& gt = nt.grad_buffer();
      for (std::size_t i = 0; i < gt.size(); ++i)
        if (m[i] != 0.0) gt[i] -= g * sign(np.data[i] - nt.data[i]);
    }
  });
}

}  // namespace stpark
