#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stpark {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One recorded operation. The backward rule reads `grad` of this node and
// accumulates into the grads of `inputs`.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Lazily sized gradient buffer.
  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major f64 tensor participating in a reverse-mode gradient graph.
///
/// Tensors are shared handles: copying a Tensor aliases the same node. Values
/// are immutable after creation except through `mutable_data()` on leaves
/// (parameter updates) and gradient accumulation.
class Tensor {
 public:
  Tensor();
  explicit Tensor(std::shared_ptr<detail::Node> node);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Writable view; only valid for leaves (parameters, inputs).
  std::span<double> mutable_data();
  std::vector<double> to_vector() const { return node_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return !node_->backward; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; zeros if nothing has been accumulated yet.
  std::vector<double> grad() const;
  std::span<const double> grad_view() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from this scalar. Gradients accumulate into every
  /// reachable node that requires grad; leaves keep theirs.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Deep copy of the values as a new leaf.
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Builds the output node of an op. `requires_grad` is the OR of the inputs;
/// the backward rule is only kept when some input needs it.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward);

/// Throws NumericError if any entry is NaN.
void check_no_nan(const char* op, std::span<const double> values);

}  // namespace stpark
