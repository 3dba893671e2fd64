#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace viewdelta {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand extents are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on misuse of the autodiff graph (non-scalar loss, double backward).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

template <typename Real>
struct Node {
  using BackwardFn = std::function<void(std::span<const Real> out_grad,
                                        std::span<std::vector<Real>*> in_grads)>;

  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool released = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

std::uint64_t next_sequence_id();

}  // namespace detail

/// Handle to a node of a reverse-mode autodiff graph.
///
/// Values are immutable once an op has produced them; leaves (parameters,
/// inputs) may be written through mutable_data() by the owner, typically an
/// optimizer. Gradients accumulate in leaves until zero_grad().
///
/// Each node receives a per-thread monotonic sequence id at creation, so the
/// records reachable from a loss are replayed in exactly reversed forward
/// order during backward().
template <typename Real>
class Tensor {
 public:
  using value_type = Real;
  using NodeType = detail::Node<Real>;
  using BackwardFn = typename NodeType::BackwardFn;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  /// Builds a non-leaf result. `backward` receives the output gradient and one
  /// pointer per input; the pointer is null when that input needs no gradient.
  /// When no input requires a gradient the result is a constant and the
  /// closure is dropped.
  static Tensor make_result(Shape shape, std::vector<Real> values,
                            std::vector<Tensor> inputs, const char* op,
                            BackwardFn backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }
  /// Mutable view of a leaf's values. Throws GraphError for op results.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  const char* op_name() const { return node_->op; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient of a leaf after backward(); zeros if none has flowed yet.
  std::span<const Real> grad() const;
  void zero_grad();

  /// Backpropagates from this scalar into every reachable leaf that requires
  /// a gradient. The graph is released afterwards; a second call on the same
  /// loss is a GraphError.
  void backward();

  /// Same values, outside the graph.
  Tensor detach() const;

  const std::shared_ptr<NodeType>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}
  std::shared_ptr<NodeType> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace viewdelta
