#include "viewdelta/tensor.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

#include "viewdelta/engine.hpp"

namespace viewdelta {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

std::uint64_t next_sequence_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::full(Shape shape, Real value, bool requires_grad) {
  check_shape(shape);
  std::vector<Real> values(shape_numel(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<NodeType>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = detail::next_sequence_id();
  if (requires_grad) node->grad.assign(node->value.size(), Real(0));
  return Tensor(std::move(node));
}

template <typename Real>
Tensor<Real> Tensor<Real>::scalar(Real value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::make_result(Shape shape, std::vector<Real> values,
                                       std::vector<Tensor> inputs, const char* op,
                                       BackwardFn backward) {
  Tensor out = from(std::move(shape), std::move(values), false);
  const bool needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [](const Tensor& t) { return t.requires_grad(); });
  out.node_->op = op;
  out.node_->is_leaf = false;
  if (needs_grad) {
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
  }
  return out;
}

template <typename Real>
std::size_t Tensor<Real>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename Real>
std::span<Real> Tensor<Real>::mutable_data() {
  if (!node_->is_leaf) throw GraphError(std::string("cannot mutate result of op ") + node_->op);
  return node_->value;
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) throw DimensionError("item() needs a single element, shape is " + shape_str(shape()));
  return node_->value[0];
}

template <typename Real>
Real Tensor<Real>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for shape " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range for shape " + shape_str(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

template <typename Real>
std::span<const Real> Tensor<Real>::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), Real(0));
  return node_->grad;
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->value.size(), Real(0));
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  return from(node_->shape, node_->value, false);
}

template <typename Real>
void Tensor<Real>::backward() {
  if (numel() != 1) {
    throw GraphError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (node_->released) {
    throw GraphError("backward() called twice on the same graph; zero_grad() and rebuild the graph");
  }
  if (!node_->requires_grad) throw GraphError("loss does not depend on any tensor requiring grad");

  // Owning handles: releasing a node drops its inputs, which may be the last
  // reference to nodes still waiting in this list.
  std::vector<std::shared_ptr<NodeType>> interior;
  std::unordered_set<NodeType*> seen;
  std::vector<std::shared_ptr<NodeType>> stack{node_};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    if (n->is_leaf) continue;
    if (n->released) throw GraphError(std::string("graph already released at op ") + n->op);
    for (auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in);
    }
    interior.push_back(std::move(n));
  }
  std::sort(interior.begin(), interior.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  node_->grad.assign(1, Real(1));
  std::vector<std::vector<Real>*> in_grads;
  for (auto& n : interior) {
    if (n->grad.empty()) n->grad.assign(n->value.size(), Real(0));
    in_grads.clear();
    for (auto& in : n->inputs) {
      if (!in->requires_grad) {
        in_grads.push_back(nullptr);
        continue;
      }
      if (in->grad.size() != in->value.size()) in->grad.assign(in->value.size(), Real(0));
      in_grads.push_back(&in->grad);
    }
    n->backward(n->grad, in_grads);
    n->backward = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->released = true;
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace viewdelta
