#include "fadelab/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "fadelab/error.hpp"

namespace fadelab {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

std::span<float> grad_of(Node& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0f);
  return node.grad;
}

namespace {

// Branch-free scan so the compiler can vectorise it: a float is non-finite
// exactly when all exponent bits are set.
bool all_finite(std::span<const float> v) {
  std::uint32_t bad = 0;
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    bad |= static_cast<std::uint32_t>((bits & 0x7f800000u) == 0x7f800000u);
  }
  return bad == 0;
}

}  // namespace

void check_finite(const char* op, const Tensor& t) {
  if (!all_finite(t.data()))
    fail(ErrorCode::kNonFinite, std::string(op) + ": non-finite value in tensor " + shape_str(t.shape()));
}

Tensor record(const char* op, Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
              std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (!all_finite(node->data)) fail(ErrorCode::kNonFinite, std::string(op) + ": produced a non-finite value");
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace detail

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0f); }

Tensor Tensor::full(const Shape& shape, float value) {
  return from_data(shape, std::vector<float>(shape_numel(shape), value));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data) {
  require(shape_numel(shape) == data.size(), ErrorCode::kShapeMismatch,
          "Tensor::from_data: shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
              " values");
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->data = std::move(data);
  Tensor t(std::move(node));
  detail::check_finite("from_data", t);
  return t;
}

Tensor Tensor::scalar(float value) { return from_data({}, {value}); }

std::span<float> Tensor::mutable_data() {
  require(is_leaf(), ErrorCode::kInvalidArgument, "mutable_data: tensor is not a leaf");
  return node_->data;
}

float Tensor::item() const {
  require(numel() == 1, ErrorCode::kShapeMismatch, "item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  require(is_leaf(), ErrorCode::kInvalidArgument, "set_requires_grad: only leaves can change requires_grad");
  node_->requires_grad = on;
  return *this;
}

std::vector<float> Tensor::grad_or_zeros() const {
  if (has_grad()) return node_->grad;
  return std::vector<float>(numel(), 0.0f);
}

Tensor Tensor::detach() const { return from_data(shape(), node_->data); }

void backward(const Tensor& loss) {
  require(loss.defined(), ErrorCode::kInvalidArgument, "backward: undefined loss");
  require(loss.numel() == 1, ErrorCode::kShapeMismatch,
          "backward: loss must be a scalar, got " + shape_str(loss.shape()));
  require(loss.requires_grad(), ErrorCode::kInvalidArgument,
          "backward: loss does not depend on any tensor that requires grad");

  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  detail::grad_of(*loss.node())[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (detail::Node* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace fadelab
