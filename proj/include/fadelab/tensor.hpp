#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fadelab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One value in the computation graph. Non-leaf nodes keep their parents and
// a closure that pushes self.grad into the parents; both are released by
// backward(), which makes every recorded graph single-use.
struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

// Grad buffer of a node, allocated (zero-filled) on first use.
std::span<float> grad_of(Node& node);

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, float value);
  static Tensor from_data(const Shape& shape, std::vector<float> data);
  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const float> data() const { return node_->data; }
  // Leaves only: optimizers and builders write through this.
  std::span<float> mutable_data();
  float item() const;
  float operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return !node_->backward; }
  const char* op() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zero span-sized view when no gradient has been accumulated.
  std::span<const float> grad() const { return node_->grad; }
  std::vector<float> grad_or_zeros() const;
  void zero_grad() { node_->grad.clear(); }

  // Fresh leaf holding a copy of the values.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Populates grad on every reachable tensor that requires grad, then releases
// the recorded graph.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Creates the output of an op. When recording is enabled and any input
// requires grad, the node is attached to the graph with `backward_fn`.
Tensor record(const char* op, Shape shape, std::vector<float> data,
              std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

void check_finite(const char* op, const Tensor& t);

}  // namespace detail

}  // namespace fadelab
