#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace uql {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until the first gradient accumulation
  bool requires_grad = false;
  bool is_leaf = true;

  void accumulate_grad(std::size_t i, double g) {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    grad[i] += g;
  }
  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major array of doubles.
//
// Tensor is a handle: copies share storage. Use clone() for a deep copy.
// Values entering the library through the constructors are checked for
// finiteness.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor from_values(std::vector<double> values);  // rank-1

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->values.size(); }

  std::span<const double> values() const { return impl_->values; }
  // Mutable access for leaves (parameter updates, input construction).
  std::span<double> mutable_values();
  double at(std::size_t i) const { return impl_->values.at(i); }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;  // deep copy as a fresh leaf (no grad)
  bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorData>& data_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorData> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorData> impl_;
};

enum class OpKind {
  add,
  mul,
  matmul,
  conv2d,
  relu,
  max_pool2d,
  mean_pool2d,
  softmax,
  log,
  sum,
  mean,
  broadcast,
  reshape,
  slice,
  scale,
  exp,
  softplus,
  cross_entropy,
  entropy,
};

const char* op_name(OpKind kind);

// Define-by-run record of differentiable operations, one per thread.
//
// Operations append a node when gradient recording is enabled and any input
// requires grad. backward() walks the nodes in exact reverse insertion order,
// then releases them; a second backward() without a new forward pass throws.
class GradTape {
 public:
  using BackwardFn = std::function<void(std::span<const double> output_grad)>;

  struct Node {
    OpKind kind;
    std::vector<std::shared_ptr<detail::TensorData>> inputs;
    std::shared_ptr<detail::TensorData> output;
    BackwardFn backward;
  };

  static GradTape& current();

  void record(Node node);
  void backward(const Tensor& loss);
  void clear();
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

bool grad_recording_enabled();

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Populates .grad() of every requires-grad leaf reachable from loss.
void backward(const Tensor& loss);

}  // namespace uql
