#include "uql/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace uql {

namespace {

thread_local bool t_grad_enabled = true;

void check_finite(std::span<const double> values, const char* where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << where << ": non-finite value " << values[i] << " at index " << i;
      throw std::domain_error(os.str());
    }
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorData>()) {
  impl_->values.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorData>()) {
  if (!std::isfinite(fill)) throw std::domain_error("Tensor: non-finite fill value");
  impl_->values.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<detail::TensorData>()) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  check_finite(values, "Tensor");
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::from_values(std::vector<double> values) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values));
}

std::span<double> Tensor::mutable_values() {
  if (!impl_->is_leaf) {
    throw std::logic_error("Tensor: cannot mutate the output of a recorded operation");
  }
  return impl_->values;
}

double Tensor::item() const {
  if (impl_->values.size() != 1) {
    throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str(impl_->shape) +
                                " is not a single value");
  }
  return impl_->values[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_->is_leaf) throw std::logic_error("Tensor: requires_grad can only be set on leaves");
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::clone() const {
  auto data = std::make_shared<detail::TensorData>();
  data->shape = impl_->shape;
  data->values = impl_->values;
  return Tensor(std::move(data));
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::max_pool2d: return "max_pool2d";
    case OpKind::mean_pool2d: return "mean_pool2d";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::broadcast: return "broadcast";
    case OpKind::reshape: return "reshape";
    case OpKind::slice: return "slice";
    case OpKind::scale: return "scale";
    case OpKind::exp: return "exp";
    case OpKind::softplus: return "softplus";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::entropy: return "entropy";
  }
  return "unknown";
}

GradTape& GradTape::current() {
  thread_local GradTape tape;
  return tape;
}

void GradTape::record(Node node) {
  consumed_ = false;
  nodes_.push_back(std::move(node));
}

void GradTape::clear() {
  nodes_.clear();
  consumed_ = false;
}

void GradTape::backward(const Tensor& loss) {
  if (nodes_.empty()) {
    throw std::logic_error(consumed_ ? "backward: graph already consumed; run the forward pass again"
                                     : "backward: no recorded operations");
  }
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  }
  const auto& root = loss.data_ptr();
  bool found = false;
  for (const Node& n : nodes_) {
    if (n.output == root) {
      found = true;
      break;
    }
  }
  if (!found) throw std::logic_error("backward: loss is not part of the recorded graph");
  if (!std::isfinite(root->values[0])) {
    throw std::domain_error("backward: non-finite loss");
  }

  root->grad.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad);
  }
  nodes_.clear();
  consumed_ = true;
}

bool grad_recording_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) { GradTape::current().backward(loss); }

}  // namespace uql
