#pragma once

// Finite-difference oracle and random graph builder shared by the unit and
// acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "uql/ops.hpp"
#include "uql/rng.hpp"
#include "uql/tensor.hpp"

namespace uql::testing {

// |a - n| / max(|a|, |n|, floor): relative error with an absolute floor for
// gradients that are numerically zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central difference of a scalar function of one value in `values`.
inline double central_difference(const std::function<double()>& f, double& value, double h) {
  const double saved = value;
  value = saved + h;
  const double up = f();
  value = saved - h;
  const double down = f();
  value = saved;
  return (up - down) / (2.0 * h);
}

struct GradCheckResult {
  std::size_t checked = 0;
  double worst = 0.0;
  std::string worst_where;
};

// Builds a random mixed-op graph over a handful of leaves. Build is
// deterministic in the seed. `margin` reports how close the forward pass
// came to a relu or max-pool kink; callers skip graphs with a small margin
// because a central difference straddling a kink is not a derivative.
class RandomGraph {
 public:
  explicit RandomGraph(std::uint64_t seed) : seed_(seed) {
    Rng rng(seed);
    conv_ = rng.uniform() < 0.8;
    stride_ = rng.uniform() < 0.3 ? 2 : 1;
    padding_ = rng.uniform() < 0.5 ? 1 : 0;
    use_bias_ = rng.uniform() < 0.7;
    activation_ = static_cast<int>(rng.uniform_index(4));
    pool_ = static_cast<int>(rng.uniform_index(3));
    head_ = static_cast<int>(rng.uniform_index(6));
    const std::size_t n = 2, c = 2, hw = 6;
    leaves_.push_back(random_leaf({n, c, hw, hw}, rng, 1.0));
    if (conv_) {
      leaves_.push_back(random_leaf({3, c, 3, 3}, rng, 0.5));
      leaves_.push_back(random_leaf({3}, rng, 0.2));
    }
    // Infer the flattened width with a throwaway forward pass.
    NoGradGuard guard;
    const Tensor features = trunk(nullptr);
    const std::size_t f = features.dim(1);
    leaves_.push_back(random_leaf({f, 3}, rng, 0.4));
    leaves_.push_back(random_leaf({3}, rng, 0.2));
    labels_ = {static_cast<int>(rng.uniform_index(3)), static_cast<int>(rng.uniform_index(3))};
  }

  std::vector<Tensor>& leaves() { return leaves_; }

  // Loss as a scalar tensor; records on the tape when grad mode is on.
  Tensor loss(double* margin = nullptr) const {
    double m = std::numeric_limits<double>::infinity();
    const Tensor features = trunk(&m);
    const Tensor& w = leaves_[leaves_.size() - 2];
    const Tensor& b = leaves_.back();
    Tensor logits = ops::add(ops::matmul(features, w), b);
    Tensor out;
    switch (head_) {
      case 0: out = ops::cross_entropy(logits, labels_); break;
      case 1: out = ops::sum(ops::entropy(ops::softmax(logits))); break;
      case 2: out = ops::mean(ops::mul(logits, logits)); break;
      case 3: out = ops::sum(ops::log(ops::add_scalar(ops::softmax(logits), 0.1))); break;
      case 4: {
        const Tensor part = ops::slice(logits, 1, 1, 3);
        out = ops::sum(ops::scale(ops::sum_axis(ops::sub(part, ops::broadcast_to(ops::slice(logits, 1, 0, 1), part.shape())), 0), 0.5));
        break;
      }
      default: out = ops::sum(ops::softplus(ops::scale(logits, 0.7))); break;
    }
    if (margin) *margin = m;
    return out;
  }

  double value() const {
    NoGradGuard guard;
    return loss().item();
  }

  // Analytic gradients against central differences for every leaf value.
  // h = 1e-4 balances truncation against round-off for losses of order 10.
  GradCheckResult check(double h = 1e-4) {
    for (auto& leaf : leaves_) {
      leaf.zero_grad();
      leaf.set_requires_grad(true);
    }
    GradTape::current().clear();
    backward(loss());
    GradCheckResult result;
    for (std::size_t li = 0; li < leaves_.size(); ++li) {
      Tensor& leaf = leaves_[li];
      std::vector<double> analytic(leaf.numel(), 0.0);
      if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
      auto values = leaf.mutable_values();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double numeric = central_difference([&] { return value(); }, values[i], h);
        const double err = relative_error(analytic[i], numeric);
        ++result.checked;
        if (err > result.worst) {
          result.worst = err;
          result.worst_where = "leaf " + std::to_string(li) + " index " + std::to_string(i);
        }
      }
    }
    return result;
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static Tensor random_leaf(const Shape& shape, Rng& rng, double scale) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = scale * rng.normal();
    return Tensor(shape, std::move(v));
  }

  static void relu_margin(const Tensor& pre, double* m) {
    if (!m) return;
    for (double v : pre.values()) *m = std::min(*m, std::abs(v));
  }

  static void pool_margin(const Tensor& x, double* m) {
    if (!m) return;
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto v = x.values();
    for (std::size_t b = 0; b < n * c; ++b) {
      for (std::size_t y = 0; y + 1 < h; y += 2) {
        for (std::size_t xx = 0; xx + 1 < w; xx += 2) {
          double win[4] = {v[b * h * w + y * w + xx], v[b * h * w + y * w + xx + 1],
                           v[b * h * w + (y + 1) * w + xx], v[b * h * w + (y + 1) * w + xx + 1]};
          std::sort(win, win + 4);
          *m = std::min(*m, win[3] - win[2]);
        }
      }
    }
  }

  Tensor trunk(double* margin) const {
    Tensor h = leaves_[0];
    if (conv_) {
      h = ops::conv2d(h, leaves_[1], use_bias_ ? std::optional<Tensor>(leaves_[2]) : std::nullopt,
                      {stride_, padding_});
    }
    switch (activation_) {
      case 0: relu_margin(h, margin); h = ops::relu(h); break;
      case 1: h = ops::softplus(h); break;
      case 2: h = ops::exp(ops::scale(h, 0.3)); break;
      default: break;
    }
    if (h.dim(2) >= 2 && h.dim(3) >= 2) {
      if (pool_ == 0) {
        pool_margin(h, margin);
        h = ops::max_pool2d(h, 2, 2);
      } else if (pool_ == 1) {
        h = ops::mean_pool2d(h, 2, 2);
      }
    }
    const std::size_t n = h.dim(0);
    return ops::reshape(h, {n, h.numel() / n});
  }

  std::uint64_t seed_;
  bool conv_ = true;
  std::size_t stride_ = 1, padding_ = 0;
  bool use_bias_ = true;
  int activation_ = 0, pool_ = 0, head_ = 0;
  std::vector<Tensor> leaves_;
  std::vector<int> labels_;
};

// Draws graphs starting at `seed`, skipping any whose kink margin is below
// min_margin, until `count` graphs have been checked.
inline std::vector<std::pair<RandomGraph, GradCheckResult>> audit_random_graphs(std::size_t count,
                                                                               std::uint64_t seed,
                                                                               double min_margin = 1e-3) {
  std::vector<std::pair<RandomGraph, GradCheckResult>> out;
  for (std::uint64_t s = seed; out.size() < count; ++s) {
    RandomGraph g(s);
    double margin = 0.0;
    {
      NoGradGuard guard;
      g.loss(&margin);
    }
    if (margin < min_margin) continue;
    GradCheckResult r = g.check();
    out.emplace_back(std::move(g), r);
  }
  return out;
}

}  // namespace uql::testing
