#include "uql/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace uql::ops {

namespace {

using detail::TensorData;
using DataPtr = std::shared_ptr<TensorData>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_error(OpKind kind, const std::string& detail,
                              std::initializer_list<Shape> shapes) {
  std::ostringstream os;
  os << op_name(kind) << ": " << detail << " (shapes";
  for (const Shape& s : shapes) os << ' ' << shape_str(s);
  os << ')';
  throw std::invalid_argument(os.str());
}

Tensor make_output(Shape shape, std::vector<double> values) {
  auto data = std::make_shared<TensorData>();
  data->shape = std::move(shape);
  data->values = std::move(values);
  return Tensor(std::move(data));
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_recording_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->requires_grad()) return true;
  }
  return false;
}

void record(OpKind kind, std::vector<DataPtr> inputs, const Tensor& out,
            GradTape::BackwardFn fn) {
  out.data_ptr()->requires_grad = true;
  out.data_ptr()->is_leaf = false;
  GradTape::current().record(GradTape::Node{kind, std::move(inputs), out.data_ptr(), std::move(fn)});
}

// Offset of every output element in an input broadcast to out_shape.
std::shared_ptr<std::vector<std::size_t>> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t in_axis = in.size() - 1 - i;
    const std::size_t out_axis = rank - 1 - i;
    strides[out_axis] = in[in_axis] == 1 ? 0 : stride;
    stride *= in[in_axis];
  }
  const std::size_t n = shape_numel(out);
  auto offsets = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> coord(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*offsets)[i] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++coord[axis];
      offset += strides[axis];
      if (coord[axis] < out[axis]) break;
      offset -= strides[axis] * coord[axis];
      coord[axis] = 0;
    }
  }
  return offsets;
}

template <typename Forward, typename GradA, typename GradB>
Tensor binary_broadcast(OpKind kind, const Tensor& a, const Tensor& b, Forward f, GradA ga,
                        GradB gb) {
  Shape out_shape;
  try {
    out_shape = broadcast_shape(a.shape(), b.shape());
  } catch (const std::invalid_argument&) {
    shape_error(kind, "shapes are not broadcast-compatible", {a.shape(), b.shape()});
  }
  const std::size_t n = shape_numel(out_shape);
  std::shared_ptr<std::vector<std::size_t>> ia;
  std::shared_ptr<std::vector<std::size_t>> ib;
  if (a.shape() != out_shape) ia = broadcast_offsets(a.shape(), out_shape);
  if (b.shape() != out_shape) ib = broadcast_offsets(b.shape(), out_shape);

  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t oa = ia ? (*ia)[i] : i;
    const std::size_t ob = ib ? (*ib)[i] : i;
    out[i] = f(av[oa], bv[ob]);
  }
  Tensor result = make_output(out_shape, std::move(out));
  if (wants_grad({&a, &b})) {
    DataPtr pa = a.data_ptr();
    DataPtr pb = b.data_ptr();
    record(kind, {pa, pb}, result, [pa, pb, ia, ib, ga, gb](std::span<const double> g) {
      const std::size_t count = g.size();
      if (pa->requires_grad) {
        auto dst = pa->grad_buffer();
        for (std::size_t i = 0; i < count; ++i) {
          const std::size_t oa = ia ? (*ia)[i] : i;
          const std::size_t ob = ib ? (*ib)[i] : i;
          dst[oa] += ga(g[i], pa->values[oa], pb->values[ob]);
        }
      }
      if (pb->requires_grad) {
        auto dst = pb->grad_buffer();
        for (std::size_t i = 0; i < count; ++i) {
          const std::size_t oa = ia ? (*ia)[i] : i;
          const std::size_t ob = ib ? (*ib)[i] : i;
          dst[ob] += gb(g[i], pa->values[oa], pb->values[ob]);
        }
      }
    });
  }
  return result;
}

template <typename Forward, typename Derivative>
Tensor unary(OpKind kind, const Tensor& x, Forward f, Derivative df) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tensor result = make_output(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    DataPtr po = result.data_ptr();
    record(kind, {px}, result, [px, po, df](std::span<const double> g) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * df(px->values[i], po->values[i]);
    });
  }
  return result;
}

void require_rank(OpKind kind, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    shape_error(kind, "expected rank " + std::to_string(rank), {x.shape()});
  }
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " +
                                  shape_str(b));
    }
    out[rank - 1 - i] = da == 1 ? db : da;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      OpKind::add, a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      OpKind::add, a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      OpKind::mul, a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      OpKind::scale, a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      OpKind::add, a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      OpKind::relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      OpKind::exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) {
      throw std::domain_error("log: input must be strictly positive, got " + std::to_string(v));
    }
  }
  return unary(
      OpKind::log, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      OpKind::softplus, x,
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error(OpKind::matmul, "expected [m,k] x [k,n]", {a.shape(), b.shape()});
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  Tensor result = make_output({a.dim(0), b.dim(1)}, std::move(out));
  if (wants_grad({&a, &b})) {
    DataPtr pa = a.data_ptr();
    DataPtr pb = b.data_ptr();
    record(OpKind::matmul, {pa, pb}, result, [pa, pb, m, k, n](std::span<const double> g) {
      ConstMap gm(g.data(), m, n);
      if (pa->requires_grad) {
        MutMap(pa->grad_buffer().data(), m, k).noalias() += gm * ConstMap(pb->values.data(), k, n).transpose();
      }
      if (pb->requires_grad) {
        MutMap(pb->grad_buffer().data(), k, n).noalias() += ConstMap(pa->values.data(), m, k).transpose() * gm;
      }
    });
  }
  return result;
}

namespace {

struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w, out_c, kh, kw, out_h, out_w, stride, pad;
  std::size_t patch() const { return in_c * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    const double* plane = img + c * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * positions;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(ih) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.in_w)) ? 0.0 : src[iw];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    double* plane = img + c * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * positions;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
          double* dst = plane + static_cast<std::size_t>(ih) * g.in_w;
          const double* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.in_w)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias,
              Conv2dParams params) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
    shape_error(OpKind::conv2d, "expected x [N,C,H,W] and weight [O,C,kh,kw]",
                {x.shape(), weight.shape()});
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(0))) {
    shape_error(OpKind::conv2d, "bias must be [O]", {weight.shape(), bias->shape()});
  }
  if (params.stride == 0) shape_error(OpKind::conv2d, "stride must be positive", {x.shape()});
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.in_c = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_c = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = params.stride;
  g.pad = params.padding;
  if (g.in_h + 2 * g.pad < g.kh || g.in_w + 2 * g.pad < g.kw) {
    shape_error(OpKind::conv2d, "kernel larger than padded input", {x.shape(), weight.shape()});
  }
  g.out_h = (g.in_h + 2 * g.pad - g.kh) / g.stride + 1;
  g.out_w = (g.in_w + 2 * g.pad - g.kw) / g.stride + 1;

  const bool grad = wants_grad({&x, &weight, bias ? &*bias : nullptr});
  const std::size_t patch = g.patch();
  const std::size_t positions = g.positions();
  const std::size_t in_size = g.in_c * g.in_h * g.in_w;
  const std::size_t out_size = g.out_c * positions;

  auto saved_cols = std::make_shared<std::vector<double>>();
  std::vector<double> scratch;
  if (grad) {
    saved_cols->resize(g.batch * patch * positions);
  } else {
    scratch.resize(patch * positions);
  }
  std::vector<double> out(g.batch * out_size);
  ConstMap w(weight.values().data(), static_cast<Eigen::Index>(g.out_c), static_cast<Eigen::Index>(patch));
  for (std::size_t n = 0; n < g.batch; ++n) {
    double* cols = grad ? saved_cols->data() + n * patch * positions : scratch.data();
    im2col(x.values().data() + n * in_size, g, cols);
    MutMap o(out.data() + n * out_size, static_cast<Eigen::Index>(g.out_c), static_cast<Eigen::Index>(positions));
    o.noalias() = w * ConstMap(cols, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(positions));
    if (bias) {
      const auto bv = bias->values();
      for (std::size_t c = 0; c < g.out_c; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bv[c];
    }
  }
  Tensor result = make_output({g.batch, g.out_c, g.out_h, g.out_w}, std::move(out));
  if (grad) {
    DataPtr px = x.data_ptr();
    DataPtr pw = weight.data_ptr();
    DataPtr pb = bias ? bias->data_ptr() : nullptr;
    std::vector<DataPtr> inputs{px, pw};
    if (pb) inputs.push_back(pb);
    record(OpKind::conv2d, std::move(inputs), result, [px, pw, pb, saved_cols, g](std::span<const double> go) {
      const std::size_t patch = g.patch();
      const std::size_t positions = g.positions();
      const std::size_t in_size = g.in_c * g.in_h * g.in_w;
      const std::size_t out_size = g.out_c * positions;
      const auto oc = static_cast<Eigen::Index>(g.out_c);
      const auto pk = static_cast<Eigen::Index>(patch);
      const auto pp = static_cast<Eigen::Index>(positions);
      ConstMap w(pw->values.data(), oc, pk);
      std::vector<double> gcols(px->requires_grad ? patch * positions : 0);
      for (std::size_t n = 0; n < g.batch; ++n) {
        ConstMap gout(go.data() + n * out_size, oc, pp);
        ConstMap cols(saved_cols->data() + n * patch * positions, pk, pp);
        if (pw->requires_grad) {
          MutMap(pw->grad_buffer().data(), oc, pk).noalias() += gout * cols.transpose();
        }
        if (pb && pb->requires_grad) {
          // Plain loop: Eigen's vectorized sum peels by address alignment,
          // which makes the rounding depend on where the buffer landed.
          auto gb = pb->grad_buffer();
          for (std::size_t c = 0; c < g.out_c; ++c) {
            const double* row = go.data() + n * out_size + c * positions;
            double acc = 0.0;
            for (std::size_t p = 0; p < positions; ++p) acc += row[p];
            gb[c] += acc;
          }
        }
        if (px->requires_grad) {
          MutMap(gcols.data(), pk, pp).noalias() = w.transpose() * gout;
          col2im_add(gcols.data(), g, px->grad_buffer().data() + n * in_size);
        }
      }
    });
  }
  return result;
}

namespace {

struct PoolGeometry {
  std::size_t batch, channels, in_h, in_w, out_h, out_w, kernel, stride;
};

PoolGeometry pool_geometry(OpKind kind, const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank(kind, x, 4);
  if (kernel == 0 || stride == 0 || kernel > x.dim(2) || kernel > x.dim(3)) {
    shape_error(kind, "kernel " + std::to_string(kernel) + " stride " + std::to_string(stride) +
                          " do not fit the input",
                {x.shape()});
  }
  PoolGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), 0, 0, kernel, stride};
  g.out_h = (g.in_h - kernel) / stride + 1;
  g.out_w = (g.in_w - kernel) / stride + 1;
  return g;
}

}  // namespace

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  const PoolGeometry g = pool_geometry(OpKind::max_pool2d, x, kernel, stride);
  const std::size_t planes = g.batch * g.channels;
  const auto xv = x.values();
  std::vector<double> out(planes * g.out_h * g.out_w);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * g.in_h * g.in_w;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        std::size_t best = base + oh * g.stride * g.in_w + ow * g.stride;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
          for (std::size_t kj = 0; kj < g.kernel; ++kj) {
            const std::size_t idx = base + (oh * g.stride + ki) * g.in_w + ow * g.stride + kj;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (p * g.out_h + oh) * g.out_w + ow;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  }
  Tensor result = make_output({g.batch, g.channels, g.out_h, g.out_w}, std::move(out));
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    record(OpKind::max_pool2d, {px}, result, [px, argmax](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      for (std::size_t o = 0; o < go.size(); ++o) dst[(*argmax)[o]] += go[o];
    });
  }
  return result;
}

Tensor mean_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  const PoolGeometry g = pool_geometry(OpKind::mean_pool2d, x, kernel, stride);
  const std::size_t planes = g.batch * g.channels;
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  const auto xv = x.values();
  std::vector<double> out(planes * g.out_h * g.out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * g.in_h * g.in_w;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        double acc = 0.0;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
          for (std::size_t kj = 0; kj < g.kernel; ++kj) {
            acc += xv[base + (oh * g.stride + ki) * g.in_w + ow * g.stride + kj];
          }
        }
        out[(p * g.out_h + oh) * g.out_w + ow] = acc * inv;
      }
    }
  }
  Tensor result = make_output({g.batch, g.channels, g.out_h, g.out_w}, std::move(out));
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    record(OpKind::mean_pool2d, {px}, result, [px, g, inv](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      const std::size_t planes = g.batch * g.channels;
      for (std::size_t p = 0; p < planes; ++p) {
        const std::size_t base = p * g.in_h * g.in_w;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const double v = go[(p * g.out_h + oh) * g.out_w + ow] * inv;
            for (std::size_t ki = 0; ki < g.kernel; ++ki) {
              for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                dst[base + (oh * g.stride + ki) * g.in_w + ow * g.stride + kj] += v;
              }
            }
          }
        }
      }
    });
  }
  return result;
}

namespace {

void softmax_rows(std::span<const double> z, std::size_t rows, std::size_t cols, std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = z.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  require_rank(OpKind::softmax, logits, 2);
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  if (cols == 0) shape_error(OpKind::softmax, "need at least one column", {logits.shape()});
  std::vector<double> out(rows * cols);
  softmax_rows(logits.values(), rows, cols, out);
  Tensor result = make_output(logits.shape(), std::move(out));
  if (wants_grad({&logits})) {
    DataPtr px = logits.data_ptr();
    DataPtr py = result.data_ptr();
    record(OpKind::softmax, {px}, result, [px, py, rows, cols](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = py->values.data() + r * cols;
        const double* g = go.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += y[c] * (g[c] - dot);
      }
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(OpKind::cross_entropy, logits, 2);
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  if (labels.size() != rows || rows == 0) {
    shape_error(OpKind::cross_entropy,
                "need one label per row, got " + std::to_string(labels.size()) + " labels",
                {logits.shape()});
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " outside [0," +
                                  std::to_string(cols) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(rows * cols);
  softmax_rows(logits.values(), rows, cols, *probs);
  const auto z = logits.values();
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = z.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(row[c] - mx);
    loss += mx + std::log(total) - row[labels[r]];
  }
  loss /= static_cast<double>(rows);
  Tensor result = make_output({}, {loss});
  if (wants_grad({&logits})) {
    DataPtr px = logits.data_ptr();
    auto targets = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    record(OpKind::cross_entropy, {px}, result, [px, probs, targets, rows, cols](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      const double s = go[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double onehot = static_cast<int>(c) == (*targets)[r] ? 1.0 : 0.0;
          dst[r * cols + c] += s * ((*probs)[r * cols + c] - onehot);
        }
      }
    });
  }
  return result;
}

Tensor entropy(const Tensor& probs) {
  require_rank(OpKind::entropy, probs, 2);
  const std::size_t rows = probs.dim(0);
  const std::size_t cols = probs.dim(1);
  const auto p = probs.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double h = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = p[r * cols + c];
      if (v > 0.0) h -= v * std::log(v);
    }
    out[r] = h;
  }
  Tensor result = make_output({rows}, std::move(out));
  if (wants_grad({&probs})) {
    DataPtr px = probs.data_ptr();
    record(OpKind::entropy, {px}, result, [px, rows, cols](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double v = px->values[r * cols + c];
          if (v > 0.0) dst[r * cols + c] -= go[r] * (std::log(v) + 1.0);
        }
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor result = make_output({}, {total});
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    record(OpKind::sum, {px}, result, [px](std::span<const double> go) {
      if (!px->requires_grad) return;
      for (double& d : px->grad_buffer()) d += go[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) shape_error(OpKind::mean, "mean of an empty tensor", {x.shape()});
  const double inv = 1.0 / static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor result = make_output({}, {total * inv});
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    record(OpKind::mean, {px}, result, [px, inv](std::span<const double> go) {
      if (!px->requires_grad) return;
      for (double& d : px->grad_buffer()) d += go[0] * inv;
    });
  }
  return result;
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error(OpKind::sum, "axis " + std::to_string(axis) + " out of range", {x.shape()});
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  const auto xv = x.values();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < len; ++j) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + j) * inner + i];
    }
  }
  Tensor result = make_output(out_shape, std::move(out));
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    record(OpKind::sum, {px}, result, [px, outer, len, inner](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < len; ++j) {
          for (std::size_t i = 0; i < inner; ++i) dst[(o * len + j) * inner + i] += go[o * inner + i];
        }
      }
    });
  }
  return result;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  Shape out_shape;
  try {
    out_shape = broadcast_shape(x.shape(), shape);
  } catch (const std::invalid_argument&) {
    shape_error(OpKind::broadcast, "cannot broadcast", {x.shape(), shape});
  }
  if (out_shape != shape) shape_error(OpKind::broadcast, "cannot broadcast", {x.shape(), shape});
  auto offsets = broadcast_offsets(x.shape(), shape);
  const auto xv = x.values();
  std::vector<double> out(offsets->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*offsets)[i]];
  Tensor result = make_output(shape, std::move(out));
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    record(OpKind::broadcast, {px}, result, [px, offsets](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) dst[(*offsets)[i]] += go[i];
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_error(OpKind::reshape, "element count differs", {x.shape(), shape});
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  Tensor result = make_output(shape, std::move(out));
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    record(OpKind::reshape, {px}, result, [px](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) dst[i] += go[i];
    });
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    shape_error(OpKind::slice,
                "invalid range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                    std::to_string(axis),
                {x.shape()});
  }
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  const std::size_t width = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = width;
  const auto xv = x.values();
  std::vector<double> out(outer * width * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + (o * len + begin) * inner, width * inner, out.data() + o * width * inner);
  }
  Tensor result = make_output(out_shape, std::move(out));
  if (wants_grad({&x})) {
    DataPtr px = x.data_ptr();
    record(OpKind::slice, {px}, result, [px, outer, len, inner, begin, width](std::span<const double> go) {
      if (!px->requires_grad) return;
      auto dst = px->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < width * inner; ++i) {
          dst[(o * len + begin) * inner + i] += go[o * width * inner + i];
        }
      }
    });
  }
  return result;
}

Tensor sample_gaussian(Rng& rng, const Shape& shape) {
  Tensor out(shape);
  rng.fill_normal(out.mutable_values());
  return out;
}

}  // namespace uql::ops
