#include "uql/nn.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "uql/ops.hpp"

namespace uql {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::linear: return "linear";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool2d: return "max_pool2d";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
    case LayerKind::global_mean_pool: return "global_mean_pool";
  }
  return "unknown";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::linear, LayerKind::relu, LayerKind::max_pool2d,
                      LayerKind::dropout, LayerKind::flatten, LayerKind::global_mean_pool}) {
    if (name == layer_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.units = channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::linear(std::size_t features) {
  LayerSpec s;
  s.kind = LayerKind::linear;
  s.units = features;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::max_pool(std::size_t kernel, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::max_pool2d;
  s.kernel = kernel;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::dropout(double ratio) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.dropout_ratio = ratio;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

LayerSpec LayerSpec::global_mean_pool() {
  LayerSpec s;
  s.kind = LayerKind::global_mean_pool;
  return s;
}

ModelSpec default_detector_spec(std::size_t num_classes, double dropout_ratio) {
  ModelSpec spec;
  spec.num_classes = num_classes;
  for (std::size_t channels : {16, 32, 64}) {
    spec.layers.push_back(LayerSpec::conv(channels, 3, 1, 1));
    spec.layers.push_back(LayerSpec::relu());
    spec.layers.push_back(LayerSpec::max_pool(2, 2));
  }
  spec.layers.push_back(LayerSpec::flatten());
  spec.layers.push_back(LayerSpec::linear(128));
  spec.layers.push_back(LayerSpec::relu());
  spec.layers.push_back(LayerSpec::dropout(dropout_ratio));
  spec.layers.push_back(LayerSpec::linear(num_classes));
  return spec;
}

ModelSpec mc_dropout_detector_spec(std::size_t num_classes, double dropout_ratio) {
  ModelSpec spec;
  spec.num_classes = num_classes;
  for (std::size_t channels : {16, 32, 64}) {
    spec.layers.push_back(LayerSpec::conv(channels, 3, 1, 1));
    spec.layers.push_back(LayerSpec::relu());
    spec.layers.push_back(LayerSpec::max_pool(2, 2));
    spec.layers.push_back(LayerSpec::dropout(dropout_ratio));
  }
  spec.layers.push_back(LayerSpec::flatten());
  spec.layers.push_back(LayerSpec::linear(128));
  spec.layers.push_back(LayerSpec::relu());
  spec.layers.push_back(LayerSpec::dropout(dropout_ratio));
  spec.layers.push_back(LayerSpec::linear(num_classes));
  return spec;
}

std::vector<Shape> validate_spec(const ModelSpec& spec) {
  auto fail = [](std::size_t i, const LayerSpec& l, const std::string& why) -> void {
    throw std::invalid_argument("layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) +
                                "): " + why);
  };
  if (spec.num_classes < 2) throw std::invalid_argument("model spec: need at least 2 classes");
  if (spec.layers.empty()) throw std::invalid_argument("model spec: no layers");
  if (spec.input.numel() == 0) throw std::invalid_argument("model spec: empty input shape");

  Shape shape{spec.input.channels, spec.input.height, spec.input.width};
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv2d: {
        if (shape.size() != 3) fail(i, l, "needs a [C,H,W] input, got " + shape_str(shape));
        if (l.units == 0 || l.kernel == 0 || l.stride == 0) fail(i, l, "channels, kernel and stride must be positive");
        if (shape[1] + 2 * l.padding < l.kernel || shape[2] + 2 * l.padding < l.kernel) {
          fail(i, l, "kernel larger than padded input " + shape_str(shape));
        }
        shape = {l.units, (shape[1] + 2 * l.padding - l.kernel) / l.stride + 1,
                 (shape[2] + 2 * l.padding - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::max_pool2d:
        if (shape.size() != 3) fail(i, l, "needs a [C,H,W] input, got " + shape_str(shape));
        if (l.kernel == 0 || l.stride == 0 || l.kernel > shape[1] || l.kernel > shape[2]) {
          fail(i, l, "window does not fit input " + shape_str(shape));
        }
        shape = {shape[0], (shape[1] - l.kernel) / l.stride + 1, (shape[2] - l.kernel) / l.stride + 1};
        break;
      case LayerKind::global_mean_pool:
        if (shape.size() != 3) fail(i, l, "needs a [C,H,W] input, got " + shape_str(shape));
        shape = {shape[0]};
        break;
      case LayerKind::flatten:
        shape = {shape_numel(shape)};
        break;
      case LayerKind::linear:
        if (shape.size() != 1) fail(i, l, "needs a flattened input, got " + shape_str(shape));
        if (l.units == 0) fail(i, l, "output features must be positive");
        shape = {l.units};
        break;
      case LayerKind::dropout:
        if (!(l.dropout_ratio >= 0.0 && l.dropout_ratio < 1.0)) {
          fail(i, l, "dropout ratio must lie in [0,1)");
        }
        break;
      case LayerKind::relu:
        break;
    }
    shapes.push_back(shape);
  }
  if (shape != Shape{spec.num_classes}) {
    throw std::invalid_argument("model spec: final layer outputs " + shape_str(shape) + ", expected [" +
                                std::to_string(spec.num_classes) + "] logits");
  }
  return shapes;
}

std::size_t penultimate_activation_layer(const ModelSpec& spec) {
  std::optional<std::size_t> last_conv;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::conv2d) last_conv = i;
  }
  if (!last_conv) throw std::invalid_argument("model has no conv2d layer for activation maps");
  std::size_t idx = *last_conv;
  if (idx + 1 < spec.layers.size() && spec.layers[idx + 1].kind == LayerKind::relu) ++idx;
  return idx;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string spec_to_text(const ModelSpec& spec) {
  std::ostringstream os;
  os << "input " << spec.input.channels << ' ' << spec.input.height << ' ' << spec.input.width << '\n';
  os << "classes " << spec.num_classes << '\n';
  for (const LayerSpec& l : spec.layers) {
    os << layer_kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::conv2d:
        os << " units=" << l.units << " kernel=" << l.kernel << " stride=" << l.stride
           << " padding=" << l.padding;
        break;
      case LayerKind::linear:
        os << " units=" << l.units;
        break;
      case LayerKind::max_pool2d:
        os << " kernel=" << l.kernel << " stride=" << l.stride;
        break;
      case LayerKind::dropout:
        os << " ratio=" << format_double(l.dropout_ratio);
        break;
      default:
        break;
    }
    os << '\n';
  }
  return os.str();
}

ModelSpec spec_from_text(const std::string& text) {
  ModelSpec spec;
  spec.layers.clear();
  std::istringstream in(text);
  std::string line;
  bool have_input = false;
  bool have_classes = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "input") {
      ls >> spec.input.channels >> spec.input.height >> spec.input.width;
      if (!ls) throw std::invalid_argument("model spec text: bad input line '" + line + "'");
      have_input = true;
      continue;
    }
    if (head == "classes") {
      ls >> spec.num_classes;
      if (!ls) throw std::invalid_argument("model spec text: bad classes line '" + line + "'");
      have_classes = true;
      continue;
    }
    LayerSpec l;
    l.kind = parse_layer_kind(head);
    std::string kv;
    while (ls >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("model spec text: bad field '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      const std::string value = kv.substr(eq + 1);
      if (key == "units") l.units = std::stoul(value);
      else if (key == "kernel") l.kernel = std::stoul(value);
      else if (key == "stride") l.stride = std::stoul(value);
      else if (key == "padding") l.padding = std::stoul(value);
      else if (key == "ratio") l.dropout_ratio = std::stod(value);
      else throw std::invalid_argument("model spec text: unknown field '" + key + "'");
    }
    spec.layers.push_back(l);
  }
  if (!have_input || !have_classes) throw std::invalid_argument("model spec text: missing input or classes line");
  validate_spec(spec);
  return spec;
}

std::vector<Tensor> DeterministicModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : params) {
    out.push_back(p.weight);
    out.push_back(p.bias);
  }
  return out;
}

DeterministicModel DeterministicModel::clone() const {
  DeterministicModel copy;
  copy.spec = spec;
  for (const auto& p : params) {
    LayerWeights w{p.weight.clone(), p.bias.clone()};
    w.weight.set_requires_grad(p.weight.requires_grad());
    w.bias.set_requires_grad(p.bias.requires_grad());
    copy.params.push_back(std::move(w));
  }
  return copy;
}

void DeterministicModel::set_requires_grad(bool on) {
  for (auto& p : params) {
    p.weight.set_requires_grad(on);
    p.bias.set_requires_grad(on);
  }
}

DeterministicModel build_model(const ModelSpec& spec, Rng& rng) {
  const std::vector<Shape> shapes = validate_spec(spec);
  DeterministicModel model;
  model.spec = spec;
  Shape in_shape{spec.input.channels, spec.input.height, spec.input.width};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::conv2d) {
      const std::size_t fan_in = in_shape[0] * l.kernel * l.kernel;
      Tensor w({l.units, in_shape[0], l.kernel, l.kernel});
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& v : w.mutable_values()) v = sd * rng.normal();
      model.params.push_back({w, Tensor({l.units})});
    } else if (l.kind == LayerKind::linear) {
      const std::size_t fan_in = in_shape[0];
      Tensor w({fan_in, l.units});
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& v : w.mutable_values()) v = sd * rng.normal();
      model.params.push_back({w, Tensor({l.units})});
    }
    in_shape = shapes[i];
  }
  model.set_requires_grad(true);
  return model;
}

Tensor dropout_forward(const Tensor& x, double dr, DropoutMode mode, Rng* rng) {
  if (!(dr >= 0.0 && dr < 1.0)) throw std::invalid_argument("dropout: ratio must lie in [0,1)");
  if (mode == DropoutMode::off || dr == 0.0) return x;
  if (rng == nullptr) throw std::invalid_argument("dropout: active mode needs an rng");
  const double keep_scale = 1.0 / (1.0 - dr);
  Tensor mask(x.shape());
  for (double& m : mask.mutable_values()) m = rng->uniform() < dr ? 0.0 : keep_scale;
  return ops::mul(x, mask);
}

Tensor forward_layers(const ModelSpec& spec, const Tensor& x, const WeightSource& weights,
                      const ForwardOptions& options) {
  if (x.rank() != 4 || x.dim(1) != spec.input.channels || x.dim(2) != spec.input.height ||
      x.dim(3) != spec.input.width) {
    throw std::invalid_argument("forward: input shape " + shape_str(x.shape()) + " does not match model input [N," +
                                std::to_string(spec.input.channels) + "," + std::to_string(spec.input.height) +
                                "," + std::to_string(spec.input.width) + "]");
  }
  const std::size_t capture_at =
      options.capture != nullptr ? penultimate_activation_layer(spec) : spec.layers.size();
  const std::size_t batch = x.dim(0);
  Tensor h = ops::add_scalar(x, -0.5);
  std::size_t param_index = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv2d: {
        LayerWeights w = weights(param_index++);
        h = ops::conv2d(h, w.weight, w.bias, {l.stride, l.padding});
        break;
      }
      case LayerKind::linear: {
        LayerWeights w = weights(param_index++);
        h = ops::add(ops::matmul(h, w.weight), w.bias);
        break;
      }
      case LayerKind::relu:
        h = ops::relu(h);
        break;
      case LayerKind::max_pool2d:
        h = ops::max_pool2d(h, l.kernel, l.stride);
        break;
      case LayerKind::global_mean_pool:
        h = ops::reshape(ops::mean_pool2d(h, h.dim(2), 1), {batch, h.dim(1)});
        break;
      case LayerKind::flatten:
        h = ops::reshape(h, {batch, h.numel() / std::max<std::size_t>(batch, 1)});
        break;
      case LayerKind::dropout:
        h = dropout_forward(h, l.dropout_ratio, options.dropout, options.rng);
        break;
    }
    if (i == capture_at) options.capture->activation = h;
  }
  return h;
}

Tensor forward(const DeterministicModel& model, const Tensor& x, const ForwardOptions& options) {
  return forward_layers(
      model.spec, x, [&](std::size_t i) { return model.params.at(i); }, options);
}

Tensor predict_deterministic(const DeterministicModel& model, const Tensor& batch) {
  NoGradGuard guard;
  return ops::softmax(forward(model, batch));
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace uql
