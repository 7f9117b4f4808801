#include "uql/maps.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "uql/image_io.hpp"
#include "uql/ops.hpp"

namespace uql {

const char* map_kind_name(MapKind kind) {
  switch (kind) {
    case MapKind::saliency: return "saliency";
    case MapKind::bayesian_saliency: return "bayesian_saliency";
    case MapKind::uncertainty: return "uncertainty";
  }
  return "unknown";
}

double SpatialMap::max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

std::size_t SpatialMap::nonzero() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](double v) { return v != 0.0; }));
}

void normalize_max(SpatialMap& map) {
  const double m = map.max();
  if (m <= 0.0) return;
  for (double& v : map.values) v /= m;
}

void apply_cutoff(SpatialMap& map, double cutoff_percent) {
  if (!(cutoff_percent >= 0.0 && cutoff_percent <= 100.0)) {
    throw std::invalid_argument("cutoff percent must lie in [0, 100]");
  }
  map.cutoff_percent = cutoff_percent;
  const std::size_t n = map.values.size();
  const auto keep = static_cast<std::size_t>(std::ceil(cutoff_percent / 100.0 * static_cast<double>(n) - 1e-9));
  if (keep >= n) return;
  if (keep == 0) {
    std::fill(map.values.begin(), map.values.end(), 0.0);
    return;
  }
  std::vector<double> sorted = map.values;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(keep - 1), sorted.end(), std::greater<>());
  const double threshold = sorted[keep - 1];
  for (double& v : map.values) {
    if (v < threshold) v = 0.0;
  }
}

std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t h, std::size_t w, std::size_t out_h,
                                      std::size_t out_w) {
  if (src.size() != h * w || h == 0 || w == 0) throw std::invalid_argument("upsample_bilinear: size mismatch");
  std::vector<double> out(out_h * out_w);
  auto coord = [](std::size_t dst, std::size_t in, std::size_t out_n) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, h, out_h);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, w, out_w);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
      const double bottom = (1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
      out[y * out_w + x] = (1 - fy) * top + fy * bottom;
    }
  }
  return out;
}

namespace {

void check_single(const Tensor& x, const ModelSpec& spec) {
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw std::invalid_argument("maps: expected a single image [1,C,H,W], got " + shape_str(x.shape()));
  }
  if (x.dim(2) != spec.input.height || x.dim(3) != spec.input.width) {
    throw std::invalid_argument("maps: image size does not match the model input");
  }
}

struct CamPass {
  std::vector<double> activation;  // K x h x w
  std::vector<double> alpha;       // K
  std::size_t channels = 0, h = 0, w = 0;
};

// One forward/backward pass: activation maps plus spatially pooled gradients
// of the predicted-class probability, optionally scaled by that probability.
CamPass cam_pass(const std::function<Tensor(const Tensor&, ActivationCapture*)>& logits_of, const Tensor& image,
                 bool scale_by_confidence) {
  Tensor x = image.clone();
  x.set_requires_grad(true);
  GradTape::current().clear();
  ActivationCapture capture;
  const Tensor probs = ops::softmax(logits_of(x, &capture));
  const std::size_t pred = argmax(probs.values());
  const double y_max = probs.values()[pred];
  const Tensor target = ops::sum(ops::slice(probs, 1, pred, pred + 1));
  backward(target);

  const Tensor& a = *capture.activation;
  CamPass out;
  out.channels = a.dim(1);
  out.h = a.dim(2);
  out.w = a.dim(3);
  const std::size_t plane = out.h * out.w;
  out.activation.assign(a.values().begin(), a.values().end());
  out.alpha.assign(out.channels, 0.0);
  const auto grad = a.grad();
  if (!grad.empty()) {
    for (std::size_t k = 0; k < out.channels; ++k) {
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += grad[k * plane + p];
      out.alpha[k] = s / static_cast<double>(plane) * (scale_by_confidence ? y_max : 1.0);
    }
  }
  return out;
}

SpatialMap combine(const std::vector<double>& alpha, const std::vector<double>& activation, std::size_t channels,
                   std::size_t h, std::size_t w, const ModelSpec& spec, MapKind kind, double cutoff,
                   const std::string& sample_id) {
  const std::size_t plane = h * w;
  std::vector<double> low(plane, 0.0);
  for (std::size_t k = 0; k < channels; ++k) {
    for (std::size_t p = 0; p < plane; ++p) low[p] += alpha[k] * activation[k * plane + p];
  }
  for (double& v : low) v = std::max(v, 0.0);
  SpatialMap map;
  map.kind = kind;
  map.height = spec.input.height;
  map.width = spec.input.width;
  map.values = upsample_bilinear(low, h, w, map.height, map.width);
  for (double& v : map.values) v = std::max(v, 0.0);
  map.sample_id = sample_id;
  normalize_max(map);
  apply_cutoff(map, cutoff);
  return map;
}

}  // namespace

SpatialMap saliency_map(const DeterministicModel& model, const Tensor& x, double cutoff_percent,
                        const std::string& sample_id) {
  check_single(x, model.spec);
  penultimate_activation_layer(model.spec);
  DeterministicModel frozen = model.clone();
  frozen.set_requires_grad(false);
  const CamPass pass = cam_pass(
      [&](const Tensor& in, ActivationCapture* cap) {
        ForwardOptions opts;
        opts.capture = cap;
        return forward(frozen, in, opts);
      },
      x, false);
  return combine(pass.alpha, pass.activation, pass.channels, pass.h, pass.w, model.spec, MapKind::saliency,
                 cutoff_percent, sample_id);
}

SpatialMap bayesian_saliency_map(const BayesianModel& model, const Tensor& x, std::size_t n, const Rng& rng,
                                 double cutoff_percent, const std::string& sample_id, ActivationAverage activations) {
  check_single(x, model.spec);
  penultimate_activation_layer(model.spec);
  if (n == 0) throw std::invalid_argument("bayesian_saliency_map: n must be at least 1");
  BayesianModel frozen = model.clone();
  frozen.set_requires_grad(false);
  std::vector<double> alpha, activation;
  std::size_t channels = 0, h = 0, w = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Rng pass_rng = rng.split(i);
    const WeightNoise noise = draw_weight_noise(frozen, pass_rng);
    const CamPass pass = cam_pass(
        [&](const Tensor& in, ActivationCapture* cap) { return bayesian_logits(frozen, in, &noise, cap); }, x, true);
    if (i == 0) {
      channels = pass.channels;
      h = pass.h;
      w = pass.w;
      alpha.assign(pass.alpha.size(), 0.0);
      activation.assign(pass.activation.size(), 0.0);
    }
    for (std::size_t k = 0; k < alpha.size(); ++k) alpha[k] += pass.alpha[k] / static_cast<double>(n);
    if (activations == ActivationAverage::mc_mean) {
      for (std::size_t j = 0; j < activation.size(); ++j) activation[j] += pass.activation[j] / static_cast<double>(n);
    } else if (i + 1 == n) {
      activation = pass.activation;
    }
  }
  return combine(alpha, activation, channels, h, w, model.spec, MapKind::bayesian_saliency, cutoff_percent,
                 sample_id);
}

std::vector<WeightNoise> draw_noise_set(const BayesianModel& model, std::size_t n, const Rng& rng) {
  std::vector<WeightNoise> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.split(i);
    out.push_back(draw_weight_noise(model, r));
  }
  return out;
}

namespace {

Tensor entropy_of_mean(const BayesianModel& model, const Tensor& x, std::span<const WeightNoise> noise) {
  if (noise.empty()) throw std::invalid_argument("predictive_entropy: need at least one weight draw");
  Tensor total;
  for (std::size_t i = 0; i < noise.size(); ++i) {
    const Tensor probs = ops::softmax(bayesian_logits(model, x, &noise[i]));
    total = i == 0 ? probs : ops::add(total, probs);
  }
  return ops::sum(ops::entropy(ops::scale(total, 1.0 / static_cast<double>(noise.size()))));
}

}  // namespace

double predictive_entropy(const BayesianModel& model, const Tensor& x, std::span<const WeightNoise> noise) {
  check_single(x, model.spec);
  NoGradGuard guard;
  return entropy_of_mean(model, x, noise).item();
}

std::vector<double> predictive_entropy_gradient(const BayesianModel& model, const Tensor& x,
                                                std::span<const WeightNoise> noise) {
  check_single(x, model.spec);
  BayesianModel frozen = model.clone();
  frozen.set_requires_grad(false);
  Tensor in = x.clone();
  in.set_requires_grad(true);
  GradTape::current().clear();
  const Tensor pu = entropy_of_mean(frozen, in, noise);
  backward(pu);
  if (!in.has_grad()) return std::vector<double>(in.numel(), 0.0);
  return {in.grad().begin(), in.grad().end()};
}

SpatialMap uncertainty_map(const BayesianModel& model, const Tensor& x, std::size_t n, const Rng& rng,
                           double cutoff_percent, const std::string& sample_id) {
  if (n == 0) throw std::invalid_argument("uncertainty_map: n must be at least 1");
  const std::vector<WeightNoise> noise = draw_noise_set(model, n, rng);
  const std::vector<double> grad = predictive_entropy_gradient(model, x, noise);
  SpatialMap map;
  map.kind = MapKind::uncertainty;
  map.height = x.dim(2);
  map.width = x.dim(3);
  map.sample_id = sample_id;
  const std::size_t plane = map.height * map.width;
  map.values.assign(plane, 0.0);
  for (std::size_t c = 0; c < x.dim(1); ++c) {
    for (std::size_t p = 0; p < plane; ++p) map.values[p] = std::max(map.values[p], std::abs(grad[c * plane + p]));
  }
  normalize_max(map);
  apply_cutoff(map, cutoff_percent);
  return map;
}

std::vector<std::filesystem::path> render_map(const SpatialMap& map, const std::filesystem::path& dir,
                                              std::optional<std::span<const double>> underlay) {
  const std::size_t plane = map.height * map.width;
  if (map.values.size() != plane) throw std::invalid_argument("render_map: map values do not match its size");
  std::filesystem::create_directories(dir);
  const std::string stem = (map.sample_id.empty() ? std::string("map") : map.sample_id) + "_" + map_kind_name(map.kind);
  std::vector<std::filesystem::path> written;
  written.push_back(dir / (stem + ".pgm"));
  write_pgm(written.back(), map.width, map.height, map.values);
  if (underlay) {
    if (underlay->size() != 3 * plane) throw std::invalid_argument("render_map: underlay must be planar RGB of map size");
    std::vector<double> blended(3 * plane);
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = std::clamp(map.values[p], 0.0, 1.0);
      const double heat[3] = {std::clamp(1.5 - std::abs(4 * v - 3), 0.0, 1.0),
                              std::clamp(1.5 - std::abs(4 * v - 2), 0.0, 1.0),
                              std::clamp(1.5 - std::abs(4 * v - 1), 0.0, 1.0)};
      for (std::size_t c = 0; c < 3; ++c) blended[c * plane + p] = 0.5 * (*underlay)[c * plane + p] + 0.5 * heat[c];
    }
    written.push_back(dir / (stem + ".ppm"));
    write_ppm(written.back(), map.width, map.height, blended);
  }
  return written;
}

double masked_mean(const SpatialMap& map, const std::vector<bool>& mask, bool inside) {
  if (mask.size() != map.values.size()) throw std::invalid_argument("masked_mean: mask size mismatch");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask[p] == inside) {
      total += map.values[p];
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace uql
