#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uql/bayes.hpp"
#include "uql/nn.hpp"
#include "uql/rng.hpp"
#include "uql/tensor.hpp"

namespace uql {

enum class MapKind { saliency, bayesian_saliency, uncertainty };
const char* map_kind_name(MapKind kind);

struct SpatialMap {
  MapKind kind = MapKind::saliency;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // height x width, nonnegative
  double cutoff_percent = 100.0;
  std::string sample_id;

  double max() const;
  std::size_t nonzero() const;
};

// Keep-top-percent thresholds per map kind.
inline constexpr double kSaliencyCutoff = 20.0;
inline constexpr double kBayesianSaliencyCutoff = 20.0;
inline constexpr double kUncertaintyCutoff = 10.0;

// Divides by the maximum; an all-zero map is left unchanged.
void normalize_max(SpatialMap& map);
// Zeroes everything below the value of the ceil(c% * size)-th largest pixel.
// c = 100 keeps the map as is; c = 0 zeroes it.
void apply_cutoff(SpatialMap& map, double cutoff_percent);
// Half-pixel-centre bilinear resampling of an h x w grid to H x W.
std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t h, std::size_t w, std::size_t out_h,
                                      std::size_t out_w);

// Grad-cam style map on the activation after the last conv layer:
// alpha_k = spatial mean of d y_max / d A_k, map = relu(sum_k alpha_k A_k),
// upsampled to the input size, max-normalised, then cut off.
// x is a single image [1,C,H,W]. y_max is the predicted-class probability.
SpatialMap saliency_map(const DeterministicModel& model, const Tensor& x, double cutoff_percent = kSaliencyCutoff,
                        const std::string& sample_id = {});

enum class ActivationAverage { mc_mean, last_pass };

// Per pass, alpha_k is additionally scaled by that pass's y_max. Alphas are
// averaged over n weight samples (pass i uses rng.split(i)) and combined with
// either the MC-mean or the last pass's activations.
SpatialMap bayesian_saliency_map(const BayesianModel& model, const Tensor& x, std::size_t n, const Rng& rng,
                                 double cutoff_percent = kBayesianSaliencyCutoff, const std::string& sample_id = {},
                                 ActivationAverage activations = ActivationAverage::mc_mean);

// n frozen weight-noise draws; draw i comes from rng.split(i).
std::vector<WeightNoise> draw_noise_set(const BayesianModel& model, std::size_t n, const Rng& rng);

// Entropy of the mean softmax over the given weight draws, for one image.
double predictive_entropy(const BayesianModel& model, const Tensor& x, std::span<const WeightNoise> noise);
// Gradient of predictive_entropy with respect to every input value [C*H*W].
std::vector<double> predictive_entropy_gradient(const BayesianModel& model, const Tensor& x,
                                                std::span<const WeightNoise> noise);

// |d PU / d x| reduced over channels by max, normalised, cut off.
SpatialMap uncertainty_map(const BayesianModel& model, const Tensor& x, std::size_t n, const Rng& rng,
                           double cutoff_percent = kUncertaintyCutoff, const std::string& sample_id = {});

// Writes <dir>/<sample_id>_<kind>.pgm and, with an underlay (planar RGB of
// the map's size), <dir>/<sample_id>_<kind>.ppm blending a heat colouring at
// 50% over the image. Returns the written paths.
std::vector<std::filesystem::path> render_map(const SpatialMap& map, const std::filesystem::path& dir,
                                              std::optional<std::span<const double>> underlay = std::nullopt);

// Mean map value over pixels where mask is true (and false when inside is
// false).
double masked_mean(const SpatialMap& map, const std::vector<bool>& mask, bool inside = true);

}  // namespace uql
