#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uql/rng.hpp"
#include "uql/tensor.hpp"

namespace uql {

enum class LayerKind { conv2d, linear, relu, max_pool2d, dropout, flatten, global_mean_pool };

const char* layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;  // conv output channels or linear output features
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double dropout_ratio = 0.0;

  static LayerSpec conv(std::size_t channels, std::size_t kernel, std::size_t stride = 1,
                        std::size_t padding = 0);
  static LayerSpec linear(std::size_t features);
  static LayerSpec relu();
  static LayerSpec max_pool(std::size_t kernel, std::size_t stride);
  static LayerSpec dropout(double ratio);
  static LayerSpec flatten();
  static LayerSpec global_mean_pool();

  bool parametric() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }
  bool operator==(const LayerSpec&) const = default;
};

struct ImageShape {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t numel() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 2;
  ImageShape input;

  bool operator==(const ModelSpec&) const = default;
};

// 3 x {conv3x3 -> relu -> maxpool2x2} with 16/32/64 channels, then
// flatten -> linear(128) -> relu -> dropout(dr) -> linear(K) on 3x32x32.
ModelSpec default_detector_spec(std::size_t num_classes = 2, double dropout_ratio = 0.2);

// Same trunk with dropout after every conv block and before the classifier
// head, used for MC-dropout experiments where the masks act as posterior
// samples. The input image itself is never dropped.
ModelSpec mc_dropout_detector_spec(std::size_t num_classes = 2, double dropout_ratio = 0.2);

// Per-layer output shapes (excluding batch). Throws std::invalid_argument
// naming the offending layer when shapes do not compose.
std::vector<Shape> validate_spec(const ModelSpec& spec);

// Index of the last conv2d layer's trailing relu; its output is the
// activation map used by grad-cam style saliency. Throws if there is no conv.
std::size_t penultimate_activation_layer(const ModelSpec& spec);

std::string spec_to_text(const ModelSpec& spec);
ModelSpec spec_from_text(const std::string& text);

// Weight and bias of one conv/linear layer. Conv weights are [O,C,k,k];
// linear weights are [in,out] so a batch multiplies as x * W.
struct LayerWeights {
  Tensor weight;
  Tensor bias;
};

struct DeterministicModel {
  ModelSpec spec;
  std::vector<LayerWeights> params;  // one entry per parametric layer, in order

  std::vector<Tensor> parameters() const;
  DeterministicModel clone() const;
  void set_requires_grad(bool on);
};

// He-style fan-in initialisation: weights ~ N(0, 2/fan_in), zero biases.
DeterministicModel build_model(const ModelSpec& spec, Rng& rng);

enum class DropoutMode { train, mc_inference, off };

// Zeroes each unit with probability dr and scales survivors by 1/(1-dr) in
// train and mc_inference modes; identity when mode is off or dr is 0.
Tensor dropout_forward(const Tensor& x, double dr, DropoutMode mode, Rng* rng);

struct ActivationCapture {
  std::optional<Tensor> activation;
};

struct ForwardOptions {
  DropoutMode dropout = DropoutMode::off;
  Rng* rng = nullptr;  // required when dropout is active
  ActivationCapture* capture = nullptr;
};

using WeightSource = std::function<LayerWeights(std::size_t param_index)>;

// Runs the layer stack on x [N,C,H,W] and returns logits [N,K]. Pixels are
// centred (x - 0.5) before the first layer.
Tensor forward_layers(const ModelSpec& spec, const Tensor& x, const WeightSource& weights,
                      const ForwardOptions& options);

Tensor forward(const DeterministicModel& model, const Tensor& x, const ForwardOptions& options = {});

// Softmax probabilities with dropout off. Rows sum to 1.
Tensor predict_deterministic(const DeterministicModel& model, const Tensor& batch);

// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> row);

}  // namespace uql
