#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uql/nn.hpp"
#include "uql/train.hpp"

// Procedural face-proxy benchmark. Class 0 holds clean faces; class g >= 1
// holds faces with generator g's artifact planted in its region. Everything
// is a pure function of (generator specs, n_per_class, seed).
namespace uql::synth {

enum class ArtifactRegion { face_boundary, symmetric_mask, full_face_texture, blend_seam, mouth };
enum class ArtifactKind { checker_residue, gaussian_blur_patch, additive_sine, seam_edge, mouth_warp };

const char* region_name(ArtifactRegion r);
const char* kind_name(ArtifactKind k);

struct GeneratorSpec {
  std::string name;
  ArtifactRegion region = ArtifactRegion::mouth;
  ArtifactKind kind = ArtifactKind::mouth_warp;
  double amplitude = 0.1;  // in [0, 0.5]; 0 plants nothing
};

// G-DF (boundary checker), G-F2F (symmetric eye blur), G-FSh (face texture
// sine), G-FSw (blend seam edge), G-NT (mouth warp).
std::vector<GeneratorSpec> default_generators();
void validate(const GeneratorSpec& spec);

// Half-open pixel rectangle [x0,x1) x [y0,y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  int area() const { return (x1 - x0) * (y1 - y0); }
};

struct FaceLayout {
  double cx = 16, cy = 16;   // face ellipse centre
  double ax = 10, ay = 12;   // semi-axes
  Box left_eye, right_eye, mouth;
  double skin[3] = {0.75, 0.58, 0.48};
  double background[3] = {0.35, 0.35, 0.35};
  double texture_phase = 0.0;
  std::uint64_t noise_seed = 0;
};

inline constexpr std::size_t kImageSize = 32;

FaceLayout sample_layout(Rng& rng);
// Clean face with its per-instance pixel noise, planar 3 x 32 x 32.
std::vector<double> render_face(const FaceLayout& layout);
// Pixels (y * 32 + x) that spec's artifact may modify for this layout.
std::vector<bool> artifact_region_mask(const FaceLayout& layout, ArtifactRegion region);
void plant_artifact(std::span<double> image, const FaceLayout& layout, const GeneratorSpec& spec);

struct BenchmarkDataset {
  ImageShape shape;
  std::vector<GeneratorSpec> generators;
  std::vector<double> pixels;
  std::vector<int> source;  // 0 = real, g = generators[g - 1]
  std::vector<FaceLayout> layouts;

  std::size_t size() const { return source.size(); }
  std::span<const double> image(std::size_t i) const;
  std::span<double> image(std::size_t i);
  std::string sample_id(std::size_t i) const;
  int binary_label(std::size_t i) const { return source.at(i) == 0 ? 0 : 1; }
  // 1-based generator index for a name; throws std::invalid_argument if unknown.
  int generator_index(const std::string& name) const;
  std::size_t num_sources() const { return generators.size() + 1; }
};

// Samples are stored class-major: index = class * n_per_class + j.
BenchmarkDataset generate_dataset(std::size_t n_per_class, std::span<const GeneratorSpec> specs,
                                  std::uint64_t seed);

enum class MaskKind { full, no_bottom_half, no_half_mouth, no_one_eye, no_mouth };
const char* mask_name(MaskKind k);
MaskKind parse_mask(const std::string& name);

struct RegionMask {
  MaskKind kind = MaskKind::full;
  std::vector<bool> masked;  // H x W, true = replaced by fill
  double fill = 0.0;
};

// Masks cover the envelope of every possible landmark position, so a masked
// region hides the corresponding artifact on every sample.
RegionMask make_region_mask(MaskKind kind, double fill);
double mean_pixel(const BenchmarkDataset& data);
BenchmarkDataset apply_region_mask(BenchmarkDataset data, const RegionMask& mask);

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;
  std::uint64_t seed = 0;
};

inline constexpr double kTestFraction = 0.30;
inline constexpr double kValFraction = 0.15;  // of the non-test portion

// Stratified per source class: round(0.30 n_c) test, then round(0.15 n_rest)
// validation, remainder train. Only classes listed in `sources` are used.
DatasetSplit make_split(const BenchmarkDataset& data, std::span<const int> sources, std::uint64_t seed);
// Train/val over real plus every generator except left_out; test holds the
// left-out generator's test portion plus the real test portion.
DatasetSplit make_loo_split(const BenchmarkDataset& data, const std::string& left_out, std::uint64_t seed);

enum class LabelMode { binary, source };
LabeledImages to_labeled(const BenchmarkDataset& data, std::span<const std::size_t> indices, LabelMode mode);
std::vector<int> labels_for(const BenchmarkDataset& data, std::span<const std::size_t> indices, LabelMode mode);
std::vector<std::string> ids_for(const BenchmarkDataset& data, std::span<const std::size_t> indices);

// Writes <dir>/<sample_id>.ppm for every sample plus <dir>/labels.csv with
// header sample_id,binary_label,source_label,split.
void write_dataset(const std::filesystem::path& dir, const BenchmarkDataset& data, const DatasetSplit& split);

}  // namespace uql::synth
