#include "uql/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "uql/image_io.hpp"
#include "uql/parallel.hpp"

namespace uql::synth {

namespace {

constexpr int kSize = static_cast<int>(kImageSize);
constexpr std::size_t kPlane = kImageSize * kImageSize;
constexpr double kNoiseSd = 0.03;
constexpr double kCenter = 15.5;
constexpr double kCenterJitter = 1.0;

double uniform_in(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

Box box_at(double cx, double cy, int w, int h) {
  Box b;
  b.x0 = static_cast<int>(std::floor(cx - w / 2.0 + 0.5));
  b.y0 = static_cast<int>(std::floor(cy - h / 2.0 + 0.5));
  b.x1 = b.x0 + w;
  b.y1 = b.y0 + h;
  return b;
}

Box left_eye_box(double cx, double cy) { return box_at(cx - 4.0, cy - 3.5, 5, 3); }
Box right_eye_box(double cx, double cy) { return box_at(cx + 4.0, cy - 3.5, 5, 3); }
Box mouth_box(double cx, double cy) { return box_at(cx, cy + 6.0, 9, 4); }

// Smallest box containing every placement over the centre jitter range.
template <typename BoxFn>
Box envelope(BoxFn fn) {
  const Box lo = fn(kCenter - kCenterJitter, kCenter - kCenterJitter);
  const Box hi = fn(kCenter + kCenterJitter, kCenter + kCenterJitter);
  return {std::min(lo.x0, hi.x0), std::min(lo.y0, hi.y0), std::max(lo.x1, hi.x1), std::max(lo.y1, hi.y1)};
}

double ellipse_radius(const FaceLayout& f, double x, double y) {
  const double dx = (x - f.cx) / f.ax;
  const double dy = (y - f.cy) / f.ay;
  return std::sqrt(dx * dx + dy * dy);
}

bool inside_inscribed_ellipse(const Box& b, double x, double y) {
  const double ecx = (b.x0 + b.x1) / 2.0;
  const double ecy = (b.y0 + b.y1) / 2.0;
  const double rx = (b.x1 - b.x0) / 2.0;
  const double ry = (b.y1 - b.y0) / 2.0;
  const double dx = (x + 0.5 - ecx) / rx;
  const double dy = (y + 0.5 - ecy) / ry;
  return dx * dx + dy * dy < 1.0;
}

double& px(std::span<double> img, int c, int y, int x) {
  return img[static_cast<std::size_t>(c) * kPlane + static_cast<std::size_t>(y) * kImageSize + static_cast<std::size_t>(x)];
}

double sample_clamped(std::span<const double> img, int c, int y, int x) {
  x = std::clamp(x, 0, kSize - 1);
  y = std::clamp(y, 0, kSize - 1);
  return img[static_cast<std::size_t>(c) * kPlane + static_cast<std::size_t>(y) * kImageSize + static_cast<std::size_t>(x)];
}

}  // namespace

const char* region_name(ArtifactRegion r) {
  switch (r) {
    case ArtifactRegion::face_boundary: return "face_boundary";
    case ArtifactRegion::symmetric_mask: return "symmetric_mask";
    case ArtifactRegion::full_face_texture: return "full_face_texture";
    case ArtifactRegion::blend_seam: return "blend_seam";
    case ArtifactRegion::mouth: return "mouth";
  }
  return "unknown";
}

const char* kind_name(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::checker_residue: return "checker_residue";
    case ArtifactKind::gaussian_blur_patch: return "gaussian_blur_patch";
    case ArtifactKind::additive_sine: return "additive_sine";
    case ArtifactKind::seam_edge: return "seam_edge";
    case ArtifactKind::mouth_warp: return "mouth_warp";
  }
  return "unknown";
}

std::vector<GeneratorSpec> default_generators() {
  return {
      {"G-DF", ArtifactRegion::face_boundary, ArtifactKind::checker_residue, 0.08},
      {"G-F2F", ArtifactRegion::symmetric_mask, ArtifactKind::gaussian_blur_patch, 0.10},
      {"G-FSh", ArtifactRegion::full_face_texture, ArtifactKind::additive_sine, 0.06},
      {"G-FSw", ArtifactRegion::blend_seam, ArtifactKind::seam_edge, 0.08},
      {"G-NT", ArtifactRegion::mouth, ArtifactKind::mouth_warp, 0.10},
  };
}

void validate(const GeneratorSpec& spec) {
  if (spec.name.empty()) throw std::invalid_argument("generator spec: empty name");
  if (!(spec.amplitude >= 0.0 && spec.amplitude <= 0.5)) {
    throw std::invalid_argument("generator " + spec.name + ": amplitude must lie in [0, 0.5]");
  }
}

FaceLayout sample_layout(Rng& rng) {
  FaceLayout f;
  f.cx = kCenter + uniform_in(rng, -kCenterJitter, kCenterJitter);
  f.cy = kCenter + uniform_in(rng, -kCenterJitter, kCenterJitter);
  f.ax = 10.0 + uniform_in(rng, -0.8, 0.8);
  f.ay = 12.5 + uniform_in(rng, -0.8, 0.8);
  f.left_eye = left_eye_box(f.cx, f.cy);
  f.right_eye = right_eye_box(f.cx, f.cy);
  f.mouth = mouth_box(f.cx, f.cy);
  const double tone = uniform_in(rng, -0.06, 0.06);
  const double base_skin[3] = {0.78, 0.60, 0.50};
  for (int c = 0; c < 3; ++c) {
    f.skin[c] = base_skin[c] + tone + uniform_in(rng, -0.02, 0.02);
    f.background[c] = uniform_in(rng, 0.15, 0.5);
  }
  f.texture_phase = uniform_in(rng, 0.0, 2.0 * std::numbers::pi);
  f.noise_seed = rng.next_u64();
  return f;
}

std::vector<double> render_face(const FaceLayout& f) {
  std::vector<double> img(3 * kPlane);
  std::span<double> out(img);
  const double eye_color[3] = {0.12, 0.10, 0.10};
  const double lip_color[3] = {0.65, 0.25, 0.28};
  const double edge = std::min(f.ax, f.ay);
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      const double r = ellipse_radius(f, x, y);
      const double coverage = std::clamp(0.5 + (1.0 - r) * edge, 0.0, 1.0);
      const double shade = 1.0 - 0.15 * ((y - f.cy) / f.ay);
      const bool eye = inside_inscribed_ellipse(f.left_eye, x, y) || inside_inscribed_ellipse(f.right_eye, x, y);
      const bool lip = inside_inscribed_ellipse(f.mouth, x, y);
      for (int c = 0; c < 3; ++c) {
        const double bg = f.background[c] + 0.1 * (y / static_cast<double>(kSize) - 0.5);
        double v = (1.0 - coverage) * bg + coverage * f.skin[c] * shade;
        if (eye) v = eye_color[c];
        if (lip) v = lip_color[c];
        px(out, c, y, x) = v;
      }
    }
  }
  Rng noise(f.noise_seed);
  for (double& v : img) v = std::clamp(v + kNoiseSd * noise.normal(), 0.0, 1.0);
  return img;
}

std::vector<bool> artifact_region_mask(const FaceLayout& f, ArtifactRegion region) {
  std::vector<bool> mask(kPlane, false);
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      const double r = ellipse_radius(f, x, y);
      bool in = false;
      switch (region) {
        case ArtifactRegion::face_boundary: in = r >= 0.85 && r <= 1.15; break;
        case ArtifactRegion::symmetric_mask: in = f.left_eye.contains(x, y) || f.right_eye.contains(x, y); break;
        case ArtifactRegion::full_face_texture: in = r < 0.85; break;
        case ArtifactRegion::blend_seam: in = r >= 0.68 && r <= 0.84; break;
        case ArtifactRegion::mouth: in = f.mouth.contains(x, y); break;
      }
      mask[static_cast<std::size_t>(y) * kImageSize + static_cast<std::size_t>(x)] = in;
    }
  }
  return mask;
}

void plant_artifact(std::span<double> image, const FaceLayout& f, const GeneratorSpec& spec) {
  validate(spec);
  if (image.size() != 3 * kPlane) throw std::invalid_argument("plant_artifact: expected a 3x32x32 image");
  if (spec.amplitude == 0.0) return;
  const std::vector<bool> region = artifact_region_mask(f, spec.region);
  const std::vector<double> original(image.begin(), image.end());
  const std::span<const double> src(original);
  const double amp = spec.amplitude;

  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      if (!region[static_cast<std::size_t>(y) * kImageSize + static_cast<std::size_t>(x)]) continue;
      for (int c = 0; c < 3; ++c) {
        double v = sample_clamped(src, c, y, x);
        switch (spec.kind) {
          case ArtifactKind::checker_residue:
            v += ((x + y) % 2 == 0 ? amp : -amp);
            break;
          case ArtifactKind::gaussian_blur_patch: {
            double blurred = 0.0;
            const double w[3] = {0.25, 0.5, 0.25};
            for (int dy = -1; dy <= 1; ++dy) {
              for (int dx = -1; dx <= 1; ++dx) blurred += w[dy + 1] * w[dx + 1] * sample_clamped(src, c, y + dy, x + dx);
            }
            const double mix = std::min(1.0, amp / 0.1);
            v += mix * (blurred - v) + 0.3 * amp;
            break;
          }
          case ArtifactKind::additive_sine:
            v += amp * std::sin(2.0 * std::numbers::pi * (0.23 * x + 0.17 * y) + f.texture_phase);
            break;
          case ArtifactKind::seam_edge:
            v += ellipse_radius(f, x, y) < 0.76 ? amp : -amp;
            break;
          case ArtifactKind::mouth_warp: {
            const Box& m = f.mouth;
            const double t = (y - m.y0 + 0.5) / static_cast<double>(m.y1 - m.y0);
            const double shift = 40.0 * amp * std::sin(std::numbers::pi * t);
            const double sx = x - shift;
            const int x0 = static_cast<int>(std::floor(sx));
            const double frac = sx - x0;
            v = (1.0 - frac) * sample_clamped(src, c, y, x0) + frac * sample_clamped(src, c, y, x0 + 1);
            break;
          }
        }
        px(image, c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

std::span<const double> BenchmarkDataset::image(std::size_t i) const {
  return {pixels.data() + i * shape.numel(), shape.numel()};
}

std::span<double> BenchmarkDataset::image(std::size_t i) { return {pixels.data() + i * shape.numel(), shape.numel()}; }

std::string BenchmarkDataset::sample_id(std::size_t i) const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", i);
  return buf;
}

int BenchmarkDataset::generator_index(const std::string& name) const {
  for (std::size_t g = 0; g < generators.size(); ++g) {
    if (generators[g].name == name) return static_cast<int>(g) + 1;
  }
  throw std::invalid_argument("unknown generator '" + name + "'");
}

BenchmarkDataset generate_dataset(std::size_t n_per_class, std::span<const GeneratorSpec> specs, std::uint64_t seed) {
  if (n_per_class == 0) throw std::invalid_argument("generate_dataset: n_per_class must be at least 1");
  for (const auto& s : specs) validate(s);
  BenchmarkDataset data;
  data.generators.assign(specs.begin(), specs.end());
  const std::size_t classes = specs.size() + 1;
  const std::size_t total = classes * n_per_class;
  data.pixels.assign(total * data.shape.numel(), 0.0);
  data.source.resize(total);
  data.layouts.resize(total);
  const Rng root(seed);
  parallel_for(total, [&](std::size_t i) {
    const std::size_t cls = i / n_per_class;
    Rng rng = root.split(i);
    const FaceLayout layout = sample_layout(rng);
    std::vector<double> img = render_face(layout);
    if (cls > 0) plant_artifact(img, layout, specs[cls - 1]);
    std::copy(img.begin(), img.end(), data.pixels.begin() + static_cast<long>(i * data.shape.numel()));
    data.source[i] = static_cast<int>(cls);
    data.layouts[i] = layout;
  });
  return data;
}

const char* mask_name(MaskKind k) {
  switch (k) {
    case MaskKind::full: return "full";
    case MaskKind::no_bottom_half: return "no_bottom_half";
    case MaskKind::no_half_mouth: return "no_half_mouth";
    case MaskKind::no_one_eye: return "no_one_eye";
    case MaskKind::no_mouth: return "no_mouth";
  }
  return "unknown";
}

MaskKind parse_mask(const std::string& name) {
  for (MaskKind k : {MaskKind::full, MaskKind::no_bottom_half, MaskKind::no_half_mouth, MaskKind::no_one_eye,
                     MaskKind::no_mouth}) {
    if (name == mask_name(k)) return k;
  }
  throw std::invalid_argument("unknown region mask '" + name + "'");
}

RegionMask make_region_mask(MaskKind kind, double fill) {
  RegionMask m;
  m.kind = kind;
  m.fill = fill;
  m.masked.assign(kPlane, false);
  const Box mouth = envelope(mouth_box);
  const Box eye = envelope(left_eye_box);
  const int mouth_mid = (mouth.x0 + mouth.x1) / 2;
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      bool hide = false;
      switch (kind) {
        case MaskKind::full: break;
        case MaskKind::no_bottom_half: hide = y >= kSize / 2; break;
        case MaskKind::no_half_mouth: hide = mouth.contains(x, y) && x < mouth_mid; break;
        case MaskKind::no_one_eye: hide = eye.contains(x, y); break;
        case MaskKind::no_mouth: hide = mouth.contains(x, y); break;
      }
      m.masked[static_cast<std::size_t>(y) * kImageSize + static_cast<std::size_t>(x)] = hide;
    }
  }
  return m;
}

double mean_pixel(const BenchmarkDataset& data) {
  if (data.pixels.empty()) return 0.0;
  double total = 0.0;
  for (double v : data.pixels) total += v;
  return total / static_cast<double>(data.pixels.size());
}

BenchmarkDataset apply_region_mask(BenchmarkDataset data, const RegionMask& mask) {
  if (mask.masked.size() != data.shape.height * data.shape.width) {
    throw std::invalid_argument("apply_region_mask: mask dimensions do not match images");
  }
  const std::size_t plane = data.shape.height * data.shape.width;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto img = data.image(i);
    for (std::size_t c = 0; c < data.shape.channels; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        if (mask.masked[p]) img[c * plane + p] = mask.fill;
      }
    }
  }
  return data;
}

namespace {

constexpr std::uint64_t kSplitStream = 0x73706C6974ULL;

struct ClassPartition {
  std::vector<std::size_t> train, val, test;
};

ClassPartition partition_class(const BenchmarkDataset& data, int cls, std::uint64_t seed) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.source[i] == cls) idx.push_back(i);
  }
  Rng rng = Rng(seed).split(kSplitStream + static_cast<std::uint64_t>(cls));
  shuffle(std::span<std::size_t>(idx), rng);
  const auto n = idx.size();
  const auto n_test = static_cast<std::size_t>(std::lround(kTestFraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::lround(kValFraction * static_cast<double>(n - n_test)));
  ClassPartition p;
  p.test.assign(idx.begin(), idx.begin() + static_cast<long>(n_test));
  p.val.assign(idx.begin() + static_cast<long>(n_test), idx.begin() + static_cast<long>(n_test + n_val));
  p.train.assign(idx.begin() + static_cast<long>(n_test + n_val), idx.end());
  return p;
}

void append(std::vector<std::size_t>& dst, const std::vector<std::size_t>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

void sort_split(DatasetSplit& s) {
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
}

}  // namespace

DatasetSplit make_split(const BenchmarkDataset& data, std::span<const int> sources, std::uint64_t seed) {
  DatasetSplit split;
  split.seed = seed;
  for (int cls : sources) {
    if (cls < 0 || static_cast<std::size_t>(cls) >= data.num_sources()) {
      throw std::invalid_argument("make_split: unknown source class " + std::to_string(cls));
    }
    const ClassPartition p = partition_class(data, cls, seed);
    append(split.train, p.train);
    append(split.val, p.val);
    append(split.test, p.test);
  }
  sort_split(split);
  return split;
}

DatasetSplit make_loo_split(const BenchmarkDataset& data, const std::string& left_out, std::uint64_t seed) {
  const int held = data.generator_index(left_out);
  DatasetSplit split;
  split.seed = seed;
  for (int cls = 0; cls < static_cast<int>(data.num_sources()); ++cls) {
    const ClassPartition p = partition_class(data, cls, seed);
    if (cls == held) {
      append(split.test, p.test);
      continue;
    }
    append(split.train, p.train);
    append(split.val, p.val);
    if (cls == 0) append(split.test, p.test);
  }
  sort_split(split);
  return split;
}

std::vector<int> labels_for(const BenchmarkDataset& data, std::span<const std::size_t> indices, LabelMode mode) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(mode == LabelMode::binary ? data.binary_label(i) : data.source.at(i));
  return out;
}

std::vector<std::string> ids_for(const BenchmarkDataset& data, std::span<const std::size_t> indices) {
  std::vector<std::string> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data.sample_id(i));
  return out;
}

LabeledImages to_labeled(const BenchmarkDataset& data, std::span<const std::size_t> indices, LabelMode mode) {
  LabeledImages out;
  out.shape = data.shape;
  out.pixels.reserve(indices.size() * data.shape.numel());
  for (std::size_t i : indices) {
    const auto img = data.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  out.labels = labels_for(data, indices, mode);
  return out;
}

void write_dataset(const std::filesystem::path& dir, const BenchmarkDataset& data, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  std::vector<const char*> tag(data.size(), "unused");
  for (std::size_t i : split.train) tag.at(i) = "train";
  for (std::size_t i : split.val) tag.at(i) = "val";
  for (std::size_t i : split.test) tag.at(i) = "test";
  std::ofstream labels(dir / "labels.csv", std::ios::trunc);
  if (!labels) throw std::runtime_error("cannot open " + (dir / "labels.csv").string());
  labels << "sample_id,binary_label,source_label,split\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string id = data.sample_id(i);
    write_ppm(dir / (id + ".ppm"), data.shape.width, data.shape.height, data.image(i));
    labels << id << ',' << data.binary_label(i) << ',' << data.source[i] << ',' << tag[i] << '\n';
  }
  if (!labels) throw std::runtime_error("failed writing " + (dir / "labels.csv").string());
}

}  // namespace uql::synth
