#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace uql {

// 8-bit binary netpbm image: 1 channel (P5) or 3 interleaved channels (P6).
struct PnmImage {
  std::size_t channels = 1;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;
};

std::uint8_t quantize_unit(double v);  // clamp to [0,1], round to 0..255

// values: height x width in [0,1].
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const double> values);
// values: planar 3 x height x width in [0,1].
void write_ppm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const double> planar_rgb);

PnmImage read_pnm(const std::filesystem::path& path);

}  // namespace uql
