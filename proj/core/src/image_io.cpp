#include "uql/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace uql {

std::uint8_t quantize_unit(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

namespace {

void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::size_t read_header_int(std::istream& in, const std::filesystem::path& path) {
  // Skips whitespace and '#' comments.
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(in >> v)) throw std::runtime_error("malformed netpbm header in " + path.string());
  return v;
}

}  // namespace

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const double> values) {
  if (values.size() != width * height) throw std::invalid_argument("write_pgm: size mismatch");
  std::vector<std::uint8_t> bytes(values.size());
  std::transform(values.begin(), values.end(), bytes.begin(), quantize_unit);
  write_pnm(path, "P5", width, height, bytes);
}

void write_ppm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const double> planar_rgb) {
  const std::size_t plane = width * height;
  if (planar_rgb.size() != 3 * plane) throw std::invalid_argument("write_ppm: size mismatch");
  std::vector<std::uint8_t> bytes(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) bytes[3 * i + c] = quantize_unit(planar_rgb[c * plane + i]);
  }
  write_pnm(path, "P6", width, height, bytes);
}

PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  in >> magic;
  PnmImage img;
  if (magic == "P5") {
    img.channels = 1;
  } else if (magic == "P6") {
    img.channels = 3;
  } else {
    throw std::runtime_error("unsupported netpbm magic '" + magic + "' in " + path.string());
  }
  img.width = read_header_int(in, path);
  img.height = read_header_int(in, path);
  const std::size_t maxval = read_header_int(in, path);
  if (maxval != 255) throw std::runtime_error("only 8-bit netpbm images are supported: " + path.string());
  in.get();  // single whitespace before raster
  img.data.resize(img.channels * img.width * img.height);
  if (!in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()))) {
    throw std::runtime_error("truncated raster in " + path.string());
  }
  return img;
}

}  // namespace uql
