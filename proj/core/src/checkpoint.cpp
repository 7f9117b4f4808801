#include "uql/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace uql {

namespace {

constexpr const char* kDeterministicMagic = "UQL1";
constexpr const char* kBayesianMagic = "UQB1";

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return r;
  }
  return v;
}

void write_doubles(std::ostream& out, std::span<const double> values) {
  for (double v : values) {
    const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    out.write(bytes, 8);
  }
}

void read_doubles(std::istream& in, std::span<double> values, const char* what) {
  for (double& v : values) {
    char bytes[8];
    if (!in.read(bytes, 8)) throw std::runtime_error(std::string("checkpoint: truncated data in ") + what);
    std::uint64_t bits = 0;
    std::memcpy(&bits, bytes, 8);
    v = std::bit_cast<double>(to_little(bits));
    if (!std::isfinite(v)) throw std::runtime_error(std::string("checkpoint: non-finite value in ") + what);
  }
}

void expect_magic(std::istream& in, const char* magic) {
  std::string line;
  if (!std::getline(in, line) || line != magic) {
    throw std::runtime_error(std::string("checkpoint: expected magic ") + magic + ", got '" + line + "'");
  }
}

ModelSpec read_spec_block(std::istream& in) {
  std::string text;
  std::string line;
  while (true) {
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: missing 'end' after model spec");
    if (line == "end") break;
    text += line + '\n';
  }
  return spec_from_text(text);
}

// Shapes of weight and bias for each parametric layer.
std::vector<std::pair<Shape, Shape>> param_shapes(const ModelSpec& spec) {
  const std::vector<Shape> shapes = validate_spec(spec);
  std::vector<std::pair<Shape, Shape>> out;
  Shape in_shape{spec.input.channels, spec.input.height, spec.input.width};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::conv2d) {
      out.push_back({{l.units, in_shape[0], l.kernel, l.kernel}, {l.units}});
    } else if (l.kind == LayerKind::linear) {
      out.push_back({{in_shape[0], l.units}, {l.units}});
    }
    in_shape = shapes[i];
  }
  return out;
}

Tensor read_tensor(std::istream& in, const Shape& shape, const char* what) {
  std::vector<double> values(shape_numel(shape));
  read_doubles(in, values, what);
  return Tensor(shape, std::move(values));
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename Fn>
void write_file(const std::filesystem::path& path, Fn&& fn) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  fn(out);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::ifstream open_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

}  // namespace

void write_checkpoint(std::ostream& out, const DeterministicModel& model) {
  out << kDeterministicMagic << '\n' << spec_to_text(model.spec) << "end\n";
  for (const auto& p : model.params) {
    write_doubles(out, p.weight.values());
    write_doubles(out, p.bias.values());
  }
}

DeterministicModel read_checkpoint(std::istream& in) {
  expect_magic(in, kDeterministicMagic);
  DeterministicModel model;
  model.spec = read_spec_block(in);
  for (const auto& [ws, bs] : param_shapes(model.spec)) {
    Tensor w = read_tensor(in, ws, "weight");
    Tensor b = read_tensor(in, bs, "bias");
    model.params.push_back({w, b});
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes");
  model.set_requires_grad(true);
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const DeterministicModel& model) {
  write_file(path, [&](std::ostream& out) { write_checkpoint(out, model); });
}

DeterministicModel load_checkpoint(const std::filesystem::path& path) {
  auto in = open_file(path);
  return read_checkpoint(in);
}

void write_bayesian_checkpoint(std::ostream& out, const BayesianModel& model) {
  out << kBayesianMagic << '\n'
      << "prior " << format_double(model.prior.mu) << ' ' << format_double(model.prior.sigma) << '\n'
      << spec_to_text(model.spec) << "end\n";
  for (const auto& l : model.layers) {
    write_doubles(out, l.weight.mu.values());
    write_doubles(out, l.weight.rho.values());
    write_doubles(out, l.bias.mu.values());
    write_doubles(out, l.bias.rho.values());
  }
}

BayesianModel read_bayesian_checkpoint(std::istream& in) {
  expect_magic(in, kBayesianMagic);
  BayesianModel model;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint: missing prior line");
  std::istringstream ps(line);
  std::string head;
  ps >> head >> model.prior.mu >> model.prior.sigma;
  if (!ps || head != "prior") throw std::runtime_error("checkpoint: bad prior line '" + line + "'");
  validate(model.prior);
  model.spec = read_spec_block(in);
  for (const auto& [ws, bs] : param_shapes(model.spec)) {
    VariationalParam w{read_tensor(in, ws, "weight.mu"), read_tensor(in, ws, "weight.rho")};
    VariationalParam b{read_tensor(in, bs, "bias.mu"), read_tensor(in, bs, "bias.rho")};
    model.layers.push_back({w, b});
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes");
  model.set_requires_grad(true);
  return model;
}

void save_bayesian_checkpoint(const std::filesystem::path& path, const BayesianModel& model) {
  write_file(path, [&](std::ostream& out) { write_bayesian_checkpoint(out, model); });
}

BayesianModel load_bayesian_checkpoint(const std::filesystem::path& path) {
  auto in = open_file(path);
  return read_bayesian_checkpoint(in);
}

}  // namespace uql
