#pragma once

#include <filesystem>
#include <iosfwd>

#include "uql/bayes.hpp"
#include "uql/nn.hpp"

namespace uql {

// Deterministic checkpoint layout:
//   "UQL1\n", model spec text (see spec_to_text), "end\n", then for every
//   conv/linear layer in declaration order its weight followed by its bias
//   as little-endian IEEE-754 doubles.
//
// Bayesian checkpoint layout:
//   "UQB1\n", "prior <mu> <sigma>\n", model spec text, "end\n", then per
//   layer weight.mu, weight.rho, bias.mu, bias.rho as little-endian doubles.
void write_checkpoint(std::ostream& out, const DeterministicModel& model);
DeterministicModel read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const DeterministicModel& model);
DeterministicModel load_checkpoint(const std::filesystem::path& path);

void write_bayesian_checkpoint(std::ostream& out, const BayesianModel& model);
BayesianModel read_bayesian_checkpoint(std::istream& in);
void save_bayesian_checkpoint(const std::filesystem::path& path, const BayesianModel& model);
BayesianModel load_bayesian_checkpoint(const std::filesystem::path& path);

}  // namespace uql
