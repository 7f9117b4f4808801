#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "uql/bayes.hpp"
#include "uql/metrics.hpp"
#include "uql/nn.hpp"
#include "uql/synth.hpp"
#include "uql/train.hpp"

namespace uql {

inline constexpr const char* kAllGenerators = "all";

enum class Task { binary_per_generator, binary_all, source_detection, loo, region, ablation, attack, maps };
const char* task_name(Task t);
Task parse_task(const std::string& name);

enum class UqMethod { bnn, mc_dropout };
const char* uq_method_name(UqMethod m);
UqMethod parse_uq_method(const std::string& name);

enum class AblationAxis { n, delta_moped, kl_factor, dr };
const char* axis_name(AblationAxis a);
AblationAxis parse_axis(const std::string& name);

struct ExperimentConfig {
  Task task = Task::binary_per_generator;
  std::vector<std::string> generators = {"G-DF", "G-F2F", "G-FSh", "G-FSw", "G-NT"};
  double amplitude_scale = 1.0;
  std::size_t n_per_class = 600;
  UqMethod uq_method = UqMethod::bnn;
  std::size_t mc_samples = 40;
  double kl_factor = 1.0;
  double delta_moped = 0.1;
  double prior_mu = 0.0;
  double prior_sigma = 1.0;
  double dropout = 0.2;
  double learning_rate = 1e-4;
  std::size_t epochs = 50;
  std::size_t bayes_epochs = 10;
  std::size_t batch_size = 64;
  std::uint64_t seed = 7;
  std::string output_dir = "uql_out";
  bool map_overlays = false;  // also write <id>_<kind>.ppm heat overlays
  std::string generator;  // single target for train/ablate/maps; empty or "all" = every generator
  synth::MaskKind mask = synth::MaskKind::no_mouth;
  AblationAxis ablation_axis = AblationAxis::delta_moped;
  std::vector<double> ablation_values = {0.1, 0.5};
  double epsilon = 0.05;
  std::size_t map_count = 50;
  std::vector<std::string> map_samples;  // explicit sample ids; overrides map_count
  std::size_t histogram_bins = 20;
  UncertaintyKey retention_key = UncertaintyKey::pu;

  bool operator==(const ExperimentConfig&) const = default;
};

void validate(const ExperimentConfig& cfg);

// Flat "key = value" lines; '#' starts a comment. Unknown keys and malformed
// values throw std::invalid_argument naming the line.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_text(const ExperimentConfig& cfg);

// Generator specs named in cfg.generators with amplitudes scaled.
std::vector<synth::GeneratorSpec> configured_generators(const ExperimentConfig& cfg);
synth::BenchmarkDataset configured_dataset(const ExperimentConfig& cfg);
ModelSpec configured_model_spec(const ExperimentConfig& cfg, std::size_t num_classes);
TrainConfig deterministic_train_config(const ExperimentConfig& cfg);
TrainConfig bayesian_train_config(const ExperimentConfig& cfg);

// Git blob-style SHA-1 ("blob <len>\0" + content), lowercase hex.
std::string content_hash(const std::string& content);

// JSON manifest kept at <dir>/manifest.json. Written with status "running"
// on creation, rewritten after every phase, and marked "complete" (or
// "failed") at the end.
class RunManifest {
 public:
  RunManifest(std::filesystem::path dir, const ExperimentConfig& cfg, std::string file_name = "manifest.json");

  void begin_phase(const std::string& name);
  void end_phase();
  // Registers a file under dir; each path is listed once.
  void add_file(const std::filesystem::path& path);
  void complete();
  void fail(const std::string& message);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path() const { return dir_ / file_name_; }
  const std::vector<std::string>& files() const { return files_; }

 private:
  void write(const std::string& status) const;

  std::filesystem::path dir_;
  std::string file_name_;
  std::string config_text_;
  std::string input_hash_;
  std::vector<std::pair<std::string, double>> phases_;
  std::string current_phase_;
  double phase_start_ = 0.0;
  std::vector<std::string> files_;
  std::string error_;
};

struct SummaryRow {
  std::string experiment;
  std::string variant;
  double accuracy = 0.0;
  double pu = 0.0;
  double mu = 0.0;
  double var_u = 0.0;
};

// Header: experiment,variant,accuracy,pu,mu,var_u
std::string summary_csv(const std::vector<SummaryRow>& rows);
SummaryRow summarize(const std::string& experiment, const std::string& variant, const UncertaintyReport& r);

struct TrainedPair {
  DeterministicModel deterministic;
  BayesianModel bayesian;
  TrainTrace deterministic_trace;
  TrainTrace bayesian_trace;
};

// Deterministic training, then MOPED conversion and ELBO fine-tuning (the
// Bayesian stage is skipped for mc_dropout).
DeterministicModel train_deterministic(const ExperimentConfig& cfg, const LabeledImages& train_set,
                                       const LabeledImages& val_set, std::size_t num_classes,
                                       TrainTrace* trace = nullptr);
BayesianModel train_bayesian_stage(const ExperimentConfig& cfg, const DeterministicModel& det,
                                   const LabeledImages& train_set, const LabeledImages& val_set,
                                   TrainTrace* trace = nullptr);
TrainedPair train_pair(const ExperimentConfig& cfg, const LabeledImages& train_set, const LabeledImages& val_set,
                       std::size_t num_classes);

UncertaintyReport evaluate_deterministic(const DeterministicModel& model, const LabeledImages& set,
                                         const std::vector<std::string>& ids);
// MC evaluation of the uncertainty-aware variant: Bayesian weight sampling
// for bnn, MC dropout on the deterministic model for mc_dropout.
UncertaintyReport evaluate_uncertain(const ExperimentConfig& cfg, const TrainedPair& pair, const LabeledImages& set,
                                     const std::vector<std::string>& ids, std::size_t n);

struct BinaryOutcome {
  std::string generator;  // "all" for binary_all
  UncertaintyReport deterministic;
  UncertaintyReport uncertain;
};

struct SourceOutcome {
  std::vector<std::string> class_names;  // "real" then generator names
  UncertaintyReport deterministic;
  UncertaintyReport uncertain;
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred], uncertain variant
};

struct LooOutcome {
  std::string left_out;
  UncertaintyReport held_out;      // left-out generator test samples
  UncertaintyReport in_dist;       // real + trained generators' test samples
  UncertaintyReport loo_test;      // left-out + real test samples
  RetentionCurve held_out_curve;   // over loo_test
  RetentionCurve in_dist_curve;
};

struct RegionOutcome {
  std::string generator;
  UncertaintyReport full;
  UncertaintyReport masked;
};

struct AblationOutcome {
  AblationAxis axis = AblationAxis::delta_moped;
  std::string generator;
  std::vector<double> values;
  std::vector<UncertaintyReport> reports;
};

struct AttackOutcome {
  std::string generator;
  UncertaintyReport clean;
  UncertaintyReport attacked;
  double max_perturbation = 0.0;
};

struct MapOutcome {
  std::vector<std::string> sample_ids;
  std::vector<double> inside_mean;   // uncertainty map mean inside the mouth box
  std::vector<double> outside_mean;
  std::vector<std::filesystem::path> files;
};

// Each runner writes into cfg.output_dir (one subdirectory per generator
// where applicable) and returns the in-memory results.
std::vector<BinaryOutcome> run_binary(const ExperimentConfig& cfg);
SourceOutcome run_source_detection(const ExperimentConfig& cfg);
std::vector<LooOutcome> run_loo(const ExperimentConfig& cfg);
std::vector<RegionOutcome> run_region(const ExperimentConfig& cfg);
AblationOutcome run_ablation(const ExperimentConfig& cfg);
std::vector<AttackOutcome> run_attack(const ExperimentConfig& cfg);
MapOutcome run_maps(const ExperimentConfig& cfg);
void run_gen_data(const ExperimentConfig& cfg);

// Dispatches on cfg.task.
void run_task(const ExperimentConfig& cfg);

// Step-wise pipeline used by the train/convert/eval/retention subcommands.
// Files: det.ckpt, bnn.ckpt, report_det.csv, report_uq.csv, retention.csv,
// histogram.csv, summary.csv under cfg.output_dir.
void run_train_step(const ExperimentConfig& cfg);
void run_convert_step(const ExperimentConfig& cfg);
void run_eval_step(const ExperimentConfig& cfg);
void run_retention_step(const ExperimentConfig& cfg);

}  // namespace uql
