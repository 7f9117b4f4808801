#include "uql/experiment.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "uql/adversarial.hpp"
#include "uql/checkpoint.hpp"
#include "uql/maps.hpp"
#include "uql/parallel.hpp"

namespace uql {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- enums

const char* task_name(Task t) {
  switch (t) {
    case Task::binary_per_generator: return "binary_per_generator";
    case Task::binary_all: return "binary_all";
    case Task::source_detection: return "source_detection";
    case Task::loo: return "loo";
    case Task::region: return "region";
    case Task::ablation: return "ablation";
    case Task::attack: return "attack";
    case Task::maps: return "maps";
  }
  return "unknown";
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::binary_per_generator, Task::binary_all, Task::source_detection, Task::loo, Task::region,
                 Task::ablation, Task::attack, Task::maps}) {
    if (name == task_name(t)) return t;
  }
  throw std::invalid_argument("unknown task '" + name + "'");
}

const char* uq_method_name(UqMethod m) { return m == UqMethod::bnn ? "bnn" : "mc_dropout"; }

UqMethod parse_uq_method(const std::string& name) {
  if (name == "bnn") return UqMethod::bnn;
  if (name == "mc_dropout") return UqMethod::mc_dropout;
  throw std::invalid_argument("unknown uq method '" + name + "' (expected bnn or mc_dropout)");
}

const char* axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::n: return "n";
    case AblationAxis::delta_moped: return "delta_moped";
    case AblationAxis::kl_factor: return "kl_factor";
    case AblationAxis::dr: return "dr";
  }
  return "unknown";
}

AblationAxis parse_axis(const std::string& name) {
  for (AblationAxis a : {AblationAxis::n, AblationAxis::delta_moped, AblationAxis::kl_factor, AblationAxis::dr}) {
    if (name == axis_name(a)) return a;
  }
  throw std::invalid_argument("unknown ablation axis '" + name + "'");
}

// ---------------------------------------------------------------- config

void validate(const ExperimentConfig& cfg) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (cfg.generators.empty()) fail("generators must name at least one generator");
  const auto defaults = synth::default_generators();
  std::set<std::string> seen;
  for (const auto& g : cfg.generators) {
    const bool known = std::any_of(defaults.begin(), defaults.end(), [&](const auto& s) { return s.name == g; });
    if (!known) fail("unknown generator '" + g + "'");
    if (!seen.insert(g).second) fail("generator '" + g + "' listed twice");
  }
  if (cfg.generator == kAllGenerators) {
    if (cfg.task == Task::maps) fail("maps needs a single generator, not 'all'");
  } else if (!cfg.generator.empty() && !seen.count(cfg.generator)) {
    fail("generator '" + cfg.generator + "' is not in generators");
  }
  if (!(cfg.amplitude_scale >= 0.0)) fail("amplitude_scale must be >= 0");
  for (const auto& s : defaults) {
    if (s.amplitude * cfg.amplitude_scale > 0.5) fail("amplitude_scale pushes an amplitude above 0.5");
  }
  if (cfg.n_per_class < 1) fail("n_per_class must be >= 1");
  if (cfg.mc_samples < 1) fail("mc_samples must be >= 1");
  if (!(cfg.kl_factor >= 0.0)) fail("kl_factor must be >= 0");
  if (!(cfg.delta_moped > 0.0)) fail("delta_moped must be > 0");
  if (!(cfg.prior_sigma > 0.0)) fail("prior_sigma must be > 0");
  if (!std::isfinite(cfg.prior_mu)) fail("prior_mu must be finite");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(cfg.learning_rate >= 0.0 && std::isfinite(cfg.learning_rate))) fail("learning_rate must be >= 0");
  if (cfg.epochs < 1) fail("epochs must be >= 1");
  if (cfg.batch_size < 1) fail("batch_size must be >= 1");
  if (cfg.output_dir.empty()) fail("output_dir must not be empty");
  if (cfg.ablation_values.size() < 2) fail("ablation_values needs at least two entries");
  for (double v : cfg.ablation_values) {
    if (!std::isfinite(v)) fail("ablation_values must be finite");
  }
  validate(AdversarialConfig{cfg.epsilon});
  if (cfg.histogram_bins < 2) fail("histogram_bins must be >= 2");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw std::invalid_argument("expected a number, got '" + s + "'");
  }
  return v;
}

std::uint64_t parse_unsigned(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

void set_field(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "task") cfg.task = parse_task(value);
  else if (key == "generators") cfg.generators = split_list(value);
  else if (key == "amplitude_scale") cfg.amplitude_scale = parse_double(value);
  else if (key == "n_per_class") cfg.n_per_class = parse_unsigned(value);
  else if (key == "uq_method") cfg.uq_method = parse_uq_method(value);
  else if (key == "mc_samples") cfg.mc_samples = parse_unsigned(value);
  else if (key == "kl_factor") cfg.kl_factor = parse_double(value);
  else if (key == "delta_moped") cfg.delta_moped = parse_double(value);
  else if (key == "prior_mu") cfg.prior_mu = parse_double(value);
  else if (key == "prior_sigma") cfg.prior_sigma = parse_double(value);
  else if (key == "dropout") cfg.dropout = parse_double(value);
  else if (key == "learning_rate") cfg.learning_rate = parse_double(value);
  else if (key == "epochs") cfg.epochs = parse_unsigned(value);
  else if (key == "bayes_epochs") cfg.bayes_epochs = parse_unsigned(value);
  else if (key == "batch_size") cfg.batch_size = parse_unsigned(value);
  else if (key == "seed") cfg.seed = parse_unsigned(value);
  else if (key == "output_dir") cfg.output_dir = value;
  else if (key == "map_overlays") cfg.map_overlays = parse_bool(value);
  else if (key == "generator") cfg.generator = value;
  else if (key == "mask") cfg.mask = synth::parse_mask(value);
  else if (key == "ablation_axis") cfg.ablation_axis = parse_axis(value);
  else if (key == "ablation_values") {
    cfg.ablation_values.clear();
    for (const auto& v : split_list(value)) cfg.ablation_values.push_back(parse_double(v));
  } else if (key == "epsilon") cfg.epsilon = parse_double(value);
  else if (key == "map_count") cfg.map_count = parse_unsigned(value);
  else if (key == "map_samples") cfg.map_samples = split_list(value);
  else if (key == "histogram_bins") cfg.histogram_bins = parse_unsigned(value);
  else if (key == "retention_key") cfg.retention_key = parse_key(value);
  else throw std::invalid_argument("unknown key '" + key + "'");
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    try {
      if (eq == std::string::npos) throw std::invalid_argument("expected 'key = value'");
      set_field(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const ExperimentConfig& cfg) {
  std::vector<std::string> values;
  for (double v : cfg.ablation_values) values.push_back(fmt_double(v));
  std::ostringstream out;
  out << "task = " << task_name(cfg.task) << '\n'
      << "generators = " << join(cfg.generators) << '\n'
      << "amplitude_scale = " << fmt_double(cfg.amplitude_scale) << '\n'
      << "n_per_class = " << cfg.n_per_class << '\n'
      << "uq_method = " << uq_method_name(cfg.uq_method) << '\n'
      << "mc_samples = " << cfg.mc_samples << '\n'
      << "kl_factor = " << fmt_double(cfg.kl_factor) << '\n'
      << "delta_moped = " << fmt_double(cfg.delta_moped) << '\n'
      << "prior_mu = " << fmt_double(cfg.prior_mu) << '\n'
      << "prior_sigma = " << fmt_double(cfg.prior_sigma) << '\n'
      << "dropout = " << fmt_double(cfg.dropout) << '\n'
      << "learning_rate = " << fmt_double(cfg.learning_rate) << '\n'
      << "epochs = " << cfg.epochs << '\n'
      << "bayes_epochs = " << cfg.bayes_epochs << '\n'
      << "batch_size = " << cfg.batch_size << '\n'
      << "seed = " << cfg.seed << '\n'
      << "output_dir = " << cfg.output_dir << '\n'
      << "map_overlays = " << (cfg.map_overlays ? "true" : "false") << '\n'
      << "generator = " << cfg.generator << '\n'
      << "mask = " << synth::mask_name(cfg.mask) << '\n'
      << "ablation_axis = " << axis_name(cfg.ablation_axis) << '\n'
      << "ablation_values = " << join(values) << '\n'
      << "epsilon = " << fmt_double(cfg.epsilon) << '\n'
      << "map_count = " << cfg.map_count << '\n'
      << "map_samples = " << join(cfg.map_samples) << '\n'
      << "histogram_bins = " << cfg.histogram_bins << '\n'
      << "retention_key = " << key_name(cfg.retention_key) << '\n';
  return out.str();
}

std::vector<synth::GeneratorSpec> configured_generators(const ExperimentConfig& cfg) {
  const auto defaults = synth::default_generators();
  std::vector<synth::GeneratorSpec> out;
  for (const auto& name : cfg.generators) {
    for (auto s : defaults) {
      if (s.name == name) {
        s.amplitude *= cfg.amplitude_scale;
        out.push_back(s);
      }
    }
  }
  return out;
}

synth::BenchmarkDataset configured_dataset(const ExperimentConfig& cfg) {
  const auto specs = configured_generators(cfg);
  return synth::generate_dataset(cfg.n_per_class, specs, cfg.seed);
}

ModelSpec configured_model_spec(const ExperimentConfig& cfg, std::size_t num_classes) {
  return cfg.uq_method == UqMethod::mc_dropout ? mc_dropout_detector_spec(num_classes, cfg.dropout)
                                               : default_detector_spec(num_classes, cfg.dropout);
}

TrainConfig deterministic_train_config(const ExperimentConfig& cfg) {
  TrainConfig t;
  t.learning_rate = cfg.learning_rate;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.seed = cfg.seed;
  return t;
}

TrainConfig bayesian_train_config(const ExperimentConfig& cfg) {
  TrainConfig t = deterministic_train_config(cfg);
  t.epochs = cfg.bayes_epochs;
  return t;
}

// ---------------------------------------------------------------- manifest

std::string content_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char b : digest) {
    out += hex[b >> 4];
    out += hex[b & 0xF];
  }
  return out;
}

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

}  // namespace

RunManifest::RunManifest(fs::path dir, const ExperimentConfig& cfg, std::string file_name)
    : dir_(std::move(dir)), file_name_(std::move(file_name)), config_text_(config_to_text(cfg)),
      input_hash_(content_hash(config_text_)) {
  fs::create_directories(dir_);
  write("running");
}

void RunManifest::begin_phase(const std::string& name) {
  current_phase_ = name;
  phase_start_ = now_seconds();
}

void RunManifest::end_phase() {
  if (current_phase_.empty()) return;
  phases_.emplace_back(current_phase_, now_seconds() - phase_start_);
  current_phase_.clear();
  write("running");
}

void RunManifest::add_file(const fs::path& path) {
  const std::string rel = fs::relative(path, dir_).generic_string();
  if (std::find(files_.begin(), files_.end(), rel) == files_.end()) files_.push_back(rel);
}

void RunManifest::complete() {
  end_phase();
  write("complete");
}

void RunManifest::fail(const std::string& message) {
  current_phase_.clear();
  error_ = message;
  write("failed");
}

void RunManifest::write(const std::string& status) const {
  nlohmann::ordered_json j;
  j["status"] = status;
  j["input_hash"] = input_hash_;
  j["config"] = config_text_;
  j["phases"] = nlohmann::json::array();
  for (const auto& [name, seconds] : phases_) j["phases"].push_back({{"name", name}, {"seconds", seconds}});
  j["files"] = nlohmann::json::array();
  for (const auto& f : files_) {
    std::error_code ec;
    const auto size = fs::file_size(dir_ / f, ec);
    j["files"].push_back({{"path", f}, {"bytes", ec ? -1 : static_cast<long long>(size)}});
  }
  if (!error_.empty()) j["error"] = error_;
  std::ofstream out(path(), std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path().string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------- summaries

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "experiment,variant,accuracy,pu,mu,var_u\n";
  for (const auto& r : rows) {
    out += r.experiment + ',' + r.variant + ',' + format_number(r.accuracy) + ',' + format_number(r.pu) + ',' +
           format_number(r.mu) + ',' + format_number(r.var_u) + '\n';
  }
  return out;
}

SummaryRow summarize(const std::string& experiment, const std::string& variant, const UncertaintyReport& r) {
  return {experiment, variant, r.accuracy, r.mean_pu, r.mean_mu, r.mean_var_u};
}

// ---------------------------------------------------------------- training

namespace {

constexpr std::uint64_t kInitStream = 0x696E6974ULL;
constexpr std::uint64_t kEvalStream = 0x6576616CULL;
constexpr std::uint64_t kMapStream = 0x6D617073ULL;

}  // namespace

DeterministicModel train_deterministic(const ExperimentConfig& cfg, const LabeledImages& train_set,
                                       const LabeledImages& val_set, std::size_t num_classes, TrainTrace* trace) {
  Rng init = Rng(cfg.seed).split(kInitStream);
  const DeterministicModel initial = build_model(configured_model_spec(cfg, num_classes), init);
  TrainResult result = train(initial, train_set, val_set, deterministic_train_config(cfg));
  if (trace) *trace = result.trace;
  return std::move(result.model);
}

BayesianModel train_bayesian_stage(const ExperimentConfig& cfg, const DeterministicModel& det,
                                   const LabeledImages& train_set, const LabeledImages& val_set, TrainTrace* trace) {
  const BayesianModel converted =
      convert_to_bayesian(det, PriorConfig{cfg.prior_mu, cfg.prior_sigma}, MopedConfig{cfg.delta_moped, true});
  if (cfg.bayes_epochs == 0) return converted;
  ElboConfig elbo;
  elbo.kl_factor = cfg.kl_factor;
  elbo.num_train_samples = std::max<std::size_t>(train_set.size(), 1);
  BayesianTrainResult result = train_bayesian(converted, train_set, val_set, bayesian_train_config(cfg), elbo);
  if (trace) *trace = result.trace;
  return std::move(result.model);
}

TrainedPair train_pair(const ExperimentConfig& cfg, const LabeledImages& train_set, const LabeledImages& val_set,
                       std::size_t num_classes) {
  TrainedPair pair;
  pair.deterministic = train_deterministic(cfg, train_set, val_set, num_classes, &pair.deterministic_trace);
  if (cfg.uq_method == UqMethod::bnn) {
    pair.bayesian = train_bayesian_stage(cfg, pair.deterministic, train_set, val_set, &pair.bayesian_trace);
  }
  return pair;
}

UncertaintyReport evaluate_deterministic(const DeterministicModel& model, const LabeledImages& set,
                                         const std::vector<std::string>& ids) {
  const auto dists = predict_single(model, set.all());
  UncertaintyReport r = build_report(dists, set.labels, ids);
  r.num_classes = model.spec.num_classes;
  return r;
}

UncertaintyReport evaluate_uncertain(const ExperimentConfig& cfg, const TrainedPair& pair, const LabeledImages& set,
                                     const std::vector<std::string>& ids, std::size_t n) {
  const Rng rng = Rng(cfg.seed).split(kEvalStream);
  const Tensor batch = set.all();
  const auto dists = cfg.uq_method == UqMethod::bnn ? predict_mc(pair.bayesian, batch, n, rng)
                                                    : predict_mc(pair.deterministic, batch, n, rng);
  UncertaintyReport r = build_report(dists, set.labels, ids);
  r.num_classes = pair.deterministic.spec.num_classes;
  return r;
}

// ---------------------------------------------------------------- runners

namespace {

struct TaskData {
  LabeledImages train, val, test;
  std::vector<std::string> test_ids;
  std::vector<std::size_t> test_indices;
};

TaskData task_data(const synth::BenchmarkDataset& data, const synth::DatasetSplit& split, synth::LabelMode mode) {
  TaskData t;
  t.train = synth::to_labeled(data, split.train, mode);
  t.val = synth::to_labeled(data, split.val, mode);
  t.test = synth::to_labeled(data, split.test, mode);
  t.test_ids = synth::ids_for(data, split.test);
  t.test_indices = split.test;
  return t;
}

TaskData binary_task(const synth::BenchmarkDataset& data, int generator_class, std::uint64_t seed) {
  const int sources[2] = {0, generator_class};
  return task_data(data, synth::make_split(data, sources, seed), synth::LabelMode::binary);
}

std::vector<std::size_t> indices_where(const std::vector<std::size_t>& indices,
                                       const std::function<bool(std::size_t)>& keep) {
  std::vector<std::size_t> out;
  std::copy_if(indices.begin(), indices.end(), std::back_inserter(out), keep);
  return out;
}

void write_text(RunManifest& manifest, const fs::path& rel, const std::string& text) {
  const fs::path path = manifest.dir() / rel;
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
  manifest.add_file(path);
}

template <typename Fn>
std::string to_csv(Fn&& fn) {
  std::ostringstream out;
  fn(out);
  return out.str();
}

void write_report_bundle(RunManifest& m, const fs::path& sub, const std::string& tag, const UncertaintyReport& r,
                         const ExperimentConfig& cfg) {
  write_text(m, sub / ("report_" + tag + ".csv"), to_csv([&](std::ostream& o) { write_report_csv(o, r); }));
  const auto fractions = default_retention_fractions();
  write_text(m, sub / ("retention_" + tag + ".csv"),
             to_csv([&](std::ostream& o) { write_retention_csv(o, retention_curve(r, fractions, cfg.retention_key)); }));
  write_text(m, sub / ("histogram_" + tag + ".csv"), to_csv([&](std::ostream& o) {
               write_histogram_csv(o, density_histogram(r, cfg.histogram_bins, HistogramSplit::correctness,
                                                        cfg.retention_key));
             }));
}

std::string trace_csv(const TrainTrace& trace) {
  std::string out = "epoch,train_loss,val_loss\n";
  out += "0,," + format_number(trace.initial_val_loss) + '\n';
  for (const auto& e : trace.epochs) {
    out += std::to_string(e.epoch) + ',' + format_number(e.train_loss) + ',' + format_number(e.val_loss) + '\n';
  }
  return out;
}

template <typename Body>
auto guarded(RunManifest& manifest, Body&& body) {
  try {
    auto result = body();
    manifest.complete();
    return result;
  } catch (const std::exception& e) {
    manifest.fail(e.what());
    throw;
  }
}

bool selected(const ExperimentConfig& cfg, const std::string& g) {
  return cfg.generator.empty() || cfg.generator == kAllGenerators || cfg.generator == g;
}

TaskData pooled_binary_task(const synth::BenchmarkDataset& data, std::uint64_t seed) {
  std::vector<int> sources(data.num_sources());
  std::iota(sources.begin(), sources.end(), 0);
  return task_data(data, synth::make_split(data, sources, seed), synth::LabelMode::binary);
}

std::string target_generator(const ExperimentConfig& cfg, const std::string& preferred) {
  if (!cfg.generator.empty()) return cfg.generator;
  if (std::find(cfg.generators.begin(), cfg.generators.end(), preferred) != cfg.generators.end()) return preferred;
  return cfg.generators.front();
}

const char* uq_tag(const ExperimentConfig& cfg) { return cfg.uq_method == UqMethod::bnn ? "bayes" : "mcdropout"; }

}  // namespace

std::vector<BinaryOutcome> run_binary(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg);
  return guarded(manifest, [&] {
    manifest.begin_phase("generate");
    const auto data = configured_dataset(cfg);
    manifest.end_phase();
    std::vector<BinaryOutcome> outcomes;
    std::vector<SummaryRow> rows;
    std::vector<std::pair<std::string, TaskData>> tasks;
    if (cfg.task == Task::binary_all) {
      tasks.emplace_back(kAllGenerators, pooled_binary_task(data, cfg.seed));
    } else {
      for (const auto& g : cfg.generators) {
        if (!selected(cfg, g)) continue;
        tasks.emplace_back(g, binary_task(data, data.generator_index(g), cfg.seed));
      }
    }
    for (const auto& [name, t] : tasks) {
      manifest.begin_phase("train:" + name);
      const TrainedPair pair = train_pair(cfg, t.train, t.val, 2);
      manifest.end_phase();
      manifest.begin_phase("evaluate:" + name);
      BinaryOutcome o;
      o.generator = name;
      o.deterministic = evaluate_deterministic(pair.deterministic, t.test, t.test_ids);
      o.uncertain = evaluate_uncertain(cfg, pair, t.test, t.test_ids, cfg.mc_samples);
      write_text(manifest, fs::path(name) / "trace_det.csv", trace_csv(pair.deterministic_trace));
      if (cfg.uq_method == UqMethod::bnn) {
        write_text(manifest, fs::path(name) / "trace_bayes.csv", trace_csv(pair.bayesian_trace));
      }
      write_report_bundle(manifest, name, "det", o.deterministic, cfg);
      write_report_bundle(manifest, name, uq_tag(cfg), o.uncertain, cfg);
      rows.push_back(summarize("binary:" + name, "det", o.deterministic));
      rows.push_back(summarize("binary:" + name, uq_tag(cfg), o.uncertain));
      outcomes.push_back(std::move(o));
      manifest.end_phase();
    }
    write_text(manifest, "summary.csv", summary_csv(rows));
    return outcomes;
  });
}

SourceOutcome run_source_detection(const ExperimentConfig& cfg) {
  validate(cfg);
  if (cfg.generators.size() < 2) throw std::invalid_argument("source detection needs at least 3 source classes");
  RunManifest manifest(cfg.output_dir, cfg);
  return guarded(manifest, [&] {
    manifest.begin_phase("generate");
    const auto data = configured_dataset(cfg);
    std::vector<int> sources(data.num_sources());
    std::iota(sources.begin(), sources.end(), 0);
    const TaskData t = task_data(data, synth::make_split(data, sources, cfg.seed), synth::LabelMode::source);
    manifest.end_phase();
    const std::size_t k = data.num_sources();
    manifest.begin_phase("train");
    const TrainedPair pair = train_pair(cfg, t.train, t.val, k);
    manifest.end_phase();
    manifest.begin_phase("evaluate");
    SourceOutcome o;
    o.class_names.push_back("real");
    for (const auto& g : data.generators) o.class_names.push_back(g.name);
    o.deterministic = evaluate_deterministic(pair.deterministic, t.test, t.test_ids);
    o.uncertain = evaluate_uncertain(cfg, pair, t.test, t.test_ids, cfg.mc_samples);
    o.confusion.assign(k, std::vector<std::size_t>(k, 0));
    for (const auto& r : o.uncertain.records) {
      ++o.confusion[static_cast<std::size_t>(r.true_class)][static_cast<std::size_t>(r.predicted_class)];
    }
    write_report_bundle(manifest, ".", "det", o.deterministic, cfg);
    write_report_bundle(manifest, ".", uq_tag(cfg), o.uncertain, cfg);
    std::string confusion = "true,pred,count\n";
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        confusion += o.class_names[a] + ',' + o.class_names[b] + ',' + std::to_string(o.confusion[a][b]) + '\n';
      }
    }
    write_text(manifest, "confusion.csv", confusion);

    std::vector<SummaryRow> rows;
    rows.push_back(summarize("source", "det", o.deterministic));
    rows.push_back(summarize("source", uq_tag(cfg), o.uncertain));
    for (std::size_t c = 0; c < k; ++c) {
      UncertaintyReport per;
      per.num_classes = k;
      for (const auto& r : o.uncertain.records) {
        if (static_cast<std::size_t>(r.true_class) == c) per.records.push_back(r);
      }
      const double n = static_cast<double>(std::max<std::size_t>(per.records.size(), 1));
      std::size_t correct = 0;
      for (const auto& r : per.records) {
        per.mean_pu += r.pu / n;
        per.mean_mu += r.mu / n;
        per.mean_var_u += r.var_u / n;
        correct += r.correct ? 1 : 0;
      }
      per.accuracy = accuracy_percent(correct, per.records.size());
      rows.push_back(summarize("source:" + o.class_names[c], uq_tag(cfg), per));
    }
    write_text(manifest, "summary.csv", summary_csv(rows));
    manifest.end_phase();
    return o;
  });
}

std::vector<LooOutcome> run_loo(const ExperimentConfig& cfg) {
  validate(cfg);
  if (cfg.generators.size() < 3) throw std::invalid_argument("leave-one-out needs at least 3 generators");
  RunManifest top(cfg.output_dir, cfg);
  return guarded(top, [&] {
    top.begin_phase("generate");
    const auto data = configured_dataset(cfg);
    std::vector<int> sources(data.num_sources());
    std::iota(sources.begin(), sources.end(), 0);
    const synth::DatasetSplit full = synth::make_split(data, sources, cfg.seed);
    top.end_phase();
    std::vector<LooOutcome> outcomes;
    std::vector<SummaryRow> rows;
    const auto fractions = default_retention_fractions();
    for (const auto& g : cfg.generators) {
      const int held = data.generator_index(g);
      RunManifest sub(fs::path(cfg.output_dir) / g, cfg);
      LooOutcome o = guarded(sub, [&] {
        sub.begin_phase("train");
        const synth::DatasetSplit split = synth::make_loo_split(data, g, cfg.seed);
        const TaskData t = task_data(data, split, synth::LabelMode::binary);
        const TrainedPair pair = train_pair(cfg, t.train, t.val, 2);
        sub.end_phase();
        sub.begin_phase("evaluate");
        auto eval = [&](const std::vector<std::size_t>& idx) {
          const LabeledImages set = synth::to_labeled(data, idx, synth::LabelMode::binary);
          return evaluate_uncertain(cfg, pair, set, synth::ids_for(data, idx), cfg.mc_samples);
        };
        LooOutcome out;
        out.left_out = g;
        out.held_out = eval(indices_where(split.test, [&](std::size_t i) { return data.source[i] == held; }));
        out.in_dist = eval(indices_where(full.test, [&](std::size_t i) { return data.source[i] != held; }));
        out.loo_test = eval(split.test);
        out.held_out_curve = retention_curve(out.loo_test, fractions, cfg.retention_key);
        out.in_dist_curve = retention_curve(out.in_dist, fractions, cfg.retention_key);
        write_text(sub, "report_heldout.csv", to_csv([&](std::ostream& os) { write_report_csv(os, out.held_out); }));
        write_text(sub, "report_indist.csv", to_csv([&](std::ostream& os) { write_report_csv(os, out.in_dist); }));
        write_text(sub, "retention_heldout.csv",
                   to_csv([&](std::ostream& os) { write_retention_csv(os, out.held_out_curve); }));
        write_text(sub, "retention_indist.csv",
                   to_csv([&](std::ostream& os) { write_retention_csv(os, out.in_dist_curve); }));
        return out;
      });
      top.add_file(sub.path());
      rows.push_back(summarize("loo:" + g, "heldout", o.held_out));
      rows.push_back(summarize("loo:" + g, "indist", o.in_dist));
      rows.push_back(summarize("loo:" + g, "loo_test", o.loo_test));
      outcomes.push_back(std::move(o));
    }
    write_text(top, "summary.csv", summary_csv(rows));
    return outcomes;
  });
}

std::vector<RegionOutcome> run_region(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg);
  return guarded(manifest, [&] {
    manifest.begin_phase("generate");
    const auto data = configured_dataset(cfg);
    const auto masked = synth::apply_region_mask(data, synth::make_region_mask(cfg.mask, synth::mean_pixel(data)));
    manifest.end_phase();
    std::vector<RegionOutcome> outcomes;
    std::vector<SummaryRow> rows;
    const std::string mask = synth::mask_name(cfg.mask);
    for (const auto& g : cfg.generators) {
      if (!selected(cfg, g)) continue;
      manifest.begin_phase("region:" + g);
      RegionOutcome o;
      o.generator = g;
      const int cls = data.generator_index(g);
      for (const bool use_mask : {false, true}) {
        const TaskData t = binary_task(use_mask ? masked : data, cls, cfg.seed);
        const TrainedPair pair = train_pair(cfg, t.train, t.val, 2);
        UncertaintyReport r = evaluate_uncertain(cfg, pair, t.test, t.test_ids, cfg.mc_samples);
        const std::string tag = use_mask ? mask : "full";
        write_text(manifest, fs::path(g) / ("report_" + tag + ".csv"),
                   to_csv([&](std::ostream& os) { write_report_csv(os, r); }));
        rows.push_back(summarize("region:" + g, tag, r));
        (use_mask ? o.masked : o.full) = std::move(r);
      }
      outcomes.push_back(std::move(o));
      manifest.end_phase();
    }
    write_text(manifest, "summary.csv", summary_csv(rows));
    return outcomes;
  });
}

AblationOutcome run_ablation(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg);
  return guarded(manifest, [&] {
    AblationOutcome o;
    o.axis = cfg.ablation_axis;
    // Dropout ratio is ablated on the mouth-warp generator, everything else
    // on the pooled binary task.
    o.generator = cfg.generator.empty()
                      ? (cfg.ablation_axis == AblationAxis::dr ? target_generator(cfg, "G-NT") : kAllGenerators)
                      : cfg.generator;
    o.values = cfg.ablation_values;
    manifest.begin_phase("generate");
    const auto data = configured_dataset(cfg);
    const TaskData t = o.generator == kAllGenerators ? pooled_binary_task(data, cfg.seed)
                                                    : binary_task(data, data.generator_index(o.generator), cfg.seed);
    manifest.end_phase();

    ExperimentConfig base = cfg;
    if (cfg.ablation_axis == AblationAxis::dr) base.uq_method = UqMethod::mc_dropout;
    if (cfg.ablation_axis == AblationAxis::delta_moped || cfg.ablation_axis == AblationAxis::kl_factor) {
      base.uq_method = UqMethod::bnn;
    }
    manifest.begin_phase("train");
    TrainedPair pair;
    if (cfg.ablation_axis != AblationAxis::dr) {
      pair.deterministic = train_deterministic(base, t.train, t.val, 2, &pair.deterministic_trace);
    }
    if (cfg.ablation_axis == AblationAxis::n && base.uq_method == UqMethod::bnn) {
      pair.bayesian = train_bayesian_stage(base, pair.deterministic, t.train, t.val);
    }
    manifest.end_phase();

    std::vector<SummaryRow> rows;
    for (double value : cfg.ablation_values) {
      manifest.begin_phase(std::string(axis_name(cfg.ablation_axis)) + "=" + format_number(value));
      ExperimentConfig run = base;
      TrainedPair variant = pair;
      std::size_t n = cfg.mc_samples;
      switch (cfg.ablation_axis) {
        case AblationAxis::n:
          if (!(value >= 1.0) || value != std::floor(value)) throw std::invalid_argument("ablation: n must be a positive integer");
          n = static_cast<std::size_t>(value);
          break;
        case AblationAxis::delta_moped:
          run.delta_moped = value;
          validate(run);
          variant.bayesian = train_bayesian_stage(run, pair.deterministic, t.train, t.val);
          break;
        case AblationAxis::kl_factor:
          run.kl_factor = value;
          validate(run);
          variant.bayesian = train_bayesian_stage(run, pair.deterministic, t.train, t.val);
          break;
        case AblationAxis::dr:
          // The ratio is a property of the trained network: each value gets
          // its own model, trained and MC-sampled at that ratio.
          run.dropout = value;
          validate(run);
          variant.deterministic = train_deterministic(run, t.train, t.val, 2);
          break;
      }
      UncertaintyReport r = evaluate_uncertain(run, variant, t.test, t.test_ids, n);
      const std::string tag = std::string(axis_name(cfg.ablation_axis)) + "=" + format_number(value);
      write_text(manifest, "report_" + tag + ".csv", to_csv([&](std::ostream& os) { write_report_csv(os, r); }));
      rows.push_back(summarize("ablation:" + o.generator, tag, r));
      o.reports.push_back(std::move(r));
      manifest.end_phase();
    }
    write_text(manifest, "summary.csv", summary_csv(rows));
    return o;
  });
}

std::vector<AttackOutcome> run_attack(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg);
  return guarded(manifest, [&] {
    manifest.begin_phase("generate");
    const auto data = configured_dataset(cfg);
    manifest.end_phase();
    std::vector<AttackOutcome> outcomes;
    std::vector<SummaryRow> rows;
    std::string table = "generator,clean_accuracy,attacked_accuracy,relative_drop\n";
    for (const auto& g : cfg.generators) {
      if (!selected(cfg, g)) continue;
      manifest.begin_phase("attack:" + g);
      const TaskData t = binary_task(data, data.generator_index(g), cfg.seed);
      const TrainedPair pair = train_pair(cfg, t.train, t.val, 2);
      AttackOutcome o;
      o.generator = g;
      o.clean = evaluate_uncertain(cfg, pair, t.test, t.test_ids, cfg.mc_samples);
      const Tensor clean = t.test.all();
      const Tensor adv = fgsm_attack(pair.deterministic, clean, t.test.labels, AdversarialConfig{cfg.epsilon});
      for (std::size_t i = 0; i < clean.numel(); ++i) {
        o.max_perturbation = std::max(o.max_perturbation, std::abs(adv.values()[i] - clean.values()[i]));
      }
      LabeledImages attacked = t.test;
      attacked.pixels.assign(adv.values().begin(), adv.values().end());
      o.attacked = evaluate_uncertain(cfg, pair, attacked, t.test_ids, cfg.mc_samples);
      write_text(manifest, fs::path(g) / "report_clean.csv",
                 to_csv([&](std::ostream& os) { write_report_csv(os, o.clean); }));
      write_text(manifest, fs::path(g) / "report_fgsm.csv",
                 to_csv([&](std::ostream& os) { write_report_csv(os, o.attacked); }));
      rows.push_back(summarize("attack:" + g, "clean", o.clean));
      rows.push_back(summarize("attack:" + g, "fgsm", o.attacked));
      const double drop = o.clean.accuracy > 0 ? (o.clean.accuracy - o.attacked.accuracy) / o.clean.accuracy : 0.0;
      table += g + ',' + format_number(o.clean.accuracy) + ',' + format_number(o.attacked.accuracy) + ',' +
               format_number(drop) + '\n';
      outcomes.push_back(std::move(o));
      manifest.end_phase();
    }
    write_text(manifest, "attack.csv", table);
    write_text(manifest, "summary.csv", summary_csv(rows));
    return outcomes;
  });
}

MapOutcome run_maps(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg);
  return guarded(manifest, [&] {
    ExperimentConfig bnn = cfg;
    bnn.uq_method = UqMethod::bnn;
    const std::string g = target_generator(cfg, "G-NT");
    manifest.begin_phase("generate");
    const auto data = configured_dataset(bnn);
    const int cls = data.generator_index(g);
    const TaskData t = binary_task(data, cls, cfg.seed);
    std::vector<std::size_t> chosen;
    if (!cfg.map_samples.empty()) {
      for (const auto& id : cfg.map_samples) {
        std::size_t i = 0;
        while (i < data.size() && data.sample_id(i) != id) ++i;
        if (i == data.size()) throw std::invalid_argument("maps: unknown sample id '" + id + "'");
        chosen.push_back(i);
      }
    } else {
      for (std::size_t i : t.test_indices) {
        if (data.source[i] == cls && chosen.size() < cfg.map_count) chosen.push_back(i);
      }
    }
    manifest.end_phase();
    manifest.begin_phase("train");
    const TrainedPair pair = train_pair(bnn, t.train, t.val, 2);
    manifest.end_phase();

    manifest.begin_phase("maps");
    struct Result {
      SpatialMap saliency, bayes, uncertainty;
    };
    std::vector<Result> results(chosen.size());
    const Rng root = Rng(cfg.seed).split(kMapStream);
    parallel_for(chosen.size(), [&](std::size_t j) {
      const std::size_t i = chosen[j];
      const auto img = data.image(i);
      const Tensor x({1, data.shape.channels, data.shape.height, data.shape.width},
                     std::vector<double>(img.begin(), img.end()));
      const std::string id = data.sample_id(i);
      const Rng rng = root.split(i);
      results[j].saliency = saliency_map(pair.deterministic, x, kSaliencyCutoff, id);
      results[j].bayes = bayesian_saliency_map(pair.bayesian, x, cfg.mc_samples, rng.split(0), kBayesianSaliencyCutoff, id);
      results[j].uncertainty = uncertainty_map(pair.bayesian, x, cfg.mc_samples, rng.split(1), kUncertaintyCutoff, id);
    });
    MapOutcome o;
    std::string table = "sample_id,inside_mean,outside_mean\n";
    for (std::size_t j = 0; j < chosen.size(); ++j) {
      const std::size_t i = chosen[j];
      const auto underlay = cfg.map_overlays ? std::optional<std::span<const double>>(data.image(i)) : std::nullopt;
      for (const SpatialMap* m : {&results[j].saliency, &results[j].bayes, &results[j].uncertainty}) {
        for (const auto& p : render_map(*m, manifest.dir(), underlay)) {
          manifest.add_file(p);
          o.files.push_back(p);
        }
      }
      const synth::Box& mouth = data.layouts[i].mouth;
      std::vector<bool> mask(data.shape.height * data.shape.width, false);
      for (std::size_t y = 0; y < data.shape.height; ++y) {
        for (std::size_t x = 0; x < data.shape.width; ++x) {
          mask[y * data.shape.width + x] = mouth.contains(static_cast<int>(x), static_cast<int>(y));
        }
      }
      o.sample_ids.push_back(data.sample_id(i));
      o.inside_mean.push_back(masked_mean(results[j].uncertainty, mask, true));
      o.outside_mean.push_back(masked_mean(results[j].uncertainty, mask, false));
      table += o.sample_ids.back() + ',' + format_number(o.inside_mean.back()) + ',' +
               format_number(o.outside_mean.back()) + '\n';
    }
    write_text(manifest, "map_mass.csv", table);
    manifest.end_phase();
    return o;
  });
}

void run_gen_data(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg);
  guarded(manifest, [&] {
    manifest.begin_phase("generate");
    const auto data = configured_dataset(cfg);
    std::vector<int> sources(data.num_sources());
    std::iota(sources.begin(), sources.end(), 0);
    const fs::path dir = fs::path(cfg.output_dir) / "data";
    synth::write_dataset(dir, data, synth::make_split(data, sources, cfg.seed));
    manifest.add_file(dir / "labels.csv");
    for (std::size_t i = 0; i < data.size(); ++i) manifest.add_file(dir / (data.sample_id(i) + ".ppm"));
    manifest.end_phase();
    return 0;
  });
}

void run_task(const ExperimentConfig& cfg) {
  switch (cfg.task) {
    case Task::binary_per_generator:
    case Task::binary_all: run_binary(cfg); break;
    case Task::source_detection: run_source_detection(cfg); break;
    case Task::loo: run_loo(cfg); break;
    case Task::region: run_region(cfg); break;
    case Task::ablation: run_ablation(cfg); break;
    case Task::attack: run_attack(cfg); break;
    case Task::maps: run_maps(cfg); break;
  }
}

// ---------------------------------------------------------------- steps

namespace {

TaskData step_data(const ExperimentConfig& cfg) {
  const auto data = configured_dataset(cfg);
  if (cfg.generator.empty() || cfg.generator == kAllGenerators) return pooled_binary_task(data, cfg.seed);
  return binary_task(data, data.generator_index(cfg.generator), cfg.seed);
}

}  // namespace

void run_train_step(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg, "manifest_train.json");
  guarded(manifest, [&] {
    manifest.begin_phase("train");
    const TaskData t = step_data(cfg);
    const DeterministicModel det = train_deterministic(cfg, t.train, t.val, 2);
    const fs::path path = fs::path(cfg.output_dir) / "det.ckpt";
    save_checkpoint(path, det);
    manifest.add_file(path);
    manifest.end_phase();
    return 0;
  });
}

void run_convert_step(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg, "manifest_convert.json");
  guarded(manifest, [&] {
    manifest.begin_phase("convert");
    const DeterministicModel det = load_checkpoint(fs::path(cfg.output_dir) / "det.ckpt");
    const TaskData t = step_data(cfg);
    const BayesianModel bnn = train_bayesian_stage(cfg, det, t.train, t.val);
    const fs::path path = fs::path(cfg.output_dir) / "bnn.ckpt";
    save_bayesian_checkpoint(path, bnn);
    manifest.add_file(path);
    manifest.end_phase();
    return 0;
  });
}

void run_eval_step(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg, "manifest_eval.json");
  guarded(manifest, [&] {
    manifest.begin_phase("evaluate");
    TrainedPair pair;
    pair.deterministic = load_checkpoint(fs::path(cfg.output_dir) / "det.ckpt");
    if (cfg.uq_method == UqMethod::bnn) pair.bayesian = load_bayesian_checkpoint(fs::path(cfg.output_dir) / "bnn.ckpt");
    const TaskData t = step_data(cfg);
    const UncertaintyReport det = evaluate_deterministic(pair.deterministic, t.test, t.test_ids);
    const UncertaintyReport uq = evaluate_uncertain(cfg, pair, t.test, t.test_ids, cfg.mc_samples);
    write_text(manifest, "report_det.csv", to_csv([&](std::ostream& os) { write_report_csv(os, det); }));
    write_text(manifest, "report_uq.csv", to_csv([&](std::ostream& os) { write_report_csv(os, uq); }));
    const std::string name = cfg.generator.empty() ? kAllGenerators : cfg.generator;
    write_text(manifest, "summary.csv",
               summary_csv({summarize("eval:" + name, "det", det), summarize("eval:" + name, uq_tag(cfg), uq)}));
    manifest.end_phase();
    return 0;
  });
}

void run_retention_step(const ExperimentConfig& cfg) {
  validate(cfg);
  RunManifest manifest(cfg.output_dir, cfg, "manifest_retention.json");
  guarded(manifest, [&] {
    manifest.begin_phase("retention");
    const fs::path src = fs::path(cfg.output_dir) / "report_uq.csv";
    std::ifstream in(src);
    if (!in) throw std::runtime_error("cannot open " + src.string() + "; run eval first");
    const UncertaintyReport r = read_report_csv(in, 2);
    write_text(manifest, "retention.csv", to_csv([&](std::ostream& os) {
                 write_retention_csv(os, retention_curve(r, default_retention_fractions(), cfg.retention_key));
               }));
    write_text(manifest, "histogram.csv", to_csv([&](std::ostream& os) {
                 write_histogram_csv(os, density_histogram(r, cfg.histogram_bins, HistogramSplit::correctness,
                                                           cfg.retention_key));
               }));
    manifest.end_phase();
    return 0;
  });
}

}  // namespace uql
