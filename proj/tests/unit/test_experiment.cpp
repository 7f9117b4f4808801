#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "uql/experiment.hpp"

namespace uql {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> csv_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.path().extension() == ".csv") out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

ExperimentConfig tiny(const std::string& out) {
  ExperimentConfig cfg;
  cfg.generators = {"G-NT", "G-DF"};
  cfg.n_per_class = 12;
  cfg.epochs = 2;
  cfg.bayes_epochs = 1;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.mc_samples = 3;
  cfg.output_dir = (fs::temp_directory_path() / out).string();
  fs::remove_all(cfg.output_dir);
  return cfg;
}

TEST(Config, DefaultsMatchDocumentedConstants) {
  const ExperimentConfig cfg;
  EXPECT_EQ(cfg.mc_samples, 40u);
  EXPECT_EQ(cfg.delta_moped, 0.1);
  EXPECT_EQ(cfg.kl_factor, 1.0);
  EXPECT_EQ(cfg.learning_rate, 1e-4);
  EXPECT_EQ(cfg.dropout, 0.2);
  EXPECT_EQ(cfg.prior_sigma, 1.0);
  EXPECT_NO_THROW(validate(cfg));
}

TEST(Config, TextRoundTripIsLossless) {
  ExperimentConfig cfg;
  cfg.task = Task::ablation;
  cfg.generators = {"G-FSw", "G-NT"};
  cfg.learning_rate = 0.1 + 0.2;
  cfg.ablation_axis = AblationAxis::kl_factor;
  cfg.ablation_values = {1.0 / 3.0, 0.1};
  cfg.map_samples = {"G-NT_0003"};
  cfg.mask = synth::MaskKind::no_half_mouth;
  cfg.map_overlays = true;
  cfg.generator = "all";
  EXPECT_EQ(parse_config(config_to_text(cfg)), cfg);
  EXPECT_EQ(parse_config(config_to_text(ExperimentConfig{})), ExperimentConfig{});
}

TEST(Config, CommentsAndBlankLines) {
  const auto cfg = parse_config("# header\n\nseed = 11   # trailing\n  epochs=3\n");
  EXPECT_EQ(cfg.seed, 11u);
  EXPECT_EQ(cfg.epochs, 3u);
}

void expect_parse_error(const std::string& text, const std::string& fragment) {
  try {
    parse_config(text);
    FAIL() << "no error for: " << text;
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

TEST(Config, ErrorsNameTheLine) {
  expect_parse_error("seed = 1\nbogus = 2\n", "line 2");
  expect_parse_error("epochs = ten\n", "line 1");
  expect_parse_error("seed 4\n", "line 1");
  expect_parse_error("mc_samples = -3\n", "line 1");
  expect_parse_error("task = dance\n", "line 1");
}

TEST(Config, ValidationRejectsBadValues) {
  ExperimentConfig cfg;
  cfg.generators = {"G-NT", "G-NT"};
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = {};
  cfg.generator = "G-XX";
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = {};
  cfg.task = Task::maps;
  cfg.generator = "all";
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = {};
  cfg.amplitude_scale = 10.0;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
}

TEST(ContentHash, MatchesGitBlobId) {
  // `printf hello | git hash-object --stdin`
  EXPECT_EQ(content_hash("hello"), "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0");
  EXPECT_EQ(content_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Manifest, CompleteListsExistingFilesWithSizes) {
  const fs::path dir = fs::temp_directory_path() / "uql_manifest";
  fs::remove_all(dir);
  ExperimentConfig cfg;
  RunManifest m(dir, cfg);
  auto j = nlohmann::json::parse(slurp(m.path()));
  EXPECT_EQ(j["status"], "running");
  m.begin_phase("write");
  std::ofstream(dir / "a.txt") << "abc";
  m.add_file(dir / "a.txt");
  m.add_file(dir / "a.txt");
  m.end_phase();
  m.complete();
  j = nlohmann::json::parse(slurp(m.path()));
  EXPECT_EQ(j["status"], "complete");
  EXPECT_EQ(j["input_hash"], content_hash(config_to_text(cfg)));
  ASSERT_EQ(j["files"].size(), 1u);
  EXPECT_EQ(j["files"][0]["path"], "a.txt");
  EXPECT_EQ(j["files"][0]["bytes"], 3);
  EXPECT_EQ(j["phases"][0]["name"], "write");
}

TEST(Manifest, FailureIsRecorded) {
  const fs::path dir = fs::temp_directory_path() / "uql_manifest_fail";
  fs::remove_all(dir);
  RunManifest m(dir, ExperimentConfig{});
  m.fail("boom");
  const auto j = nlohmann::json::parse(slurp(m.path()));
  EXPECT_EQ(j["status"], "failed");
  EXPECT_EQ(j["error"], "boom");
}

TEST(Summary, HeaderAndRow) {
  const std::string csv = summary_csv({SummaryRow{"binary:G-NT", "det", 100, 0.5, 0.25, 0}});
  EXPECT_EQ(csv, "experiment,variant,accuracy,pu,mu,var_u\nbinary:G-NT,det,100,0.5,0.25,0\n");
}

TEST(Harness, TinyBinaryRunIsDeterministicAndConsistent) {
  ExperimentConfig a = tiny("uql_tiny_a");
  ExperimentConfig b = tiny("uql_tiny_b");
  const auto outcomes = run_binary(a);
  run_binary(b);
  const auto fa = csv_files(a.output_dir), fb = csv_files(b.output_dir);
  EXPECT_EQ(fa, fb);
  EXPECT_TRUE(fa.count("summary.csv"));
  EXPECT_TRUE(fa.count("G-NT/report_det.csv"));
  EXPECT_TRUE(fa.count("G-DF/report_bayes.csv"));
  ASSERT_EQ(outcomes.size(), 2u);
  for (const auto& o : outcomes) {
    for (const auto& r : o.uncertain.records) EXPECT_LE(r.mu, r.pu + 1e-12);
  }

  const auto j = nlohmann::json::parse(slurp(fs::path(a.output_dir) / "manifest.json"));
  EXPECT_EQ(j["status"], "complete");
  for (const auto& f : j["files"]) {
    const fs::path p = fs::path(a.output_dir) / f["path"].get<std::string>();
    ASSERT_TRUE(fs::exists(p)) << p;
    EXPECT_EQ(f["bytes"].get<long long>(), static_cast<long long>(fs::file_size(p)));
  }

  // Rerunning into the same directory overwrites byte-identically.
  run_binary(a);
  EXPECT_EQ(csv_files(a.output_dir), fa);
}

TEST(Harness, FailedRunMarksManifest) {
  ExperimentConfig cfg = tiny("uql_tiny_fail");
  cfg.task = Task::maps;
  cfg.generator = "G-NT";
  cfg.map_samples = {"no_such_sample"};
  EXPECT_THROW(run_maps(cfg), std::invalid_argument);
  const auto j = nlohmann::json::parse(slurp(fs::path(cfg.output_dir) / "manifest.json"));
  EXPECT_EQ(j["status"], "failed");
}

}  // namespace
}  // namespace uql
