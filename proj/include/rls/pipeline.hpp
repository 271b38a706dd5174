#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "rls/archive.hpp"
#include "rls/degrade.hpp"
#include "rls/flow.hpp"
#include "rls/generator.hpp"
#include "rls/metrics.hpp"
#include "rls/quantify.hpp"
#include "rls/search.hpp"
#include "rls/synthdata.hpp"
#include "rls/uncertainty.hpp"

namespace rls::pipeline {

struct DataSection {
  int train_images = 8000;
  int test_images = 100;
  int factor = 16;
};

struct GeneratorSection {
  gen::GeneratorArch arch;
  gen::GeneratorTrainConfig train;  // seed ignored, derived from run_seed
};

struct FlowSection {
  flow::FlowArch arch;
  flow::FlowTrainConfig train;  // seed ignored
  int num_styles = 100000;
};

struct RlsSection {
  search::RLSConfig config;
  int batch = 16;
};

struct MetricsSection {
  int embedder_per_class = 250;
  int embedder_epochs = 10;
  int ablate_images = 8;
  int robustness_images = 30;
  std::vector<degrade::Corruption> robustness{degrade::Corruption::gaussian_noise(0.05),
                                              degrade::Corruption::salt_pepper(0.02),
                                              degrade::Corruption::gaussian_blur(1.0)};
  int uncertainty_images = 2;
  uncertainty::UncertaintyConfig uncertainty;
};

struct AssaySection {
  int n_per_condition = 100;
  int translocation_factor = 16;
  int golgi_factor = 8;
  int classifier_train_per_class = 500;
  int classifier_control_per_class = 500;
  int classifier_epochs = 10;
};

struct RunConfig {
  DataSection data;
  GeneratorSection generator;
  FlowSection flow;
  RlsSection rls;
  MetricsSection metrics;
  AssaySection assay;
  std::uint64_t run_seed = 1;
  std::string output_dir = "work";
};

nlohmann::json to_json(const RunConfig& c);
/// Strict: unknown keys anywhere raise InvalidParameter; missing keys keep
/// their defaults.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Seed for one pipeline stage, derived from run_seed.
std::uint64_t stage_seed(const RunConfig& c, const std::string& stage);

/// Per-invocation overrides coming from the command line.
struct CommandOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<search::Variant> variant;
  std::optional<int> factor;
  std::optional<std::filesystem::path> input;  // sr
  std::optional<std::filesystem::path> run;    // report
  std::optional<std::filesystem::path> config_path;  // copied into the run directory
  bool quiet = false;
};

/// Applies seed/out/variant/factor overrides.
RunConfig apply_overrides(RunConfig c, const CommandOptions& o);

/// Everything a command leaves behind. Figures and tables are described
/// declaratively so `report` can regenerate them from the stored arrays.
struct RunOutputs {
  nlohmann::json result = nlohmann::json::object();
  Archive arrays{"run-arrays"};
  /// [{"file", "cell", "rows": [[{"array", "index"}, ...], ...]}] or
  /// [{"file", "type": "boxplot", "report": <AssayReport json with values>}]
  nlohmann::json figures = nlohmann::json::array();
  /// {"name.csv": {"columns": [...], "rows": [[...], ...]}}
  nlohmann::json tables = nlohmann::json::object();
};

/// Writes result.json, arrays/, every figure and table into `dir`.
void write_outputs(const std::filesystem::path& dir, const RunOutputs& out);
RunOutputs read_outputs(const std::filesystem::path& dir);
/// Re-renders figures and tables of an existing run directory.
void render_outputs(const std::filesystem::path& dir, const RunOutputs& out);

/// Artifact layout under output_dir:
///   artifacts/{dataset,generator,flow,embedder}/  shared checkpoints
///   runs/<stamp>-<command>/                       one directory per invocation
class Workspace {
 public:
  explicit Workspace(std::filesystem::path root) : root_(std::move(root)) {}
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path artifact(const std::string& name) const;
  /// Throws DependencyError naming `producer` when the artifact is absent.
  std::filesystem::path require(const std::string& name, const std::string& producer) const;
  std::filesystem::path new_run_dir(const std::string& command) const;

 private:
  std::filesystem::path root_;
};

using Logger = std::function<void(const std::string&)>;

struct CommandContext {
  RunConfig config;
  CommandOptions options;
  Workspace workspace;
  std::filesystem::path run_dir;
  Logger log;
};

const std::vector<std::string>& command_names();

/// Runs one command end to end: creates the run directory, echoes the
/// config, executes, writes outputs. Returns the run directory.
std::filesystem::path run_command(const std::string& name, const RunConfig& config,
                                  const CommandOptions& options);

// Building blocks shared by the commands and the acceptance suite.

struct Dataset {
  std::vector<synth::Sample> samples;
  std::vector<std::string> ids;
  std::string images_sha256;
};

Dataset make_dataset(const RunConfig& c);
void save_dataset(const std::filesystem::path& dir, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& dir);
std::string images_digest(std::span<const Image> images);

/// Pooled held-out HR images with their LR observations at `factor`.
struct TestSet {
  std::vector<Image> hr, lr;
  std::vector<std::string> ids;
};
TestSet make_test_set(const RunConfig& c, int n, int factor, const std::string& stage = "test");

degrade::DegradationSpec spec_for(int factor);

gen::GeneratorModel train_generator_stage(const RunConfig& c, const Dataset& d,
                                          const Logger& log);
flow::FlowModel train_flow_stage(const RunConfig& c, const gen::GeneratorModel& g,
                                 const Logger& log);
metrics::ToyEmbedder train_embedder_stage(const RunConfig& c, const Logger& log);

}  // namespace rls::pipeline
