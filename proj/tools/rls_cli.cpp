#include <CLI11.hpp>
#include <torch/torch.h>

#include <cstdlib>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>

#include "rls/errors.hpp"
#include "rls/pipeline.hpp"

namespace {

int error_exit(const std::string& command, const std::string& kind, const std::string& message,
               const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j = {{"status", "error"}, {"command", command}, {"error", kind}, {"message", message}};
  j.update(extra);
  std::cout << j.dump() << std::endl;
  return kind == "invalid_parameter" ? 2 : 1;
}

int num_workers() {
  const char* v = std::getenv("RLS_NUM_WORKERS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return n > 0 ? n : 1;
}

const std::map<std::string, std::string> kDescriptions = {
    {"synth", "render the training dataset"},
    {"train-gan", "train the style generator"},
    {"train-flow", "train the style-density flow"},
    {"diagnose-gauss", "compare flow and whitening gaussianization"},
    {"sr", "super-resolve one low-resolution image"},
    {"eval", "score RLS, unregularized search and bicubic on the test set"},
    {"ablate", "drop prior terms one at a time"},
    {"robustness", "super-resolve corrupted inputs"},
    {"uncertainty", "sample several solutions per input"},
    {"assay", "quantify phenotypes on HR, SR and LR images"},
    {"report", "re-render figures and tables of a finished run"},
};

}  // namespace

int main(int argc, char** argv) {
  using namespace rls;
  CLI::App app{"Regularized latent search super-resolution for synthetic fluorescence images"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  pipeline::CommandOptions opt;
  std::uint64_t seed = 0;
  std::string out, variant, input, run;
  int factor = 0;
  app.add_option("--config", config_path, "JSON config file (defaults are used for missing keys)")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "run seed; every stage seed is derived from it");
  app.add_option("--out", out, "workspace root holding artifacts/ and runs/");
  app.add_flag("--quiet", opt.quiet, "log to the run directory only");

  for (const auto& name : pipeline::command_names()) {
    auto* sub = app.add_subcommand(name, kDescriptions.at(name));
    if (name == "sr") {
      sub->add_option("--input", input, "low-resolution PNG")->required()->check(CLI::ExistingFile);
      sub->add_option("--factor", factor, "downscale factor (8 or 16)");
      sub->add_option("--variant", variant, "full, no_regu, no_pw or no_pcross");
    } else if (name == "eval" || name == "ablate" || name == "robustness" || name == "uncertainty") {
      sub->add_option("--factor", factor, "downscale factor (8 or 16)");
    } else if (name == "report") {
      sub->add_option("--run", run, "run directory to re-render")->required()->check(CLI::ExistingDirectory);
    }
  }
  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  torch::set_num_threads(num_workers());
  try {
    pipeline::RunConfig config;
    if (!config_path.empty()) {
      config = pipeline::load_config(config_path);
      opt.config_path = config_path;
    }
    if (app.count("--seed")) opt.seed = seed;
    if (!out.empty()) opt.out = out;
    if (factor) opt.factor = factor;
    if (!variant.empty()) opt.variant = search::variant_from_string(variant);
    if (!input.empty()) opt.input = input;
    if (!run.empty()) opt.run = run;
    const auto dir = pipeline::run_command(command, config, opt);
    std::cout << nlohmann::json{{"status", "ok"}, {"command", command}, {"run_dir", dir.string()}}.dump()
              << std::endl;
    return 0;
  } catch (const DependencyError& e) {
    return error_exit(command, "missing_dependency", e.what(), {{"producer", e.producer()}});
  } catch (const InvalidParameter& e) {
    return error_exit(command, "invalid_parameter", e.what());
  } catch (const std::exception& e) {
    return error_exit(command, "failure", e.what());
  }
}
