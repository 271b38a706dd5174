#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "rls/errors.hpp"
#include "rls/pipeline.hpp"
#include "test_util.hpp"

using namespace rls;
using namespace rls::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rls_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST(RunConfig, RoundTrip) {
  RunConfig c;
  c.data.factor = 8;
  c.generator.train.epochs = 3;
  c.flow.arch.hidden = 64;
  c.rls.config.variant = search::Variant::no_pcross;
  c.rls.batch = 4;
  c.metrics.robustness = {degrade::Corruption::gaussian_blur(2.0)};
  c.metrics.uncertainty.n = 3;
  c.assay.golgi_factor = 16;
  c.run_seed = 99;
  auto j = to_json(c);
  EXPECT_EQ(to_json(config_from_json(j)), j);
  EXPECT_EQ(to_json(config_from_json(nlohmann::json::object())), to_json(RunConfig{}));
}

TEST(RunConfig, UnknownKeysRejected) {
  EXPECT_THROW(config_from_json({{"dataa", {}}}), InvalidParameter);
  EXPECT_THROW(config_from_json({{"data", {{"train_image", 5}}}}), InvalidParameter);
  EXPECT_THROW(config_from_json({{"generator", {{"arch", {{"depth", 5}}}}}}), InvalidParameter);
  EXPECT_THROW(config_from_json({{"rls", {{"lambda", 1}}}}), InvalidParameter);
  EXPECT_THROW(config_from_json({{"data", {{"factor", 4}}}}), InvalidParameter);
  EXPECT_THROW(config_from_json({{"data", {{"factor", "sixteen"}}}}), InvalidParameter);
}

TEST(RunConfig, OverridesAndStageSeeds) {
  CommandOptions o;
  o.seed = 5;
  o.factor = 8;
  o.variant = search::Variant::no_regu;
  auto c = apply_overrides(RunConfig{}, o);
  EXPECT_EQ(c.run_seed, 5u);
  EXPECT_EQ(c.data.factor, 8);
  EXPECT_EQ(c.rls.config.variant, search::Variant::no_regu);
  EXPECT_NE(stage_seed(c, "flow"), stage_seed(c, "generator"));
  o.factor = 4;
  EXPECT_THROW(apply_overrides(RunConfig{}, o), InvalidParameter);
}

TEST(Commands, MissingFlowNamesProducer) {
  const auto root = fresh_dir("deps");
  RunConfig c;
  c.output_dir = root.string();
  CommandOptions o;
  o.quiet = true;
  try {
    run_command("eval", c, o);
    FAIL() << "expected a dependency error";
  } catch (const DependencyError& e) {
    EXPECT_EQ(e.producer(), "train-gan");
  }
  fixtures::tiny_generator(64).save(Workspace(root).artifact("generator"));
  try {
    run_command("eval", c, o);
    FAIL() << "expected a dependency error";
  } catch (const DependencyError& e) {
    EXPECT_EQ(e.producer(), "train-flow");
    EXPECT_NE(std::string(e.what()).find("train-flow"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(Commands, UnknownCommand) {
  EXPECT_THROW(run_command("train-everything", RunConfig{}, {}), InvalidParameter);
}

TEST(Commands, SynthRunIsSelfDescribingAndReportable) {
  const auto root = fresh_dir("synth");
  RunConfig c;
  c.output_dir = root.string();
  c.data.train_images = 16;
  CommandOptions o;
  o.quiet = true;
  const auto dir = run_command("synth", c, o);
  for (const char* f : {"config.json", "log.txt", "result.json", "figures.json", "examples.png"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(load_config(dir / "config.json").data.train_images, 16);

  const auto png = read_bytes(dir / "examples.png");
  fs::remove(dir / "examples.png");
  const auto same = run_command("report", c, CommandOptions{.run = dir});
  EXPECT_EQ(same, dir);
  EXPECT_EQ(read_bytes(dir / "examples.png"), png);

  // Same seed, same result; the dataset artifact re-renders to its digest.
  const auto again = run_command("synth", c, o);
  EXPECT_NE(again, dir);
  EXPECT_EQ(read_bytes(again / "result.json"), read_bytes(dir / "result.json"));
  auto d = load_dataset(Workspace(root).artifact("dataset"));
  EXPECT_EQ(d.samples.size(), 16u);
  fs::remove_all(root);
}

TEST(TestSets, DisjointFromTraining) {
  RunConfig c;
  c.data.train_images = 40;
  auto train = make_dataset(c);
  auto test = make_test_set(c, 10, 16);
  EXPECT_EQ(test.hr.size(), 10u);
  EXPECT_EQ(test.lr.front().height, 4);
  EXPECT_NO_THROW(quantify::check_disjoint({{"train", train.ids}, {"test", test.ids}}));
}
