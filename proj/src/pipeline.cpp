#include "rls/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "rls/png_io.hpp"
#include "rls/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rls::pipeline {

// --- config ----------------------------------------------------------------

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InvalidParameter("config section '" + path_ + "' must be an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw InvalidParameter("config key '" + path_ + "." + key + "': " + e.what());
    }
  }

  const json* sub(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw InvalidParameter("unknown config key '" + path_ + "." + k + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

json corruptions_json(const std::vector<degrade::Corruption>& cs) {
  degrade::DegradationSpec s;
  s.extra = cs;
  return degrade::to_json(s).at("extra");
}

std::string corruption_name(const degrade::Corruption& c) {
  return corruptions_json({c}).at(0).dump();
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& ga = c.generator.arch;
  const auto& gt = c.generator.train;
  const auto& ft = c.flow.train;
  auto rls = search::to_json(c.rls.config);
  rls["batch"] = c.rls.batch;
  return {
      {"data",
       {{"train_images", c.data.train_images},
        {"test_images", c.data.test_images},
        {"factor", c.data.factor}}},
      {"generator",
       {{"arch",
         {{"d", ga.d},
          {"mapping_layers", ga.mapping_layers},
          {"mapping_lr_mul", ga.mapping_lr_mul},
          {"const_channels", ga.const_channels},
          {"channels", ga.channels},
          {"image_channels", ga.image_channels}}},
        {"epochs", gt.epochs},
        {"batch_size", gt.batch_size},
        {"lr", gt.lr},
        {"beta1", gt.beta1},
        {"beta2", gt.beta2},
        {"r1_gamma", gt.r1_gamma},
        {"r1_interval", gt.r1_interval},
        {"pl_weight", gt.pl_weight},
        {"pl_interval", gt.pl_interval},
        {"pl_decay", gt.pl_decay},
        {"ema_half_life_images", gt.ema_half_life_images},
        {"collapse_threshold", gt.collapse_threshold},
        {"collapse_epochs", gt.collapse_epochs}}},
      {"flow",
       {{"blocks", c.flow.arch.blocks},
        {"hidden", c.flow.arch.hidden},
        {"num_styles", c.flow.num_styles},
        {"epochs", ft.epochs},
        {"batch_size", ft.batch_size},
        {"lr", ft.lr},
        {"heldout_fraction", ft.heldout_fraction}}},
      {"rls", rls},
      {"metrics",
       {{"embedder_per_class", c.metrics.embedder_per_class},
        {"embedder_epochs", c.metrics.embedder_epochs},
        {"ablate_images", c.metrics.ablate_images},
        {"robustness_images", c.metrics.robustness_images},
        {"robustness", corruptions_json(c.metrics.robustness)},
        {"uncertainty_images", c.metrics.uncertainty_images},
        {"uncertainty", uncertainty::to_json(c.metrics.uncertainty)}}},
      {"assay",
       {{"n_per_condition", c.assay.n_per_condition},
        {"translocation_factor", c.assay.translocation_factor},
        {"golgi_factor", c.assay.golgi_factor},
        {"classifier_train_per_class", c.assay.classifier_train_per_class},
        {"classifier_control_per_class", c.assay.classifier_control_per_class},
        {"classifier_epochs", c.assay.classifier_epochs}}},
      {"run_seed", c.run_seed},
      {"output_dir", c.output_dir}};
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  Reader top(j, "config");
  if (const auto* s = top.sub("data")) {
    Reader r(*s, "data");
    r.read("train_images", c.data.train_images);
    r.read("test_images", c.data.test_images);
    r.read("factor", c.data.factor);
    r.finish();
  }
  if (const auto* s = top.sub("generator")) {
    Reader r(*s, "generator");
    auto& gt = c.generator.train;
    if (const auto* a = r.sub("arch")) {
      Reader ar(*a, "generator.arch");
      auto& ga = c.generator.arch;
      ar.read("d", ga.d);
      ar.read("mapping_layers", ga.mapping_layers);
      ar.read("mapping_lr_mul", ga.mapping_lr_mul);
      ar.read("const_channels", ga.const_channels);
      ar.read("channels", ga.channels);
      ar.read("image_channels", ga.image_channels);
      ar.finish();
    }
    r.read("epochs", gt.epochs);
    r.read("batch_size", gt.batch_size);
    r.read("lr", gt.lr);
    r.read("beta1", gt.beta1);
    r.read("beta2", gt.beta2);
    r.read("r1_gamma", gt.r1_gamma);
    r.read("r1_interval", gt.r1_interval);
    r.read("pl_weight", gt.pl_weight);
    r.read("pl_interval", gt.pl_interval);
    r.read("pl_decay", gt.pl_decay);
    r.read("ema_half_life_images", gt.ema_half_life_images);
    r.read("collapse_threshold", gt.collapse_threshold);
    r.read("collapse_epochs", gt.collapse_epochs);
    r.finish();
  }
  if (const auto* s = top.sub("flow")) {
    Reader r(*s, "flow");
    r.read("blocks", c.flow.arch.blocks);
    r.read("hidden", c.flow.arch.hidden);
    r.read("num_styles", c.flow.num_styles);
    r.read("epochs", c.flow.train.epochs);
    r.read("batch_size", c.flow.train.batch_size);
    r.read("lr", c.flow.train.lr);
    r.read("heldout_fraction", c.flow.train.heldout_fraction);
    r.finish();
  }
  if (const auto* s = top.sub("rls")) {
    if (!s->is_object()) throw InvalidParameter("config section 'rls' must be an object");
    auto body = *s;
    if (body.contains("batch")) {
      c.rls.batch = body.at("batch").get<int>();
      body.erase("batch");
    }
    c.rls.config = search::config_from_json(body);
  }
  if (const auto* s = top.sub("metrics")) {
    Reader r(*s, "metrics");
    r.read("embedder_per_class", c.metrics.embedder_per_class);
    r.read("embedder_epochs", c.metrics.embedder_epochs);
    r.read("ablate_images", c.metrics.ablate_images);
    r.read("robustness_images", c.metrics.robustness_images);
    if (const auto* rb = r.sub("robustness"))
      c.metrics.robustness = degrade::spec_from_json({{"extra", *rb}}).extra;
    r.read("uncertainty_images", c.metrics.uncertainty_images);
    if (const auto* u = r.sub("uncertainty"))
      c.metrics.uncertainty = uncertainty::uncertainty_config_from_json(*u);
    r.finish();
  }
  if (const auto* s = top.sub("assay")) {
    Reader r(*s, "assay");
    r.read("n_per_condition", c.assay.n_per_condition);
    r.read("translocation_factor", c.assay.translocation_factor);
    r.read("golgi_factor", c.assay.golgi_factor);
    r.read("classifier_train_per_class", c.assay.classifier_train_per_class);
    r.read("classifier_control_per_class", c.assay.classifier_control_per_class);
    r.read("classifier_epochs", c.assay.classifier_epochs);
    r.finish();
  }
  top.read("run_seed", c.run_seed);
  top.read("output_dir", c.output_dir);
  top.finish();

  if (c.data.train_images < 4 || c.data.test_images < 1)
    throw InvalidParameter("data: train_images >= 4 and test_images >= 1 required");
  if (c.rls.batch < 1) throw InvalidParameter("rls.batch must be >= 1");
  for (int f : {c.data.factor, c.assay.translocation_factor, c.assay.golgi_factor})
    if (f != 8 && f != 16) throw InvalidParameter("downscale factors must be 8 or 16");
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw InvalidParameter("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw InvalidParameter("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t stage_seed(const RunConfig& c, const std::string& stage) {
  return derive_seed(stage, c.run_seed);
}

RunConfig apply_overrides(RunConfig c, const CommandOptions& o) {
  if (o.seed) c.run_seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.variant) c.rls.config.variant = *o.variant;
  if (o.factor) {
    if (*o.factor != 8 && *o.factor != 16) throw InvalidParameter("--factor must be 8 or 16");
    c.data.factor = *o.factor;
  }
  return c;
}

// --- outputs ---------------------------------------------------------------

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

std::string csv_cell(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "";
  if (v.is_number_float()) {
    std::ostringstream s;
    s << std::setprecision(10) << v.get<double>();
    return s.str();
  }
  return v.dump();
}

Image array_image(const Archive& arrays, const json& cell) {
  const auto t = arrays.get(cell.at("array").get<std::string>());
  return from_tensor(t[cell.at("index").get<int64_t>()]);
}

quantify::AssayReport report_from_json(const json& j) {
  quantify::AssayReport r;
  r.assay = synth::assay_from_string(j.at("assay"));
  for (const auto& t : j.at("tiers")) {
    quantify::TierReport tr;
    const auto name = t.at("tier").get<std::string>();
    for (auto tier : {quantify::Tier::HR, quantify::Tier::SR_RLS, quantify::Tier::SR_no_regu,
                      quantify::Tier::LR_upsampled})
      if (quantify::to_string(tier) == name) tr.tier = tier;
    tr.negative = t.at("negative").get<std::vector<double>>();
    tr.positive = t.at("positive").get<std::vector<double>>();
    r.tiers.push_back(std::move(tr));
  }
  return r;
}

json boxplot_figure(const std::string& file, const quantify::AssayReport& r) {
  json tiers = json::array();
  for (const auto& t : r.tiers)
    tiers.push_back({{"tier", quantify::to_string(t.tier)},
                     {"negative", t.negative},
                     {"positive", t.positive}});
  return {{"file", file},
          {"type", "boxplot"},
          {"report", {{"assay", synth::to_string(r.assay)}, {"tiers", tiers}}}};
}

json cell(const std::string& array, int64_t index) { return {{"array", array}, {"index", index}}; }

}  // namespace

void render_outputs(const fs::path& dir, const RunOutputs& out) {
  for (const auto& fig : out.figures) {
    const auto file = dir / fig.at("file").get<std::string>();
    const auto type = fig.value("type", "grid");
    if (type == "boxplot") {
      write_png16(file, quantify::render_boxplots(report_from_json(fig.at("report"))));
    } else if (type == "image") {
      write_png16(file, array_image(out.arrays, fig));
    } else {
      std::vector<std::vector<Image>> rows;
      for (const auto& row : fig.at("rows")) {
        rows.emplace_back();
        for (const auto& c : row) rows.back().push_back(array_image(out.arrays, c));
      }
      write_png16(file, contact_sheet(rows, fig.value("cell", 64)));
    }
  }
  for (const auto& [name, table] : out.tables.items()) {
    std::ostringstream s;
    const auto& cols = table.at("columns");
    for (std::size_t i = 0; i < cols.size(); ++i) s << (i ? "," : "") << cols[i].get<std::string>();
    s << '\n';
    for (const auto& row : table.at("rows")) {
      for (std::size_t i = 0; i < row.size(); ++i) s << (i ? "," : "") << csv_cell(row[i]);
      s << '\n';
    }
    write_text(dir / name, s.str());
  }
}

void write_outputs(const fs::path& dir, const RunOutputs& out) {
  fs::create_directories(dir);
  write_text(dir / "result.json", out.result.dump(2) + "\n");
  out.arrays.save(dir / "arrays");
  write_text(dir / "figures.json",
             json{{"figures", out.figures}, {"tables", out.tables}}.dump() + "\n");
  render_outputs(dir, out);
}

RunOutputs read_outputs(const fs::path& dir) {
  if (!fs::exists(dir / "result.json") || !fs::exists(dir / "figures.json"))
    throw InvalidParameter(dir.string() + " is not a run directory");
  RunOutputs out;
  std::ifstream rf(dir / "result.json");
  out.result = json::parse(rf);
  std::ifstream ff(dir / "figures.json");
  const auto spec = json::parse(ff);
  out.figures = spec.at("figures");
  out.tables = spec.at("tables");
  out.arrays = Archive::load(dir / "arrays", "run-arrays");
  return out;
}

// --- workspace ---------------------------------------------------------------

fs::path Workspace::artifact(const std::string& name) const { return root_ / "artifacts" / name; }

fs::path Workspace::require(const std::string& name, const std::string& producer) const {
  const auto p = artifact(name);
  if (!fs::exists(p / "manifest.json")) throw DependencyError(name + " checkpoint at " + p.string(), producer);
  return p;
}

fs::path Workspace::new_run_dir(const std::string& command) const {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << std::put_time(&tm, "%Y%m%d-%H%M%S");
  auto base = root_ / "runs" / (stamp.str() + "-" + command);
  auto dir = base;
  for (int k = 1; fs::exists(dir); ++k) dir = base.string() + "-" + std::to_string(k);
  fs::create_directories(dir);
  return dir;
}

// --- building blocks -----------------------------------------------------------

std::string images_digest(std::span<const Image> images) {
  std::string bytes;
  for (const auto& img : images)
    bytes.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size() * sizeof(float));
  return sha256_hex(bytes);
}

Dataset make_dataset(const RunConfig& c) {
  Dataset d;
  d.samples = synth::sample_pooled(c.data.train_images, stage_seed(c, "gan-train"));
  std::vector<Image> imgs;
  for (const auto& s : d.samples) {
    d.ids.push_back(quantify::image_id(s.params));
    imgs.push_back(s.image);
  }
  d.images_sha256 = images_digest(imgs);
  return d;
}

void save_dataset(const fs::path& dir, const Dataset& d) {
  fs::create_directories(dir);
  json params = json::array();
  for (const auto& s : d.samples) params.push_back(synth::to_json(s.params));
  const json body = {{"count", d.samples.size()},
                     {"images_sha256", d.images_sha256},
                     {"ids", d.ids},
                     {"params", params}};
  write_text(dir / "dataset.json", body.dump() + "\n");
  write_text(dir / "manifest.json", json{{"format", "rls-dataset"},
                                         {"format_version", 1},
                                         {"count", d.samples.size()},
                                         {"images_sha256", d.images_sha256},
                                         {"rendering", "images are re-rendered from params"}}
                                        .dump(2) + "\n");
}

static json read_dataset_json(const fs::path& dir) {
  std::ifstream f(dir / "dataset.json");
  if (!f) throw DependencyError("dataset at " + dir.string(), "synth");
  return json::parse(f);
}

Dataset load_dataset(const fs::path& dir) {
  const auto body = read_dataset_json(dir);
  Dataset d;
  std::vector<Image> imgs;
  for (const auto& p : body.at("params")) {
    auto params = synth::params_from_json(p);
    d.samples.push_back({synth::render_phenotype(params), params});
    d.ids.push_back(quantify::image_id(params));
    imgs.push_back(d.samples.back().image);
  }
  d.images_sha256 = images_digest(imgs);
  if (d.images_sha256 != body.at("images_sha256").get<std::string>())
    throw Error("dataset at " + dir.string() + " does not re-render to its recorded digest");
  return d;
}

static std::vector<std::string> load_dataset_ids(const fs::path& dir) {
  return read_dataset_json(dir).at("ids").get<std::vector<std::string>>();
}

degrade::DegradationSpec spec_for(int factor) {
  degrade::DegradationSpec s;
  s.downscale_factor = factor;
  s.validate(synth::kImageSize);
  return s;
}

TestSet make_test_set(const RunConfig& c, int n, int factor, const std::string& stage) {
  TestSet t;
  const auto spec = spec_for(factor);
  for (auto& s : synth::sample_pooled(std::max(4, (n + 3) / 4 * 4), stage_seed(c, stage))) {
    if (static_cast<int>(t.hr.size()) == n) break;
    t.ids.push_back(quantify::image_id(s.params));
    t.lr.push_back(degrade::observe(s.image, spec, s.params.rng_seed));
    t.hr.push_back(std::move(s.image));
  }
  return t;
}

gen::GeneratorModel train_generator_stage(const RunConfig& c, const Dataset& d, const Logger& log) {
  std::vector<Image> imgs;
  for (const auto& s : d.samples) imgs.push_back(s.image);
  auto cfg = c.generator.train;
  cfg.seed = stage_seed(c, "generator");
  cfg.progress = log;
  log("training generator on " + std::to_string(imgs.size()) + " images for " +
      std::to_string(cfg.epochs) + " epochs");
  return gen::train_generator(stack_images(imgs), c.generator.arch, cfg);
}

flow::FlowModel train_flow_stage(const RunConfig& c, const gen::GeneratorModel& g, const Logger& log) {
  torch::NoGradGuard ng;
  auto z = g.sample_latents(c.flow.num_styles, stage_seed(c, "flow-styles"));
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < z.size(0); i += 1024)
    parts.push_back(g.map_batch(z.narrow(0, i, std::min<int64_t>(1024, z.size(0) - i))));
  auto styles = torch::cat(parts);
  auto arch = c.flow.arch;
  arch.d = g.d();
  arch.permutation_seed = stage_seed(c, "flow-permutations");
  auto cfg = c.flow.train;
  cfg.seed = stage_seed(c, "flow");
  cfg.progress = log;
  log("training flow on " + std::to_string(styles.size(0)) + " style vectors for " +
      std::to_string(cfg.epochs) + " epochs");
  torch::AutoGradMode grad(true);
  return flow::train_flow(styles, arch, cfg);
}

metrics::ToyEmbedder train_embedder_stage(const RunConfig& c, const Logger& log) {
  cnn::CnnTrainConfig cfg;
  cfg.epochs = c.metrics.embedder_epochs;
  cfg.seed = stage_seed(c, "embedder");
  cfg.progress = log;
  log("training toy embedder on " + std::to_string(4 * c.metrics.embedder_per_class) +
      " held-out images");
  return metrics::train_embedder(c.metrics.embedder_per_class, stage_seed(c, "embedder-data"), cfg);
}

// --- commands ----------------------------------------------------------------

namespace {

gen::GeneratorModel need_generator(const CommandContext& ctx) {
  return gen::GeneratorModel::load(ctx.workspace.require("generator", "train-gan"));
}

flow::FlowModel need_flow(const CommandContext& ctx) {
  return flow::FlowModel::load(ctx.workspace.require("flow", "train-flow"));
}

metrics::ToyEmbedder need_embedder(const CommandContext& ctx) {
  const auto dir = ctx.workspace.artifact("embedder");
  if (fs::exists(dir / "manifest.json")) return metrics::ToyEmbedder::load(dir);
  auto e = train_embedder_stage(ctx.config, ctx.log);
  e.save(dir);
  return e;
}

void put_images(RunOutputs& out, const std::string& name, std::span<const Image> imgs) {
  out.arrays.put(name, stack_images(imgs));
}

std::vector<Image> sr_images(const std::vector<search::RLSResult>& rs) {
  std::vector<Image> v;
  for (const auto& r : rs) v.push_back(r.sr_image);
  return v;
}

double mean_of(const std::vector<search::RLSResult>& rs, double search::Terms::*field) {
  double s = 0.0;
  for (const auto& r : rs) s += r.best.*field;
  return s / static_cast<double>(rs.size());
}

std::vector<search::RLSResult> run_variant(const CommandContext& ctx, std::span<const Image> lr,
                                           const gen::GeneratorModel& g, const flow::FlowModel& f,
                                           int factor, search::Variant variant) {
  auto cfg = ctx.config.rls.config;
  cfg.variant = variant;
  ctx.log("super-resolving " + std::to_string(lr.size()) + " images, variant " +
          search::to_string(variant) + ", factor " + std::to_string(factor));
  return search::superresolve_many(lr, g, f, spec_for(factor), cfg, ctx.config.rls.batch);
}

RunOutputs cmd_synth(const CommandContext& ctx) {
  auto d = make_dataset(ctx.config);
  save_dataset(ctx.workspace.artifact("dataset"), d);
  RunOutputs out;
  std::map<std::string, int> counts;
  for (const auto& s : d.samples)
    ++counts[synth::to_string(s.params.assay) + "/" + synth::to_string(s.params.class_label)];
  out.result = {{"num_images", d.samples.size()},
                {"images_sha256", d.images_sha256},
                {"class_counts", counts}};
  std::vector<Image> ex;
  for (int i = 0; i < std::min<int>(32, d.samples.size()); ++i) ex.push_back(d.samples[i].image);
  put_images(out, "examples", ex);
  json rows = json::array();
  for (int i = 0; i < static_cast<int>(ex.size()); ++i) {
    if (i % 8 == 0) rows.push_back(json::array());
    rows.back().push_back(cell("examples", i));
  }
  out.figures.push_back({{"file", "examples.png"}, {"cell", 64}, {"rows", rows}});
  return out;
}

RunOutputs cmd_train_gan(const CommandContext& ctx) {
  auto d = load_dataset(ctx.workspace.require("dataset", "synth"));
  auto g = train_generator_stage(ctx.config, d, ctx.log);
  g.save(ctx.workspace.artifact("generator"));
  RunOutputs out;
  json log = json::array();
  json rows = json::array();
  for (const auto& e : g.meta().log) {
    log.push_back({{"epoch", e.epoch},
                   {"d_loss", e.d_loss},
                   {"g_loss", e.g_loss},
                   {"r1", e.r1},
                   {"path_length_penalty", e.path_length_penalty},
                   {"path_length_mean", e.path_length_mean}});
    rows.push_back({e.epoch, e.d_loss, e.g_loss, e.r1, e.path_length_penalty, e.path_length_mean});
  }
  out.result = {{"epochs", g.meta().epochs},
                {"num_images", g.meta().num_images},
                {"checkpoint_digest", g.digest()},
                {"log", log}};
  out.tables["training_log.csv"] = {
      {"columns", {"epoch", "d_loss", "g_loss", "r1", "path_length_penalty", "path_length_mean"}},
      {"rows", rows}};
  torch::NoGradGuard ng;
  auto z = g.sample_latents(32, stage_seed(ctx.config, "gan-samples"));
  auto imgs = g.synthesize_batch(gen::broadcast_batch(g.map_batch(z), g.num_layers()));
  out.arrays.put("samples", imgs);
  json grid = json::array();
  for (int i = 0; i < 32; ++i) {
    if (i % 8 == 0) grid.push_back(json::array());
    grid.back().push_back(cell("samples", i));
  }
  out.figures.push_back({{"file", "samples.png"}, {"cell", 64}, {"rows", grid}});
  return out;
}

RunOutputs cmd_train_flow(const CommandContext& ctx) {
  auto g = need_generator(ctx);
  auto f = train_flow_stage(ctx.config, g, ctx.log);
  f.save(ctx.workspace.artifact("flow"));
  const auto& m = f.meta();
  RunOutputs out;
  json rows = json::array();
  for (std::size_t e = 0; e < m.train_log_density.size(); ++e)
    rows.push_back({e, m.train_log_density[e], m.heldout_log_density[e]});
  const double tr = m.train_log_density.back(), ho = m.heldout_log_density.back();
  out.result = {{"epochs", m.epochs},
                {"num_train", m.num_train},
                {"num_heldout", m.num_heldout},
                {"train_log_density", m.train_log_density},
                {"heldout_log_density", m.heldout_log_density},
                {"heldout_relative_gap", std::abs(ho - tr) / std::abs(tr)},
                {"checkpoint_digest", f.digest()}};
  out.tables["flow_training.csv"] = {{"columns", {"epoch", "train_log_density", "heldout_log_density"}},
                                     {"rows", rows}};
  return out;
}

json diag_json(const flow::GaussDiagnostics& g) {
  return {{"ks_statistic", g.ks_statistic}, {"ks_pvalue", g.ks_pvalue}, {"mean_norm", g.mean_norm}};
}

RunOutputs cmd_diagnose(const CommandContext& ctx) {
  auto g = need_generator(ctx);
  auto f = need_flow(ctx);
  constexpr int kN = 5000;
  torch::NoGradGuard ng;
  auto styles = g.map_batch(g.sample_latents(kN, stage_seed(ctx.config, "diagnose")));
  auto raw = flow::diagnose_gaussianization(styles);
  auto pulse = flow::diagnose_gaussianization(flow::pulse_gaussianize(styles));
  auto z = f.forward(styles).first;
  auto fl = flow::diagnose_gaussianization(z);
  RunOutputs out;
  out.result = {{"n", kN},
                {"d", g.d()},
                {"raw", diag_json(raw)},
                {"pulse", diag_json(pulse)},
                {"flow", diag_json(fl)},
                {"ordering_flow_lt_pulse_lt_raw",
                 fl.ks_statistic < pulse.ks_statistic && pulse.ks_statistic < raw.ks_statistic},
                {"flow_mean_norm_relative_error",
                 std::abs(fl.mean_norm - g.d()) / static_cast<double>(g.d())}};
  json rows = json::array();
  for (int i = 0; i < kN; ++i)
    rows.push_back({raw.squared_norms[i], pulse.squared_norms[i], fl.squared_norms[i]});
  out.tables["squared_norms.csv"] = {{"columns", {"raw", "pulse", "flow"}}, {"rows", rows}};
  return out;
}

RunOutputs cmd_sr(const CommandContext& ctx) {
  if (!ctx.options.input) throw InvalidParameter("sr requires --input LR.png");
  auto g = need_generator(ctx);
  auto f = need_flow(ctx);
  const auto y = read_png(*ctx.options.input);
  const int factor = ctx.config.data.factor;
  const auto spec = spec_for(factor);
  auto cfg = ctx.config.rls.config;
  ctx.log("super-resolving " + ctx.options.input->string() + " (" + std::to_string(y.width) + "x" +
          std::to_string(y.height) + ", factor " + std::to_string(factor) + ", variant " +
          search::to_string(cfg.variant) + ")");
  auto r = search::superresolve(y, g, f, spec, cfg);
  RunOutputs out;
  out.result = search::to_json(r);
  out.result.erase("trajectory");
  out.result["input_sha256"] = sha256_file(*ctx.options.input);
  out.result["data_term_per_lr_entry"] = r.best.data_term / search::lr_entries(y);
  json rows = json::array();
  for (std::size_t i = 0; i < r.trajectory.size(); ++i) {
    const auto& t = r.trajectory[i];
    rows.push_back({i, t.data_term, t.p_w, t.p_cross, t.total});
  }
  out.tables["trajectory.csv"] = {{"columns", {"iteration", "data_term", "p_w", "p_cross", "total"}},
                                  {"rows", rows}};
  put_images(out, "lr", std::span(&y, 1));
  put_images(out, "sr", std::span(&r.sr_image, 1));
  out.arrays.put("w_plus", r.w_plus_hat.rows);
  out.figures.push_back({{"file", "sr.png"}, {"type", "image"}, {"array", "sr"}, {"index", 0}});
  out.figures.push_back({{"file", "lr_sr.png"}, {"cell", 128}, {"rows", {{cell("lr", 0), cell("sr", 0)}}}});
  return out;
}

RunOutputs cmd_eval(const CommandContext& ctx) {
  auto g = need_generator(ctx);
  auto f = need_flow(ctx);
  auto e = need_embedder(ctx);
  const int factor = ctx.config.data.factor;
  auto test = make_test_set(ctx.config, ctx.config.data.test_images, factor);
  auto full = run_variant(ctx, test.lr, g, f, factor, search::Variant::full);
  auto none = run_variant(ctx, test.lr, g, f, factor, search::Variant::no_regu);
  std::vector<Image> bicubic;
  for (const auto& y : test.lr) bicubic.push_back(degrade::upscale_bicubic(y, factor));
  const auto sr_full = sr_images(full), sr_none = sr_images(none);

  RunOutputs out;
  json variants = json::object();
  json summary_rows = json::array();
  const double entries = search::lr_entries(test.lr.front());
  auto add = [&](const std::string& name, const std::vector<Image>& imgs,
                 const std::vector<search::RLSResult>* rs) {
    auto rep = metrics::evaluate(name, imgs, test.hr, test.ids, e);
    auto j = metrics::to_json(rep);
    json pw = nullptr, dt = nullptr;
    if (rs) {
      pw = mean_of(*rs, &search::Terms::p_w);
      dt = mean_of(*rs, &search::Terms::data_term) / entries;
    }
    j["mean_p_w"] = pw;
    j["mean_data_term_per_lr_entry"] = dt;
    variants[name] = j;
    summary_rows.push_back({name, rep.psnr_db, rep.ms_ssim, j["fid_toy"], j["kid_toy"],
                            rep.percep_toy, pw, dt});
    json per = json::array();
    for (const auto& s : rep.per_image) per.push_back({s.id, s.psnr_db, s.ms_ssim, s.percep_toy});
    out.tables["per_image_" + name + ".csv"] = {
        {"columns", {"image_id", "psnr_db", "ms_ssim", "percep_toy"}}, {"rows", per}};
    return rep;
  };
  auto rep_full = add("RLS", sr_full, &full);
  auto rep_none = add("no_regu", sr_none, &none);
  add("bicubic", bicubic, nullptr);
  out.result = {{"factor", factor},
                {"n", test.hr.size()},
                {"variants", variants},
                {"fid_rls_lt_no_regu", rep_full.fid_toy < rep_none.fid_toy},
                {"p_w_rls_gt_no_regu", mean_of(full, &search::Terms::p_w) >
                                           mean_of(none, &search::Terms::p_w)}};
  out.tables["metrics.csv"] = {{"columns", {"variant", "psnr_db", "ms_ssim", "fid_toy", "kid_toy",
                                            "percep_toy", "mean_p_w", "mean_data_term_per_lr_entry"}},
                               {"rows", summary_rows}};
  put_images(out, "hr", test.hr);
  put_images(out, "lr", test.lr);
  put_images(out, "sr_full", sr_full);
  put_images(out, "sr_no_regu", sr_none);
  put_images(out, "bicubic", bicubic);
  json rows = json::array();
  for (int i = 0; i < std::min<int>(6, test.hr.size()); ++i)
    rows.push_back({cell("lr", i), cell("bicubic", i), cell("sr_no_regu", i), cell("sr_full", i),
                    cell("hr", i)});
  out.figures.push_back({{"file", "comparison.png"}, {"cell", 64}, {"rows", rows}});
  return out;
}

RunOutputs cmd_ablate(const CommandContext& ctx) {
  auto g = need_generator(ctx);
  auto f = need_flow(ctx);
  const int factor = ctx.config.data.factor;
  auto test = make_test_set(ctx.config, ctx.config.metrics.ablate_images, factor, "ablate");
  RunOutputs out;
  put_images(out, "hr", test.hr);
  put_images(out, "lr", test.lr);
  json variants = json::object(), rows = json::array();
  const double entries = search::lr_entries(test.lr.front());
  const std::vector<search::Variant> order = {search::Variant::no_regu, search::Variant::no_pw,
                                              search::Variant::no_pcross, search::Variant::full};
  for (auto v : order) {
    auto rs = run_variant(ctx, test.lr, g, f, factor, v);
    const auto imgs = sr_images(rs);
    double psnr = 0.0;
    for (std::size_t i = 0; i < imgs.size(); ++i) psnr += metrics::psnr(imgs[i], test.hr[i]);
    psnr /= static_cast<double>(imgs.size());
    const auto name = search::to_string(v);
    variants[name] = {{"mean_data_term_per_lr_entry", mean_of(rs, &search::Terms::data_term) / entries},
                      {"mean_p_w", mean_of(rs, &search::Terms::p_w)},
                      {"mean_p_cross", mean_of(rs, &search::Terms::p_cross)},
                      {"mean_psnr_db", psnr}};
    rows.push_back({name, variants[name]["mean_data_term_per_lr_entry"], variants[name]["mean_p_w"],
                    variants[name]["mean_p_cross"], psnr});
    put_images(out, "sr_" + name, imgs);
  }
  out.result = {{"factor", factor}, {"n", test.hr.size()}, {"variants", variants}};
  out.tables["ablation.csv"] = {
      {"columns", {"variant", "mean_data_term_per_lr_entry", "mean_p_w", "mean_p_cross", "mean_psnr_db"}},
      {"rows", rows}};
  json grid = json::array();
  for (std::size_t i = 0; i < test.hr.size(); ++i) {
    json row = {cell("lr", i)};
    for (auto v : order) row.push_back(cell("sr_" + search::to_string(v), i));
    row.push_back(cell("hr", i));
    grid.push_back(row);
  }
  out.figures.push_back({{"file", "ablation.png"}, {"cell", 64}, {"rows", grid}});
  return out;
}

RunOutputs cmd_robustness(const CommandContext& ctx) {
  auto g = need_generator(ctx);
  auto f = need_flow(ctx);
  const int factor = ctx.config.data.factor;
  auto test = make_test_set(ctx.config, ctx.config.metrics.robustness_images, factor, "robustness");
  RunOutputs out;
  put_images(out, "hr", test.hr);
  put_images(out, "lr_clean", test.lr);
  auto clean = sr_images(run_variant(ctx, test.lr, g, f, factor, ctx.config.rls.config.variant));
  put_images(out, "sr_clean", clean);
  std::vector<double> psnr_clean;
  for (std::size_t i = 0; i < clean.size(); ++i) psnr_clean.push_back(metrics::psnr(clean[i], test.hr[i]));

  json conditions = json::array(), rows = json::array();
  rows.push_back({"clean", stats::median(psnr_clean), 0.0});
  int k = 0;
  for (const auto& c : ctx.config.metrics.robustness) {
    auto spec = spec_for(factor);
    spec.extra = {c};
    std::vector<Image> noisy;
    for (std::size_t i = 0; i < test.lr.size(); ++i)
      noisy.push_back(degrade::corrupt(test.lr[i], spec, stage_seed(ctx.config, "robustness-noise") + i));
    auto sr = sr_images(run_variant(ctx, noisy, g, f, factor, ctx.config.rls.config.variant));
    std::vector<double> psnr, delta;
    for (std::size_t i = 0; i < sr.size(); ++i) {
      psnr.push_back(metrics::psnr(sr[i], test.hr[i]));
      delta.push_back(psnr_clean[i] - psnr.back());
    }
    const auto label = corruption_name(c);
    conditions.push_back({{"corruption", corruptions_json({c}).at(0)},
                          {"median_psnr_db", stats::median(psnr)},
                          {"median_psnr_drop_db", stats::median(delta)}});
    rows.push_back({label, stats::median(psnr), stats::median(delta)});
    put_images(out, "lr_" + std::to_string(k), noisy);
    put_images(out, "sr_" + std::to_string(k), sr);
    ++k;
  }
  out.result = {{"factor", factor},
                {"n", test.hr.size()},
                {"clean_median_psnr_db", stats::median(psnr_clean)},
                {"conditions", conditions}};
  out.tables["robustness.csv"] = {{"columns", {"condition", "median_psnr_db", "median_psnr_drop_db"}},
                                  {"rows", rows}};
  json grid = json::array();
  for (int i = 0; i < std::min<int>(4, test.hr.size()); ++i) {
    json row = {cell("hr", i), cell("lr_clean", i), cell("sr_clean", i)};
    for (int j = 0; j < k; ++j) {
      row.push_back(cell("lr_" + std::to_string(j), i));
      row.push_back(cell("sr_" + std::to_string(j), i));
    }
    grid.push_back(row);
  }
  out.figures.push_back({{"file", "robustness.png"}, {"cell", 64}, {"rows", grid}});
  return out;
}

RunOutputs cmd_uncertainty(const CommandContext& ctx) {
  auto g = need_generator(ctx);
  auto f = need_flow(ctx);
  const int factor = ctx.config.data.factor;
  const auto& ucfg = ctx.config.metrics.uncertainty;
  auto test = make_test_set(ctx.config, ctx.config.metrics.uncertainty_images, factor, "uncertainty");
  RunOutputs out;
  put_images(out, "hr", test.hr);
  put_images(out, "lr", test.lr);
  json items = json::array(), grid = json::array();
  for (std::size_t i = 0; i < test.lr.size(); ++i) {
    ctx.log("sampling " + std::to_string(ucfg.n) + " solutions for image " + test.ids[i]);
    auto r = uncertainty::sample_solutions(test.lr[i], stage_seed(ctx.config, "uncertainty") + 1000 * i,
                                           g, f, spec_for(factor), ctx.config.rls.config, ucfg);
    auto j = uncertainty::to_json(r);
    j["image_id"] = test.ids[i];
    items.push_back(j);
    const auto name = "samples_" + std::to_string(i);
    std::vector<Image> imgs;
    for (const auto& s : r.samples) imgs.push_back(s.sr_image);
    put_images(out, name, imgs);
    json row = {cell("lr", i), cell("hr", i)};
    for (std::size_t s = 0; s < imgs.size(); ++s) row.push_back(cell(name, s));
    grid.push_back(row);
  }
  out.result = {{"factor", factor}, {"images", items}};
  out.figures.push_back({{"file", "uncertainty.png"}, {"cell", 64}, {"rows", grid}});
  return out;
}

RunOutputs cmd_assay(const CommandContext& ctx) {
  auto g = need_generator(ctx);
  auto f = need_flow(ctx);
  const auto gen_ids = load_dataset_ids(ctx.workspace.require("dataset", "synth"));
  const auto& ac = ctx.config.assay;
  RunOutputs out;
  std::vector<quantify::ClassifierReport> accuracy;
  for (auto assay : {synth::Assay::translocation, synth::Assay::golgi}) {
    const auto name = synth::to_string(assay);
    const int factor = assay == synth::Assay::translocation ? ac.translocation_factor : ac.golgi_factor;
    const auto spec = spec_for(factor);
    ctx.log("assay " + name + ": " + std::to_string(ac.n_per_condition) +
            " images per condition at factor " + std::to_string(factor));
    auto run = quantify::prepare_assay(assay, ac.n_per_condition, stage_seed(ctx.config, "assay"), spec);
    for (auto tier : {quantify::Tier::SR_RLS, quantify::Tier::SR_no_regu, quantify::Tier::LR_upsampled})
      quantify::reconstruct(run, tier, g, f, spec, ctx.config.rls.config, ctx.config.rls.batch);
    auto rep = quantify::measure_assay(run);

    quantify::ClassifierConfig cc;
    cc.train_per_class = ac.classifier_train_per_class;
    cc.control_test_per_class = ac.classifier_control_per_class;
    cc.train.epochs = ac.classifier_epochs;
    cc.train.seed = stage_seed(ctx.config, "classifier-" + name);
    cc.seed = stage_seed(ctx.config, "classifier-data");
    ctx.log("assay " + name + ": classifier experiment");
    auto clf = quantify::classifier_experiment(run, gen_ids, spec, cc);
    accuracy.push_back(clf);

    out.result[name] = {{"factor", factor},
                        {"report", quantify::to_json(rep)},
                        {"classifier", quantify::to_json(clf)}};
    json rows = json::array();
    for (const auto& t : rep.tiers) {
      for (double v : t.negative) rows.push_back({quantify::to_string(t.tier), "negative", v});
      for (double v : t.positive) rows.push_back({quantify::to_string(t.tier), "positive", v});
    }
    out.tables["assay_" + name + ".csv"] = {{"columns", {"tier", "condition", "value"}}, {"rows", rows}};
    out.figures.push_back(boxplot_figure("boxplot_" + name + ".png", rep));

    const auto prefix = name + "_";
    put_images(out, prefix + "hr", run.images[quantify::Tier::HR]);
    put_images(out, prefix + "lr", run.lr);
    put_images(out, prefix + "rls", run.images[quantify::Tier::SR_RLS]);
    put_images(out, prefix + "no_regu", run.images[quantify::Tier::SR_no_regu]);
    json grid = json::array();
    const int n = ac.n_per_condition;
    for (int i : {0, 1, 2, n, n + 1, n + 2})
      grid.push_back({cell(prefix + "lr", i), cell(prefix + "no_regu", i), cell(prefix + "rls", i),
                      cell(prefix + "hr", i)});
    out.figures.push_back({{"file", "examples_" + name + ".png"}, {"cell", 64}, {"rows", grid}});
  }
  json acc_rows = json::array();
  for (const auto& r : accuracy) {
    json row = {synth::to_string(r.assay)};
    for (const char* k : {"LR", "no_regu", "RLS", "HR"}) row.push_back(r.accuracy.at(k));
    row.push_back(r.shuffled_control);
    acc_rows.push_back(row);
  }
  out.tables["accuracy.csv"] = {{"columns", {"assay", "LR", "no_regu", "RLS", "HR", "shuffled_control"}},
                                {"rows", acc_rows}};
  return out;
}

using Command = RunOutputs (*)(const CommandContext&);

const std::map<std::string, Command>& registry() {
  static const std::map<std::string, Command> r = {
      {"synth", cmd_synth},         {"train-gan", cmd_train_gan},
      {"train-flow", cmd_train_flow}, {"diagnose-gauss", cmd_diagnose},
      {"sr", cmd_sr},               {"eval", cmd_eval},
      {"ablate", cmd_ablate},       {"robustness", cmd_robustness},
      {"uncertainty", cmd_uncertainty}, {"assay", cmd_assay}};
  return r;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synth", "train-gan", "train-flow", "diagnose-gauss",
                                                 "sr",    "eval",      "ablate",     "robustness",
                                                 "uncertainty", "assay", "report"};
  return names;
}

fs::path run_command(const std::string& name, const RunConfig& base, const CommandOptions& options) {
  if (name == "report") {
    if (!options.run) throw InvalidParameter("report requires --run DIR");
    render_outputs(*options.run, read_outputs(*options.run));
    return *options.run;
  }
  const auto it = registry().find(name);
  if (it == registry().end()) throw InvalidParameter("unknown command '" + name + "'");

  const auto config = apply_overrides(base, options);
  Workspace ws(config.output_dir);
  const auto dir = ws.new_run_dir(name);
  write_text(dir / "config.json", to_json(config).dump(2) + "\n");
  if (options.config_path) fs::copy_file(*options.config_path, dir / "config.input.json");

  auto log_file = std::make_shared<std::ofstream>(dir / "log.txt");
  const auto start = std::chrono::steady_clock::now();
  Logger log = [log_file, start, quiet = options.quiet](const std::string& msg) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ostringstream line;
    line << "[" << std::fixed << std::setprecision(1) << t << "s] " << msg;
    *log_file << line.str() << std::endl;
    if (!quiet) std::cerr << line.str() << std::endl;
  };
  CommandContext ctx{config, options, ws, dir, log};
  log("command " + name + ", run_seed " + std::to_string(config.run_seed));
  try {
    auto out = it->second(ctx);
    out.result["command"] = name;
    write_outputs(dir, out);
  } catch (const std::exception& e) {
    log(std::string("failed: ") + e.what());
    write_text(dir / "error.json", json{{"command", name}, {"error", e.what()}}.dump(2) + "\n");
    throw;
  }
  log("done");
  return dir;
}

}  // namespace rls::pipeline
