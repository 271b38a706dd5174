#include "rls/search.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace rls::search {

namespace {

const nlohmann::json kVariantNames = {"full", "no_regu", "no_pw", "no_pcross"};

template <typename T>
T take(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

void check_w_plus(const torch::Tensor& w_plus) {
  if (w_plus.dim() != 3) throw ShapeError("w+ batch must be [B,L,d]");
}

}  // namespace

std::string to_string(Variant v) { return kVariantNames.at(static_cast<int>(v)); }

Variant variant_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i)
    if (kVariantNames[i] == s) return static_cast<Variant>(i);
  throw InvalidParameter("unknown variant '" + s + "'");
}

void RLSConfig::validate() const {
  if (!(lambda_w >= 0) || !(lambda_c >= 0)) throw InvalidParameter("lambdas must be >= 0");
  if (iterations < 1) throw InvalidParameter("iterations must be >= 1");
  if (!(learning_rate > 0)) throw InvalidParameter("learning_rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
    throw InvalidParameter("Adam betas must lie in [0,1)");
  if (mean_style_samples < 1) throw InvalidParameter("mean_style_samples must be >= 1");
  if (!(init_jitter >= 0)) throw InvalidParameter("init_jitter must be >= 0");
}

double RLSConfig::effective_lambda_w() const {
  return variant == Variant::no_regu || variant == Variant::no_pw ? 0.0 : lambda_w;
}

double RLSConfig::effective_lambda_c() const {
  return variant == Variant::no_regu || variant == Variant::no_pcross ? 0.0 : lambda_c;
}

nlohmann::json to_json(const RLSConfig& c) {
  return {{"lambda_w", c.lambda_w},
          {"lambda_c", c.lambda_c},
          {"iterations", c.iterations},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"init", c.init == InitKind::mean_style ? "mean_style" : "given"},
          {"mean_style_samples", c.mean_style_samples},
          {"mean_style_seed", c.mean_style_seed},
          {"init_jitter", c.init_jitter},
          {"variant", to_string(c.variant)},
          {"seed", c.seed}};
}

RLSConfig config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> keys = {
      "lambda_w", "lambda_c",           "iterations",      "learning_rate",
      "beta1",    "beta2",              "init",            "mean_style_samples",
      "mean_style_seed", "init_jitter", "variant",         "seed"};
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw InvalidParameter("unknown rls config key '" + k + "'");
  RLSConfig c;
  c.lambda_w = take(j, "lambda_w", c.lambda_w);
  c.lambda_c = take(j, "lambda_c", c.lambda_c);
  c.iterations = take(j, "iterations", c.iterations);
  c.learning_rate = take(j, "learning_rate", c.learning_rate);
  c.beta1 = take(j, "beta1", c.beta1);
  c.beta2 = take(j, "beta2", c.beta2);
  const auto init = take<std::string>(j, "init", "mean_style");
  if (init != "mean_style" && init != "given") throw InvalidParameter("unknown init '" + init + "'");
  c.init = init == "given" ? InitKind::given : InitKind::mean_style;
  c.mean_style_samples = take(j, "mean_style_samples", c.mean_style_samples);
  c.mean_style_seed = take(j, "mean_style_seed", c.mean_style_seed);
  c.init_jitter = take(j, "init_jitter", c.init_jitter);
  c.variant = variant_from_string(take<std::string>(j, "variant", "full"));
  c.seed = take(j, "seed", c.seed);
  c.validate();
  return c;
}

static nlohmann::json terms_json(const Terms& t) {
  return {{"data_term", t.data_term}, {"p_w", t.p_w}, {"p_cross", t.p_cross}, {"total", t.total}};
}

nlohmann::json to_json(const RLSResult& r) {
  nlohmann::json traj = nlohmann::json::array();
  for (const auto& t : r.trajectory) traj.push_back(terms_json(t));
  return {{"best_iteration", r.best_iteration},
          {"best", terms_json(r.best)},
          {"per_row_log_density", r.per_row_log_density},
          {"config", r.config_echo},
          {"trajectory", traj}};
}

NonFiniteObjective::NonFiniteObjective(int it, int idx, const Terms& t)
    : NonFiniteError("non-finite objective at iteration " + std::to_string(it) + " (item " +
                     std::to_string(idx) + "): " + terms_json(t).dump()),
      iteration(it),
      item(idx),
      terms(t) {}

torch::Tensor data_term_batch(const torch::Tensor& y, const torch::Tensor& w_plus,
                              const gen::GeneratorModel& generator, int factor) {
  check_w_plus(w_plus);
  auto x = generator.synthesize_batch(w_plus.to(generator.dtype()));
  auto pred = degrade::downscale_tensor(x, factor);
  if (pred.sizes() != y.sizes())
    throw ShapeError("data_term: LR image shape does not match D(G(w+))");
  return (y.to(pred.scalar_type()) - pred).abs().flatten(1).sum(1);
}

torch::Tensor prior_w_batch(const torch::Tensor& w_plus, const flow::FlowModel& flow) {
  check_w_plus(w_plus);
  const auto b = w_plus.size(0), l = w_plus.size(1);
  auto logp = flow.log_density(w_plus.reshape({b * l, w_plus.size(2)}));
  return logp.reshape({b, l}).mean(1);
}

torch::Tensor prior_cross_batch(const torch::Tensor& w_plus) {
  check_w_plus(w_plus);
  auto diff = w_plus.unsqueeze(2) - w_plus.unsqueeze(1);  // [B,L,L,d]
  return -0.5 * diff.square().sum({1, 2, 3});
}

int lr_entries(const Image& y) { return y.height * y.width * y.channels; }

static torch::Tensor as_batch(const gen::ExtendedStyle& w) {
  if (w.rows.dim() != 2) throw ShapeError("w+ must be [L,d]");
  return w.rows.unsqueeze(0);
}

double data_term(const Image& y, const gen::ExtendedStyle& w_plus,
                 const gen::GeneratorModel& generator, const degrade::DegradationSpec& spec) {
  torch::NoGradGuard ng;
  return data_term_batch(to_tensor(y).unsqueeze(0), as_batch(w_plus), generator,
                         spec.downscale_factor)
      .item<double>();
}

double prior_w(const gen::ExtendedStyle& w_plus, const flow::FlowModel& flow) {
  torch::NoGradGuard ng;
  return prior_w_batch(as_batch(w_plus), flow).item<double>();
}

double prior_cross(const gen::ExtendedStyle& w_plus) {
  torch::NoGradGuard ng;
  return prior_cross_batch(as_batch(w_plus).to(torch::kFloat64)).item<double>();
}

Terms objective(const Image& y, const gen::ExtendedStyle& w_plus,
                const gen::GeneratorModel& generator, const flow::FlowModel& flow,
                const degrade::DegradationSpec& spec, const RLSConfig& config) {
  Terms t;
  t.data_term = data_term(y, w_plus, generator, spec);
  t.p_w = prior_w(w_plus, flow);
  t.p_cross = prior_cross(w_plus);
  t.total = t.data_term - config.effective_lambda_w() * t.p_w -
            config.effective_lambda_c() * t.p_cross;
  return t;
}

std::vector<RLSResult> superresolve_batch(std::span<const Image> ys,
                                          const gen::GeneratorModel& generator,
                                          const flow::FlowModel& flow,
                                          const degrade::DegradationSpec& spec,
                                          const RLSConfig& config,
                                          std::span<const std::uint64_t> seeds,
                                          const torch::Tensor& init) {
  config.validate();
  if (ys.empty()) return {};
  if (!seeds.empty() && seeds.size() != ys.size())
    throw InvalidParameter("superresolve_batch: one seed per image required");
  const int hr = generator.arch().resolution();
  spec.validate(hr);
  const int lr = hr / spec.downscale_factor;
  for (const auto& y : ys)
    if (y.height != lr || y.width != lr || y.channels != generator.arch().image_channels)
      throw ShapeError("superresolve: LR image must be " + std::to_string(lr) + "x" +
                       std::to_string(lr) + "x" +
                       std::to_string(generator.arch().image_channels));

  const auto b = static_cast<int64_t>(ys.size());
  const int l = generator.num_layers(), d = generator.d();
  const auto opts = torch::TensorOptions().dtype(generator.dtype());

  torch::Tensor start;
  if (init.defined()) {
    start = init.to(generator.dtype());
    if (start.dim() == 2) start = start.unsqueeze(0).expand({b, l, d});
    if (start.sizes() != torch::IntArrayRef({b, l, d})) throw ShapeError("init must be [L,d] or [B,L,d]");
  } else if (config.init == InitKind::given) {
    throw InvalidParameter("init=given requires an initial w+");
  } else {
    auto mean = generator.mean_style(config.mean_style_samples, config.mean_style_seed).values;
    start = mean.view({1, 1, d}).expand({b, l, d});
  }
  start = start.clone().contiguous();
  if (config.init_jitter > 0) {
    for (int64_t i = 0; i < b; ++i) {
      auto g = at::detail::createCPUGenerator(seeds.empty() ? config.seed + i : seeds[i]);
      start[i] += config.init_jitter * torch::randn({l, d}, g, opts);
    }
  }

  std::vector<torch::Tensor> y_list;
  for (const auto& y : ys) y_list.push_back(to_tensor(y));
  const auto y = torch::stack(y_list).to(generator.dtype());

  const double lw = config.effective_lambda_w(), lc = config.effective_lambda_c();
  auto w = start.detach().clone().set_requires_grad(true);
  torch::optim::Adam opt({w}, torch::optim::AdamOptions(config.learning_rate)
                                  .betas({config.beta1, config.beta2}));

  std::vector<RLSResult> results(b);
  std::vector<double> best_total(b, std::numeric_limits<double>::infinity());
  auto best_w = start.clone();

  for (int it = 0; it < config.iterations; ++it) {
    auto data = data_term_batch(y, w, generator, spec.downscale_factor).to(torch::kFloat64);
    torch::Tensor pw;
    if (lw > 0) {
      pw = prior_w_batch(w, flow);
    } else {
      torch::NoGradGuard ng;
      pw = prior_w_batch(w, flow);
    }
    auto pc = prior_cross_batch(w.to(torch::kFloat64));
    auto total = data - lw * pw - lc * pc;

    auto data_c = data.detach().contiguous(), pw_c = pw.detach().contiguous(),
         pc_c = pc.detach().contiguous(), total_c = total.detach().contiguous();
    for (int64_t i = 0; i < b; ++i) {
      Terms t{data_c[i].item<double>(), pw_c[i].item<double>(), pc_c[i].item<double>(),
              total_c[i].item<double>()};
      if (!std::isfinite(t.total)) throw NonFiniteObjective(it, static_cast<int>(i), t);
      results[i].trajectory.push_back(t);
      if (t.total < best_total[i]) {
        best_total[i] = t.total;
        results[i].best_iteration = it;
        results[i].best = t;
        best_w[i].copy_(w.detach()[i]);
      }
    }
    opt.zero_grad();
    total.sum().backward();
    opt.step();
  }

  torch::NoGradGuard ng;
  auto images = generator.synthesize_batch(best_w);
  auto row_logp = flow.log_density(best_w.reshape({b * l, d})).reshape({b, l}).contiguous();
  auto echo = to_json(config);
  echo["selection"] = "best_objective_iterate";
  echo["data_term_weight"] = 1.0;
  echo["factor"] = spec.downscale_factor;
  for (int64_t i = 0; i < b; ++i) {
    auto& r = results[i];
    r.w_plus_hat = {best_w[i].clone()};
    r.sr_image = from_tensor(images[i]);
    auto row = row_logp[i];
    r.per_row_log_density.assign(row.data_ptr<double>(), row.data_ptr<double>() + l);
    r.config_echo = echo;
    if (!seeds.empty() || config.init_jitter > 0)
      r.config_echo["seed"] = seeds.empty() ? config.seed + i : seeds[i];
  }
  return results;
}

RLSResult superresolve(const Image& y, const gen::GeneratorModel& generator,
                       const flow::FlowModel& flow, const degrade::DegradationSpec& spec,
                       const RLSConfig& config) {
  std::uint64_t seed = config.seed;
  return superresolve_batch(std::span(&y, 1), generator, flow, spec, config,
                            std::span(&seed, 1))
      .front();
}

std::vector<RLSResult> superresolve_many(std::span<const Image> ys,
                                         const gen::GeneratorModel& generator,
                                         const flow::FlowModel& flow,
                                         const degrade::DegradationSpec& spec,
                                         const RLSConfig& config, int chunk) {
  if (chunk < 1) throw InvalidParameter("chunk must be >= 1");
  std::vector<std::uint64_t> seeds(ys.size());
  for (std::size_t i = 0; i < ys.size(); ++i) seeds[i] = config.seed + i;
  std::vector<RLSResult> out;
  out.reserve(ys.size());
  for (std::size_t i = 0; i < ys.size(); i += chunk) {
    const auto len = std::min<std::size_t>(chunk, ys.size() - i);
    auto part = superresolve_batch(ys.subspan(i, len), generator, flow, spec, config,
                                   std::span(seeds).subspan(i, len));
    for (auto& r : part) out.push_back(std::move(r));
  }
  return out;
}

void write_manifest_csv(const std::filesystem::path& path, std::span<const ManifestRow> rows) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(17);
  f << "image_id,variant,lambda_w,lambda_c,best_iteration,data_term,p_w,p_cross,total\n";
  for (const auto& row : rows) {
    const auto& r = *row.result;
    f << row.image_id << ',' << r.config_echo.value("variant", "") << ','
      << r.config_echo.value("lambda_w", 0.0) << ',' << r.config_echo.value("lambda_c", 0.0)
      << ',' << r.best_iteration << ',' << r.best.data_term << ',' << r.best.p_w << ','
      << r.best.p_cross << ',' << r.best.total << '\n';
  }
}

}  // namespace rls::search
