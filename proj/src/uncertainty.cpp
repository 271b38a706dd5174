#include "rls/uncertainty.hpp"

#include <cmath>
#include <limits>

#include "rls/archive.hpp"

namespace rls::uncertainty {

nlohmann::json to_json(const UncertaintyConfig& c) {
  return {{"n", c.n},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"init_jitter", c.init_jitter},
          {"tau", c.tau}};
}

UncertaintyConfig uncertainty_config_from_json(const nlohmann::json& j) {
  UncertaintyConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "n") c.n = v.get<int>();
    else if (k == "alpha") c.alpha = v.get<double>();
    else if (k == "beta") c.beta = v.get<double>();
    else if (k == "init_jitter") c.init_jitter = v.get<double>();
    else if (k == "tau") c.tau = v.get<double>();
    else throw InvalidParameter("unknown uncertainty config key '" + k + "'");
  }
  if (c.n < 2) throw InvalidParameter("uncertainty: n must be >= 2");
  if (c.alpha < 0 || c.beta < 0 || c.tau <= 0 || c.init_jitter < 0)
    throw InvalidParameter("uncertainty: invalid prior or tolerance");
  return c;
}

PosteriorFit fit_posterior(std::span<const gen::ExtendedStyle> samples, double alpha,
                           double beta) {
  if (samples.size() < 2) throw InvalidParameter("fit_posterior needs >= 2 samples");
  std::vector<torch::Tensor> rows;
  for (const auto& s : samples) {
    if (s.rows.dim() != 2 || !s.rows.sizes().equals(samples[0].rows.sizes()))
      throw ShapeError("fit_posterior: samples must share one [L,d] shape");
    rows.push_back(s.rows.to(torch::kFloat64));
  }
  auto w = torch::stack(rows);  // [n,L,d]
  PosteriorFit f;
  f.mu = w.mean(0);
  f.scatter = (w - f.mu).square().sum().item<double>();
  const double n = static_cast<double>(w.size(0)), ld = static_cast<double>(w.size(1) * w.size(2));
  f.sigma2 = (2.0 * beta + f.scatter) / (2.0 * alpha + n * ld + 2.0);
  f.sigma = std::sqrt(f.sigma2);
  return f;
}

InsufficientSamples::InsufficientSamples(std::vector<std::uint64_t> rejected)
    : Error([&] {
        std::string msg = "fewer than 2 samples within tolerance; rejected seeds:";
        for (auto s : rejected) msg += " " + std::to_string(s);
        return msg;
      }()),
      rejected_seeds(std::move(rejected)) {}

UncertaintyResult sample_solutions(const Image& y, std::span<const std::uint64_t> seeds,
                                   const gen::GeneratorModel& generator,
                                   const flow::FlowModel& flow,
                                   const degrade::DegradationSpec& spec,
                                   const search::RLSConfig& base,
                                   const UncertaintyConfig& config) {
  if (seeds.size() < 2) throw InvalidParameter("sample_solutions: n must be >= 2");
  auto cfg = base;
  cfg.init_jitter = config.init_jitter;
  std::vector<Image> ys(seeds.size(), y);
  auto runs = search::superresolve_batch(ys, generator, flow, spec, cfg, seeds);

  UncertaintyResult r;
  r.config = config;
  const double entries = search::lr_entries(y);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const double per_entry = runs[i].best.data_term / entries;
    if (per_entry <= config.tau) {
      r.samples.push_back(std::move(runs[i]));
      r.seeds.push_back(seeds[i]);
      r.data_term_per_entry.push_back(per_entry);
    } else {
      r.rejected_seeds.push_back(seeds[i]);
    }
  }
  if (r.samples.size() < 2) throw InsufficientSamples(r.rejected_seeds);
  std::vector<gen::ExtendedStyle> ws;
  for (const auto& s : r.samples) ws.push_back(s.w_plus_hat);
  r.fit = fit_posterior(ws, config.alpha, config.beta);
  return r;
}

UncertaintyResult sample_solutions(const Image& y, std::uint64_t seed,
                                   const gen::GeneratorModel& generator,
                                   const flow::FlowModel& flow,
                                   const degrade::DegradationSpec& spec,
                                   const search::RLSConfig& base,
                                   const UncertaintyConfig& config) {
  std::vector<std::uint64_t> seeds(config.n);
  for (int i = 0; i < config.n; ++i) seeds[i] = seed + i;
  return sample_solutions(y, seeds, generator, flow, spec, base, config);
}

double min_pairwise_distance(const UncertaintyResult& r) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < r.samples.size(); ++i)
    for (std::size_t j = i + 1; j < r.samples.size(); ++j) {
      const auto& a = r.samples[i].sr_image.pixels;
      const auto& b = r.samples[j].sr_image.pixels;
      double s = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) s += (double(a[k]) - b[k]) * (double(a[k]) - b[k]);
      best = std::min(best, std::sqrt(s));
    }
  return best;
}

nlohmann::json to_json(const UncertaintyResult& r) {
  auto mu = r.fit.mu.contiguous();
  std::vector<double> mu_values(mu.data_ptr<double>(), mu.data_ptr<double>() + mu.numel());
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < r.samples.size(); ++i)
    samples.push_back({{"seed", r.seeds[i]},
                       {"data_term", r.samples[i].best.data_term},
                       {"data_term_per_entry", r.data_term_per_entry[i]},
                       {"p_w", r.samples[i].best.p_w},
                       {"p_cross", r.samples[i].best.p_cross},
                       {"total", r.samples[i].best.total}});
  return {{"sampling_method", "independent restarts with jittered initialization"},
          {"config", to_json(r.config)},
          {"sigma", r.fit.sigma},
          {"sigma2", r.fit.sigma2},
          {"scatter", r.fit.scatter},
          {"mu_sha256", sha256_hex(std::string_view(reinterpret_cast<const char*>(mu_values.data()),
                                              mu_values.size() * sizeof(double)))},
          {"min_pairwise_sr_distance", min_pairwise_distance(r)},
          {"rejected_seeds", r.rejected_seeds},
          {"samples", samples}};
}

}  // namespace rls::uncertainty
