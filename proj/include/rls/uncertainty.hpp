#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "rls/search.hpp"

namespace rls::uncertainty {

struct UncertaintyConfig {
  int n = 5;
  double alpha = 3.0;  // inverse-gamma shape
  double beta = 1.0;   // inverse-gamma scale
  double init_jitter = 0.1;
  double tau = 0.03;  // max data term per LR entry for an accepted sample
};

nlohmann::json to_json(const UncertaintyConfig& c);
UncertaintyConfig uncertainty_config_from_json(const nlohmann::json& j);

struct PosteriorFit {
  torch::Tensor mu;  // [L,d]
  double scatter;    // sum_i ||w_i - mu||^2
  double sigma2;
  double sigma;
};

/// mu = sample mean; sigma^2 = (2*beta + scatter) / (2*alpha + n*L*d + 2).
PosteriorFit fit_posterior(std::span<const gen::ExtendedStyle> samples, double alpha,
                           double beta);

struct UncertaintyResult {
  std::vector<search::RLSResult> samples;  // accepted samples only
  std::vector<std::uint64_t> seeds;        // of accepted samples
  std::vector<std::uint64_t> rejected_seeds;
  std::vector<double> data_term_per_entry;  // of accepted samples
  PosteriorFit fit;
  UncertaintyConfig config;
};

nlohmann::json to_json(const UncertaintyResult& r);

class InsufficientSamples : public Error {
 public:
  explicit InsufficientSamples(std::vector<std::uint64_t> rejected);
  std::vector<std::uint64_t> rejected_seeds;
};

/// One jittered RLS restart per seed, then a single closed-form (mu, sigma) fit
/// over the samples whose data term stays within tau per LR entry.
UncertaintyResult sample_solutions(const Image& y, std::span<const std::uint64_t> seeds,
                                   const gen::GeneratorModel& generator,
                                   const flow::FlowModel& flow,
                                   const degrade::DegradationSpec& spec,
                                   const search::RLSConfig& base, const UncertaintyConfig& config);

/// Seeds seed, seed+1, ..., seed+n-1.
UncertaintyResult sample_solutions(const Image& y, std::uint64_t seed,
                                   const gen::GeneratorModel& generator,
                                   const flow::FlowModel& flow,
                                   const degrade::DegradationSpec& spec,
                                   const search::RLSConfig& base, const UncertaintyConfig& config);

/// Smallest L2 distance between any two sample SR images.
double min_pairwise_distance(const UncertaintyResult& r);

}  // namespace rls::uncertainty
