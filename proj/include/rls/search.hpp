#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "rls/degrade.hpp"
#include "rls/errors.hpp"
#include "rls/flow.hpp"
#include "rls/generator.hpp"
#include "rls/image.hpp"

namespace rls::search {

enum class Variant { full, no_regu, no_pw, no_pcross };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

enum class InitKind { mean_style, given };

struct RLSConfig {
  double lambda_w = 5e-5;
  double lambda_c = 0.01;
  int iterations = 200;
  double learning_rate = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  InitKind init = InitKind::mean_style;
  int mean_style_samples = 10000;
  std::uint64_t mean_style_seed = 0;
  /// Std of i.i.d. Gaussian noise added to the initial w+ (0 = none).
  double init_jitter = 0.0;
  Variant variant = Variant::full;
  std::uint64_t seed = 0;

  void validate() const;
  /// Weights actually applied after the variant override.
  double effective_lambda_w() const;
  double effective_lambda_c() const;
  bool operator==(const RLSConfig&) const = default;
};

nlohmann::json to_json(const RLSConfig& c);
RLSConfig config_from_json(const nlohmann::json& j);

struct Terms {
  double data_term = 0.0;
  double p_w = 0.0;
  double p_cross = 0.0;
  double total = 0.0;
};

struct RLSResult {
  gen::ExtendedStyle w_plus_hat;
  Image sr_image;
  std::vector<Terms> trajectory;  // one entry per iteration, before its update
  int best_iteration = 0;
  Terms best;
  std::vector<double> per_row_log_density;
  nlohmann::json config_echo;
};

nlohmann::json to_json(const RLSResult& r);

/// Raised when the objective turns non-finite during a search.
class NonFiniteObjective : public NonFiniteError {
 public:
  NonFiniteObjective(int iteration, int item, const Terms& terms);
  int iteration;
  int item;
  Terms terms;
};

// Differentiable terms. `y` is [B,C,h,w], `w_plus` is [B,L,d]; each returns [B].

torch::Tensor data_term_batch(const torch::Tensor& y, const torch::Tensor& w_plus,
                              const gen::GeneratorModel& generator, int factor);
torch::Tensor prior_w_batch(const torch::Tensor& w_plus, const flow::FlowModel& flow);
torch::Tensor prior_cross_batch(const torch::Tensor& w_plus);

/// ||y - D(G_s(w+))||_1 over every LR entry.
double data_term(const Image& y, const gen::ExtendedStyle& w_plus,
                 const gen::GeneratorModel& generator, const degrade::DegradationSpec& spec);
/// (1/L) sum_i log p_F(w_i)
double prior_w(const gen::ExtendedStyle& w_plus, const flow::FlowModel& flow);
/// -sum_{i<j} ||w_i - w_j||^2
double prior_cross(const gen::ExtendedStyle& w_plus);
/// data_term - lambda_w * P_w - lambda_c * P_cross, with the variant applied.
Terms objective(const Image& y, const gen::ExtendedStyle& w_plus,
                const gen::GeneratorModel& generator, const flow::FlowModel& flow,
                const degrade::DegradationSpec& spec, const RLSConfig& config);

/// Number of LR entries (h * w * c), the divisor for per-pixel data terms.
int lr_entries(const Image& y);

/// Adam on w+ for `iterations` steps from the configured initialization;
/// returns the iterate with the lowest total objective.
RLSResult superresolve(const Image& y, const gen::GeneratorModel& generator,
                       const flow::FlowModel& flow, const degrade::DegradationSpec& spec,
                       const RLSConfig& config);

/// Independent searches run side by side. Item i uses seed `seeds[i]` for its
/// jitter (config.seed + i when `seeds` is empty). `init` optionally supplies
/// the starting w+ ([L,d] shared or [B,L,d]); required for InitKind::given.
std::vector<RLSResult> superresolve_batch(std::span<const Image> ys,
                                          const gen::GeneratorModel& generator,
                                          const flow::FlowModel& flow,
                                          const degrade::DegradationSpec& spec,
                                          const RLSConfig& config,
                                          std::span<const std::uint64_t> seeds = {},
                                          const torch::Tensor& init = {});

/// Runs a long list of searches in chunks of `chunk` items.
std::vector<RLSResult> superresolve_many(std::span<const Image> ys,
                                         const gen::GeneratorModel& generator,
                                         const flow::FlowModel& flow,
                                         const degrade::DegradationSpec& spec,
                                         const RLSConfig& config, int chunk = 16);

struct ManifestRow {
  std::string image_id;
  const RLSResult* result;
};

/// CSV: image_id, variant, lambda_w, lambda_c, best_iteration, data_term, p_w, p_cross, total
void write_manifest_csv(const std::filesystem::path& path, std::span<const ManifestRow> rows);

}  // namespace rls::search
