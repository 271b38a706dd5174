#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <vector>

#include "rls/generator.hpp"

namespace rls::flow {

struct FlowArch {
  int d = 64;
  int blocks = 5;
  int hidden = 256;
  std::uint64_t permutation_seed = 0;
};

/// Masked autoencoder emitting (shift, log_scale) for each dimension, where
/// output i only sees inputs 0..i-1.
struct MadeImpl : torch::nn::Module {
  MadeImpl(int d, int hidden);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x) const;

  torch::Tensor w1, b1, w2, b2, w3, b3;
  torch::Tensor mask1, mask2, mask3;
  int d;
};
TORCH_MODULE(Made);

struct FlowTrainingMeta {
  int epochs = 0;
  std::uint64_t seed = 0;
  int num_train = 0;
  int num_heldout = 0;
  std::vector<double> train_log_density;    // per epoch, full training set
  std::vector<double> heldout_log_density;  // per epoch
};

/// Masked autoregressive flow F: w -> z with base N(0, I_d).
///
/// Density direction (w -> z): a fixed standardization
/// x = (w - loc) * exp(-log_std), then for each block
/// u_i = (x_i - shift_i(x_<i)) * exp(-log_scale_i(x_<i)), followed by a fixed
/// permutation between consecutive blocks.
/// log|det dz/dw| = -sum(log_std) - sum over blocks of sum_i log_scale_i.
/// The inverse direction reports the negation.
///
/// Computation is float64 throughout.
class FlowModel {
 public:
  explicit FlowModel(FlowArch arch = {}, std::uint64_t init_seed = 0);

  const FlowArch& arch() const { return arch_; }
  int d() const { return arch_.d; }
  FlowTrainingMeta& meta() { return meta_; }
  const FlowTrainingMeta& meta() const { return meta_; }

  /// [B,d] -> (z [B,d], logdet [B]). Differentiable.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& w) const;
  /// [B,d] -> (w [B,d], logdet of the inverse map [B]).
  std::pair<torch::Tensor, torch::Tensor> inverse(const torch::Tensor& z) const;
  /// log p_F(w) = log N(z; 0, I) + logdet. Differentiable, [B].
  torch::Tensor log_density(const torch::Tensor& w) const;

  std::vector<torch::Tensor> parameters() const;
  void set_standardization(const torch::Tensor& loc, const torch::Tensor& log_std);
  void freeze();

  void save(const std::filesystem::path& dir) const;
  static FlowModel load(const std::filesystem::path& dir);
  std::string digest() const;

 private:
  torch::Tensor check_input(const torch::Tensor& w) const;

  FlowArch arch_;
  std::vector<Made> blocks_;
  std::vector<torch::Tensor> perms_, inv_perms_;  // between consecutive blocks
  torch::Tensor loc_, log_std_;
  FlowTrainingMeta meta_;
};

struct FlowForward {
  torch::Tensor z;  // [d]
  double logdet;
};
FlowForward flow_forward(const FlowModel& model, const gen::StyleVector& w);
gen::StyleVector flow_inverse(const FlowModel& model, const torch::Tensor& z);
double flow_log_density(const FlowModel& model, const gen::StyleVector& w);

struct FlowTrainConfig {
  int epochs = 10;
  int batch_size = 256;
  double lr = 1e-3;
  double heldout_fraction = 0.1;
  std::uint64_t seed = 1;
  /// Receives one line per epoch.
  std::function<void(const std::string&)> progress;
};

nlohmann::json to_json(const FlowTrainConfig& c);

/// Maximum-likelihood training on style vectors [N,d] (N >= 10,000).
FlowModel train_flow(const torch::Tensor& styles, const FlowArch& arch,
                     const FlowTrainConfig& config);

/// Inverse leaky ReLU (negative part scaled by `slope`, default 5 = 1/0.2)
/// followed by ZCA whitening with the sample mean and covariance (divisor N).
/// Needs at least d+1 vectors and a full-rank covariance.
torch::Tensor pulse_gaussianize(const torch::Tensor& styles, double slope = 5.0);

struct GaussDiagnostics {
  std::vector<double> squared_norms;
  double ks_statistic;
  double ks_pvalue;
  double mean_norm;  // mean squared norm; d for a standard normal
  int target_dof;
};

/// Squared norms of [N,d] vectors tested against chi^2_d (N >= 100).
GaussDiagnostics diagnose_gaussianization(const torch::Tensor& vectors);

}  // namespace rls::flow
