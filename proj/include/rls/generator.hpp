#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "rls/image.hpp"

namespace rls::gen {

/// z ~ N(0, I_d).
struct LatentZ {
  torch::Tensor values;  // [d]
};

/// w in W = G_m(z).
struct StyleVector {
  torch::Tensor values;  // [d]
};

/// w+ in W+: one style row per synthesis layer.
struct ExtendedStyle {
  torch::Tensor rows;  // [L, d]
};

struct GeneratorArch {
  int d = 64;
  int mapping_layers = 4;
  double mapping_lr_mul = 0.1;
  int const_channels = 32;
  /// Output channels of each synthesis layer; L = channels.size(). Layer 0
  /// runs at 4x4 and each further layer doubles the resolution.
  std::vector<int> channels{32, 32, 24, 12, 8};
  int image_channels = 3;

  int num_layers() const { return static_cast<int>(channels.size()); }
  int resolution() const { return 4 << (num_layers() - 1); }
};

nlohmann::json to_json(const GeneratorArch& a);
GeneratorArch arch_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Building blocks. All weights use an equalized learning rate: parameters are
// stored at unit scale and multiplied by 1/sqrt(fan_in) at runtime.

struct EqualLinearImpl : torch::nn::Module {
  EqualLinearImpl(int in, int out, double bias_init = 0.0, double lr_mul = 1.0,
                  bool activate = false);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;
  double weight_gain, lr_mul;
  bool activate;
};
TORCH_MODULE(EqualLinear);

struct ModulatedConvImpl : torch::nn::Module {
  ModulatedConvImpl(int in_ch, int out_ch, int kernel, int style_dim, bool demodulate);
  /// x: [B,in,H,W]; style: [B,d].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& style);

  EqualLinear affine{nullptr};
  torch::Tensor weight;  // [out,in,k,k]
  int in_ch, out_ch, kernel;
  bool demodulate;
};
TORCH_MODULE(ModulatedConv);

struct MappingNetworkImpl : torch::nn::Module {
  explicit MappingNetworkImpl(const GeneratorArch& arch);
  /// [B,d] -> [B,d]
  torch::Tensor forward(const torch::Tensor& z);

  torch::nn::ModuleList layers;
};
TORCH_MODULE(MappingNetwork);

struct SynthesisNetworkImpl : torch::nn::Module {
  explicit SynthesisNetworkImpl(const GeneratorArch& arch);
  /// [B,L,d] -> [B,3,R,R] in (0,1)
  torch::Tensor forward(const torch::Tensor& w_plus);

  torch::Tensor const_input;
  torch::nn::ModuleList convs, to_rgb;
  std::vector<torch::Tensor> biases;
  int num_layers;
};
TORCH_MODULE(SynthesisNetwork);

struct DiscriminatorImpl : torch::nn::Module {
  DiscriminatorImpl(int image_channels, int resolution);
  torch::Tensor forward(const torch::Tensor& img);

  std::vector<torch::Tensor> conv_w, conv_b;
  std::vector<int> strides;
  EqualLinear fc{nullptr}, out{nullptr};
};
TORCH_MODULE(Discriminator);

// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch;
  double d_loss;
  double g_loss;
  double r1;
  double path_length_penalty;
  double path_length_mean;
};

struct TrainingMeta {
  int epochs = 0;
  std::uint64_t seed = 0;
  int num_images = 0;
  std::vector<EpochLog> log;
};

/// G = G_s o G_m. Copies share weights; use clone() for an independent copy.
class GeneratorModel {
 public:
  explicit GeneratorModel(GeneratorArch arch = {}, std::uint64_t init_seed = 0);

  const GeneratorArch& arch() const { return arch_; }
  int d() const { return arch_.d; }
  int num_layers() const { return arch_.num_layers(); }
  torch::ScalarType dtype() const;

  MappingNetwork& mapping() { return mapping_; }
  SynthesisNetwork& synthesis() { return synthesis_; }
  TrainingMeta& meta() { return meta_; }
  const TrainingMeta& meta() const { return meta_; }

  StyleVector map_latent(const LatentZ& z) const;
  Image synthesize(const ExtendedStyle& w_plus) const;

  /// Batched, differentiable forms.
  torch::Tensor map_batch(const torch::Tensor& z) const;           // [B,d] -> [B,d]
  torch::Tensor synthesize_batch(const torch::Tensor& w_plus) const;  // [B,L,d] -> [B,3,R,R]

  /// (1/n) sum G_m(z_i), z_i ~ N(0, I) drawn from `seed`.
  StyleVector mean_style(int n, std::uint64_t seed) const;
  /// Standard-normal latents [n,d] drawn from `seed`.
  torch::Tensor sample_latents(int n, std::uint64_t seed) const;

  /// Stops gradient bookkeeping on weights (inference only needs d/dw+).
  void freeze();
  GeneratorModel clone(std::optional<torch::ScalarType> dtype = std::nullopt) const;

  void save(const std::filesystem::path& dir) const;
  static GeneratorModel load(const std::filesystem::path& dir);
  std::string digest() const;

 private:
  GeneratorArch arch_;
  mutable MappingNetwork mapping_{nullptr};
  mutable SynthesisNetwork synthesis_{nullptr};
  TrainingMeta meta_;
};

ExtendedStyle broadcast(const StyleVector& w, int num_layers);
/// [B,d] -> [B,L,d]
torch::Tensor broadcast_batch(const torch::Tensor& w, int num_layers);

struct GeneratorTrainConfig {
  int epochs = 12;
  int batch_size = 32;
  double lr = 0.0025;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double r1_gamma = 0.1;
  int r1_interval = 16;
  double pl_weight = 2.0;
  int pl_interval = 4;
  double pl_decay = 0.01;
  double ema_half_life_images = 10000.0;
  std::uint64_t seed = 1;
  /// Abort when the discriminator loss stays below this for `collapse_epochs`.
  double collapse_threshold = 1e-4;
  int collapse_epochs = 5;
  /// Receives one line per epoch.
  std::function<void(const std::string&)> progress;
};

nlohmann::json to_json(const GeneratorTrainConfig& c);

/// Non-saturating GAN loss with lazy R1 on D and lazy path-length
/// regularization on G. Returns the EMA generator, frozen.
GeneratorModel train_generator(const torch::Tensor& images, const GeneratorArch& arch,
                               const GeneratorTrainConfig& config);

}  // namespace rls::gen
