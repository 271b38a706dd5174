#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <vector>

namespace rls::cnn {

struct CnnArch {
  int in_channels = 3;
  int resolution = 64;
  std::vector<int> channels{12, 24, 48, 64};
  int num_classes = 2;
};

/// conv3x3 + ReLU blocks, each followed by 2x2 max-pooling while the feature
/// map is larger than 1x1, then global average pooling and a linear head.
/// The pooled vector is the network's feature embedding.
struct SmallCnnImpl : torch::nn::Module {
  explicit SmallCnnImpl(const CnnArch& arch);
  torch::Tensor features(const torch::Tensor& x);  // [B,C,H,W] -> [B,channels.back()]
  torch::Tensor forward(const torch::Tensor& x);   // logits

  CnnArch arch;
  torch::nn::ModuleList convs;
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(SmallCnn);

struct CnnTrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  /// Receives one line per epoch.
  std::function<void(const std::string&)> progress;
};

nlohmann::json to_json(const CnnTrainConfig& c);

/// Cross-entropy training. `images` [N,C,H,W], `labels` [N] int64.
SmallCnn train_cnn(const torch::Tensor& images, const torch::Tensor& labels,
                   const CnnArch& arch, const CnnTrainConfig& config);

torch::Tensor predict(SmallCnn& model, const torch::Tensor& images);  // [N] int64
torch::Tensor embed(SmallCnn& model, const torch::Tensor& images);    // [N,F] float64
double accuracy(SmallCnn& model, const torch::Tensor& images, const torch::Tensor& labels);

void save_cnn(SmallCnn& model, const std::filesystem::path& dir, const std::string& kind);
SmallCnn load_cnn(const std::filesystem::path& dir, const std::string& kind);

}  // namespace rls::cnn
