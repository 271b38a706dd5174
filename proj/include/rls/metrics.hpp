#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "rls/cnn.hpp"
#include "rls/image.hpp"

namespace rls::metrics {

constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) with peak 1.0; identical images give kPsnrCap.
double psnr(const Image& a, const Image& b);

/// Multi-scale SSIM with a 7x7 Gaussian window (sigma 1.5), 2x2 average
/// pooling between scales and the leading `scales` standard exponents
/// renormalized to sum to 1. Negative per-scale terms are clamped to 0.
double ms_ssim(const Image& a, const Image& b, int scales = 3);
/// Single-scale SSIM with the same window.
double ssim(const Image& a, const Image& b);

/// Frozen feature extractor standing in for Inception features. A SmallCnn
/// trained to tell (assay, class) apart on a held-out HR split; its 64-d
/// pooled activations are the embedding.
class ToyEmbedder {
 public:
  explicit ToyEmbedder(cnn::SmallCnn model) : model_(std::move(model)) {}
  torch::Tensor embed(std::span<const Image> images) const;  // [N,64] float64
  int dim() const { return model_->arch.channels.back(); }
  cnn::SmallCnn& model() const { return model_; }

  void save(const std::filesystem::path& dir) const;
  static ToyEmbedder load(const std::filesystem::path& dir);

 private:
  mutable cnn::SmallCnn model_;
};

/// Trains the embedder on `images_per_class` renders of each of the four
/// (assay, class) combinations drawn from `seed`.
ToyEmbedder train_embedder(int images_per_class, std::uint64_t seed,
                           const cnn::CnnTrainConfig& config);

/// Frechet distance between Gaussian fits of two embedding sets [N,F].
double frechet_distance(const torch::Tensor& a, const torch::Tensor& b);

struct KidEstimate {
  double mean;
  double std_error;
  std::vector<double> subsets;
};

/// Unbiased MMD^2 with k(x,y) = (x.y / dim + 1)^3 between [m,F] and [n,F].
double mmd2_unbiased(const torch::Tensor& x, const torch::Tensor& y);
KidEstimate kernel_inception_distance(const torch::Tensor& a, const torch::Tensor& b,
                                      int num_subsets = 10, int subset_size = 50,
                                      std::uint64_t seed = 0);

double fid_toy(std::span<const Image> a, std::span<const Image> b, const ToyEmbedder& e);
KidEstimate kid_toy(std::span<const Image> a, std::span<const Image> b, const ToyEmbedder& e,
                    std::uint64_t seed = 0);
/// Mean cosine distance between paired embeddings.
double percep_toy(std::span<const Image> a, std::span<const Image> b, const ToyEmbedder& e);

struct ImageScores {
  std::string id;
  double psnr_db;
  double ms_ssim;
  double percep_toy;
};

struct MetricsReport {
  std::string label;
  double psnr_db = 0;
  double ms_ssim = 0;
  double fid_toy = 0;
  double kid_toy = 0;
  double kid_toy_std_error = 0;
  double percep_toy = 0;
  std::vector<ImageScores> per_image;
};

/// Scores reconstructions against their ground truth (paired by index).
MetricsReport evaluate(const std::string& label, std::span<const Image> reconstructions,
                       std::span<const Image> ground_truth, std::span<const std::string> ids,
                       const ToyEmbedder& embedder);

nlohmann::json to_json(const MetricsReport& r);
void write_csv(const std::filesystem::path& path, const MetricsReport& r);

}  // namespace rls::metrics
