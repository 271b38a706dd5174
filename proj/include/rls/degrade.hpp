#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "rls/image.hpp"

namespace rls::degrade {

/// Catmull-Rom style cubic convolution kernel with a = -0.5.
double cubic_kernel(double x, double a = -0.5);

/// Reflect an index into [0, n) with half-sample symmetry
/// (d c b a | a b c d | d c b a).
int reflect_index(int i, int n);

/// 1-D resampling matrix of shape [out, in] (float64). For downscaling the
/// kernel is stretched by in/out (antialiased), each row normalized to sum 1,
/// out-of-range taps folded back with reflect_index. Output pixel i is centred
/// at input coordinate (i + 0.5) * in / out - 0.5.
torch::Tensor bicubic_matrix(int in, int out);

struct Corruption {
  enum class Kind { gaussian_noise, salt_pepper, gaussian_blur };
  Kind kind;
  double param;  // sigma, density or blur sigma

  static Corruption gaussian_noise(double sigma) { return {Kind::gaussian_noise, sigma}; }
  static Corruption salt_pepper(double density) { return {Kind::salt_pepper, density}; }
  static Corruption gaussian_blur(double sigma) { return {Kind::gaussian_blur, sigma}; }
  bool operator==(const Corruption&) const = default;
};

struct DegradationSpec {
  int downscale_factor = 16;
  std::vector<Corruption> extra;
  double laplace_scale = 1.0;

  void validate(int hr_size) const;
  bool operator==(const DegradationSpec&) const = default;
};

nlohmann::json to_json(const DegradationSpec& s);
DegradationSpec spec_from_json(const nlohmann::json& j);

/// D(x): linear, unclipped.
Image downscale_bicubic(const Image& x, int factor);
/// D^T(u) back to an H x W image.
Image downscale_adjoint(const Image& u, int factor, int height, int width);
Image upscale_bicubic(const Image& y, int factor);

/// Differentiable D on [B,C,H,W] (any floating dtype).
torch::Tensor downscale_tensor(const torch::Tensor& x, int factor);

/// Applies spec.extra in order, then clips to [0,1]. Deterministic per seed.
Image corrupt(const Image& y, const DegradationSpec& spec, std::uint64_t seed);

/// Full observation model: clip(corrupt(D(x))).
Image observe(const Image& x, const DegradationSpec& spec, std::uint64_t seed);

/// Separable Gaussian blur with half-sample symmetric boundaries.
Image gaussian_blur(const Image& y, double sigma);

/// Laplace log-likelihood without its normalizing constant: -sum|r| / scale.
double laplace_loglik(std::span<const float> residual, double scale = 1.0);

}  // namespace rls::degrade
