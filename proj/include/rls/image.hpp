#pragma once

#include <torch/torch.h>

#include <cstddef>
#include <span>
#include <vector>

namespace rls {

/// Row-major H x W x C image of unit-interval intensities. For domain images
/// the channels are (nucleus, cytoplasm reporter, spots).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  float& at(int r, int col, int ch) {
    return pixels[(static_cast<std::size_t>(r) * width + col) * channels + ch];
  }
  float at(int r, int col, int ch) const {
    return pixels[(static_cast<std::size_t>(r) * width + col) * channels + ch];
  }

  void clip01();
  double mean() const;
  double channel_mean(int ch) const;
};

/// [C,H,W] float32 tensor (no batch dim).
torch::Tensor to_tensor(const Image& img);
/// Accepts [C,H,W] or [1,C,H,W].
Image from_tensor(const torch::Tensor& t);
/// Stack into [N,C,H,W].
torch::Tensor stack_images(std::span<const Image> imgs);
std::vector<Image> unstack_images(const torch::Tensor& batch);

}  // namespace rls
