#include "rls/image.hpp"

#include <algorithm>
#include <numeric>

#include "rls/errors.hpp"

namespace rls {

void Image::clip01() {
  for (auto& v : pixels) v = std::clamp(v, 0.0f, 1.0f);
}

double Image::mean() const {
  if (pixels.empty()) return 0.0;
  double s = std::accumulate(pixels.begin(), pixels.end(), 0.0);
  return s / static_cast<double>(pixels.size());
}

double Image::channel_mean(int ch) const {
  double s = 0.0;
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) s += at(r, c, ch);
  return s / (static_cast<double>(height) * width);
}

torch::Tensor to_tensor(const Image& img) {
  auto hwc = torch::from_blob(const_cast<float*>(img.pixels.data()),
                              {img.height, img.width, img.channels},
                              torch::kFloat32);
  return hwc.permute({2, 0, 1}).contiguous().clone();
}

Image from_tensor(const torch::Tensor& t) {
  auto x = t.detach().to(torch::kCPU, torch::kFloat32);
  if (x.dim() == 4) {
    if (x.size(0) != 1) throw ShapeError("from_tensor: batch dimension must be 1");
    x = x.squeeze(0);
  }
  if (x.dim() != 3) throw ShapeError("from_tensor: expected [C,H,W]");
  auto hwc = x.permute({1, 2, 0}).contiguous();
  Image img(static_cast<int>(x.size(1)), static_cast<int>(x.size(2)),
            static_cast<int>(x.size(0)));
  std::copy_n(hwc.data_ptr<float>(), img.size(), img.pixels.begin());
  return img;
}

torch::Tensor stack_images(std::span<const Image> imgs) {
  if (imgs.empty()) throw InvalidParameter("stack_images: empty input");
  std::vector<torch::Tensor> ts;
  ts.reserve(imgs.size());
  for (const auto& im : imgs) {
    if (!im.same_shape(imgs.front())) throw ShapeError("stack_images: mixed shapes");
    ts.push_back(to_tensor(im));
  }
  return torch::stack(ts);
}

std::vector<Image> unstack_images(const torch::Tensor& batch) {
  std::vector<Image> out;
  out.reserve(batch.size(0));
  for (int64_t i = 0; i < batch.size(0); ++i) out.push_back(from_tensor(batch[i]));
  return out;
}

}  // namespace rls
