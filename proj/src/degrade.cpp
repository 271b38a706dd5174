#include "rls/degrade.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <random>

#include "rls/errors.hpp"

namespace rls::degrade {

double cubic_kernel(double x, double a) {
  const double t = std::abs(x);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

int reflect_index(int i, int n) {
  const int period = 2 * n;
  int k = i % period;
  if (k < 0) k += period;
  return k < n ? k : period - 1 - k;
}

torch::Tensor bicubic_matrix(int in, int out) {
  if (in <= 0 || out <= 0) throw InvalidParameter("bicubic_matrix: sizes must be positive");
  const double scale = static_cast<double>(in) / out;
  const double stretch = std::max(scale, 1.0);
  auto m = torch::zeros({out, in}, torch::kFloat64);
  auto acc = m.accessor<double, 2>();
  for (int i = 0; i < out; ++i) {
    const double center = (i + 0.5) * scale - 0.5;
    const int lo = static_cast<int>(std::floor(center - 2.0 * stretch));
    const int hi = static_cast<int>(std::ceil(center + 2.0 * stretch));
    double total = 0.0;
    for (int j = lo; j <= hi; ++j) total += cubic_kernel((j - center) / stretch);
    for (int j = lo; j <= hi; ++j)
      acc[i][reflect_index(j, in)] += cubic_kernel((j - center) / stretch) / total;
  }
  return m;
}

namespace {

const torch::Tensor& cached_matrix(int in, int out) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, torch::Tensor> cache;
  std::lock_guard lock(mu);
  auto [it, inserted] = cache.try_emplace({in, out});
  if (inserted) it->second = bicubic_matrix(in, out);
  return it->second;
}

void check_factor(int h, int w, int factor) {
  if (factor <= 0 || h % factor != 0 || w % factor != 0)
    throw InvalidParameter("downscale factor " + std::to_string(factor) +
                           " does not divide " + std::to_string(h) + "x" + std::to_string(w));
}

// Y_c = Ar X_c Ac^T for every channel, in float64.
Image separable(const Image& x, const torch::Tensor& rows, const torch::Tensor& cols) {
  auto t = to_tensor(x).to(torch::kFloat64);
  auto y = torch::matmul(torch::matmul(rows, t), cols.t());
  return from_tensor(y.to(torch::kFloat32));
}

std::vector<double> gaussian_taps(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> taps(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    taps[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    total += taps[k + radius];
  }
  for (auto& v : taps) v /= total;
  return taps;
}

}  // namespace

void DegradationSpec::validate(int hr_size) const {
  if (downscale_factor != 8 && downscale_factor != 16)
    throw InvalidParameter("downscale_factor must be 8 or 16");
  if (hr_size % downscale_factor != 0)
    throw InvalidParameter("downscale_factor must divide the HR size");
  if (!(laplace_scale > 0.0)) throw InvalidParameter("laplace_scale must be positive");
  for (const auto& c : extra)
    if (!(c.param >= 0.0)) throw InvalidParameter("corruption parameters must be >= 0");
}

nlohmann::json to_json(const DegradationSpec& s) {
  nlohmann::json extra = nlohmann::json::array();
  for (const auto& c : s.extra) {
    switch (c.kind) {
      case Corruption::Kind::gaussian_noise:
        extra.push_back({{"type", "gaussian_noise"}, {"sigma", c.param}});
        break;
      case Corruption::Kind::salt_pepper:
        extra.push_back({{"type", "salt_pepper"}, {"density", c.param}});
        break;
      case Corruption::Kind::gaussian_blur:
        extra.push_back({{"type", "gaussian_blur"}, {"sigma", c.param}});
        break;
    }
  }
  return {{"downscale_factor", s.downscale_factor},
          {"extra", extra},
          {"laplace_scale", s.laplace_scale}};
}

DegradationSpec spec_from_json(const nlohmann::json& j) {
  DegradationSpec s;
  for (const auto& [key, _] : j.items())
    if (key != "downscale_factor" && key != "extra" && key != "laplace_scale")
      throw InvalidParameter("unknown DegradationSpec key '" + key + "'");
  s.downscale_factor = j.value("downscale_factor", 16);
  s.laplace_scale = j.value("laplace_scale", 1.0);
  for (const auto& e : j.value("extra", nlohmann::json::array())) {
    const auto type = e.at("type").get<std::string>();
    if (type == "gaussian_noise") s.extra.push_back(Corruption::gaussian_noise(e.at("sigma")));
    else if (type == "salt_pepper") s.extra.push_back(Corruption::salt_pepper(e.at("density")));
    else if (type == "gaussian_blur") s.extra.push_back(Corruption::gaussian_blur(e.at("sigma")));
    else throw InvalidParameter("unknown corruption '" + type + "'");
  }
  return s;
}

Image downscale_bicubic(const Image& x, int factor) {
  check_factor(x.height, x.width, factor);
  return separable(x, cached_matrix(x.height, x.height / factor),
                   cached_matrix(x.width, x.width / factor));
}

Image downscale_adjoint(const Image& u, int factor, int height, int width) {
  check_factor(height, width, factor);
  if (u.height * factor != height || u.width * factor != width)
    throw ShapeError("downscale_adjoint: LR shape does not match HR shape / factor");
  return separable(u, cached_matrix(height, u.height).t(), cached_matrix(width, u.width).t());
}

Image upscale_bicubic(const Image& y, int factor) {
  return separable(y, cached_matrix(y.height, y.height * factor),
                   cached_matrix(y.width, y.width * factor));
}

torch::Tensor downscale_tensor(const torch::Tensor& x, int factor) {
  if (x.dim() != 4) throw ShapeError("downscale_tensor expects [B,C,H,W]");
  const int h = static_cast<int>(x.size(2));
  const int w = static_cast<int>(x.size(3));
  check_factor(h, w, factor);
  auto rows = cached_matrix(h, h / factor).to(x.scalar_type());
  auto cols = cached_matrix(w, w / factor).to(x.scalar_type());
  return torch::matmul(torch::matmul(rows, x), cols.t());
}

Image gaussian_blur(const Image& y, double sigma) {
  if (sigma <= 0.0) return y;
  const auto taps = gaussian_taps(sigma);
  const int radius = static_cast<int>(taps.size() / 2);
  Image tmp(y.height, y.width, y.channels);
  Image out(y.height, y.width, y.channels);
  for (int r = 0; r < y.height; ++r)
    for (int c = 0; c < y.width; ++c)
      for (int ch = 0; ch < y.channels; ++ch) {
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k)
          s += taps[k + radius] * y.at(r, reflect_index(c + k, y.width), ch);
        tmp.at(r, c, ch) = static_cast<float>(s);
      }
  for (int r = 0; r < y.height; ++r)
    for (int c = 0; c < y.width; ++c)
      for (int ch = 0; ch < y.channels; ++ch) {
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k)
          s += taps[k + radius] * tmp.at(reflect_index(r + k, y.height), c, ch);
        out.at(r, c, ch) = static_cast<float>(s);
      }
  return out;
}

Image corrupt(const Image& y, const DegradationSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Image out = y;
  for (const auto& c : spec.extra) {
    switch (c.kind) {
      case Corruption::Kind::gaussian_noise: {
        std::normal_distribution<float> n(0.0f, static_cast<float>(c.param));
        for (auto& v : out.pixels) v += n(rng);
        break;
      }
      case Corruption::Kind::salt_pepper: {
        std::bernoulli_distribution hit(c.param);
        std::bernoulli_distribution salt(0.5);
        for (auto& v : out.pixels)
          if (hit(rng)) v = salt(rng) ? 1.0f : 0.0f;
        break;
      }
      case Corruption::Kind::gaussian_blur:
        out = gaussian_blur(out, c.param);
        break;
    }
  }
  out.clip01();
  return out;
}

Image observe(const Image& x, const DegradationSpec& spec, std::uint64_t seed) {
  spec.validate(x.height);
  return corrupt(downscale_bicubic(x, spec.downscale_factor), spec, seed);
}

double laplace_loglik(std::span<const float> residual, double scale) {
  double s = 0.0;
  for (float r : residual) s += std::abs(static_cast<double>(r));
  return -s / scale;
}

}  // namespace rls::degrade
