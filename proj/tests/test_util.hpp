#pragma once

#include <random>

#include "rls/flow.hpp"
#include "rls/generator.hpp"
#include "rls/image.hpp"

namespace rls::fixtures {

inline Image random_image(int h, int w, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w, c);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

inline double dot(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.pixels[i]) * b.pixels[i];
  return s;
}

// Untrained generator small enough for per-test use.
inline gen::GeneratorModel tiny_generator(int d = 8, std::uint64_t seed = 3) {
  gen::GeneratorArch a;
  a.d = d;
  a.mapping_layers = 2;
  a.const_channels = 8;
  a.channels = {8, 8, 8, 8, 8};
  return gen::GeneratorModel(a, seed);
}

// Flow with random (non-identity) MADE outputs so that shifts and scales
// actually depend on the input.
inline flow::FlowModel perturbed_flow(int d, std::uint64_t seed, double scale = 0.3) {
  flow::FlowModel f({d, 3, 16, seed}, seed);
  torch::NoGradGuard ng;
  torch::manual_seed(seed);
  for (auto& p : f.parameters()) p.add_(torch::randn_like(p) * scale);
  return f;
}

}  // namespace rls::fixtures
