#include "rls/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "rls/errors.hpp"
#include "rls/png_io.hpp"

namespace rls::synth {

namespace {

constexpr double kLogisticScale = kEdgeWidthPx / (2.0 * 2.1972245773362196);  // 2 ln 9

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

bool in_range(double v, double lo, double hi) { return v >= lo && v <= hi; }

void render_into(Image& img, const PhenotypeParams& p, const RenderGeometry& g) {
  const int size = img.height;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double dist = std::hypot(r + 0.5 - p.nucleus_row, c + 0.5 - p.nucleus_col);
      const double nuc = soft_disk(dist, p.nucleus_radius_px);
      const double cell = soft_disk(dist, g.cell_radius_px);
      img.at(r, c, 0) = static_cast<float>(g.nucleus_intensity * nuc);
      const double reporter =
          g.cytoplasm_intensity * cell * (1.0 + (p.nuclear_ratio - 1.0) * nuc);
      img.at(r, c, 1) = static_cast<float>(std::min(reporter, 1.0));
    }
  }
  for (const auto& [row, col] : g.spot_centers)
    draw_spot(img, 2, row, col, p.spot_radius_px, g.spot_amplitude);
}

}  // namespace

std::string to_string(Assay a) { return a == Assay::translocation ? "translocation" : "golgi"; }
std::string to_string(ClassLabel c) { return c == ClassLabel::negative ? "negative" : "positive"; }

Assay assay_from_string(const std::string& s) {
  if (s == "translocation") return Assay::translocation;
  if (s == "golgi") return Assay::golgi;
  throw InvalidParameter("unknown assay '" + s + "'");
}

ClassLabel class_from_string(const std::string& s) {
  if (s == "negative") return ClassLabel::negative;
  if (s == "positive") return ClassLabel::positive;
  throw InvalidParameter("unknown class label '" + s + "'");
}

void validate(const PhenotypeParams& p, int size) {
  auto fail = [](const std::string& why) { throw InvalidParameter("PhenotypeParams: " + why); };
  if (size < 16) fail("image size must be >= 16");
  if (!(p.nucleus_radius_px > 0.0)) fail("nucleus_radius_px must be positive");
  if (!(p.spot_radius_px > 0.0)) fail("spot_radius_px must be positive");
  if (!(p.nuclear_ratio > 0.0)) fail("nuclear_ratio must be positive");
  if (p.spot_count < 0) fail("spot_count must be non-negative");
  const double rad = p.nucleus_radius_px;
  if (p.nucleus_row - rad < 0.0 || p.nucleus_row + rad > size ||
      p.nucleus_col - rad < 0.0 || p.nucleus_col + rad > size)
    fail("nucleus does not fit inside the frame");
  const bool neg = p.class_label == ClassLabel::negative;
  if (p.assay == Assay::translocation) {
    if (neg ? !in_range(p.nuclear_ratio, 0.4, 0.6) : !in_range(p.nuclear_ratio, 1.8, 2.2))
      fail("nuclear_ratio outside the translocation class range");
    if (p.spot_count != 0) fail("translocation cells carry no spots");
  } else {
    if (!in_range(p.nuclear_ratio, 0.4, 0.6)) fail("golgi nuclear_ratio outside [0.4, 0.6]");
    if (neg) {
      if (p.spot_count < 1 || p.spot_count > 3 || !in_range(p.spot_radius_px, 6.0, 9.0))
        fail("golgi negative spots outside count [1,3] / radius [6,9]");
    } else {
      if (p.spot_count < 8 || p.spot_count > 14 || !in_range(p.spot_radius_px, 1.5, 3.0))
        fail("golgi positive spots outside count [8,14] / radius [1.5,3]");
    }
  }
}

double soft_disk(double dist, double radius) {
  return 1.0 / (1.0 + std::exp((dist - radius) / kLogisticScale));
}

double spot_profile(double dist, double radius) {
  return 0.5 * std::erfc((dist - radius) / (std::numbers::sqrt2 * kSpotEdgeSigmaPx));
}

void draw_spot(Image& img, int channel, double row, double col, double radius,
               double amplitude) {
  const double reach = radius + 4.0 * kSpotEdgeSigmaPx + 1.0;
  const int r0 = std::max(0, static_cast<int>(std::floor(row - reach)));
  const int r1 = std::min(img.height - 1, static_cast<int>(std::ceil(row + reach)));
  const int c0 = std::max(0, static_cast<int>(std::floor(col - reach)));
  const int c1 = std::min(img.width - 1, static_cast<int>(std::ceil(col + reach)));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      const double v = amplitude * spot_profile(std::hypot(r + 0.5 - row, c + 0.5 - col), radius);
      float& px = img.at(r, c, channel);
      px = std::max(px, static_cast<float>(v));
    }
}

RenderGeometry render_geometry(const PhenotypeParams& p, int size) {
  std::mt19937_64 rng(p.rng_seed);
  RenderGeometry g{};
  g.cell_radius_px = p.nucleus_radius_px + uniform(rng, 9.0, 13.0);
  g.nucleus_intensity = uniform(rng, 0.65, 0.9);
  g.cytoplasm_intensity = uniform(rng, 0.30, 0.42);
  g.spot_amplitude = uniform(rng, 0.6, 0.9);
  const double spread = std::max(1.0, g.cell_radius_px - p.spot_radius_px - 1.0);
  for (int k = 0; k < p.spot_count; ++k) {
    const double rho = spread * std::sqrt(uniform(rng, 0.0, 1.0));
    const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double row = std::clamp(p.nucleus_row + rho * std::sin(theta), 0.0, double(size));
    const double col = std::clamp(p.nucleus_col + rho * std::cos(theta), 0.0, double(size));
    g.spot_centers.emplace_back(row, col);
  }
  return g;
}

Image render_clean(const PhenotypeParams& p, int size) {
  validate(p, size);
  Image img(size, size, kChannels);
  render_into(img, p, render_geometry(p, size));
  img.clip01();
  return img;
}

Image render_phenotype(const PhenotypeParams& p, int size) {
  validate(p, size);
  Image img(size, size, kChannels);
  render_into(img, p, render_geometry(p, size));
  // Noise stream is independent of the geometry stream.
  std::mt19937_64 noise_rng(p.rng_seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(kTextureNoiseSigma));
  for (auto& v : img.pixels) v += noise(noise_rng);
  img.clip01();
  return img;
}

std::vector<PhenotypeParams> sample_params(Assay assay, ClassLabel label, int n,
                                           std::uint64_t seed) {
  if (n < 1) throw InvalidParameter("sample_dataset: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<PhenotypeParams> out;
  out.reserve(n);
  const double half = kImageSize / 2.0;
  for (int i = 0; i < n; ++i) {
    PhenotypeParams p;
    p.assay = assay;
    p.class_label = label;
    p.nucleus_radius_px = uniform(rng, 7.0, 10.0);
    p.nucleus_row = half + uniform(rng, -6.0, 6.0);
    p.nucleus_col = half + uniform(rng, -6.0, 6.0);
    const bool neg = label == ClassLabel::negative;
    if (assay == Assay::translocation) {
      p.nuclear_ratio = neg ? uniform(rng, 0.4, 0.6) : uniform(rng, 1.8, 2.2);
      p.spot_count = 0;
      p.spot_radius_px = 1.0;
    } else {
      p.nuclear_ratio = uniform(rng, 0.4, 0.6);
      p.spot_count = neg ? uniform_int(rng, 1, 3) : uniform_int(rng, 8, 14);
      p.spot_radius_px = neg ? uniform(rng, 6.0, 9.0) : uniform(rng, 1.5, 3.0);
    }
    p.rng_seed = rng();
    out.push_back(p);
  }
  return out;
}

std::vector<Sample> sample_dataset(Assay assay, ClassLabel label, int n, std::uint64_t seed) {
  std::vector<Sample> out;
  for (const auto& p : sample_params(assay, label, n, seed))
    out.push_back({render_phenotype(p), p});
  return out;
}

std::vector<Sample> sample_pooled(int n, std::uint64_t seed) {
  if (n < 4) throw InvalidParameter("sample_pooled: n must be >= 4");
  const int per = n / 4;
  std::vector<Sample> all;
  all.reserve(static_cast<std::size_t>(per) * 4);
  std::uint64_t k = 0;
  for (Assay a : {Assay::translocation, Assay::golgi})
    for (ClassLabel c : {ClassLabel::negative, ClassLabel::positive}) {
      auto part = sample_dataset(a, c, per, seed * 4 + (k++));
      std::move(part.begin(), part.end(), std::back_inserter(all));
    }
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  return all;
}

nlohmann::json to_json(const PhenotypeParams& p) {
  return {{"assay", to_string(p.assay)},
          {"class_label", to_string(p.class_label)},
          {"nuclear_ratio", p.nuclear_ratio},
          {"spot_count", p.spot_count},
          {"spot_radius_px", p.spot_radius_px},
          {"nucleus_center", {p.nucleus_row, p.nucleus_col}},
          {"nucleus_radius_px", p.nucleus_radius_px},
          {"rng_seed", p.rng_seed}};
}

PhenotypeParams params_from_json(const nlohmann::json& j) {
  PhenotypeParams p;
  p.assay = assay_from_string(j.at("assay"));
  p.class_label = class_from_string(j.at("class_label"));
  p.nuclear_ratio = j.at("nuclear_ratio");
  p.spot_count = j.at("spot_count");
  p.spot_radius_px = j.at("spot_radius_px");
  p.nucleus_row = j.at("nucleus_center").at(0);
  p.nucleus_col = j.at("nucleus_center").at(1);
  p.nucleus_radius_px = j.at("nucleus_radius_px");
  p.rng_seed = j.at("rng_seed");
  return p;
}

void export_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                    const std::string& assay, const std::string& label, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream stem;
    stem << "img_" << std::setw(5) << std::setfill('0') << i;
    write_png16(dir / (stem.str() + ".png"), samples[i].image);
    std::ofstream(dir / (stem.str() + ".json")) << to_json(samples[i].params).dump(2) << "\n";
    files.push_back({{"image", stem.str() + ".png"}, {"params", stem.str() + ".json"}});
  }
  nlohmann::json manifest = {{"assay", assay}, {"class", label}, {"seed", seed},
                             {"count", samples.size()}, {"bit_depth", 16},
                             {"files", files}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

std::vector<Sample> import_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("no dataset manifest in " + dir.string());
  auto manifest = nlohmann::json::parse(in);
  std::vector<Sample> out;
  for (const auto& f : manifest.at("files")) {
    std::ifstream pj(dir / f.at("params").get<std::string>());
    out.push_back({read_png(dir / f.at("image").get<std::string>()),
                   params_from_json(nlohmann::json::parse(pj))});
  }
  return out;
}

}  // namespace rls::synth
