#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "rls/image.hpp"

namespace rls::synth {

enum class Assay { translocation, golgi };
enum class ClassLabel { negative, positive };

std::string to_string(Assay a);
std::string to_string(ClassLabel c);
Assay assay_from_string(const std::string& s);
ClassLabel class_from_string(const std::string& s);

inline constexpr int kImageSize = 64;
inline constexpr int kChannels = 3;
inline constexpr double kTextureNoiseSigma = 0.02;
/// 10%-90% width of every soft edge, in pixels.
inline constexpr double kEdgeWidthPx = 1.5;
/// Gaussian blur (std, px) applied to spot disks.
inline constexpr double kSpotEdgeSigmaPx = 0.6;

/// Ground-truth phenotype of one synthetic cell.
///
/// Class ranges (disjoint by construction):
///  - translocation: negative nuclear_ratio in [0.4, 0.6], positive in
///    [1.8, 2.2]; no spots (spot_count == 0).
///  - golgi: negative spot_count in [1,3] with radius in [6,9]; positive
///    spot_count in [8,14] with radius in [1.5,3]; nuclear_ratio in [0.4, 0.6].
struct PhenotypeParams {
  Assay assay = Assay::translocation;
  ClassLabel class_label = ClassLabel::negative;
  double nuclear_ratio = 0.5;
  int spot_count = 0;
  double spot_radius_px = 1.0;
  double nucleus_row = 32.0;
  double nucleus_col = 32.0;
  double nucleus_radius_px = 8.0;
  std::uint64_t rng_seed = 0;

  bool operator==(const PhenotypeParams&) const = default;
};

/// Throws InvalidParameter when an invariant is violated.
void validate(const PhenotypeParams& p, int size = kImageSize);

/// Nuisance quantities derived deterministically from `rng_seed`.
struct RenderGeometry {
  double cell_radius_px;
  double nucleus_intensity;
  double cytoplasm_intensity;
  double spot_amplitude;
  std::vector<std::pair<double, double>> spot_centers;  // (row, col)
};
RenderGeometry render_geometry(const PhenotypeParams& p, int size = kImageSize);

/// Logistic edge profile: ~1 inside radius, ~0 outside, 0.5 at the radius.
double soft_disk(double dist, double radius);
/// Disk of the given radius blurred by a Gaussian of kSpotEdgeSigmaPx.
double spot_profile(double dist, double radius);
/// Max-composites one spot into `channel`.
void draw_spot(Image& img, int channel, double row, double col, double radius,
               double amplitude);

Image render_phenotype(const PhenotypeParams& p, int size = kImageSize);
/// Renders without the texture noise (used by oracles).
Image render_clean(const PhenotypeParams& p, int size = kImageSize);

struct Sample {
  Image image;
  PhenotypeParams params;
};

/// n i.i.d. draws within the class ranges. Parameters are reproducible per seed.
std::vector<PhenotypeParams> sample_params(Assay assay, ClassLabel label, int n,
                                           std::uint64_t seed);
std::vector<Sample> sample_dataset(Assay assay, ClassLabel label, int n,
                                   std::uint64_t seed);
/// Equal mix of both assays and both classes, shuffled; `n` rounded down to a
/// multiple of 4.
std::vector<Sample> sample_pooled(int n, std::uint64_t seed);

nlohmann::json to_json(const PhenotypeParams& p);
PhenotypeParams params_from_json(const nlohmann::json& j);

/// Writes `<dir>/img_XXXXX.png` (16-bit), `<dir>/img_XXXXX.json` sidecars and
/// `<dir>/manifest.json`.
void export_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                    const std::string& assay, const std::string& label, std::uint64_t seed);
std::vector<Sample> import_dataset(const std::filesystem::path& dir);

}  // namespace rls::synth
