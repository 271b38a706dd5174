#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "rls/cnn.hpp"
#include "rls/search.hpp"
#include "rls/synthdata.hpp"

namespace rls::quantify {

/// Otsu threshold over a `bins`-bin histogram spanning [min, max]. Pixels
/// strictly above the returned value are foreground. A constant input returns
/// its value (empty foreground).
double otsu_threshold(std::span<const double> values, int bins = 256);

using Mask = std::vector<std::uint8_t>;  // row-major, 1 = set

/// Sets every pixel within Euclidean distance `radius` of a set pixel.
Mask dilate_disk(const Mask& mask, int height, int width, double radius);

/// Areas of the 8-connected components of `mask`, in discovery order.
std::vector<int> component_areas(const Mask& mask, int height, int width);

struct FeatureMeasurement {
  synth::Assay assay;
  double value;
  double nucleus_area = 0;
  int spot_count = 0;
  std::string image_id;
};

inline constexpr double kRingWidthPx = 6.0;
inline constexpr int kMinSpotAreaPx = 2;

/// Mean channel-1 intensity in the Otsu nucleus mask (channel 0) divided by
/// the mean in the ring obtained by dilating the mask kRingWidthPx.
FeatureMeasurement translocation_ratio(const Image& img, const std::string& id = "");
/// Mean area of the 8-connected Otsu components of channel 2 (components
/// smaller than kMinSpotAreaPx dropped).
FeatureMeasurement mean_spot_area(const Image& img, const std::string& id = "");
FeatureMeasurement measure(synth::Assay assay, const Image& img, const std::string& id = "");

enum class Tier { HR, SR_RLS, SR_no_regu, LR_upsampled };
std::string to_string(Tier t);

/// Content-derived identifier of a rendered image (hash of its parameters).
std::string image_id(const synth::PhenotypeParams& p);

/// HR renders of both conditions, their LR observations and any
/// reconstructions, index-aligned.
struct AssayRun {
  synth::Assay assay;
  int factor = 0;
  std::vector<synth::PhenotypeParams> params;
  std::vector<int> labels;  // 0 negative, 1 positive
  std::vector<std::string> ids;
  std::vector<Image> lr;
  std::map<Tier, std::vector<Image>> images;  // always holds Tier::HR
};

/// Renders n images per condition and their observations. n >= 100.
AssayRun prepare_assay(synth::Assay assay, int n, std::uint64_t seed,
                       const degrade::DegradationSpec& spec);

/// Fills `tier` (SR_RLS, SR_no_regu or LR_upsampled) for every image.
void reconstruct(AssayRun& run, Tier tier, const gen::GeneratorModel& generator,
                 const flow::FlowModel& flow, const degrade::DegradationSpec& spec,
                 const search::RLSConfig& config, int chunk = 16);

struct TierReport {
  Tier tier;
  std::vector<double> negative, positive;
  int failed_negative = 0, failed_positive = 0;
  double cohens_d = 0;  // (positive - negative) / pooled sd
  double rank_sum_p = 1;
};

struct AssayReport {
  synth::Assay assay;
  int n_per_condition = 0;
  std::vector<TierReport> tiers;
  const TierReport& tier(Tier t) const;
};

/// Measures every tier present in `run`. Failed measurements are counted and
/// excluded; each distribution must keep >= 30 values.
AssayReport measure_assay(const AssayRun& run);

nlohmann::json to_json(const AssayReport& r);
void write_csv(const std::filesystem::path& path, const AssayReport& r);

/// Boxplots of negative/positive per tier, side by side.
Image render_boxplots(const AssayReport& r, int height = 240);

class SplitLeakage : public Error {
 public:
  using Error::Error;
};

/// Throws SplitLeakage when any id appears in more than one split.
void check_disjoint(const std::map<std::string, std::vector<std::string>>& splits);

struct ClassifierConfig {
  int train_per_class = 500;
  int control_test_per_class = 500;
  cnn::CnnTrainConfig train;
  std::uint64_t seed = 0;
};

struct ClassifierReport {
  synth::Assay assay;
  std::map<std::string, double> accuracy;  // LR, no_regu, RLS, HR
  double shuffled_control = 0;
  int n_train = 0, n_test = 0, n_control = 0;
};

/// Trains HR and LR classifiers on a fresh split and scores them on `test`.
/// `generator_ids` are the ids used for generator training.
ClassifierReport classifier_experiment(const AssayRun& test,
                                       const std::vector<std::string>& generator_ids,
                                       const degrade::DegradationSpec& spec,
                                       const ClassifierConfig& config);

nlohmann::json to_json(const ClassifierReport& r);
/// Table layout: assay, LR, no_regu, RLS, HR.
void write_accuracy_csv(const std::filesystem::path& path, std::span<const ClassifierReport> rows);

}  // namespace rls::quantify
