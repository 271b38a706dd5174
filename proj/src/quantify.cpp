#include "rls/quantify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "rls/archive.hpp"
#include "rls/stats.hpp"

namespace rls::quantify {

double otsu_threshold(std::span<const double> values, int bins) {
  if (values.empty()) throw InvalidParameter("otsu_threshold: no values");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return hi;
  std::vector<double> hist(bins, 0.0);
  const double width = (hi - lo) / bins;
  for (double v : values) hist[std::min(bins - 1, static_cast<int>((v - lo) / width))] += 1.0;

  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (int i = 0; i < bins; ++i) sum_all += i * hist[i];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_i = 0;
  for (int i = 0; i < bins - 1; ++i) {
    w0 += hist[i];
    sum0 += i * hist[i];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_i = i;
    }
  }
  return lo + (best_i + 1) * width;
}

Mask dilate_disk(const Mask& mask, int h, int w, double radius) {
  Mask out(mask.size(), 0);
  const int r = static_cast<int>(std::floor(radius));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask[y * w + x]) continue;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (dy * dy + dx * dx <= radius * radius) out[yy * w + xx] = 1;
        }
    }
  return out;
}

std::vector<int> component_areas(const Mask& mask, int h, int w) {
  std::vector<int> areas;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    if (!mask[start] || seen[start]) continue;
    int area = 0;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++area;
      const int y = p / w, x = p % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const int q = yy * w + xx;
          if (mask[q] && !seen[q]) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
    }
    areas.push_back(area);
  }
  return areas;
}

namespace {

void check_image(const Image& img) {
  if (img.height != synth::kImageSize || img.width != synth::kImageSize || img.channels != 3)
    throw ShapeError("quantifiers expect 64x64x3 images");
}

std::vector<double> channel_values(const Image& img, int ch) {
  std::vector<double> v(img.height * img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) v[r * img.width + c] = img.at(r, c, ch);
  return v;
}

Mask otsu_mask(const std::vector<double>& v) {
  const double t = otsu_threshold(v);
  Mask m(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] > t;
  return m;
}

}  // namespace

FeatureMeasurement translocation_ratio(const Image& img, const std::string& id) {
  check_image(img);
  const auto nucleus = otsu_mask(channel_values(img, 0));
  const auto area = std::count(nucleus.begin(), nucleus.end(), 1);
  if (area == 0) throw MeasurementError("translocation_ratio: empty nucleus mask");
  const auto dilated = dilate_disk(nucleus, img.height, img.width, kRingWidthPx);
  const auto reporter = channel_values(img, 1);
  double in_sum = 0.0, ring_sum = 0.0;
  int ring_n = 0;
  for (std::size_t i = 0; i < reporter.size(); ++i) {
    if (nucleus[i]) {
      in_sum += reporter[i];
    } else if (dilated[i]) {
      ring_sum += reporter[i];
      ++ring_n;
    }
  }
  if (ring_n == 0) throw MeasurementError("translocation_ratio: empty cytoplasm ring");
  const double ring_mean = ring_sum / ring_n;
  if (ring_mean < 1e-4) throw MeasurementError("translocation_ratio: cytoplasm ring is dark");
  return {synth::Assay::translocation, (in_sum / static_cast<double>(area)) / ring_mean,
          static_cast<double>(area), 0, id};
}

FeatureMeasurement mean_spot_area(const Image& img, const std::string& id) {
  check_image(img);
  const auto spots = otsu_mask(channel_values(img, 2));
  double sum = 0.0;
  int count = 0;
  for (int a : component_areas(spots, img.height, img.width))
    if (a >= kMinSpotAreaPx) {
      sum += a;
      ++count;
    }
  if (count == 0) throw MeasurementError("mean_spot_area: no spots found");
  return {synth::Assay::golgi, sum / count, 0.0, count, id};
}

FeatureMeasurement measure(synth::Assay assay, const Image& img, const std::string& id) {
  return assay == synth::Assay::translocation ? translocation_ratio(img, id)
                                              : mean_spot_area(img, id);
}

std::string to_string(Tier t) {
  switch (t) {
    case Tier::HR: return "HR";
    case Tier::SR_RLS: return "SR_RLS";
    case Tier::SR_no_regu: return "SR_no_regu";
    case Tier::LR_upsampled: return "LR_upsampled";
  }
  return "?";
}

std::string image_id(const synth::PhenotypeParams& p) {
  return sha256_hex(synth::to_json(p).dump()).substr(0, 16);
}

AssayRun prepare_assay(synth::Assay assay, int n, std::uint64_t seed,
                       const degrade::DegradationSpec& spec) {
  if (n < 100) throw InvalidParameter("run_assay needs n >= 100 per condition");
  spec.validate(synth::kImageSize);
  AssayRun run;
  run.assay = assay;
  run.factor = spec.downscale_factor;
  auto& hr = run.images[Tier::HR];
  for (int label = 0; label < 2; ++label) {
    const auto cls = label ? synth::ClassLabel::positive : synth::ClassLabel::negative;
    const auto split_seed = derive_seed("assay-" + synth::to_string(assay) + "-" +
                                            synth::to_string(cls), seed);
    for (auto& s : synth::sample_dataset(assay, cls, n, split_seed)) {
      run.ids.push_back(image_id(s.params));
      run.params.push_back(s.params);
      run.labels.push_back(label);
      run.lr.push_back(degrade::observe(s.image, spec, s.params.rng_seed));
      hr.push_back(std::move(s.image));
    }
  }
  return run;
}

void reconstruct(AssayRun& run, Tier tier, const gen::GeneratorModel& generator,
                 const flow::FlowModel& flow, const degrade::DegradationSpec& spec,
                 const search::RLSConfig& config, int chunk) {
  auto& out = run.images[tier];
  out.clear();
  if (tier == Tier::HR) throw InvalidParameter("reconstruct: HR is not a reconstruction");
  if (tier == Tier::LR_upsampled) {
    for (const auto& y : run.lr) out.push_back(degrade::upscale_bicubic(y, run.factor));
    return;
  }
  auto cfg = config;
  cfg.variant = tier == Tier::SR_RLS ? search::Variant::full : search::Variant::no_regu;
  for (std::size_t i = 0; i < run.lr.size(); i += chunk) {
    const auto len = std::min<std::size_t>(chunk, run.lr.size() - i);
    const auto part = std::span<const Image>(run.lr).subspan(i, len);
    try {
      for (auto& r : search::superresolve_batch(part, generator, flow, spec, cfg))
        out.push_back(std::move(r.sr_image));
    } catch (const NonFiniteError&) {
      // Retry one by one so a single failure only flags its own image.
      for (const auto& y : part) {
        try {
          out.push_back(search::superresolve(y, generator, flow, spec, cfg).sr_image);
        } catch (const NonFiniteError&) {
          out.emplace_back();
        }
      }
    }
  }
}

const TierReport& AssayReport::tier(Tier t) const {
  for (const auto& r : tiers)
    if (r.tier == t) return r;
  throw InvalidParameter("assay report has no tier " + to_string(t));
}

AssayReport measure_assay(const AssayRun& run) {
  AssayReport rep;
  rep.assay = run.assay;
  rep.n_per_condition = static_cast<int>(run.labels.size() / 2);
  for (const auto& [tier, images] : run.images) {
    TierReport tr;
    tr.tier = tier;
    for (std::size_t i = 0; i < images.size(); ++i) {
      auto& dst = run.labels[i] ? tr.positive : tr.negative;
      auto& failed = run.labels[i] ? tr.failed_positive : tr.failed_negative;
      if (images[i].pixels.empty()) {
        ++failed;
        continue;
      }
      try {
        dst.push_back(measure(run.assay, images[i], run.ids[i]).value);
      } catch (const MeasurementError&) {
        ++failed;
      }
    }
    if (tr.negative.size() < 30 || tr.positive.size() < 30)
      throw MeasurementError("tier " + to_string(tier) +
                             " kept fewer than 30 measurements per condition");
    tr.cohens_d = stats::cohens_d(tr.negative, tr.positive);
    tr.rank_sum_p = stats::rank_sum_test(tr.negative, tr.positive).pvalue;
    rep.tiers.push_back(std::move(tr));
  }
  return rep;
}

nlohmann::json to_json(const AssayReport& r) {
  nlohmann::json tiers = nlohmann::json::object();
  for (const auto& t : r.tiers) {
    auto summary = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      auto q = [&](double p) { return v[static_cast<std::size_t>(p * (v.size() - 1) + 0.5)]; };
      return nlohmann::json{{"n", v.size()},
                            {"mean", stats::mean(v)},
                            {"min", v.front()},
                            {"q1", q(0.25)},
                            {"median", stats::median(v)},
                            {"q3", q(0.75)},
                            {"max", v.back()}};
    };
    tiers[to_string(t.tier)] = {{"negative", summary(t.negative)},
                                {"positive", summary(t.positive)},
                                {"failed_negative", t.failed_negative},
                                {"failed_positive", t.failed_positive},
                                {"cohens_d", t.cohens_d},
                                {"rank_sum_p", t.rank_sum_p}};
  }
  return {{"assay", synth::to_string(r.assay)},
          {"n_per_condition", r.n_per_condition},
          {"feature", r.assay == synth::Assay::translocation ? "translocation_ratio"
                                                             : "mean_spot_area_px2"},
          {"tiers", tiers}};
}

void write_csv(const std::filesystem::path& path, const AssayReport& r) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(10);
  f << "assay,tier,condition,value\n";
  for (const auto& t : r.tiers) {
    for (double v : t.negative)
      f << synth::to_string(r.assay) << ',' << to_string(t.tier) << ",negative," << v << '\n';
    for (double v : t.positive)
      f << synth::to_string(r.assay) << ',' << to_string(t.tier) << ",positive," << v << '\n';
  }
}

Image render_boxplots(const AssayReport& r, int height) {
  constexpr int kBoxW = 18, kGap = 6, kGroupGap = 20, kMargin = 10;
  const int groups = static_cast<int>(r.tiers.size());
  const int width = 2 * kMargin + groups * (2 * kBoxW + kGap) + (groups - 1) * kGroupGap;
  Image img(height, width, 3, 1.0f);
  double lo = 1e300, hi = -1e300;
  for (const auto& t : r.tiers)
    for (const auto* v : {&t.negative, &t.positive})
      for (double x : *v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
  if (!(hi > lo)) hi = lo + 1.0;
  auto ypix = [&](double v) {
    return static_cast<int>(std::lround((height - kMargin - 1) - (v - lo) / (hi - lo) * (height - 2 * kMargin - 1)));
  };
  auto put = [&](int y, int x, std::array<float, 3> c) {
    if (y >= 0 && y < height && x >= 0 && x < width)
      for (int k = 0; k < 3; ++k) img.at(y, x, k) = c[k];
  };
  auto hline = [&](int y, int x0, int x1, std::array<float, 3> c) {
    for (int x = x0; x <= x1; ++x) put(y, x, c);
  };
  auto vline = [&](int x, int y0, int y1, std::array<float, 3> c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) put(y, x, c);
  };
  int x = kMargin;
  for (const auto& t : r.tiers) {
    int k = 0;
    for (const auto* v : {&t.negative, &t.positive}) {
      const std::array<float, 3> col = k == 0 ? std::array<float, 3>{0.2f, 0.4f, 0.8f}
                                              : std::array<float, 3>{0.85f, 0.35f, 0.2f};
      auto s = *v;
      std::sort(s.begin(), s.end());
      auto q = [&](double p) { return s[static_cast<std::size_t>(p * (s.size() - 1) + 0.5)]; };
      const int y_min = ypix(s.front()), y_q1 = ypix(q(0.25)), y_med = ypix(q(0.5)),
                y_q3 = ypix(q(0.75)), y_max = ypix(s.back());
      const int x0 = x, x1 = x + kBoxW - 1, xm = x + kBoxW / 2;
      for (int yy = y_q3; yy <= y_q1; ++yy) hline(yy, x0, x1, {0.85f, 0.85f, 0.85f});
      hline(y_q1, x0, x1, col);
      hline(y_q3, x0, x1, col);
      vline(x0, y_q1, y_q3, col);
      vline(x1, y_q1, y_q3, col);
      hline(y_med, x0, x1, {0.0f, 0.0f, 0.0f});
      vline(xm, y_q1, y_min, col);
      vline(xm, y_q3, y_max, col);
      hline(y_min, x0 + 4, x1 - 4, col);
      hline(y_max, x0 + 4, x1 - 4, col);
      x += kBoxW + kGap;
      ++k;
    }
    x += kGroupGap - kGap;
  }
  return img;
}

void check_disjoint(const std::map<std::string, std::vector<std::string>>& splits) {
  std::map<std::string, std::string> owner;
  for (const auto& [name, ids] : splits)
    for (const auto& id : ids) {
      auto [it, inserted] = owner.emplace(id, name);
      if (!inserted && it->second != name)
        throw SplitLeakage("image " + id + " appears in splits '" + it->second + "' and '" +
                           name + "'");
    }
}

ClassifierReport classifier_experiment(const AssayRun& test,
                                       const std::vector<std::string>& generator_ids,
                                       const degrade::DegradationSpec& spec,
                                       const ClassifierConfig& config) {
  if (config.train_per_class < 1 || config.control_test_per_class < 1)
    throw InvalidParameter("classifier_experiment: split sizes must be positive");
  auto lr_spec = spec;
  lr_spec.extra.clear();

  std::vector<Image> train_hr, train_lr, control_hr;
  std::vector<int64_t> train_y, control_y;
  std::vector<std::string> train_ids, test_ids = test.ids;
  for (int label = 0; label < 2; ++label) {
    const auto cls = label ? synth::ClassLabel::positive : synth::ClassLabel::negative;
    const auto tag = synth::to_string(test.assay) + "-" + synth::to_string(cls);
    for (auto& s : synth::sample_dataset(test.assay, cls, config.train_per_class,
                                         derive_seed("classifier-train-" + tag, config.seed))) {
      train_ids.push_back(image_id(s.params));
      train_lr.push_back(degrade::observe(s.image, lr_spec, s.params.rng_seed));
      train_hr.push_back(std::move(s.image));
      train_y.push_back(label);
    }
    for (auto& s : synth::sample_dataset(test.assay, cls, config.control_test_per_class,
                                         derive_seed("classifier-control-" + tag, config.seed))) {
      test_ids.push_back(image_id(s.params));
      control_hr.push_back(std::move(s.image));
      control_y.push_back(label);
    }
  }
  check_disjoint({{"generator", generator_ids}, {"classifier", train_ids}, {"test", test_ids}});

  const auto y_train = torch::tensor(train_y);
  const auto y_test = torch::tensor(std::vector<int64_t>(test.labels.begin(), test.labels.end()));
  cnn::CnnArch hr_arch;
  auto hr_model = cnn::train_cnn(stack_images(train_hr), y_train, hr_arch, config.train);

  ClassifierReport rep;
  rep.assay = test.assay;
  rep.n_train = static_cast<int>(train_y.size());
  rep.n_test = static_cast<int>(test.labels.size());
  rep.n_control = static_cast<int>(control_y.size());
  auto score = [&](Tier t, const char* name) {
    auto it = test.images.find(t);
    if (it == test.images.end()) return;
    std::vector<Image> imgs;
    std::vector<int64_t> ys;
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      if (it->second[i].pixels.empty()) continue;  // failed reconstruction
      imgs.push_back(it->second[i]);
      ys.push_back(test.labels[i]);
    }
    rep.accuracy[name] = cnn::accuracy(hr_model, stack_images(imgs), torch::tensor(ys));
  };
  score(Tier::HR, "HR");
  score(Tier::SR_RLS, "RLS");
  score(Tier::SR_no_regu, "no_regu");

  cnn::CnnArch lr_arch;
  lr_arch.resolution = synth::kImageSize / spec.downscale_factor;
  auto lr_model = cnn::train_cnn(stack_images(train_lr), y_train, lr_arch, config.train);
  rep.accuracy["LR"] = cnn::accuracy(lr_model, stack_images(test.lr), y_test);

  auto shuffled = train_y;
  std::mt19937_64 rng(derive_seed("classifier-shuffle", config.seed));
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  auto control_model =
      cnn::train_cnn(stack_images(train_hr), torch::tensor(shuffled), hr_arch, config.train);
  rep.shuffled_control =
      cnn::accuracy(control_model, stack_images(control_hr), torch::tensor(control_y));
  return rep;
}

nlohmann::json to_json(const ClassifierReport& r) {
  return {{"assay", synth::to_string(r.assay)},
          {"accuracy", r.accuracy},
          {"shuffled_control", r.shuffled_control},
          {"n_train", r.n_train},
          {"n_test", r.n_test},
          {"n_control", r.n_control}};
}

void write_accuracy_csv(const std::filesystem::path& path, std::span<const ClassifierReport> rows) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(6);
  f << "assay,LR,no_regu,RLS,HR\n";
  for (const auto& r : rows) {
    f << synth::to_string(r.assay);
    for (const char* k : {"LR", "no_regu", "RLS", "HR"}) {
      f << ',';
      if (auto it = r.accuracy.find(k); it != r.accuracy.end()) f << it->second;
    }
    f << '\n';
  }
}

}  // namespace rls::quantify
