#include "rls/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "rls/errors.hpp"
#include "rls/synthdata.hpp"

namespace rls::metrics {

namespace {

constexpr int kWindow = 7;
constexpr double kWindowSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr double kMsWeights[] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

void check_same(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("metric inputs differ in shape");
  if (a.pixels.empty()) throw ShapeError("metric inputs are empty");
}

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double s = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    w[i] = std::exp(-x * x / (2 * kWindowSigma * kWindowSigma));
    s += w[i];
  }
  for (auto& v : w) v /= s;
  return w;
}

// Plane of doubles, row-major.
struct Plane {
  int h, w;
  std::vector<double> v;
  double at(int r, int c) const { return v[r * w + c]; }
};

Plane channel_plane(const Image& img, int ch) {
  Plane p{img.height, img.width, std::vector<double>(img.height * img.width)};
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) p.v[r * img.width + c] = img.at(r, c, ch);
  return p;
}

// "valid" separable filtering.
Plane filter_valid(const Plane& p) {
  static const auto w = gaussian_window();
  Plane tmp{p.h, p.w - kWindow + 1, {}};
  tmp.v.assign(tmp.h * tmp.w, 0.0);
  for (int r = 0; r < tmp.h; ++r)
    for (int c = 0; c < tmp.w; ++c) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += w[k] * p.at(r, c + k);
      tmp.v[r * tmp.w + c] = s;
    }
  Plane out{p.h - kWindow + 1, tmp.w, {}};
  out.v.assign(out.h * out.w, 0.0);
  for (int r = 0; r < out.h; ++r)
    for (int c = 0; c < out.w; ++c) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += w[k] * tmp.at(r + k, c);
      out.v[r * out.w + c] = s;
    }
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane o{a.h, a.w, std::vector<double>(a.v.size())};
  for (std::size_t i = 0; i < a.v.size(); ++i) o.v[i] = a.v[i] * b.v[i];
  return o;
}

Plane avg_pool2(const Plane& p) {
  Plane o{p.h / 2, p.w / 2, {}};
  o.v.resize(o.h * o.w);
  for (int r = 0; r < o.h; ++r)
    for (int c = 0; c < o.w; ++c)
      o.v[r * o.w + c] = 0.25 * (p.at(2 * r, 2 * c) + p.at(2 * r + 1, 2 * c) +
                                 p.at(2 * r, 2 * c + 1) + p.at(2 * r + 1, 2 * c + 1));
  return o;
}

// Mean SSIM and mean contrast-structure term for one plane pair.
std::pair<double, double> ssim_cs(const Plane& x, const Plane& y) {
  const auto mx = filter_valid(x), my = filter_valid(y);
  const auto sxx = filter_valid(product(x, x)), syy = filter_valid(product(y, y)),
             sxy = filter_valid(product(x, y));
  double ssim_sum = 0.0, cs_sum = 0.0;
  for (std::size_t i = 0; i < mx.v.size(); ++i) {
    const double ux = mx.v[i], uy = my.v[i];
    const double vx = sxx.v[i] - ux * ux, vy = syy.v[i] - uy * uy, cxy = sxy.v[i] - ux * uy;
    const double cs = (2 * cxy + kC2) / (vx + vy + kC2);
    const double lum = (2 * ux * uy + kC1) / (ux * ux + uy * uy + kC1);
    ssim_sum += lum * cs;
    cs_sum += cs;
  }
  const double n = static_cast<double>(mx.v.size());
  return {ssim_sum / n, cs_sum / n};
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  check_same(a, b);
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ms_ssim(const Image& a, const Image& b, int scales) {
  check_same(a, b);
  if (scales < 1 || scales > 5) throw InvalidParameter("ms_ssim: scales must be in [1,5]");
  const int need = kWindow << (scales - 1);
  if (std::min(a.height, a.width) < need)
    throw ShapeError("ms_ssim: image too small for " + std::to_string(scales) +
                     " scales (need >= " + std::to_string(need) + " px)");
  double wsum = 0.0;
  for (int s = 0; s < scales; ++s) wsum += kMsWeights[s];

  std::vector<double> ssim_at(scales, 0.0), cs_at(scales, 0.0);
  for (int ch = 0; ch < a.channels; ++ch) {
    auto x = channel_plane(a, ch), y = channel_plane(b, ch);
    for (int s = 0; s < scales; ++s) {
      auto [sv, cv] = ssim_cs(x, y);
      ssim_at[s] += sv / a.channels;
      cs_at[s] += cv / a.channels;
      if (s + 1 < scales) {
        x = avg_pool2(x);
        y = avg_pool2(y);
      }
    }
  }
  double out = 1.0;
  for (int s = 0; s < scales; ++s) {
    const double term = s + 1 < scales ? cs_at[s] : ssim_at[s];
    out *= std::pow(std::max(0.0, term), kMsWeights[s] / wsum);
  }
  return std::clamp(out, 0.0, 1.0);
}

double ssim(const Image& a, const Image& b) {
  check_same(a, b);
  if (std::min(a.height, a.width) < kWindow) throw ShapeError("ssim: image smaller than window");
  double s = 0.0;
  for (int ch = 0; ch < a.channels; ++ch)
    s += ssim_cs(channel_plane(a, ch), channel_plane(b, ch)).first;
  return s / a.channels;
}

// --- embedder ---------------------------------------------------------------

torch::Tensor ToyEmbedder::embed(std::span<const Image> images) const {
  if (images.empty()) throw InvalidParameter("embed: no images");
  return cnn::embed(model_, stack_images(images));
}

void ToyEmbedder::save(const std::filesystem::path& dir) const {
  cnn::save_cnn(model_, dir, "toy-embedder");
}

ToyEmbedder ToyEmbedder::load(const std::filesystem::path& dir) {
  return ToyEmbedder(cnn::load_cnn(dir, "toy-embedder"));
}

ToyEmbedder train_embedder(int images_per_class, std::uint64_t seed,
                           const cnn::CnnTrainConfig& config) {
  if (images_per_class < 1) throw InvalidParameter("train_embedder: images_per_class < 1");
  std::vector<Image> images;
  std::vector<int64_t> labels;
  int k = 0;
  for (auto assay : {synth::Assay::translocation, synth::Assay::golgi})
    for (auto label : {synth::ClassLabel::negative, synth::ClassLabel::positive}) {
      for (auto& s : synth::sample_dataset(assay, label, images_per_class, seed * 4 + k))
        images.push_back(std::move(s.image));
      labels.insert(labels.end(), images_per_class, k);
      ++k;
    }
  cnn::CnnArch arch;
  arch.num_classes = 4;
  auto model = cnn::train_cnn(stack_images(images), torch::tensor(labels), arch, config);
  return ToyEmbedder(model);
}

// --- distribution distances ------------------------------------------------

namespace {

using Mat = Eigen::MatrixXd;

Mat to_eigen(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  Mat m(c.size(0), c.size(1));
  auto acc = c.accessor<double, 2>();
  for (int64_t i = 0; i < c.size(0); ++i)
    for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = acc[i][j];
  return m;
}

std::pair<Eigen::VectorXd, Mat> gaussian_fit(const Mat& x) {
  Eigen::VectorXd mu = x.colwise().mean();
  Mat c = x.rowwise() - mu.transpose();
  return {mu, (c.transpose() * c) / static_cast<double>(x.rows() - 1)};
}

// Tr((A B)^{1/2}) for symmetric PSD A, B via the symmetric form A^{1/2} B A^{1/2}.
bool trace_sqrt_product(const Mat& a, const Mat& b, double& out) {
  Eigen::SelfAdjointEigenSolver<Mat> ea(a);
  if (ea.info() != Eigen::Success) return false;
  if (ea.eigenvalues().minCoeff() < -1e-8 * std::max(1.0, ea.eigenvalues().maxCoeff()))
    return false;
  Mat ra = ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
           ea.eigenvectors().transpose();
  Mat m = ra * b * ra;
  Eigen::SelfAdjointEigenSolver<Mat> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  if (em.info() != Eigen::Success) return false;
  const auto& ev = em.eigenvalues();
  if (!ev.allFinite()) return false;
  out = ev.cwiseMax(0.0).cwiseSqrt().sum();
  return true;
}

}  // namespace

double frechet_distance(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1))
    throw ShapeError("frechet_distance: [N,F] inputs with equal F required");
  if (a.size(0) < 2 || b.size(0) < 2) throw InvalidParameter("frechet_distance: too few samples");
  auto [m1, s1] = gaussian_fit(to_eigen(a));
  auto [m2, s2] = gaussian_fit(to_eigen(b));
  double tr = 0.0;
  if (!trace_sqrt_product(s1, s2, tr)) {
    const Mat eps = 1e-6 * Mat::Identity(s1.rows(), s1.cols());
    s1 += eps;
    s2 += eps;
    if (!trace_sqrt_product(s1, s2, tr))
      throw RankDeficiencyError("frechet_distance: covariance square root failed");
  }
  const double d = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr;
  return std::max(0.0, d);
}

double mmd2_unbiased(const torch::Tensor& x, const torch::Tensor& y) {
  if (x.dim() != 2 || y.dim() != 2 || x.size(1) != y.size(1))
    throw ShapeError("mmd2: [m,F] and [n,F] required");
  const auto m = x.size(0), n = y.size(0);
  if (m < 2 || n < 2) throw InvalidParameter("mmd2: need >= 2 samples per set");
  const double dim = static_cast<double>(x.size(1));
  auto kern = [dim](const torch::Tensor& p, const torch::Tensor& q) {
    return (torch::matmul(p, q.t()) / dim + 1.0).pow(3);
  };
  auto xd = x.to(torch::kFloat64), yd = y.to(torch::kFloat64);
  auto kxx = kern(xd, xd), kyy = kern(yd, yd), kxy = kern(xd, yd);
  const double sxx = (kxx.sum() - kxx.diagonal().sum()).item<double>() / double(m * (m - 1));
  const double syy = (kyy.sum() - kyy.diagonal().sum()).item<double>() / double(n * (n - 1));
  const double sxy = kxy.sum().item<double>() / double(m * n);
  return sxx + syy - 2.0 * sxy;
}

KidEstimate kernel_inception_distance(const torch::Tensor& a, const torch::Tensor& b,
                                      int num_subsets, int subset_size, std::uint64_t seed) {
  if (a.size(0) < subset_size || b.size(0) < subset_size)
    throw InvalidParameter("kid: sets smaller than the subset size");
  if (num_subsets < 2) throw InvalidParameter("kid: need >= 2 subsets");
  std::mt19937_64 rng(seed);
  auto pick = [&](int64_t n) {
    std::vector<int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(subset_size);
    return torch::tensor(idx, torch::kInt64);
  };
  KidEstimate k;
  for (int s = 0; s < num_subsets; ++s) {
    auto ia = pick(a.size(0));
    auto ib = pick(b.size(0));
    k.subsets.push_back(mmd2_unbiased(a.index_select(0, ia), b.index_select(0, ib)));
  }
  const double n = static_cast<double>(k.subsets.size());
  k.mean = std::accumulate(k.subsets.begin(), k.subsets.end(), 0.0) / n;
  double var = 0.0;
  for (double v : k.subsets) var += (v - k.mean) * (v - k.mean);
  k.std_error = std::sqrt(var / (n - 1) / n);
  return k;
}

static void check_set(std::span<const Image> s, const char* what) {
  if (s.size() < 100) throw InvalidParameter(std::string(what) + " needs >= 100 images per set");
}

double fid_toy(std::span<const Image> a, std::span<const Image> b, const ToyEmbedder& e) {
  check_set(a, "fid_toy");
  check_set(b, "fid_toy");
  return frechet_distance(e.embed(a), e.embed(b));
}

KidEstimate kid_toy(std::span<const Image> a, std::span<const Image> b, const ToyEmbedder& e,
                    std::uint64_t seed) {
  check_set(a, "kid_toy");
  check_set(b, "kid_toy");
  return kernel_inception_distance(e.embed(a), e.embed(b), 10, 50, seed);
}

double percep_toy(std::span<const Image> a, std::span<const Image> b, const ToyEmbedder& e) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("percep_toy: paired sets required");
  auto ea = e.embed(a), eb = e.embed(b);
  auto cos = torch::cosine_similarity(ea, eb, 1, 1e-12);
  return (1.0 - cos).mean().item<double>();
}

MetricsReport evaluate(const std::string& label, std::span<const Image> rec,
                       std::span<const Image> gt, std::span<const std::string> ids,
                       const ToyEmbedder& embedder) {
  if (rec.size() != gt.size() || rec.size() != ids.size() || rec.empty())
    throw ShapeError("evaluate: reconstructions, ground truth and ids must pair up");
  MetricsReport r;
  r.label = label;
  auto er = embedder.embed(rec), eg = embedder.embed(gt);
  auto cos = (1.0 - torch::cosine_similarity(er, eg, 1, 1e-12)).contiguous();
  for (std::size_t i = 0; i < rec.size(); ++i) {
    ImageScores s{ids[i], psnr(rec[i], gt[i]), ms_ssim(rec[i], gt[i]), cos[i].item<double>()};
    r.psnr_db += s.psnr_db;
    r.ms_ssim += s.ms_ssim;
    r.percep_toy += s.percep_toy;
    r.per_image.push_back(s);
  }
  const double n = static_cast<double>(rec.size());
  r.psnr_db /= n;
  r.ms_ssim /= n;
  r.percep_toy /= n;
  if (rec.size() >= 100) {
    r.fid_toy = frechet_distance(er, eg);
    auto kid = kernel_inception_distance(er, eg, 10, 50, 0);
    r.kid_toy = kid.mean;
    r.kid_toy_std_error = kid.std_error;
  } else {
    r.fid_toy = r.kid_toy = r.kid_toy_std_error = std::nan("");
  }
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  return {{"label", r.label},
          {"n", r.per_image.size()},
          {"psnr_db", num(r.psnr_db)},
          {"ms_ssim", num(r.ms_ssim)},
          {"fid_toy", num(r.fid_toy)},
          {"kid_toy", num(r.kid_toy)},
          {"kid_toy_std_error", num(r.kid_toy_std_error)},
          {"percep_toy", num(r.percep_toy)}};
}

void write_csv(const std::filesystem::path& path, const MetricsReport& r) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(10);
  f << "image_id,psnr_db,ms_ssim,percep_toy\n";
  for (const auto& s : r.per_image)
    f << s.id << ',' << s.psnr_db << ',' << s.ms_ssim << ',' << s.percep_toy << '\n';
}

}  // namespace rls::metrics
