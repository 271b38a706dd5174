#include "rls/generator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "rls/archive.hpp"
#include "rls/errors.hpp"

namespace F = torch::nn::functional;

namespace rls::gen {

namespace {

constexpr double kSqrt2 = 1.4142135623730951;

torch::Tensor lrelu(const torch::Tensor& x) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2)) * kSqrt2;
}

// [2n, n] matrix of bilinear interpolation with half-pixel centres and edge
// clamping (matches align_corners=false). Applied as U x U^T it is much
// cheaper on CPU than the generic interpolate kernel.
torch::Tensor upsample_matrix(int64_t n, torch::ScalarType dtype) {
  auto m = torch::zeros({2 * n, n}, torch::kFloat64);
  auto a = m.accessor<double, 2>();
  for (int64_t i = 0; i < 2 * n; ++i) {
    const double src = std::max(0.0, (i + 0.5) / 2.0 - 0.5);
    const auto lo = static_cast<int64_t>(std::floor(src));
    const auto hi = std::min(lo + 1, n - 1);
    const double frac = src - static_cast<double>(lo);
    a[i][lo] += 1.0 - frac;
    a[i][hi] += frac;
  }
  return m.to(dtype);
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  thread_local std::map<std::pair<int64_t, int>, torch::Tensor> cache;
  auto& u = cache[{x.size(2), static_cast<int>(x.scalar_type())}];
  if (!u.defined()) u = upsample_matrix(x.size(2), x.scalar_type());
  return torch::matmul(torch::matmul(u, x.contiguous()), u.t());
}

template <typename T>
T* module_at(torch::nn::ModuleList& list, std::size_t i) {
  return list[i]->as<T>();
}

}  // namespace

// --- arch ------------------------------------------------------------------

nlohmann::json to_json(const GeneratorArch& a) {
  return {{"d", a.d},
          {"mapping_layers", a.mapping_layers},
          {"mapping_lr_mul", a.mapping_lr_mul},
          {"const_channels", a.const_channels},
          {"channels", a.channels},
          {"image_channels", a.image_channels},
          {"num_layers", a.num_layers()},
          {"resolution", a.resolution()}};
}

GeneratorArch arch_from_json(const nlohmann::json& j) {
  GeneratorArch a;
  a.d = j.at("d");
  a.mapping_layers = j.at("mapping_layers");
  a.mapping_lr_mul = j.at("mapping_lr_mul");
  a.const_channels = j.at("const_channels");
  a.channels = j.at("channels").get<std::vector<int>>();
  a.image_channels = j.at("image_channels");
  return a;
}

// --- layers ----------------------------------------------------------------

EqualLinearImpl::EqualLinearImpl(int in, int out, double bias_init, double lr_mul_,
                                 bool activate_)
    : weight_gain(lr_mul_ / std::sqrt(static_cast<double>(in))),
      lr_mul(lr_mul_),
      activate(activate_) {
  weight = register_parameter("weight", torch::randn({out, in}) / lr_mul_);
  bias = register_parameter("bias", torch::full({out}, bias_init));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
  auto y = torch::addmm(bias * lr_mul, x, (weight * weight_gain).t());
  return activate ? lrelu(y) : y;
}

ModulatedConvImpl::ModulatedConvImpl(int in, int out, int k, int style_dim, bool demod)
    : in_ch(in), out_ch(out), kernel(k), demodulate(demod) {
  affine = register_module("affine", EqualLinear(style_dim, in, 1.0));
  weight = register_parameter("weight", torch::randn({out, in, k, k}));
}

torch::Tensor ModulatedConvImpl::forward(const torch::Tensor& x, const torch::Tensor& style) {
  // Modulating the input and demodulating the output is equivalent to
  // convolving with per-sample modulated weights, and runs as one dense conv.
  const double gain = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel * kernel));
  auto s = affine(style);  // [B,in]
  auto w = weight * gain;
  auto xs = (x * s.unsqueeze(2).unsqueeze(3)).contiguous(at::MemoryFormat::ChannelsLast);
  auto y = F::conv2d(xs, w,
                     F::Conv2dFuncOptions().padding(kernel / 2));
  if (demodulate) {
    // sum_{i,k} (w_oik s_i)^2 = (s^2) @ (sum_k w_oik^2)^T
    auto dcoef = torch::rsqrt(torch::matmul(s.square(), w.square().sum({2, 3}).t()) + 1e-8);
    y = y * dcoef.unsqueeze(2).unsqueeze(3);
  }
  return y;
}

MappingNetworkImpl::MappingNetworkImpl(const GeneratorArch& arch) {
  for (int i = 0; i < arch.mapping_layers; ++i)
    layers->push_back(EqualLinear(arch.d, arch.d, 0.0, arch.mapping_lr_mul, true));
  register_module("layers", layers);
}

torch::Tensor MappingNetworkImpl::forward(const torch::Tensor& z) {
  auto x = z * torch::rsqrt(z.square().mean(1, true) + 1e-8);
  for (std::size_t i = 0; i < layers->size(); ++i) x = module_at<EqualLinearImpl>(layers, i)->forward(x);
  return x;
}

SynthesisNetworkImpl::SynthesisNetworkImpl(const GeneratorArch& arch)
    : num_layers(arch.num_layers()) {
  const_input = register_parameter("const", torch::randn({1, arch.const_channels, 4, 4}));
  int in = arch.const_channels;
  for (int i = 0; i < num_layers; ++i) {
    const int out = arch.channels[i];
    convs->push_back(ModulatedConv(in, out, 3, arch.d, true));
    to_rgb->push_back(ModulatedConv(out, arch.image_channels, 1, arch.d, false));
    biases.push_back(register_parameter("bias" + std::to_string(i), torch::zeros({out})));
    biases.push_back(
        register_parameter("rgb_bias" + std::to_string(i), torch::zeros({arch.image_channels})));
    in = out;
  }
  register_module("convs", convs);
  register_module("to_rgb", to_rgb);
}

torch::Tensor SynthesisNetworkImpl::forward(const torch::Tensor& w_plus) {
  if (w_plus.dim() != 3 || w_plus.size(1) != num_layers)
    throw ShapeError("synthesis expects [B," + std::to_string(num_layers) + ",d]");
  const auto B = w_plus.size(0);
  auto x = const_input.expand({B, -1, -1, -1});
  torch::Tensor img;
  for (int i = 0; i < num_layers; ++i) {
    if (i > 0) x = upsample2x(x);
    auto style = w_plus.select(1, i);
    x = lrelu(module_at<ModulatedConvImpl>(convs, i)->forward(x, style) +
              biases[2 * i].view({1, -1, 1, 1}));
    auto rgb = module_at<ModulatedConvImpl>(to_rgb, i)->forward(x, style) +
               biases[2 * i + 1].view({1, -1, 1, 1});
    img = i == 0 ? rgb : upsample2x(img) + rgb;
  }
  return torch::sigmoid(img);
}

DiscriminatorImpl::DiscriminatorImpl(int image_channels, int resolution) {
  auto add_conv = [&](int in, int out, int k, int stride) {
    const auto idx = std::to_string(conv_w.size());
    conv_w.push_back(register_parameter("conv" + idx + "_w", torch::randn({out, in, k, k})));
    conv_b.push_back(register_parameter("conv" + idx + "_b", torch::zeros({out})));
    strides.push_back(stride);
  };
  int ch = 16;
  add_conv(image_channels, ch, 1, 1);
  for (int res = resolution, i = 0; res > 4; res /= 2, ++i) {
    const int next = i == 0 ? ch : std::min(ch * 2, 64);
    add_conv(ch, next, 3, 2);
    ch = next;
  }
  add_conv(ch + 1, ch, 3, 1);  // after minibatch-stddev
  fc = register_module("fc", EqualLinear(ch * 16, ch, 0.0, 1.0, true));
  out = register_module("out", EqualLinear(ch, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& img) {
  auto conv = [&](const torch::Tensor& x, std::size_t i) {
    const auto& w = conv_w[i];
    const double gain = 1.0 / std::sqrt(static_cast<double>(w.size(1) * w.size(2) * w.size(3)));
    return lrelu(F::conv2d(x, w * gain,
                           F::Conv2dFuncOptions()
                               .bias(conv_b[i])
                               .stride(strides[i])
                               .padding(w.size(2) / 2)));
  };
  auto x = (img * 2.0 - 1.0).contiguous(at::MemoryFormat::ChannelsLast);
  const std::size_t n = conv_w.size();
  for (std::size_t i = 0; i + 1 < n; ++i) x = conv(x, i);
  // Minibatch standard deviation over groups of up to 4.
  const auto B = x.size(0);
  int64_t group = std::min<int64_t>(4, B);
  while (B % group != 0) --group;
  auto y = x.reshape({group, -1, x.size(1), x.size(2), x.size(3)});
  y = (y - y.mean(0)).square().mean(0);
  y = (y + 1e-8).sqrt().mean({1, 2, 3});
  y = y.reshape({-1, 1, 1, 1}).repeat({group, 1, x.size(2), x.size(3)});
  x = conv(torch::cat({x, y}, 1), n - 1);
  return out(fc(x.flatten(1))).squeeze(1);
}

// --- model -----------------------------------------------------------------

GeneratorModel::GeneratorModel(GeneratorArch arch, std::uint64_t init_seed)
    : arch_(std::move(arch)) {
  if (arch_.d < 1 || arch_.num_layers() < 1) throw InvalidParameter("invalid generator arch");
  torch::manual_seed(init_seed);
  mapping_ = MappingNetwork(arch_);
  synthesis_ = SynthesisNetwork(arch_);
}

torch::ScalarType GeneratorModel::dtype() const {
  return synthesis_->const_input.scalar_type();
}

torch::Tensor GeneratorModel::map_batch(const torch::Tensor& z) const {
  if (z.dim() != 2 || z.size(1) != arch_.d)
    throw ShapeError("map_latent: expected z of dimension " + std::to_string(arch_.d));
  return mapping_->forward(z.to(dtype()));
}

torch::Tensor GeneratorModel::synthesize_batch(const torch::Tensor& w_plus) const {
  if (w_plus.dim() != 3 || w_plus.size(1) != arch_.num_layers() || w_plus.size(2) != arch_.d)
    throw ShapeError("synthesize: w+ must be [B," + std::to_string(arch_.num_layers()) + "," +
                     std::to_string(arch_.d) + "]");
  return synthesis_->forward(w_plus);
}

StyleVector GeneratorModel::map_latent(const LatentZ& z) const {
  if (z.values.dim() != 1 || z.values.size(0) != arch_.d)
    throw ShapeError("map_latent: expected z of dimension " + std::to_string(arch_.d));
  torch::NoGradGuard ng;
  return {map_batch(z.values.unsqueeze(0)).squeeze(0)};
}

Image GeneratorModel::synthesize(const ExtendedStyle& w_plus) const {
  if (w_plus.rows.dim() != 2) throw ShapeError("synthesize: w+ must be [L,d]");
  torch::NoGradGuard ng;
  return from_tensor(synthesize_batch(w_plus.rows.to(dtype()).unsqueeze(0))[0]);
}

torch::Tensor GeneratorModel::sample_latents(int n, std::uint64_t seed) const {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::randn({n, arch_.d}, gen, torch::TensorOptions().dtype(dtype()));
}

StyleVector GeneratorModel::mean_style(int n, std::uint64_t seed) const {
  if (n < 1) throw InvalidParameter("mean_style: n must be >= 1");
  torch::NoGradGuard ng;
  auto z = sample_latents(n, seed);
  auto sum = torch::zeros({arch_.d}, torch::TensorOptions().dtype(torch::kFloat64));
  for (int start = 0; start < n; start += 1024) {
    const int len = std::min(1024, n - start);
    sum += map_batch(z.narrow(0, start, len)).to(torch::kFloat64).sum(0);
  }
  return {(sum / n).to(dtype())};
}

void GeneratorModel::freeze() {
  for (auto& p : mapping_->parameters()) p.set_requires_grad(false);
  for (auto& p : synthesis_->parameters()) p.set_requires_grad(false);
  mapping_->eval();
  synthesis_->eval();
}

GeneratorModel GeneratorModel::clone(std::optional<torch::ScalarType> dtype) const {
  GeneratorModel copy(arch_, 0);
  torch::NoGradGuard ng;
  auto src_m = mapping_->parameters(), dst_m = copy.mapping_->parameters();
  auto src_s = synthesis_->parameters(), dst_s = copy.synthesis_->parameters();
  for (std::size_t i = 0; i < src_m.size(); ++i) dst_m[i].set_data(src_m[i].detach().clone());
  for (std::size_t i = 0; i < src_s.size(); ++i) dst_s[i].set_data(src_s[i].detach().clone());
  if (dtype) {
    copy.mapping_->to(*dtype);
    copy.synthesis_->to(*dtype);
  }
  copy.meta_ = meta_;
  copy.freeze();
  return copy;
}

namespace {

Archive to_archive(const GeneratorModel& m, GeneratorModel& mut) {
  Archive ar("generator");
  archive_module(ar, *mut.mapping(), "mapping.");
  archive_module(ar, *mut.synthesis(), "synthesis.");
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : m.meta().log)
    log.push_back({{"epoch", e.epoch},
                   {"d_loss", e.d_loss},
                   {"g_loss", e.g_loss},
                   {"r1", e.r1},
                   {"path_length_penalty", e.path_length_penalty},
                   {"path_length_mean", e.path_length_mean}});
  ar.meta() = {{"arch", to_json(m.arch())},
               {"d", m.d()},
               {"L", m.num_layers()},
               {"output", "sigmoid-squashed [0,1], shape [3,R,R] (CHW)"},
               {"training_meta",
                {{"epochs", m.meta().epochs},
                 {"seed", m.meta().seed},
                 {"num_images", m.meta().num_images},
                 {"log", log}}}};
  return ar;
}

}  // namespace

void GeneratorModel::save(const std::filesystem::path& dir) const {
  auto& mut = const_cast<GeneratorModel&>(*this);
  to_archive(*this, mut).save(dir);
}

std::string GeneratorModel::digest() const {
  auto& mut = const_cast<GeneratorModel&>(*this);
  return to_archive(*this, mut).digest();
}

GeneratorModel GeneratorModel::load(const std::filesystem::path& dir) {
  auto ar = Archive::load(dir, "generator");
  GeneratorModel m(arch_from_json(ar.meta().at("arch")), 0);
  restore_module(ar, *m.mapping_, "mapping.");
  restore_module(ar, *m.synthesis_, "synthesis.");
  const auto& tm = ar.meta().at("training_meta");
  m.meta_.epochs = tm.at("epochs");
  m.meta_.seed = tm.at("seed");
  m.meta_.num_images = tm.at("num_images");
  for (const auto& e : tm.at("log"))
    m.meta_.log.push_back({e.at("epoch"), e.at("d_loss"), e.at("g_loss"), e.at("r1"),
                           e.at("path_length_penalty"), e.at("path_length_mean")});
  m.freeze();
  return m;
}

ExtendedStyle broadcast(const StyleVector& w, int num_layers) {
  return {w.values.unsqueeze(0).expand({num_layers, -1}).clone()};
}

torch::Tensor broadcast_batch(const torch::Tensor& w, int num_layers) {
  return w.unsqueeze(1).expand({-1, num_layers, -1});
}

// --- training --------------------------------------------------------------

nlohmann::json to_json(const GeneratorTrainConfig& c) {
  return {{"epochs", c.epochs},           {"batch_size", c.batch_size},
          {"lr", c.lr},                   {"beta1", c.beta1},
          {"beta2", c.beta2},             {"r1_gamma", c.r1_gamma},
          {"r1_interval", c.r1_interval}, {"pl_weight", c.pl_weight},
          {"pl_interval", c.pl_interval}, {"pl_decay", c.pl_decay},
          {"ema_half_life_images", c.ema_half_life_images},
          {"seed", c.seed}};
}

GeneratorModel train_generator(const torch::Tensor& images, const GeneratorArch& arch,
                               const GeneratorTrainConfig& cfg) {
  if (images.dim() != 4 || images.size(1) != arch.image_channels ||
      images.size(2) != arch.resolution() || images.size(3) != arch.resolution())
    throw ShapeError("train_generator: images must be [N,3,R,R] at the generator resolution");
  const int n = static_cast<int>(images.size(0));
  if (n < 2000) throw InvalidParameter("train_generator needs >= 2000 training images");
  if (cfg.epochs < 1 || cfg.batch_size < 2) throw InvalidParameter("invalid training config");

  GeneratorModel g(arch, cfg.seed);
  GeneratorModel ema = g.clone();
  torch::manual_seed(cfg.seed + 1);
  Discriminator disc(arch.image_channels, arch.resolution());
  auto gen = at::detail::createCPUGenerator(cfg.seed + 2);
  std::mt19937_64 shuffle_rng(cfg.seed + 3);

  std::vector<torch::Tensor> g_params;
  for (auto& p : g.mapping()->parameters()) g_params.push_back(p);
  for (auto& p : g.synthesis()->parameters()) g_params.push_back(p);
  auto adam = [&](std::vector<torch::Tensor> params, int interval) {
    // Lazy-regularization correction of lr and betas.
    const double ratio = static_cast<double>(interval) / (interval + 1);
    return torch::optim::Adam(
        params, torch::optim::AdamOptions(cfg.lr * ratio)
                    .betas({std::pow(cfg.beta1, ratio), std::pow(cfg.beta2, ratio)})
                    .eps(1e-8));
  };
  auto opt_g = adam(g_params, cfg.pl_interval);
  auto opt_d = adam(disc->parameters(), cfg.r1_interval);

  const double ema_beta = std::pow(0.5, cfg.batch_size / cfg.ema_half_life_images);
  const int L = arch.num_layers();
  const double R = arch.resolution();
  torch::Tensor pl_mean = torch::zeros({});
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainingMeta meta;
  meta.seed = cfg.seed;
  meta.num_images = n;
  int collapse_run = 0;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum_d = 0, sum_g = 0, sum_r1 = 0, sum_pl = 0, sum_plm = 0;
    int cnt = 0, cnt_r1 = 0, cnt_pl = 0;
    for (int start = 0; start + cfg.batch_size <= n; start += cfg.batch_size, ++step) {
      auto idx = torch::from_blob(order.data() + start, {cfg.batch_size}, torch::kInt64);
      auto real = images.index_select(0, idx);

      // Discriminator.
      {
        auto z = torch::randn({cfg.batch_size, arch.d}, gen);
        torch::Tensor fake;
        {
          torch::NoGradGuard ng;
          fake = g.synthesize_batch(broadcast_batch(g.map_batch(z), L));
        }
        const bool do_r1 = step % cfg.r1_interval == 0;
        auto real_in = do_r1 ? real.detach().requires_grad_(true) : real;
        auto real_logits = disc(real_in);
        auto loss = F::softplus(disc(fake)).mean() + F::softplus(-real_logits).mean();
        sum_d += loss.item<double>();
        if (do_r1) {
          auto grad = torch::autograd::grad({real_logits.sum()}, {real_in}, {}, true, true)[0];
          auto r1 = grad.square().sum({1, 2, 3}).mean();
          loss = loss + r1 * (cfg.r1_gamma * 0.5 * cfg.r1_interval);
          sum_r1 += r1.item<double>();
          ++cnt_r1;
        }
        if (!std::isfinite(loss.item<double>()))
          throw TrainingDiverged("non-finite discriminator loss at epoch " + std::to_string(epoch));
        opt_d.zero_grad();
        loss.backward();
        opt_d.step();
      }

      // Generator.
      {
        auto z = torch::randn({cfg.batch_size, arch.d}, gen);
        auto fake = g.synthesize_batch(broadcast_batch(g.map_batch(z), L));
        auto loss = F::softplus(-disc(fake)).mean();
        sum_g += loss.item<double>();
        if (step % cfg.pl_interval == 0) {
          const int pb = std::max(2, cfg.batch_size / 2);
          auto zp = torch::randn({pb, arch.d}, gen);
          auto wp = broadcast_batch(g.map_batch(zp), L);
          auto img = g.synthesize_batch(wp);
          auto noise = torch::randn(img.sizes(), gen) / R;
          auto grad = torch::autograd::grad({(img * noise).sum()}, {wp}, {}, true, true)[0];
          auto lengths = grad.square().sum(2).mean(1).sqrt();
          {
            torch::NoGradGuard ng;
            pl_mean = pl_mean + cfg.pl_decay * (lengths.mean() - pl_mean);
          }
          auto penalty = (lengths - pl_mean).square().mean();
          loss = loss + penalty * (cfg.pl_weight * cfg.pl_interval);
          sum_pl += penalty.item<double>();
          sum_plm += pl_mean.item<double>();
          ++cnt_pl;
        }
        if (!std::isfinite(loss.item<double>()))
          throw TrainingDiverged("non-finite generator loss at epoch " + std::to_string(epoch));
        opt_g.zero_grad();
        loss.backward();
        opt_g.step();
      }

      {
        torch::NoGradGuard ng;
        auto src_m = g.mapping()->parameters(), dst_m = ema.mapping()->parameters();
        auto src_s = g.synthesis()->parameters(), dst_s = ema.synthesis()->parameters();
        for (std::size_t i = 0; i < src_m.size(); ++i) dst_m[i].lerp_(src_m[i], 1.0 - ema_beta);
        for (std::size_t i = 0; i < src_s.size(); ++i) dst_s[i].lerp_(src_s[i], 1.0 - ema_beta);
      }
      ++cnt;
    }
    EpochLog e{epoch, sum_d / cnt, sum_g / cnt, cnt_r1 ? sum_r1 / cnt_r1 : 0.0,
               cnt_pl ? sum_pl / cnt_pl : 0.0, cnt_pl ? sum_plm / cnt_pl : 0.0};
    meta.log.push_back(e);
    if (cfg.progress) {
      std::ostringstream os;
      os << "epoch " << epoch << " D " << e.d_loss << " G " << e.g_loss << " r1 " << e.r1 << " pl "
         << e.path_length_penalty;
      cfg.progress(os.str());
    }
    collapse_run = e.d_loss < cfg.collapse_threshold ? collapse_run + 1 : 0;
    if (collapse_run >= cfg.collapse_epochs)
      throw TrainingDiverged("discriminator loss below " + std::to_string(cfg.collapse_threshold) +
                             " for " + std::to_string(cfg.collapse_epochs) +
                             " consecutive epochs (mode collapse)");
  }
  meta.epochs = cfg.epochs;
  ema.meta() = meta;
  ema.freeze();
  return ema;
}

}  // namespace rls::gen
