#include "rls/flow.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "rls/archive.hpp"
#include "rls/errors.hpp"
#include "rls/stats.hpp"

namespace rls::flow {

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);
constexpr double kLogScaleBound = 6.0;
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

torch::Tensor standard_normal_logpdf(const torch::Tensor& z) {
  return -0.5 * z.square().sum(1) - 0.5 * static_cast<double>(z.size(1)) * kLog2Pi;
}

}  // namespace

MadeImpl::MadeImpl(int d_, int hidden) : d(d_) {
  std::vector<int> in_deg(d), hid_deg(hidden);
  std::iota(in_deg.begin(), in_deg.end(), 1);
  for (int k = 0; k < hidden; ++k) hid_deg[k] = k % std::max(1, d - 1) + 1;
  auto m1 = torch::zeros({hidden, d}, kF64);
  auto m2 = torch::zeros({hidden, hidden}, kF64);
  auto m3 = torch::zeros({2 * d, hidden}, kF64);
  for (int k = 0; k < hidden; ++k) {
    for (int i = 0; i < d; ++i) m1[k][i] = hid_deg[k] >= in_deg[i] ? 1.0 : 0.0;
    for (int j = 0; j < hidden; ++j) m2[k][j] = hid_deg[k] >= hid_deg[j] ? 1.0 : 0.0;
  }
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < hidden; ++k) {
      const double on = in_deg[i] > hid_deg[k] ? 1.0 : 0.0;
      m3[i][k] = on;      // shift
      m3[d + i][k] = on;  // log-scale
    }
  mask1 = register_buffer("mask1", m1);
  mask2 = register_buffer("mask2", m2);
  mask3 = register_buffer("mask3", m3);
  w1 = register_parameter("w1", torch::randn({hidden, d}, kF64) / std::sqrt(double(d)));
  b1 = register_parameter("b1", torch::zeros({hidden}, kF64));
  w2 = register_parameter("w2", torch::randn({hidden, hidden}, kF64) / std::sqrt(double(hidden)));
  b2 = register_parameter("b2", torch::zeros({hidden}, kF64));
  // Zero output layer: the block starts as the identity.
  w3 = register_parameter("w3", torch::zeros({2 * d, hidden}, kF64));
  b3 = register_parameter("b3", torch::zeros({2 * d}, kF64));
}

std::pair<torch::Tensor, torch::Tensor> MadeImpl::forward(const torch::Tensor& x) const {
  auto h = torch::tanh(torch::addmm(b1, x, (w1 * mask1).t()));
  h = torch::tanh(torch::addmm(b2, h, (w2 * mask2).t()));
  auto out = torch::addmm(b3, h, (w3 * mask3).t());
  auto shift = out.narrow(1, 0, d);
  auto log_scale = kLogScaleBound * torch::tanh(out.narrow(1, d, d) / kLogScaleBound);
  return {shift, log_scale};
}

FlowModel::FlowModel(FlowArch arch, std::uint64_t init_seed) : arch_(arch) {
  if (arch_.d < 2 || arch_.blocks < 1 || arch_.hidden < 1)
    throw InvalidParameter("invalid flow arch");
  torch::manual_seed(init_seed);
  for (int k = 0; k < arch_.blocks; ++k) blocks_.push_back(Made(arch_.d, arch_.hidden));
  std::mt19937_64 rng(arch_.permutation_seed);
  for (int k = 0; k + 1 < arch_.blocks; ++k) {
    std::vector<int64_t> p(arch_.d);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    std::vector<int64_t> inv(arch_.d);
    for (int j = 0; j < arch_.d; ++j) inv[p[j]] = j;
    perms_.push_back(torch::tensor(p, torch::kInt64));
    inv_perms_.push_back(torch::tensor(inv, torch::kInt64));
  }
  loc_ = torch::zeros({arch_.d}, kF64);
  log_std_ = torch::zeros({arch_.d}, kF64);
}

torch::Tensor FlowModel::check_input(const torch::Tensor& w) const {
  if (w.dim() != 2 || w.size(1) != arch_.d)
    throw ShapeError("flow expects [B," + std::to_string(arch_.d) + "]");
  auto x = w.to(torch::kFloat64);
  if (!torch::isfinite(x).all().item<bool>()) throw NonFiniteError("flow: non-finite input");
  return x;
}

std::pair<torch::Tensor, torch::Tensor> FlowModel::forward(const torch::Tensor& w) const {
  auto x = (check_input(w) - loc_) * torch::exp(-log_std_);
  auto logdet = (-log_std_.sum()).expand({x.size(0)}).clone();
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    auto [shift, log_scale] = blocks_[k]->forward(x);
    x = (x - shift) * torch::exp(-log_scale);
    logdet = logdet - log_scale.sum(1);
    if (k < perms_.size()) x = x.index_select(1, perms_[k]);
  }
  return {x, logdet};
}

std::pair<torch::Tensor, torch::Tensor> FlowModel::inverse(const torch::Tensor& z) const {
  auto u = check_input(z);
  auto logdet = torch::zeros({u.size(0)}, kF64);
  for (int k = static_cast<int>(blocks_.size()) - 1; k >= 0; --k) {
    if (static_cast<std::size_t>(k) < perms_.size()) u = u.index_select(1, inv_perms_[k]);
    // Dimension i only depends on already-recovered dimensions < i.
    auto x = torch::zeros_like(u);
    for (int i = 0; i < arch_.d; ++i) {
      auto [shift, log_scale] = blocks_[k]->forward(x);
      auto xi = u.select(1, i) * torch::exp(log_scale.select(1, i)) + shift.select(1, i);
      x = x.clone();
      x.select(1, i).copy_(xi);
    }
    auto [shift, log_scale] = blocks_[k]->forward(x);
    logdet = logdet + log_scale.sum(1);
    u = x;
  }
  auto w = u * torch::exp(log_std_) + loc_;
  return {w, logdet + log_std_.sum()};
}

torch::Tensor FlowModel::log_density(const torch::Tensor& w) const {
  auto [z, logdet] = forward(w);
  return standard_normal_logpdf(z) + logdet;
}

std::vector<torch::Tensor> FlowModel::parameters() const {
  std::vector<torch::Tensor> ps;
  for (const auto& b : blocks_)
    for (auto& p : b->parameters()) ps.push_back(p);
  return ps;
}

void FlowModel::set_standardization(const torch::Tensor& loc, const torch::Tensor& log_std) {
  loc_ = loc.detach().to(torch::kFloat64).clone();
  log_std_ = log_std.detach().to(torch::kFloat64).clone();
}

void FlowModel::freeze() {
  for (auto& p : parameters()) p.set_requires_grad(false);
}

namespace {

Archive flow_archive(const FlowModel& m, const std::vector<Made>& blocks,
                     const std::vector<torch::Tensor>& perms, const torch::Tensor& loc,
                     const torch::Tensor& log_std) {
  Archive ar("flow");
  for (std::size_t k = 0; k < blocks.size(); ++k)
    archive_module(ar, *blocks[k], "block" + std::to_string(k) + ".");
  for (std::size_t k = 0; k < perms.size(); ++k)
    ar.put("perm" + std::to_string(k), perms[k].to(torch::kFloat64));
  ar.put("standardize.loc", loc);
  ar.put("standardize.log_std", log_std);
  const auto& a = m.arch();
  ar.meta() = {
      {"d", a.d},
      {"blocks", a.blocks},
      {"hidden", a.hidden},
      {"permutation_seed", a.permutation_seed},
      {"direction", "forward maps w -> z (density direction); z ~ N(0, I_d)"},
      {"logdet_convention",
       "forward logdet = -sum(log_std) - sum_blocks sum_i log_scale_i; inverse reports the "
       "negation"},
      {"block_transform", "u_i = (x_i - shift_i(x_<i)) * exp(-log_scale_i(x_<i))"},
      {"log_scale_squash", "6 * tanh(raw / 6)"},
      {"permutation", "after block k (k < blocks-1): x_next[j] = u[perm_k[j]]"},
      {"training_meta",
       {{"epochs", m.meta().epochs},
        {"seed", m.meta().seed},
        {"num_train", m.meta().num_train},
        {"num_heldout", m.meta().num_heldout},
        {"train_log_density", m.meta().train_log_density},
        {"heldout_log_density", m.meta().heldout_log_density}}}};
  return ar;
}

}  // namespace

void FlowModel::save(const std::filesystem::path& dir) const {
  flow_archive(*this, blocks_, perms_, loc_, log_std_).save(dir);
}

std::string FlowModel::digest() const {
  return flow_archive(*this, blocks_, perms_, loc_, log_std_).digest();
}

FlowModel FlowModel::load(const std::filesystem::path& dir) {
  auto ar = Archive::load(dir, "flow");
  const auto& meta = ar.meta();
  FlowArch arch{meta.at("d"), meta.at("blocks"), meta.at("hidden"),
                meta.at("permutation_seed")};
  FlowModel m(arch, 0);
  for (std::size_t k = 0; k < m.blocks_.size(); ++k)
    restore_module(ar, *m.blocks_[k], "block" + std::to_string(k) + ".");
  for (std::size_t k = 0; k < m.perms_.size(); ++k) {
    if (!torch::equal(ar.get("perm" + std::to_string(k)).to(torch::kInt64), m.perms_[k]))
      throw Error("flow checkpoint permutation does not match its permutation_seed");
  }
  m.set_standardization(ar.get("standardize.loc"), ar.get("standardize.log_std"));
  const auto& tm = meta.at("training_meta");
  m.meta_.epochs = tm.at("epochs");
  m.meta_.seed = tm.at("seed");
  m.meta_.num_train = tm.at("num_train");
  m.meta_.num_heldout = tm.at("num_heldout");
  m.meta_.train_log_density = tm.at("train_log_density").get<std::vector<double>>();
  m.meta_.heldout_log_density = tm.at("heldout_log_density").get<std::vector<double>>();
  m.freeze();
  return m;
}

FlowForward flow_forward(const FlowModel& model, const gen::StyleVector& w) {
  torch::NoGradGuard ng;
  auto [z, logdet] = model.forward(w.values.unsqueeze(0));
  return {z.squeeze(0), logdet.item<double>()};
}

gen::StyleVector flow_inverse(const FlowModel& model, const torch::Tensor& z) {
  torch::NoGradGuard ng;
  return {model.inverse(z.unsqueeze(0)).first.squeeze(0)};
}

double flow_log_density(const FlowModel& model, const gen::StyleVector& w) {
  torch::NoGradGuard ng;
  return model.log_density(w.values.unsqueeze(0)).item<double>();
}

nlohmann::json to_json(const FlowTrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"heldout_fraction", c.heldout_fraction},
          {"seed", c.seed}};
}

FlowModel train_flow(const torch::Tensor& styles, const FlowArch& arch,
                     const FlowTrainConfig& cfg) {
  if (styles.dim() != 2 || styles.size(1) != arch.d)
    throw ShapeError("train_flow: styles must be [N," + std::to_string(arch.d) + "]");
  const auto n = styles.size(0);
  if (n < 10000) throw InvalidParameter("train_flow needs >= 10,000 style vectors");
  auto data = styles.detach().to(torch::kFloat64);
  if (!torch::isfinite(data).all().item<bool>())
    throw NonFiniteError("train_flow: non-finite style vectors");

  const auto n_held = std::max<int64_t>(1, static_cast<int64_t>(n * cfg.heldout_fraction));
  auto train = data.narrow(0, 0, n - n_held);
  auto held = data.narrow(0, n - n_held, n_held);

  FlowModel model(arch, cfg.seed);
  model.set_standardization(train.mean(0), train.std(0).clamp_min(1e-6).log());
  torch::optim::Adam opt(model.parameters(), torch::optim::AdamOptions(cfg.lr));
  auto gen = at::detail::createCPUGenerator(cfg.seed + 1);

  auto mean_logp = [&](const torch::Tensor& x) {
    torch::NoGradGuard ng;
    double s = 0.0;
    for (int64_t i = 0; i < x.size(0); i += 4096) {
      const auto len = std::min<int64_t>(4096, x.size(0) - i);
      s += model.log_density(x.narrow(0, i, len)).sum().item<double>();
    }
    return s / static_cast<double>(x.size(0));
  };

  auto& meta = model.meta();
  meta.seed = cfg.seed;
  meta.num_train = static_cast<int>(train.size(0));
  meta.num_heldout = static_cast<int>(n_held);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto perm = torch::randperm(train.size(0), gen, torch::kInt64);
    for (int64_t i = 0; i < train.size(0); i += cfg.batch_size) {
      const auto len = std::min<int64_t>(cfg.batch_size, train.size(0) - i);
      auto batch = train.index_select(0, perm.narrow(0, i, len));
      auto loss = -model.log_density(batch).mean();
      if (!std::isfinite(loss.item<double>()))
        throw TrainingDiverged("train_flow: non-finite loss at epoch " + std::to_string(epoch));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
    meta.train_log_density.push_back(mean_logp(train));
    meta.heldout_log_density.push_back(mean_logp(held));
    if (cfg.progress) {
      std::ostringstream os;
      os << "epoch " << epoch << " train " << meta.train_log_density.back() << " heldout "
         << meta.heldout_log_density.back();
      cfg.progress(os.str());
    }
  }
  meta.epochs = cfg.epochs;
  model.freeze();
  return model;
}

torch::Tensor pulse_gaussianize(const torch::Tensor& styles, double slope) {
  if (styles.dim() != 2) throw ShapeError("pulse_gaussianize expects [N,d]");
  const auto n = styles.size(0), d = styles.size(1);
  if (n < d + 1) throw RankDeficiencyError("pulse_gaussianize needs at least d+1 vectors");
  auto v = styles.detach().to(torch::kFloat64).contiguous();
  v = torch::where(v >= 0, v, v * slope);
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<Mat> x(v.data_ptr<double>(), n, d);
  Eigen::RowVectorXd mu = x.colwise().mean();
  Mat centered = x.rowwise() - mu;
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto& ev = eig.eigenvalues();
  // Numerical-rank tolerance, as in the usual SVD rank test.
  const double tol = static_cast<double>(d) * std::numeric_limits<double>::epsilon() * ev.maxCoeff();
  if (eig.info() != Eigen::Success || ev.minCoeff() <= tol)
    throw RankDeficiencyError("pulse_gaussianize: singular covariance");
  Eigen::MatrixXd inv_sqrt =
      eig.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() *
      eig.eigenvectors().transpose();
  Mat out = centered * inv_sqrt;
  auto result = torch::empty({n, d}, kF64);
  std::copy_n(out.data(), n * d, result.data_ptr<double>());
  return result;
}

GaussDiagnostics diagnose_gaussianization(const torch::Tensor& vectors) {
  if (vectors.dim() != 2) throw ShapeError("diagnose_gaussianization expects [N,d]");
  if (vectors.size(0) < 100) throw InvalidParameter("diagnose_gaussianization needs >= 100 vectors");
  const int d = static_cast<int>(vectors.size(1));
  auto sq = vectors.detach().to(torch::kFloat64).square().sum(1).contiguous();
  std::vector<double> norms(sq.data_ptr<double>(), sq.data_ptr<double>() + sq.numel());
  auto ks = stats::ks_test(norms, [d](double x) { return stats::chi_squared_cdf(x, d); });
  GaussDiagnostics g;
  g.mean_norm = stats::mean(norms);
  g.squared_norms = std::move(norms);
  g.ks_statistic = ks.statistic;
  g.ks_pvalue = ks.pvalue;
  g.target_dof = d;
  return g;
}

}  // namespace rls::flow
