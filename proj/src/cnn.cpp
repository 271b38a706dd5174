#include "rls/cnn.hpp"


#include "rls/archive.hpp"
#include "rls/errors.hpp"

namespace rls::cnn {

SmallCnnImpl::SmallCnnImpl(const CnnArch& a) : arch(a) {
  if (arch.channels.empty() || arch.num_classes < 2) throw InvalidParameter("invalid cnn arch");
  int in = arch.in_channels;
  for (int c : arch.channels) {
    convs->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, c, 3).padding(1)));
    in = c;
  }
  register_module("convs", convs);
  head = register_module("head", torch::nn::Linear(in, arch.num_classes));
}

torch::Tensor SmallCnnImpl::features(const torch::Tensor& x) {
  auto h = x;
  for (auto& m : *convs) {
    h = torch::relu(m->as<torch::nn::Conv2d>()->forward(h));
    if (h.size(2) > 1) h = torch::max_pool2d(h, 2);
  }
  return h.mean({2, 3});
}

torch::Tensor SmallCnnImpl::forward(const torch::Tensor& x) { return head->forward(features(x)); }

nlohmann::json to_json(const CnnTrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}

SmallCnn train_cnn(const torch::Tensor& images, const torch::Tensor& labels,
                   const CnnArch& arch, const CnnTrainConfig& cfg) {
  if (images.dim() != 4 || labels.dim() != 1 || images.size(0) != labels.size(0))
    throw ShapeError("train_cnn: images [N,C,H,W] and labels [N] required");
  torch::manual_seed(cfg.seed);
  SmallCnn model(arch);
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.lr));
  auto gen = at::detail::createCPUGenerator(cfg.seed + 1);
  const auto n = images.size(0);
  auto x_all = images.to(torch::kFloat32);
  auto y_all = labels.to(torch::kInt64);
  model->train();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kInt64);
    double loss_sum = 0.0;
    for (int64_t i = 0; i < n; i += cfg.batch_size) {
      auto idx = perm.narrow(0, i, std::min<int64_t>(cfg.batch_size, n - i));
      auto loss = torch::nn::functional::cross_entropy(model->forward(x_all.index_select(0, idx)),
                                                       y_all.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += loss.item<double>() * static_cast<double>(idx.size(0));
    }
    if (cfg.progress) cfg.progress("epoch " + std::to_string(epoch) + " loss " + std::to_string(loss_sum / n));
  }
  model->eval();
  for (auto& p : model->parameters()) p.set_requires_grad(false);
  return model;
}

static torch::Tensor batched(SmallCnn& model, const torch::Tensor& images, bool feats) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> out;
  auto x = images.to(torch::kFloat32);
  for (int64_t i = 0; i < x.size(0); i += 256) {
    auto b = x.narrow(0, i, std::min<int64_t>(256, x.size(0) - i));
    out.push_back(feats ? model->features(b) : model->forward(b));
  }
  return torch::cat(out);
}

torch::Tensor predict(SmallCnn& model, const torch::Tensor& images) {
  return batched(model, images, false).argmax(1);
}

torch::Tensor embed(SmallCnn& model, const torch::Tensor& images) {
  return batched(model, images, true).to(torch::kFloat64);
}

double accuracy(SmallCnn& model, const torch::Tensor& images, const torch::Tensor& labels) {
  if (images.size(0) == 0) throw InvalidParameter("accuracy of an empty set");
  return predict(model, images).eq(labels.to(torch::kInt64)).to(torch::kFloat64).mean().item<double>();
}

void save_cnn(SmallCnn& model, const std::filesystem::path& dir, const std::string& kind) {
  Archive ar(kind);
  archive_module(ar, *model, "");
  const auto& a = model->arch;
  ar.meta() = {{"in_channels", a.in_channels},
               {"resolution", a.resolution},
               {"channels", a.channels},
               {"num_classes", a.num_classes}};
  ar.save(dir);
}

SmallCnn load_cnn(const std::filesystem::path& dir, const std::string& kind) {
  auto ar = Archive::load(dir, kind);
  CnnArch a;
  a.in_channels = ar.meta().at("in_channels");
  a.resolution = ar.meta().at("resolution");
  a.channels = ar.meta().at("channels").get<std::vector<int>>();
  a.num_classes = ar.meta().at("num_classes");
  SmallCnn model(a);
  restore_module(ar, *model, "");
  model->eval();
  for (auto& p : model->parameters()) p.set_requires_grad(false);
  return model;
}

}  // namespace rls::cnn
