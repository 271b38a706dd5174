#include "rls/archive.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <sstream>

#include "rls/errors.hpp"

namespace fs = std::filesystem;

namespace rls {

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::uint64_t derive_seed(std::string_view purpose, std::uint64_t seed) {
  const auto hex = sha256_hex(std::string(purpose) + ":" + std::to_string(seed));
  return std::stoull(hex.substr(0, 16), nullptr, 16);
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

void Archive::put(const std::string& name, const torch::Tensor& t) {
  auto x = t.detach().to(torch::kCPU).contiguous().clone();
  if (x.scalar_type() != torch::kFloat32 && x.scalar_type() != torch::kFloat64)
    x = x.to(torch::kFloat32);
  arrays_[name] = x;
}

torch::Tensor Archive::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw Error("archive '" + kind_ + "' has no array '" + name + "'");
  return it->second;
}

std::string Archive::payload(nlohmann::json* entries) const {
  std::string bytes;
  for (const auto& [name, t] : arrays_) {
    const auto nbytes = static_cast<std::size_t>(t.numel()) * t.element_size();
    if (entries) {
      entries->push_back({{"name", name},
                          {"dtype", t.scalar_type() == torch::kFloat64 ? "f64" : "f32"},
                          {"shape", t.sizes().vec()},
                          {"offset", bytes.size()},
                          {"nbytes", nbytes}});
    }
    bytes.append(static_cast<const char*>(t.data_ptr()), nbytes);
  }
  return bytes;
}

std::string Archive::digest() const { return sha256_hex(payload(nullptr)); }

void Archive::save(const fs::path& dir) const {
  fs::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  const std::string bytes = payload(&entries);
  {
    std::ofstream out(dir / "arrays.bin", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + (dir / "arrays.bin").string());
  }
  nlohmann::json manifest = {{"format", "rls-archive"},
                             {"format_version", kFormatVersion},
                             {"kind", kind_},
                             {"arrays", entries},
                             {"meta", meta_},
                             {"digest", sha256_hex(bytes)}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

Archive Archive::load(const fs::path& dir, std::string_view expected_kind) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw Error("no manifest.json in " + dir.string());
  auto manifest = nlohmann::json::parse(min);
  if (manifest.value("format", "") != "rls-archive" ||
      manifest.value("format_version", 0) != kFormatVersion)
    throw Error("unsupported archive format in " + dir.string());
  Archive ar(manifest.at("kind").get<std::string>());
  if (!expected_kind.empty() && ar.kind_ != expected_kind)
    throw Error("archive kind '" + ar.kind_ + "' where '" + std::string(expected_kind) +
                "' was expected");
  std::ifstream bin(dir / "arrays.bin", std::ios::binary);
  std::ostringstream ss;
  ss << bin.rdbuf();
  const std::string bytes = ss.str();
  if (sha256_hex(bytes) != manifest.at("digest").get<std::string>())
    throw Error("archive digest mismatch in " + dir.string());
  for (const auto& e : manifest.at("arrays")) {
    auto dtype = e.at("dtype").get<std::string>() == "f64" ? torch::kFloat64 : torch::kFloat32;
    auto shape = e.at("shape").get<std::vector<int64_t>>();
    auto offset = e.at("offset").get<std::size_t>();
    auto nbytes = e.at("nbytes").get<std::size_t>();
    if (offset + nbytes > bytes.size()) throw Error("truncated arrays.bin in " + dir.string());
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (static_cast<std::size_t>(t.numel()) * t.element_size() != nbytes)
      throw Error("array size mismatch for " + e.at("name").get<std::string>());
    std::memcpy(t.data_ptr(), bytes.data() + offset, nbytes);
    ar.arrays_[e.at("name").get<std::string>()] = t;
  }
  ar.meta_ = manifest.at("meta");
  return ar;
}

void archive_module(Archive& ar, const torch::nn::Module& module, const std::string& prefix) {
  for (const auto& p : module.named_parameters(true)) ar.put(prefix + p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) ar.put(prefix + b.key(), b.value());
}

void restore_module(const Archive& ar, torch::nn::Module& module, const std::string& prefix) {
  torch::NoGradGuard ng;
  auto copy_into = [&](const std::string& name, torch::Tensor& dst) {
    auto src = ar.get(prefix + name);
    if (src.sizes() != dst.sizes())
      throw ShapeError("checkpoint shape mismatch for " + prefix + name);
    dst.copy_(src.to(dst.scalar_type()));
  };
  for (auto& p : module.named_parameters(true)) copy_into(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy_into(b.key(), b.value());
}

}  // namespace rls
