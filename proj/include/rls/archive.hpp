#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>

namespace rls {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);
/// Independent 64-bit seed for a named purpose (first 8 bytes of sha256).
std::uint64_t derive_seed(std::string_view purpose, std::uint64_t seed);

/// Checkpoint archive: a directory holding `arrays.bin` (named float arrays,
/// little-endian, concatenated in name order) and `manifest.json` describing
/// each array (dtype f32/f64, shape, byte offset), the archive kind, free-form
/// metadata and the SHA-256 digest of `arrays.bin`.
class Archive {
 public:
  static constexpr int kFormatVersion = 1;

  explicit Archive(std::string kind = {}) : kind_(std::move(kind)) {}

  void put(const std::string& name, const torch::Tensor& t);
  torch::Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return arrays_.contains(name); }
  const std::map<std::string, torch::Tensor>& arrays() const { return arrays_; }

  const std::string& kind() const { return kind_; }
  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  /// Digest of the serialized array payload.
  std::string digest() const;

  void save(const std::filesystem::path& dir) const;
  static Archive load(const std::filesystem::path& dir,
                      std::string_view expected_kind = {});

 private:
  std::string payload(nlohmann::json* entries) const;

  std::string kind_;
  std::map<std::string, torch::Tensor> arrays_;
  nlohmann::json meta_ = nlohmann::json::object();
};

/// Copy every parameter and buffer of `module` into the archive under
/// `prefix` + qualified name.
void archive_module(Archive& ar, const torch::nn::Module& module,
                    const std::string& prefix);
/// Inverse of archive_module; shapes must match exactly.
void restore_module(const Archive& ar, torch::nn::Module& module,
                    const std::string& prefix);

}  // namespace rls
