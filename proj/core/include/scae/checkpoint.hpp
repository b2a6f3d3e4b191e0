#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "scae/classifiers.hpp"
#include "scae/model.hpp"

namespace scae::checkpoint {

/// Bumped whenever the container layout changes; older files are rejected.
inline constexpr int kFormatVersion = 1;

struct ClassifierSet {
  std::optional<classify::KMeansClassifier> prior;
  std::optional<classify::KMeansClassifier> posterior;
  std::optional<classify::LinearClassifier> linear;
};

struct Metadata {
  std::string regime = "plain";
  std::string dataset = "mnist";
  std::uint64_t seed = 0;
  int epoch = 0;
  nlohmann::json extra = nlohmann::json::object();  // free-form run settings
};

struct Checkpoint {
  model::ScaeModel model{nullptr};
  ClassifierSet classifiers;
  Metadata metadata;
  std::string config_hash;
};

/// FNV-1a over the canonical JSON dump of the model config.
std::string config_hash(const model::ScaeConfig& config);

/// Layout: 8-byte magic "SCAECKPT", little-endian u32 format version,
/// u64 header length, the JSON header, then the raw tensor bytes it indexes.
void save_checkpoint(const std::filesystem::path& path, const model::ScaeModel& model,
                     const ClassifierSet& classifiers, const Metadata& metadata);

/// Throws CheckpointError on a bad magic, version mismatch, truncation or
/// checksum failure; nothing is returned unless the whole file validates.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace scae::checkpoint
