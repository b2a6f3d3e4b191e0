#pragma once

#include <stdexcept>
#include <string>

namespace scae {

/// Invalid or inconsistent configuration (bad dataset name, bad shapes, bad
/// config keys).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Dataset files missing or unreadable.
class IngestionError : public std::runtime_error {
 public:
  explicit IngestionError(const std::string& what) : std::runtime_error(what) {}
};

/// Checkpoint container is truncated, corrupt or written by an incompatible
/// format version.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace scae
