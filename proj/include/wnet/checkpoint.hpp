#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wnet/tensor.hpp"

namespace wnet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Manifest entry for one stored tensor. `offset` is relative to the start
/// of the payload.
struct TensorRecord {
  std::string name;
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

/// Named-tensor container.
///
/// On-disk layout (all integers little-endian):
///   8 bytes   magic "WNETCKPT"
///   u32       format version
///   u64       header length L
///   L bytes   JSON header {"digest", "metadata", "tensors"}
///   payload   float32 little-endian tensor bytes, in manifest order
/// "digest" is the lowercase hex SHA-256 of the payload.
class Checkpoint {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  std::map<std::string, std::string> metadata;

  /// Adds or replaces a tensor; insertion order is the stored order.
  void put(const std::string& name, const Tensor& t);
  bool contains(const std::string& name) const;
  /// Throws CheckpointError naming the tensor when absent.
  const Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  /// Throws CheckpointError naming the key when absent.
  const std::string& meta(const std::string& key) const;

  /// Hex SHA-256 of the payload this container serializes to.
  std::string digest() const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  /// Writes to a temporary sibling and renames it into place.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  /// Manifest of a serialized container, without materializing tensors.
  static std::vector<TensorRecord> manifest(std::span<const std::uint8_t> bytes);

 private:
  std::vector<std::pair<std::string, Tensor>> tensors_;
};

/// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);

/// Shortest round-trip decimal text for a float / double.
std::string format_number(double v);
std::string format_number(float v);

}  // namespace wnet
