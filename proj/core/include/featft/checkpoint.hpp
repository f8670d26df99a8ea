#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "featft/network.hpp"

namespace featft {

inline constexpr char kCheckpointMagic[4] = {'F', 'T', 'W', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainingMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  double accuracy = 0.0;  // held-out top-1
  bool operator==(const TrainingMeta&) const = default;
};

/// Named weight tensors of one model plus training metadata.
///
/// On disk (.ftw, all integers little-endian):
///   "FTW1" | u32 version | u32 tensor count | per tensor:
///   u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 values[prod(dims)]
/// Metadata travels as empty rank-1 tensors named "@key=value" (model, seed, epochs,
/// accuracy), so any reader of the tensor list can load the file unchanged.
struct Checkpoint {
  std::string model_name;
  std::vector<std::pair<std::string, Tensor>> tensors;
  TrainingMeta meta;

  bool operator==(const Checkpoint&) const = default;
};

Checkpoint make_checkpoint(const Model& model, const TrainingMeta& meta);

/// Binds checkpoint tensors to a spec. Throws ConfigError when a required weight is
/// missing or mis-shaped, or when the model name differs.
Model model_from_checkpoint(const Checkpoint& cp, std::shared_ptr<const ModelSpec> spec);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& cp);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loads `<dir>/<name>.ftw` for a zoo model.
Model load_zoo_model(const std::filesystem::path& dir, const std::string& name);

/// FNV-1a over the encoded bytes, as 16 hex digits.
std::string checkpoint_digest(const Checkpoint& cp);

}  // namespace featft
