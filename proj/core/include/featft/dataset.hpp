#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "featft/network.hpp"

namespace featft {

enum class Split { train, heldout };

std::string split_name(Split s);

struct Sample {
  std::string id;
  Image image;  // 3×32×32, values are multiples of 1/255
  int label = 0;
  Split split = Split::train;
};

struct Dataset {
  std::vector<Sample> samples;
  int class_count = 10;
  /// Held-out samples that every zoo model classifies correctly. Filled by select_attack_eval.
  std::vector<int> attack_eval;

  std::vector<int> indices(Split split) const;
};

struct SyntheticOptions {
  std::uint64_t seed = 7;
  int per_class = 200;
  double heldout_fraction = 0.3;
  int image_size = 32;
};

/// Ten classes: five shapes (disk, square, triangle, plus, ring) × two colour families
/// (warm, cool). Position, scale, rotation, hue, background and pixel noise are jittered.
/// Deterministic per seed; pixels are quantized to 8 bits so a PPM round trip is exact.
Dataset gen_synthetic_dataset(const SyntheticOptions& options);

inline Dataset gen_synthetic_dataset(std::uint64_t seed, int per_class) {
  return gen_synthetic_dataset(SyntheticOptions{seed, per_class});
}

std::string class_name(int label);

// PPM (P6, maxval 255) images. CHW float in [0,1] <-> interleaved RGB bytes.
std::vector<std::uint8_t> encode_ppm(const Image& image);
Image decode_ppm(std::span<const std::uint8_t> bytes);
void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// Writes `<root>/<split>/<class>/<id>.ppm` and `<root>/labels.csv` (id,split,label,path).
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

/// Fills dataset.attack_eval with held-out indices classified correctly by every model.
void select_attack_eval(Dataset& dataset, const std::vector<const Model*>& models);

double accuracy(const Model& model, const Dataset& dataset, Split split);

}  // namespace featft
