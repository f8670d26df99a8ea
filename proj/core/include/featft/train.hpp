#pragma once

#include <cstdint>

#include "featft/checkpoint.hpp"
#include "featft/dataset.hpp"

namespace featft {

struct TrainConfig {
  int epochs = 70;
  double learning_rate = 0.005;
  int batch_size = 16;
  std::uint64_t seed = 1;
  double momentum = 0.9;
};

void validate(const TrainConfig& cfg);

/// Mini-batch SGD with momentum on the train split; held-out accuracy is recorded in the
/// checkpoint. Single-threaded, so a seed fixes every weight bit.
/// Throws TrainingError when the loss stops being finite.
Checkpoint train(std::shared_ptr<const ModelSpec> spec, const Dataset& dataset, const TrainConfig& cfg);

}  // namespace featft
