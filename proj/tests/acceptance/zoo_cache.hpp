#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "featft/checkpoint.hpp"
#include "featft/dataset.hpp"
#include "featft/parallel.hpp"
#include "featft/train.hpp"
#include "featft/zoo.hpp"

namespace featft::acceptance {

/// Zoo trained with the default TrainConfig on `ds`, cached in `dir` under a key derived from the
/// training config and a sample of the dataset bytes.
inline std::vector<Model> trained_zoo(const Dataset& ds, const std::filesystem::path& dir, int jobs) {
  namespace fs = std::filesystem;
  const TrainConfig cfg;
  char head[160];
  std::snprintf(head, sizeof head, "%d|%.17g|%d|%llu|%.17g|", cfg.epochs, cfg.learning_rate, cfg.batch_size,
                static_cast<unsigned long long>(cfg.seed), cfg.momentum);
  std::string key = head;
  for (std::size_t i = 0; i < ds.samples.size(); i += 97) {
    const auto b = encode_ppm(ds.samples[i].image);
    key.append(b.begin(), b.end());
  }
  for (const auto& spec : build_zoo()) key += spec.name + std::to_string(spec.layer_count()) + "|";
  char tag[17];
  std::snprintf(tag, sizeof tag, "%016llx", static_cast<unsigned long long>(fnv1a64(key)));
  fs::create_directories(dir);

  const auto names = zoo_names();
  const auto path = [&](std::size_t i) { return dir / (names[i] + "-" + tag + ".ftw"); };
  std::vector<Model> zoo(names.size());
  std::vector<int> todo;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (fs::exists(path(i))) {
      zoo[i] = model_from_checkpoint(load_checkpoint(path(i)), zoo_spec(names[i]));
    } else {
      todo.push_back(static_cast<int>(i));
    }
  }
  std::vector<Checkpoint> fresh(todo.size());
  parallel_for(static_cast<int>(todo.size()), jobs, [&](int k) {
    const auto i = static_cast<std::size_t>(todo[static_cast<std::size_t>(k)]);
    fresh[static_cast<std::size_t>(k)] = train(zoo_spec(names[i]), ds, cfg);
  });
  for (std::size_t k = 0; k < todo.size(); ++k) {
    const auto i = static_cast<std::size_t>(todo[k]);
    save_checkpoint(fresh[k], path(i));
    zoo[i] = model_from_checkpoint(fresh[k], zoo_spec(names[i]));
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    const bool trained = std::find(todo.begin(), todo.end(), static_cast<int>(i)) != todo.end();
    std::printf("      %-14s heldout accuracy %.4f (%s)\n", names[i].c_str(), accuracy(zoo[i], ds, Split::heldout),
                trained ? "trained" : "cached");
  }
  return zoo;
}

}  // namespace featft::acceptance
