#include "featft/train.hpp"

#include <cmath>
#include <numeric>

namespace featft {

void validate(const TrainConfig& cfg) {
  if (cfg.epochs <= 0 || cfg.batch_size <= 0 || !(cfg.learning_rate > 0.0)) {
    throw ConfigError("train: epochs, batch size and learning rate must be positive");
  }
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw ConfigError("train: momentum must lie in [0, 1)");
}

Checkpoint train(std::shared_ptr<const ModelSpec> spec, const Dataset& dataset, const TrainConfig& cfg) {
  validate(cfg);
  if (dataset.class_count != spec->class_count) {
    throw ConfigError("dataset has " + std::to_string(dataset.class_count) + " classes, model '" + spec->name +
                      "' expects " + std::to_string(spec->class_count));
  }
  std::vector<int> order = dataset.indices(Split::train);
  if (order.empty()) throw ConfigError("train: dataset has no training samples");

  Rng rng(cfg.seed);
  Model model = init_model(spec, rng);
  std::vector<Tensor> velocity, grads;
  for (const Tensor& p : model.params) {
    velocity.emplace_back(p.shape());
    grads.emplace_back(p.shape());
  }

  std::vector<float> seed(static_cast<std::size_t>(spec->class_count));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i) + 1))]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      for (Tensor& g : grads) g.fill(0.0f);
      for (std::size_t b = start; b < stop; ++b) {
        const Sample& s = dataset.samples[static_cast<std::size_t>(order[b])];
        const ForwardCache<float> cache = run_forward(model, s.image);
        const auto logits = cache.logits().values();
        epoch_loss += cross_entropy(logits, s.label);
        const auto p = softmax(logits);
        for (std::size_t k = 0; k < p.size(); ++k) {
          seed[k] = static_cast<float>(p[k] - (static_cast<int>(k) == s.label ? 1.0 : 0.0));
        }
        accumulate_param_gradients(model, cache, std::span<const float>(seed), grads);
      }
      if (!std::isfinite(epoch_loss)) throw TrainingError("training loss diverged for '" + spec->name + "'", epoch);
      const float inv = 1.0f / static_cast<float>(stop - start);
      const float mu = static_cast<float>(cfg.momentum);
      const float lr = static_cast<float>(cfg.learning_rate);
      for (std::size_t i = 0; i < model.params.size(); ++i) {
        float* w = model.params[i].data();
        float* v = velocity[i].data();
        const float* g = grads[i].data();
        for (std::size_t j = 0; j < model.params[i].size(); ++j) {
          v[j] = mu * v[j] + g[j] * inv;
          w[j] -= lr * v[j];
        }
      }
    }
    for (const Tensor& p : model.params) {
      if (!all_finite(p)) throw TrainingError("weights of '" + spec->name + "' became non-finite", epoch);
    }
  }

  const bool has_heldout = !dataset.indices(Split::heldout).empty();
  const double acc = has_heldout ? accuracy(model, dataset, Split::heldout) : accuracy(model, dataset, Split::train);
  return make_checkpoint(model, {cfg.seed, cfg.epochs, acc});
}

}  // namespace featft
