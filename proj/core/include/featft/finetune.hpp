#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "featft/attack.hpp"

namespace featft {

enum class MaskKind { pixel, patch };

std::string_view mask_name(MaskKind kind);
MaskKind parse_mask(std::string_view name);

struct FinetuneConfig {
  int iters = 10;
  double beta = 0.2;
  double step_alpha = 2.0 / 255.0;
  std::optional<TapPoint> tap;  // unset: the model's default tap
  MaskKind mask = MaskKind::pixel;
  int ensemble_n = 30;
  double keep_prob = 0.7;
  int patch_size = 4;
  double mask_fill = 0.5;  // value of dropped pixels
  bool di_ti = false;
  std::uint64_t seed = 0;
};

void validate(const FinetuneConfig& cfg);

struct AggregateGradient {
  Tensor values;
  TapPoint tap;
  int label = 0;
  MaskKind mask_kind = MaskKind::pixel;
  int ensemble_n = 0;
  double keep_prob = 0.0;
  int patch_size = 0;
  std::uint64_t seed = 0;
  bool zero = false;  // every masked gradient cancelled; values are all zero
};

/// Input-space keep mask (H×W, 1 = keep) for one ensemble member. Pixel masks draw one
/// Bernoulli per pixel in row-major order; patch masks draw one per block, blocks row-major.
std::vector<float> draw_keep_mask(int height, int width, MaskKind kind, double keep_prob, int patch_size, Rng& rng);

/// Sum of ∂l_label/∂f_tap over ensemble_n masked copies of `image`, L2-normalized.
AggregateGradient aggregate_gradient(const Model& model, const Image& image, int label, TapPoint tap,
                                     const FinetuneConfig& cfg, std::uint64_t seed);

/// delta_t − beta·delta_o, not renormalized.
Tensor combine_aggregate(const AggregateGradient& delta_t, const AggregateGradient& delta_o, double beta);

/// Fixed feature direction of one source member.
struct FeatureObjective {
  const Model* model = nullptr;
  TapPoint tap;
  Tensor direction;
};

/// Input gradient of Σ_members ⟨direction, f_tap(image)⟩ / member count.
Image feature_objective_gradient(const std::vector<FeatureObjective>& objectives, const Image& image,
                                 double* value = nullptr);

struct FinetuneResult {
  Image image;
  std::vector<Image> snapshots;
  std::vector<AggregateGradient> delta_t;  // one per source member
  std::vector<AggregateGradient> delta_o;
  std::vector<std::string> warnings;
};

/// Sign ascent on ⟨Δt − βΔo, f_k(I′)⟩ starting from `ae`. Δt is aggregated at `ae` toward
/// y_t and Δo at `original` toward y_o on independent mask streams keyed by task_id. For an
/// ensemble source every member contributes its own objective at its default tap.
FinetuneResult finetune_traced(const Image& ae, const Image& original, int y_t, int y_o, const Source& source,
                               const FinetuneConfig& cfg, const AttackConfig& attack_cfg, std::uint64_t task_id = 0,
                               const std::vector<int>& snapshot_at = {});

Image finetune(const Image& ae, const Image& original, int y_t, int y_o, const Model& model,
               const FinetuneConfig& cfg, const AttackConfig& attack_cfg);

/// Minimizes ⟨Δ, f_k⟩ with Δ aggregated at the clean image toward y_o; attack_cfg.iters sign steps.
Image untargeted_feature_attack(const Image& image, int y_o, const Model& model, const FinetuneConfig& cfg,
                                const AttackConfig& attack_cfg);

struct IlaResult {
  Image image;
  std::vector<Image> snapshots;
  std::optional<std::string> warning;
};

/// Sign ascent on ⟨f(I′) − f(I), d⟩ with d = f(ae) − f(original) fixed at entry.
IlaResult targeted_ila_finetune(const Image& ae, const Image& original, const Model& model, TapPoint tap, int iters,
                                const AttackConfig& attack_cfg, const std::vector<int>& snapshot_at = {});

}  // namespace featft
