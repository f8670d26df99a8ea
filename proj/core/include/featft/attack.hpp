#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "featft/network.hpp"

namespace featft {

enum class LossKind { ce, logit, suphigh };

std::string_view loss_name(LossKind loss);
LossKind parse_loss(std::string_view name);

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  double step_alpha = 2.0 / 255.0;
  int iters = 200;
  double momentum = 1.0;
  double di_prob = 0.7;
  double di_resize_range = 1.1;
  int ti_radius = 3;
  LossKind loss = LossKind::ce;
  std::uint64_t seed = 0;
};

void validate(const AttackConfig& cfg);

struct SupHighParams {
  double beta1 = 1.0;
  double beta2 = 1.0;
  int n_high = 3;
};

void validate(const SupHighParams& params, int class_count);

/// One model or an equal-weight ensemble. Members are kept sorted by name, so the member
/// order given by the caller never affects a result.
class Source {
 public:
  Source() = default;
  explicit Source(const Model& model);
  explicit Source(std::vector<const Model*> members);

  const std::vector<const Model*>& members() const { return members_; }
  std::size_t size() const { return members_.size(); }
  int class_count() const;
  /// Member names joined with '+'.
  std::string name() const;

 private:
  std::vector<const Model*> members_;
};

/// Arithmetic mean of member logits, accumulated in member order.
std::vector<double> source_logits(const Source& source, const Image& image);
int source_predict(const Source& source, const Image& image);

struct AttackTask {
  Image image;
  int y_o = 0;
  int y_t = 0;
  Source source;
  std::uint64_t id = 0;  // keys the per-task random streams
};

void validate(const AttackTask& task);

/// Elementwise clamp into [original − ε, original + ε] ∩ [0, 1]. The float bounds are nudged
/// inward when rounding would let a pixel land more than ε away in exact arithmetic.
Image clip_to_budget(const Image& candidate, const Image& original, double epsilon);

struct SupHighParts {
  Tensor64 g1;         // ∇(l_t − β1·l_o)
  Tensor64 g2;         // ∇ Σ l_h over the suppressed labels
  Tensor64 component;  // part of g2 orthogonal to g1; g2 itself when g1 = 0
  std::vector<int> suppressed;
  bool degenerate = false;
};

struct LossGrad {
  double value = 0.0;  // CE toward y_t, −l_t, or −(l_t − β1·l_o) + β2·Σ l_h
  Image ascent;        // direction the attack steps along
  std::optional<SupHighParts> suphigh;
};

/// `ascent` is −∇CE for CE, ∇l_t for Logit and g1 − β2·component for SupHigh.
LossGrad loss_value_and_grad(const AttackTask& task, const Image& image, LossKind loss,
                             const std::optional<SupHighParams>& suphigh = std::nullopt);

struct AttackTrace {
  std::vector<double> loss;             // at the transformed input, per iteration
  std::vector<int> zero_gradient_steps;  // iterations whose smoothed gradient had zero L1 norm
  std::vector<std::string> warnings;
};

struct AttackResult {
  Image image;
  std::vector<Image> snapshots;  // I′ after each requested iteration count
  AttackTrace trace;
};

Image run_baseline_attack(const AttackTask& task, const AttackConfig& cfg,
                          const std::optional<SupHighParams>& suphigh = std::nullopt);

/// Same iteration; `snapshot_at` lists iteration counts in [0, cfg.iters] whose iterates are
/// returned in `snapshots`, in the listed order.
AttackResult run_baseline_attack_traced(const AttackTask& task, const AttackConfig& cfg,
                                        const std::optional<SupHighParams>& suphigh,
                                        const std::vector<int>& snapshot_at = {});

}  // namespace featft
