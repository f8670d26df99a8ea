#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "featft/attack.hpp"
#include "featft/dataset.hpp"
#include "featft/finetune.hpp"
#include "featft/report.hpp"

namespace featft {

enum class Scenario { random_target, most_difficult, ensemble_holdout, uap, ablation_nft, ablation_layer };

std::string_view scenario_name(Scenario s);
Scenario parse_scenario(std::string_view name);

struct ExperimentPlan {
  std::string name = "experiment";
  Scenario scenario = Scenario::random_target;
  std::vector<std::string> sources;  // empty: every zoo model
  std::vector<std::string> targets;  // empty: every zoo model (uap: the source itself)
  std::vector<LossKind> attacks = {LossKind::ce};
  std::vector<bool> ft = {false, true};
  bool ila = false;  // also fine-tune with targeted ILA ("<loss>+ila" rows)
  bool diagnostic = false;  // allow source == target cells
  std::uint64_t seed = 0;
  int task_count = 200;
  int baseline_iters = 200;     // N without fine-tuning
  int ft_baseline_iters = 160;  // N before fine-tuning
  AttackConfig attack;          // iters and seed are taken from the fields above
  SupHighParams suphigh;
  FinetuneConfig finetune;      // seed is taken from `seed`, tap from `tap_name`
  std::string tap_name;         // layer name; empty: each model's default tap
  std::vector<int> nft_values = {0, 2, 5, 10, 15, 20, 30};
  std::vector<int> uap_classes;  // empty: every class
};

void validate(const ExperimentPlan& plan);

/// Flat JSON object; unknown keys are rejected with ConfigError.
ExperimentPlan parse_plan(std::string_view json_text);
ExperimentPlan load_plan(const std::filesystem::path& path);
std::string plan_to_json(const ExperimentPlan& plan);
/// FNV-1a of the canonical JSON form, as 16 hex digits.
std::string plan_digest(const ExperimentPlan& plan);

/// random_target: uniform over labels ≠ y_o. most_difficult: argmin of logits, lowest index on ties.
int pick_target(Scenario scenario, std::span<const double> source_logits, int y_o, Rng& rng);

/// One (image, target) pair of a plan; identical for every source of the plan except under
/// most_difficult, where the target depends on the source's clean logits.
struct PlannedTask {
  int sample = 0;  // index into dataset.samples
  int y_o = 0;
  int y_t = 0;
};

std::vector<PlannedTask> plan_tasks(const ExperimentPlan& plan, const Dataset& dataset, const Source& source);

/// Runs random_target, most_difficult, ensemble_holdout and both ablations; uap plans are
/// dispatched to the UAP protocol. Throws ConfigError before any attack when a named model is
/// missing from `zoo`. Recomputes the attack-eval subset from `zoo`.
TransferReport run_transfer_experiment(const ExperimentPlan& plan, const std::vector<Model>& zoo, Dataset dataset,
                                       int jobs = 1);

inline TransferReport run_ablation(const ExperimentPlan& plan, const std::vector<Model>& zoo, Dataset dataset,
                                   int jobs = 1) {
  return run_transfer_experiment(plan, zoo, std::move(dataset), jobs);
}

/// Re-runs the tasks behind one row and returns its success count. Throws ConfigError when the
/// row's seed digest does not belong to `plan`.
int rerun_row(const ExperimentPlan& plan, const ReportRow& row, const std::vector<Model>& zoo, Dataset dataset,
              int jobs = 1);

struct UapResult {
  Image delta;   // result − 0.5
  int y_o = 0;   // source prediction on the mean image (runner-up when it equals y_t)
  int success = 0;
  int count = 0;
  double rate() const { return count == 0 ? 0.0 : static_cast<double>(success) / count; }
};

/// Attack (optionally + fine-tune) from the constant 0.5 image, then apply clamp(I + δ) to
/// every attack-eval image whose label differs from y_t and count predictions equal to y_t
/// by `eval_model`.
UapResult run_uap_datafree(const Model& model, int y_t, const AttackConfig& attack_cfg,
                           const std::optional<FinetuneConfig>& ft_cfg, const Dataset& dataset,
                           const Model& eval_model, int ft_baseline_iters = 160);

}  // namespace featft
