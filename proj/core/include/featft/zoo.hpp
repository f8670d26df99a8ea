#pragma once

#include <memory>
#include <string_view>
#include <vector>

#include "featft/network.hpp"

namespace featft {

inline constexpr int kZooClasses = 10;
inline constexpr int kZooInputSize = 32;

/// Incremental ModelSpec construction with parameter bookkeeping. Every helper returns the
/// index of the layer it appended.
class SpecBuilder {
 public:
  SpecBuilder(std::string name, Shape input_shape, int class_count);

  int conv(int from, int out_channels, int kernel, const std::string& name, bool relu = true);
  int max_pool(int from, int kernel = 2);
  int avg_pool(int from, int kernel = 2);
  int relu(int from);
  int add(int a, int b, const std::string& name);
  int concat(const std::vector<int>& branches, const std::string& name);
  int global_avg_pool(int from);
  int dense(int from, int out, const std::string& name);

  const Shape& shape_of(int layer) const;

  ModelSpec finish(TapPoint default_tap);

 private:
  int push(LayerOp op);
  int add_param(const std::string& name, Shape shape);

  ModelSpec spec_;
};

enum class Topology { plain, skip, branch };

/// Structural class: residual_add present → skip; branch_concat present → branch; else plain.
Topology topology_class(const ModelSpec& spec);

ModelSpec build_mini_plain(int input_size = kZooInputSize);
ModelSpec build_mini_residual(int input_size = kZooInputSize);
ModelSpec build_mini_branch(int input_size = kZooInputSize);

/// mini_plain, mini_residual, mini_branch.
std::vector<ModelSpec> build_zoo(int input_size = kZooInputSize);

std::vector<std::string> zoo_names();

/// Throws ConfigError for unknown names.
std::shared_ptr<const ModelSpec> zoo_spec(std::string_view name, int input_size = kZooInputSize);

/// Post-activation layers (relu, pool, concat) that every input-to-logit path passes through.
/// These are the candidate taps of the layer sweep.
std::vector<TapPoint> sweep_taps(const ModelSpec& spec);

/// tap.layer_id / layer_count.
double tap_depth(const ModelSpec& spec, TapPoint tap);

}  // namespace featft
