#include "featft/zoo.hpp"

#include <algorithm>

namespace featft {

SpecBuilder::SpecBuilder(std::string name, Shape input_shape, int class_count) {
  spec_.name = std::move(name);
  spec_.input_shape = std::move(input_shape);
  spec_.class_count = class_count;
}

const Shape& SpecBuilder::shape_of(int layer) const {
  return layer == kNetworkInput ? spec_.input_shape : spec_.layer_shapes.at(static_cast<std::size_t>(layer));
}

int SpecBuilder::push(LayerOp op) {
  std::vector<Shape> in;
  for (const int j : op.inputs) in.push_back(shape_of(j));
  spec_.layer_shapes.push_back(infer_layer_shape(op, in, spec_.params));
  spec_.layers.push_back(std::move(op));
  return spec_.layer_count() - 1;
}

int SpecBuilder::add_param(const std::string& name, Shape shape) {
  spec_.params.push_back({name, std::move(shape)});
  return static_cast<int>(spec_.params.size()) - 1;
}

int SpecBuilder::conv(int from, int out_channels, int kernel, const std::string& name, bool with_relu) {
  const int in_channels = shape_of(from).at(0);
  LayerOp c{OpKind::conv2d, {from}, out_channels, kernel, 1, kernel / 2,
            add_param(name + ".weight", {out_channels, in_channels, kernel, kernel}), name};
  int at = push(std::move(c));
  at = push({OpKind::bias_add, {at}, 0, 1, 1, 0, add_param(name + ".bias", {out_channels}), name + ".bias"});
  return with_relu ? relu(at) : at;
}

int SpecBuilder::max_pool(int from, int kernel) {
  return push({OpKind::max_pool, {from}, 0, kernel, kernel, 0, -1, "maxpool" + std::to_string(spec_.layer_count())});
}

int SpecBuilder::avg_pool(int from, int kernel) {
  return push({OpKind::avg_pool, {from}, 0, kernel, kernel, 0, -1, "avgpool" + std::to_string(spec_.layer_count())});
}

int SpecBuilder::relu(int from) {
  return push({OpKind::relu, {from}, 0, 1, 1, 0, -1, "relu" + std::to_string(spec_.layer_count())});
}

int SpecBuilder::add(int a, int b, const std::string& name) {
  return push({OpKind::residual_add, {a, b}, 0, 1, 1, 0, -1, name});
}

int SpecBuilder::concat(const std::vector<int>& branches, const std::string& name) {
  return push({OpKind::branch_concat, branches, 0, 1, 1, 0, -1, name});
}

int SpecBuilder::global_avg_pool(int from) {
  return push({OpKind::global_avg_pool, {from}, 0, 1, 1, 0, -1, "gap"});
}

int SpecBuilder::dense(int from, int out, const std::string& name) {
  const int n = static_cast<int>(shape_size(shape_of(from)));
  int at = push({OpKind::dense, {from}, out, 1, 1, 0, add_param(name + ".weight", {out, n}), name});
  return push({OpKind::bias_add, {at}, 0, 1, 1, 0, add_param(name + ".bias", {out}), name + ".bias"});
}

ModelSpec SpecBuilder::finish(TapPoint default_tap) {
  spec_.default_tap = default_tap;
  finalize_spec(spec_);
  return spec_;
}

Topology topology_class(const ModelSpec& spec) {
  const auto has = [&](OpKind k) {
    return std::any_of(spec.layers.begin(), spec.layers.end(), [k](const LayerOp& op) { return op.kind == k; });
  };
  if (has(OpKind::residual_add)) return Topology::skip;
  if (has(OpKind::branch_concat)) return Topology::branch;
  return Topology::plain;
}

// VGG-like: three conv stages, no skips.
ModelSpec build_mini_plain(int input_size) {
  SpecBuilder b("mini_plain", {3, input_size, input_size}, kZooClasses);
  int x = b.conv(kNetworkInput, 8, 3, "conv1_1");
  x = b.conv(x, 8, 3, "conv1_2");
  x = b.max_pool(x);
  x = b.conv(x, 16, 3, "conv2_1");
  x = b.conv(x, 16, 3, "conv2_2");
  const int tap = b.max_pool(x);
  x = b.conv(tap, 32, 3, "conv3_1");
  x = b.conv(x, 32, 3, "conv3_2");
  x = b.global_avg_pool(x);
  b.dense(x, kZooClasses, "fc");
  return b.finish({tap});
}

// ResNet-like: stem plus three stages, each ending in an identity-skip block.
ModelSpec build_mini_residual(int input_size) {
  SpecBuilder b("mini_residual", {3, input_size, input_size}, kZooClasses);
  int x = b.conv(kNetworkInput, 8, 3, "stem");
  x = b.max_pool(x);

  const auto block = [&b](int in, int channels, const std::string& name) {
    int y = b.conv(in, channels, 3, name + "a");
    y = b.conv(y, channels, 3, name + "b", false);
    return b.relu(b.add(y, in, name + ".add"));
  };

  x = block(x, 8, "res1");
  x = b.conv(x, 16, 3, "down2");
  x = b.max_pool(x);
  const int tap = block(x, 16, "res2");
  x = b.conv(tap, 32, 3, "down3");
  x = b.max_pool(x);
  x = block(x, 32, "res3");
  x = b.global_avg_pool(x);
  b.dense(x, kZooClasses, "fc");
  return b.finish({tap});
}

// Inception-like: two modules of parallel 1×1 / 3×3 / 5×5 branches joined by concat.
ModelSpec build_mini_branch(int input_size) {
  SpecBuilder b("mini_branch", {3, input_size, input_size}, kZooClasses);
  int x = b.conv(kNetworkInput, 8, 3, "stem");
  x = b.max_pool(x);

  const auto module = [&b](int in, int c1, int r3, int c3, int r5, int c5, const std::string& name) {
    const int p1 = b.conv(in, c1, 1, name + ".b1");
    const int p3 = b.conv(b.conv(in, r3, 1, name + ".b3r"), c3, 3, name + ".b3");
    const int p5 = b.conv(b.conv(in, r5, 1, name + ".b5r"), c5, 5, name + ".b5");
    return b.concat({p1, p3, p5}, name);
  };

  x = module(x, 8, 4, 8, 4, 4, "mixed_a");
  const int tap = b.max_pool(x);
  x = module(tap, 16, 8, 16, 8, 8, "mixed_b");
  x = b.max_pool(x);
  x = b.conv(x, 32, 3, "head");
  x = b.global_avg_pool(x);
  b.dense(x, kZooClasses, "fc");
  return b.finish({tap});
}

std::vector<ModelSpec> build_zoo(int input_size) {
  return {build_mini_plain(input_size), build_mini_residual(input_size), build_mini_branch(input_size)};
}

std::vector<std::string> zoo_names() { return {"mini_plain", "mini_residual", "mini_branch"}; }

std::shared_ptr<const ModelSpec> zoo_spec(std::string_view name, int input_size) {
  if (name == "mini_plain") return std::make_shared<const ModelSpec>(build_mini_plain(input_size));
  if (name == "mini_residual") return std::make_shared<const ModelSpec>(build_mini_residual(input_size));
  if (name == "mini_branch") return std::make_shared<const ModelSpec>(build_mini_branch(input_size));
  throw ConfigError("unknown model '" + std::string(name) + "'");
}

std::vector<TapPoint> sweep_taps(const ModelSpec& spec) {
  const int n = spec.layer_count();
  // A layer i is a cut point when no edge jumps from below i to above i.
  std::vector<int> reach(static_cast<std::size_t>(n), -1);  // max consumer index per producer
  for (int i = 0; i < n; ++i) {
    for (const int j : spec.layers[static_cast<std::size_t>(i)].inputs) {
      if (j >= 0) reach[static_cast<std::size_t>(j)] = std::max(reach[static_cast<std::size_t>(j)], i);
    }
  }
  std::vector<TapPoint> out;
  int furthest = -1;  // furthest consumer of any layer below i
  for (int i = 0; i < n; ++i) {
    const OpKind k = spec.layers[static_cast<std::size_t>(i)].kind;
    const bool post_activation =
        k == OpKind::relu || k == OpKind::max_pool || k == OpKind::avg_pool || k == OpKind::branch_concat;
    if (furthest <= i && post_activation && spec.layer_shapes[static_cast<std::size_t>(i)].size() == 3) out.push_back({i});
    furthest = std::max(furthest, reach[static_cast<std::size_t>(i)]);
  }
  return out;
}

double tap_depth(const ModelSpec& spec, TapPoint tap) {
  return static_cast<double>(tap.layer_id) / static_cast<double>(spec.layer_count());
}

}  // namespace featft
