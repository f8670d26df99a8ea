#pragma once

#include <compare>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "featft/rng.hpp"
#include "featft/tensor.hpp"

namespace featft {

enum class OpKind {
  conv2d,
  bias_add,
  relu,
  avg_pool,
  max_pool,
  dense,
  residual_add,
  branch_concat,
  global_avg_pool,
};

std::string_view op_name(OpKind kind);

/// Node index meaning "the network input image".
inline constexpr int kNetworkInput = -1;

struct LayerOp {
  OpKind kind = OpKind::relu;
  std::vector<int> inputs;  // earlier node indices or kNetworkInput
  int out_channels = 0;     // conv2d, dense
  int kernel = 1;           // conv2d, pools
  int stride = 1;           // conv2d, pools
  int pad = 0;              // conv2d
  int param = -1;           // index into ModelSpec::params (conv2d, dense, bias_add)
  std::string name;
};

/// A layer whose output is read as the feature map f_k. Must produce a C×H×W tensor.
struct TapPoint {
  int layer_id = -1;

  auto operator<=>(const TapPoint&) const = default;
};

struct ParamDecl {
  std::string name;
  Shape shape;
};

/// Static layer DAG in topological order. The last layer yields the logits.
struct ModelSpec {
  std::string name;
  Shape input_shape;  // C, H, W
  std::vector<LayerOp> layers;
  std::vector<ParamDecl> params;
  int class_count = 0;
  TapPoint default_tap;
  std::vector<Shape> layer_shapes;  // realized output shape per layer, filled by finalize_spec

  int layer_count() const { return static_cast<int>(layers.size()); }
  const Shape& feature_shape(TapPoint tap) const;
};

/// Infers every layer's output shape, checks chain compatibility, parameter shapes, the
/// logits shape and the default tap. Throws ConfigError.
void finalize_spec(ModelSpec& spec);

/// Output shape of one op given its input shapes; throws ConfigError on incompatibility.
Shape infer_layer_shape(const LayerOp& op, std::span<const Shape> inputs,
                        std::span<const ParamDecl> params);

void validate_tap(const ModelSpec& spec, TapPoint tap);

/// All layers with a 3-D output, in order.
std::vector<TapPoint> feature_map_layers(const ModelSpec& spec);

template <typename T>
struct BasicModel {
  std::shared_ptr<const ModelSpec> spec;
  std::vector<BasicTensor<T>> params;  // aligned with spec->params

  const std::string& name() const { return spec->name; }
  int class_count() const { return spec->class_count; }

  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> out{spec, {}};
    out.params.reserve(params.size());
    for (const auto& p : params) out.params.push_back(p.template cast<U>());
    return out;
  }
};

using Model = BasicModel<float>;
using Model64 = BasicModel<double>;

/// He-normal conv/dense weights, zero biases.
Model init_model(std::shared_ptr<const ModelSpec> spec, Rng& rng);

template <typename T>
struct ForwardCache {
  BasicTensor<T> input;
  std::vector<BasicTensor<T>> values;  // one per layer

  const BasicTensor<T>& logits() const { return values.back(); }
};

template <typename T>
ForwardCache<T> run_forward(const BasicModel<T>& model, const BasicTensor<T>& input);

template <typename T>
struct ForwardOutput {
  BasicTensor<T> logits;
  std::optional<BasicTensor<T>> feature;
};

template <typename T>
ForwardOutput<T> forward(const BasicModel<T>& model, const BasicTensor<T>& input,
                         std::optional<TapPoint> tap = std::nullopt);

/// Logits recomputed with the tapped layer's value replaced by `feature`; every other
/// upstream value is held at its cached value.
template <typename T>
BasicTensor<T> logits_with_feature(const BasicModel<T>& model, const ForwardCache<T>& cache,
                                   TapPoint tap, const BasicTensor<T>& feature);

template <typename T>
struct BackwardSeed {
  std::vector<T> logits;  // d(scalar)/d(logits); empty when the scalar ignores the logits
  std::optional<TapPoint> tap;
  const BasicTensor<T>* feature = nullptr;  // d(scalar)/d(f_tap)
};

template <typename T>
BasicTensor<T> input_gradient(const BasicModel<T>& model, const ForwardCache<T>& cache,
                              const BackwardSeed<T>& seed);

/// d(⟨logit_seed, logits⟩)/d(f_tap), holding everything upstream of the tap fixed.
template <typename T>
BasicTensor<T> feature_gradient(const BasicModel<T>& model, const ForwardCache<T>& cache,
                                TapPoint tap, std::span<const T> logit_seed);

/// grads[i] += d(⟨logit_seed, logits⟩)/d(params[i]). `grads` must be shaped like model.params.
template <typename T>
void accumulate_param_gradients(const BasicModel<T>& model, const ForwardCache<T>& cache,
                                std::span<const T> logit_seed, std::vector<BasicTensor<T>>& grads);

struct CrossEntropyAt {
  int label;
};
struct LogitAt {
  int label;
};
template <typename T>
struct FeatureProjection {
  TapPoint tap;
  BasicTensor<T> direction;  // Δ, shaped like f_tap
};

/// The scalars whose input gradients the attacks need: CE(label), logit(label), ⟨Δ, f_k⟩.
template <typename T>
using ScalarSpec = std::variant<CrossEntropyAt, LogitAt, FeatureProjection<T>>;

template <typename T>
struct ScalarGradient {
  double value = 0.0;
  BasicTensor<T> gradient;
};

template <typename T>
ScalarGradient<T> grad_input_of_scalar(const BasicModel<T>& model, const BasicTensor<T>& input,
                                       const ScalarSpec<T>& scalar);

template <typename T>
BasicTensor<T> grad_feature_of_logit(const BasicModel<T>& model, const BasicTensor<T>& input,
                                     TapPoint tap, int label);

/// Numerically stable softmax in double.
template <typename T>
std::vector<double> softmax(std::span<const T> logits);

/// Cross-entropy −log softmax(logits)[label].
template <typename T>
double cross_entropy(std::span<const T> logits, int label);

/// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
int argmax(std::span<const T> values);

int predict(const Model& model, const Image& image);

}  // namespace featft
