#include "featft/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace featft {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::conv2d: return "conv2d";
    case OpKind::bias_add: return "bias_add";
    case OpKind::relu: return "relu";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::max_pool: return "max_pool";
    case OpKind::dense: return "dense";
    case OpKind::residual_add: return "residual_add";
    case OpKind::branch_concat: return "branch_concat";
    case OpKind::global_avg_pool: return "global_avg_pool";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_error(const LayerOp& op, const std::string& what) {
  throw ConfigError("layer '" + op.name + "' (" + std::string(op_name(op.kind)) + "): " + what);
}

const ParamDecl& param_of(const LayerOp& op, std::span<const ParamDecl> params) {
  if (op.param < 0 || op.param >= static_cast<int>(params.size())) shape_error(op, "missing parameter");
  return params[static_cast<std::size_t>(op.param)];
}

int pooled_extent(int n, int kernel, int stride) { return (n - kernel) / stride + 1; }

}  // namespace

Shape infer_layer_shape(const LayerOp& op, std::span<const Shape> inputs,
                        std::span<const ParamDecl> params) {
  const auto expect_inputs = [&](std::size_t n) {
    if (inputs.size() != n) shape_error(op, "expects " + std::to_string(n) + " input(s)");
  };
  const auto expect_chw = [&](const Shape& s) {
    if (s.size() != 3) shape_error(op, "expects a C×H×W input, got " + shape_string(s));
  };

  switch (op.kind) {
    case OpKind::conv2d: {
      expect_inputs(1);
      const Shape& in = inputs[0];
      expect_chw(in);
      if (op.kernel < 1 || op.stride < 1 || op.pad < 0) shape_error(op, "bad kernel/stride/pad");
      const Shape want{op.out_channels, in[0], op.kernel, op.kernel};
      if (param_of(op, params).shape != want) {
        shape_error(op, "weight shape " + shape_string(param_of(op, params).shape) + ", expected " +
                            shape_string(want));
      }
      const int oh = (in[1] + 2 * op.pad - op.kernel) / op.stride + 1;
      const int ow = (in[2] + 2 * op.pad - op.kernel) / op.stride + 1;
      if (in[1] + 2 * op.pad < op.kernel || in[2] + 2 * op.pad < op.kernel) shape_error(op, "kernel larger than padded input");
      return {op.out_channels, oh, ow};
    }
    case OpKind::bias_add: {
      expect_inputs(1);
      const Shape& in = inputs[0];
      if (in.empty()) shape_error(op, "scalar input");
      if (param_of(op, params).shape != Shape{in[0]}) shape_error(op, "bias length mismatch");
      return in;
    }
    case OpKind::relu:
      expect_inputs(1);
      return inputs[0];
    case OpKind::avg_pool:
    case OpKind::max_pool: {
      expect_inputs(1);
      const Shape& in = inputs[0];
      expect_chw(in);
      if (op.kernel < 1 || op.stride < 1) shape_error(op, "bad kernel/stride");
      if (in[1] < op.kernel || in[2] < op.kernel) shape_error(op, "window larger than input");
      return {in[0], pooled_extent(in[1], op.kernel, op.stride), pooled_extent(in[2], op.kernel, op.stride)};
    }
    case OpKind::dense: {
      expect_inputs(1);
      const int n = static_cast<int>(shape_size(inputs[0]));
      if (param_of(op, params).shape != Shape{op.out_channels, n}) shape_error(op, "weight shape mismatch");
      return {op.out_channels};
    }
    case OpKind::residual_add:
      expect_inputs(2);
      if (inputs[0] != inputs[1]) {
        shape_error(op, "operands " + shape_string(inputs[0]) + " and " + shape_string(inputs[1]));
      }
      return inputs[0];
    case OpKind::branch_concat: {
      if (inputs.size() < 2) shape_error(op, "needs at least two branches");
      Shape out = inputs[0];
      expect_chw(out);
      for (std::size_t i = 1; i < inputs.size(); ++i) {
        expect_chw(inputs[i]);
        if (inputs[i][1] != out[1] || inputs[i][2] != out[2]) shape_error(op, "branch spatial sizes differ");
        out[0] += inputs[i][0];
      }
      return out;
    }
    case OpKind::global_avg_pool:
      expect_inputs(1);
      expect_chw(inputs[0]);
      return {inputs[0][0]};
  }
  shape_error(op, "unknown op");
}

void finalize_spec(ModelSpec& spec) {
  if (spec.input_shape.size() != 3) throw ConfigError("model '" + spec.name + "': input shape must be C×H×W");
  if (spec.layers.empty()) throw ConfigError("model '" + spec.name + "': no layers");
  spec.layer_shapes.clear();
  for (int i = 0; i < spec.layer_count(); ++i) {
    const LayerOp& op = spec.layers[static_cast<std::size_t>(i)];
    std::vector<Shape> in;
    for (const int j : op.inputs) {
      if (j != kNetworkInput && (j < 0 || j >= i)) shape_error(op, "input " + std::to_string(j) + " is not an earlier layer");
      in.push_back(j == kNetworkInput ? spec.input_shape : spec.layer_shapes[static_cast<std::size_t>(j)]);
    }
    spec.layer_shapes.push_back(infer_layer_shape(op, in, spec.params));
  }
  if (spec.layer_shapes.back() != Shape{spec.class_count}) {
    throw ConfigError("model '" + spec.name + "': final layer yields " + shape_string(spec.layer_shapes.back()) +
                      ", expected " + std::to_string(spec.class_count) + " logits");
  }
  validate_tap(spec, spec.default_tap);
}

void validate_tap(const ModelSpec& spec, TapPoint tap) {
  if (tap.layer_id < 0 || tap.layer_id >= spec.layer_count()) {
    throw ConfigError("model '" + spec.name + "': tap layer " + std::to_string(tap.layer_id) + " out of range");
  }
  if (spec.layer_shapes.size() != spec.layers.size()) throw ConfigError("model '" + spec.name + "': spec not finalized");
  if (spec.layer_shapes[static_cast<std::size_t>(tap.layer_id)].size() != 3) {
    throw ConfigError("model '" + spec.name + "': tap layer " + std::to_string(tap.layer_id) +
                      " is not a C×H×W feature map");
  }
}

const Shape& ModelSpec::feature_shape(TapPoint tap) const {
  validate_tap(*this, tap);
  return layer_shapes[static_cast<std::size_t>(tap.layer_id)];
}

std::vector<TapPoint> feature_map_layers(const ModelSpec& spec) {
  std::vector<TapPoint> out;
  for (int i = 0; i < spec.layer_count(); ++i) {
    if (spec.layer_shapes[static_cast<std::size_t>(i)].size() == 3) out.push_back({i});
  }
  return out;
}

Model init_model(std::shared_ptr<const ModelSpec> spec, Rng& rng) {
  Model model{spec, {}};
  for (const ParamDecl& p : spec->params) model.params.emplace_back(p.shape);
  for (const LayerOp& op : spec->layers) {
    if (op.kind != OpKind::conv2d && op.kind != OpKind::dense) continue;
    Tensor& w = model.params[static_cast<std::size_t>(op.param)];
    const std::size_t fan_in = w.size() / static_cast<std::size_t>(w.dim(0));
    const double gain = op.kind == OpKind::conv2d ? 2.0 : 1.0;
    const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
    for (float& v : w.values()) v = static_cast<float>(stddev * rng.normal());
  }
  // Convolutions reading the image get biases that cancel a mid-grey (0.5) input.
  for (std::size_t i = 0; i < spec->layers.size(); ++i) {
    const LayerOp& op = spec->layers[i];
    if (op.kind != OpKind::conv2d || op.inputs.front() != kNetworkInput || i + 1 >= spec->layers.size()) continue;
    const LayerOp& next = spec->layers[i + 1];
    if (next.kind != OpKind::bias_add || next.inputs.front() != static_cast<int>(i)) continue;
    const Tensor& w = model.params[static_cast<std::size_t>(op.param)];
    Tensor& b = model.params[static_cast<std::size_t>(next.param)];
    const std::size_t per = w.size() / static_cast<std::size_t>(w.dim(0));
    for (int oc = 0; oc < w.dim(0); ++oc) {
      double s = 0.0;
      for (std::size_t j = 0; j < per; ++j) s += w[static_cast<std::size_t>(oc) * per + j];
      b[static_cast<std::size_t>(oc)] = static_cast<float>(-0.5 * s);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------------------------
// Kernels. All loops run in a fixed order so results are bit-reproducible.

namespace {

struct ConvGeom {
  int C, H, W, OC, OH, OW, k, stride, pad;
};

ConvGeom conv_geom(const Shape& in, const Shape& out, const LayerOp& op) {
  return {in[0], in[1], in[2], out[0], out[1], out[2], op.kernel, op.stride, op.pad};
}

// Convolutions run as im2col followed by row-streaming products, so every inner loop walks a
// contiguous run of OH*OW values.
template <typename T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

template <typename T>
void im2col(const ConvGeom& g, const T* in, T* col) {
  const std::size_t P = static_cast<std::size_t>(g.OH) * g.OW;
  for (int ic = 0; ic < g.C; ++ic) {
    const T* ip = in + static_cast<std::size_t>(ic) * g.H * g.W;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + ((static_cast<std::size_t>(ic) * g.k + ky) * g.k + kx) * P;
        for (int oy = 0; oy < g.OH; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          T* dst = row + static_cast<std::size_t>(oy) * g.OW;
          if (iy < 0 || iy >= g.H) {
            std::fill(dst, dst + g.OW, T{0});
            continue;
          }
          const T* src = ip + static_cast<std::size_t>(iy) * g.W;
          for (int ox = 0; ox < g.OW; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            dst[ox] = (ix >= 0 && ix < g.W) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeom& g, const T* col, T* gin) {
  const std::size_t P = static_cast<std::size_t>(g.OH) * g.OW;
  for (int ic = 0; ic < g.C; ++ic) {
    T* ip = gin + static_cast<std::size_t>(ic) * g.H * g.W;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(ic) * g.k + ky) * g.k + kx) * P;
        for (int oy = 0; oy < g.OH; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.H) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.OW;
          T* dst = ip + static_cast<std::size_t>(iy) * g.W;
          for (int ox = 0; ox < g.OW; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <typename T>
void conv2d_forward(const ConvGeom& g, const T* in, const T* w, T* out) {
  const std::size_t P = static_cast<std::size_t>(g.OH) * g.OW;
  const std::size_t K = static_cast<std::size_t>(g.C) * g.k * g.k;
  const T* col = in;
  if (!is_pointwise(g)) {
    auto& buf = scratch<T>();
    buf.resize(K * P);
    im2col(g, in, buf.data());
    col = buf.data();
  }
  for (int oc = 0; oc < g.OC; ++oc) {
    T* __restrict o = out + static_cast<std::size_t>(oc) * P;
    const T* wr = w + static_cast<std::size_t>(oc) * K;
    std::fill(o, o + P, T{0});
    for (std::size_t kk = 0; kk < K; ++kk) {
      const T wv = wr[kk];
      const T* __restrict c = col + kk * P;
      for (std::size_t p = 0; p < P; ++p) o[p] += wv * c[p];
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeom& g, const T* gout, const T* w, T* gin) {
  const std::size_t P = static_cast<std::size_t>(g.OH) * g.OW;
  const std::size_t K = static_cast<std::size_t>(g.C) * g.k * g.k;
  auto& buf = scratch<T>();
  buf.assign(K * P, T{0});
  for (int oc = 0; oc < g.OC; ++oc) {
    const T* __restrict go = gout + static_cast<std::size_t>(oc) * P;
    const T* wr = w + static_cast<std::size_t>(oc) * K;
    for (std::size_t kk = 0; kk < K; ++kk) {
      const T wv = wr[kk];
      T* __restrict c = buf.data() + kk * P;
      for (std::size_t p = 0; p < P; ++p) c[p] += wv * go[p];
    }
  }
  if (is_pointwise(g)) {
    for (std::size_t i = 0; i < K * P; ++i) gin[i] += buf[i];
  } else {
    col2im_add(g, buf.data(), gin);
  }
}

// Eight interleaved partial sums; fixed order, so still deterministic.
template <typename T>
T dot_lanes(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) lane[l] += a[i + l] * b[i + l];
  }
  for (; i < n; ++i) lane[0] += a[i] * b[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

template <typename T>
void conv2d_backward_weight(const ConvGeom& g, const T* gout, const T* in, T* gw) {
  const std::size_t P = static_cast<std::size_t>(g.OH) * g.OW;
  const std::size_t K = static_cast<std::size_t>(g.C) * g.k * g.k;
  const T* col = in;
  std::vector<T> local;
  if (!is_pointwise(g)) {
    local.resize(K * P);
    im2col(g, in, local.data());
    col = local.data();
  }
  for (int oc = 0; oc < g.OC; ++oc) {
    const T* go = gout + static_cast<std::size_t>(oc) * P;
    T* wr = gw + static_cast<std::size_t>(oc) * K;
    for (std::size_t kk = 0; kk < K; ++kk) wr[kk] += dot_lanes(go, col + kk * P, P);
  }
}

template <typename T>
void pool_forward(const LayerOp& op, const BasicTensor<T>& in, BasicTensor<T>& out) {
  const int C = in.dim(0), OH = out.dim(1), OW = out.dim(2);
  const int k = op.kernel, s = op.stride;
  const bool is_max = op.kind == OpKind::max_pool;
  const T inv = T{1} / static_cast<T>(k * k);
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        T acc = is_max ? in.at(c, oy * s, ox * s) : T{0};
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) {
            const T v = in.at(c, oy * s + dy, ox * s + dx);
            if (is_max) {
              if (v > acc) acc = v;
            } else {
              acc += v;
            }
          }
        }
        out.at(c, oy, ox) = is_max ? acc : acc * inv;
      }
    }
  }
}

template <typename T>
void pool_backward(const LayerOp& op, const BasicTensor<T>& in, const BasicTensor<T>& gout, BasicTensor<T>& gin) {
  const int C = in.dim(0), OH = gout.dim(1), OW = gout.dim(2);
  const int k = op.kernel, s = op.stride;
  const T inv = T{1} / static_cast<T>(k * k);
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        const T g = gout.at(c, oy, ox);
        if (op.kind == OpKind::max_pool) {
          // first maximum in row-major window order receives the gradient
          int by = oy * s, bx = ox * s;
          T best = in.at(c, by, bx);
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
              const T v = in.at(c, oy * s + dy, ox * s + dx);
              if (v > best) {
                best = v;
                by = oy * s + dy;
                bx = ox * s + dx;
              }
            }
          }
          gin.at(c, by, bx) += g;
        } else {
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) gin.at(c, oy * s + dy, ox * s + dx) += g * inv;
          }
        }
      }
    }
  }
}

template <typename T>
const BasicTensor<T>& value_of(const ForwardCache<T>& cache, int node) {
  return node == kNetworkInput ? cache.input : cache.values[static_cast<std::size_t>(node)];
}

template <typename T>
void eval_layer(const BasicModel<T>& model, int i, std::span<const BasicTensor<T>* const> in, BasicTensor<T>& out) {
  const ModelSpec& spec = *model.spec;
  const LayerOp& op = spec.layers[static_cast<std::size_t>(i)];
  const Shape& out_shape = spec.layer_shapes[static_cast<std::size_t>(i)];
  if (out.shape() != out_shape) out = BasicTensor<T>(out_shape);
  const BasicTensor<T>& x = *in[0];

  switch (op.kind) {
    case OpKind::conv2d: {
      const auto& w = model.params[static_cast<std::size_t>(op.param)];
      conv2d_forward(conv_geom(x.shape(), out_shape, op), x.data(), w.data(), out.data());
      break;
    }
    case OpKind::bias_add: {
      const auto& b = model.params[static_cast<std::size_t>(op.param)];
      const std::size_t plane = x.size() / static_cast<std::size_t>(x.dim(0));
      for (int c = 0; c < x.dim(0); ++c) {
        const T bv = b[static_cast<std::size_t>(c)];
        const T* src = x.data() + c * plane;
        T* dst = out.data() + c * plane;
        for (std::size_t j = 0; j < plane; ++j) dst[j] = src[j] + bv;
      }
      break;
    }
    case OpKind::relu:
      for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] > T{0} ? x[j] : T{0};
      break;
    case OpKind::avg_pool:
    case OpKind::max_pool:
      pool_forward(op, x, out);
      break;
    case OpKind::dense: {
      const auto& w = model.params[static_cast<std::size_t>(op.param)];
      const std::size_t n = x.size();
      for (int o = 0; o < op.out_channels; ++o) {
        const T* row = w.data() + static_cast<std::size_t>(o) * n;
        T acc{0};
        for (std::size_t j = 0; j < n; ++j) acc += row[j] * x[j];
        out[static_cast<std::size_t>(o)] = acc;
      }
      break;
    }
    case OpKind::residual_add: {
      const BasicTensor<T>& y = *in[1];
      for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] + y[j];
      break;
    }
    case OpKind::branch_concat: {
      T* dst = out.data();
      for (const BasicTensor<T>* b : in) dst = std::copy(b->data(), b->data() + b->size(), dst);
      break;
    }
    case OpKind::global_avg_pool: {
      const std::size_t plane = x.size() / static_cast<std::size_t>(x.dim(0));
      const T inv = T{1} / static_cast<T>(plane);
      for (int c = 0; c < x.dim(0); ++c) {
        T acc{0};
        const T* src = x.data() + c * plane;
        for (std::size_t j = 0; j < plane; ++j) acc += src[j];
        out[static_cast<std::size_t>(c)] = acc * inv;
      }
      break;
    }
  }
}

template <typename T>
void eval_range(const BasicModel<T>& model, ForwardCache<T>& cache, int first) {
  const ModelSpec& spec = *model.spec;
  std::vector<const BasicTensor<T>*> in;
  for (int i = first; i < spec.layer_count(); ++i) {
    const LayerOp& op = spec.layers[static_cast<std::size_t>(i)];
    in.clear();
    for (const int j : op.inputs) in.push_back(&value_of(cache, j));
    eval_layer(model, i, std::span<const BasicTensor<T>* const>(in), cache.values[static_cast<std::size_t>(i)]);
  }
}

// Reverse sweep over layers [stop, last]. grads[i] holds d(scalar)/d(value_i); an empty tensor
// stands for zero. Contributions to layers below `stop` are dropped except for the network
// input, which is accumulated into *input_grad when provided.
template <typename T>
void backprop(const BasicModel<T>& model, const ForwardCache<T>& cache, std::vector<BasicTensor<T>>& grads, int stop,
              BasicTensor<T>* input_grad, std::vector<BasicTensor<T>>* param_grads) {
  const ModelSpec& spec = *model.spec;

  const auto sink = [&](int node) -> BasicTensor<T>* {
    if (node == kNetworkInput) {
      if (!input_grad) return nullptr;
      if (input_grad->shape() != cache.input.shape()) *input_grad = BasicTensor<T>(cache.input.shape());
      return input_grad;
    }
    if (node < stop) return nullptr;
    auto& g = grads[static_cast<std::size_t>(node)];
    if (g.empty()) g = BasicTensor<T>(spec.layer_shapes[static_cast<std::size_t>(node)]);
    return &g;
  };

  for (int i = spec.layer_count() - 1; i >= stop; --i) {
    const auto& gout = grads[static_cast<std::size_t>(i)];
    if (gout.empty()) continue;
    const LayerOp& op = spec.layers[static_cast<std::size_t>(i)];
    const BasicTensor<T>& x = value_of(cache, op.inputs[0]);

    switch (op.kind) {
      case OpKind::conv2d: {
        const auto& w = model.params[static_cast<std::size_t>(op.param)];
        const ConvGeom g = conv_geom(x.shape(), gout.shape(), op);
        if (param_grads) conv2d_backward_weight(g, gout.data(), x.data(), (*param_grads)[static_cast<std::size_t>(op.param)].data());
        if (BasicTensor<T>* gi = sink(op.inputs[0])) conv2d_backward_input(g, gout.data(), w.data(), gi->data());
        break;
      }
      case OpKind::bias_add: {
        if (param_grads) {
          auto& gb = (*param_grads)[static_cast<std::size_t>(op.param)];
          const std::size_t plane = gout.size() / static_cast<std::size_t>(gout.dim(0));
          for (int c = 0; c < gout.dim(0); ++c) {
            T acc{0};
            const T* src = gout.data() + c * plane;
            for (std::size_t j = 0; j < plane; ++j) acc += src[j];
            gb[static_cast<std::size_t>(c)] += acc;
          }
        }
        if (BasicTensor<T>* gi = sink(op.inputs[0])) axpy(*gi, T{1}, gout);
        break;
      }
      case OpKind::relu:
        if (BasicTensor<T>* gi = sink(op.inputs[0])) {
          for (std::size_t j = 0; j < x.size(); ++j) {
            if (x[j] > T{0}) (*gi)[j] += gout[j];
          }
        }
        break;
      case OpKind::avg_pool:
      case OpKind::max_pool:
        if (BasicTensor<T>* gi = sink(op.inputs[0])) pool_backward(op, x, gout, *gi);
        break;
      case OpKind::dense: {
        const auto& w = model.params[static_cast<std::size_t>(op.param)];
        const std::size_t n = x.size();
        if (param_grads) {
          auto& gw = (*param_grads)[static_cast<std::size_t>(op.param)];
          for (int o = 0; o < op.out_channels; ++o) {
            const T go = gout[static_cast<std::size_t>(o)];
            T* row = gw.data() + static_cast<std::size_t>(o) * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += go * x[j];
          }
        }
        if (BasicTensor<T>* gi = sink(op.inputs[0])) {
          for (int o = 0; o < op.out_channels; ++o) {
            const T go = gout[static_cast<std::size_t>(o)];
            const T* row = w.data() + static_cast<std::size_t>(o) * n;
            for (std::size_t j = 0; j < n; ++j) (*gi)[j] += go * row[j];
          }
        }
        break;
      }
      case OpKind::residual_add:
        for (const int j : op.inputs) {
          if (BasicTensor<T>* gi = sink(j)) axpy(*gi, T{1}, gout);
        }
        break;
      case OpKind::branch_concat: {
        const T* src = gout.data();
        for (const int j : op.inputs) {
          const std::size_t n = shape_size(j == kNetworkInput ? cache.input.shape() : spec.layer_shapes[static_cast<std::size_t>(j)]);
          if (BasicTensor<T>* gi = sink(j)) {
            for (std::size_t t = 0; t < n; ++t) (*gi)[t] += src[t];
          }
          src += n;
        }
        break;
      }
      case OpKind::global_avg_pool:
        if (BasicTensor<T>* gi = sink(op.inputs[0])) {
          const std::size_t plane = x.size() / static_cast<std::size_t>(x.dim(0));
          const T inv = T{1} / static_cast<T>(plane);
          for (int c = 0; c < x.dim(0); ++c) {
            const T g = gout[static_cast<std::size_t>(c)] * inv;
            T* dst = gi->data() + c * plane;
            for (std::size_t j = 0; j < plane; ++j) dst[j] += g;
          }
        }
        break;
    }
  }
}

template <typename T>
void check_input(const BasicModel<T>& model, const BasicTensor<T>& input) {
  if (input.shape() != model.spec->input_shape) {
    throw ConfigError("model '" + model.name() + "' expects input " + shape_string(model.spec->input_shape) +
                      ", got " + shape_string(input.shape()));
  }
}

template <typename T>
void check_label(const BasicModel<T>& model, int label) {
  if (label < 0 || label >= model.class_count()) {
    throw ConfigError("label " + std::to_string(label) + " outside [0, " + std::to_string(model.class_count()) + ")");
  }
}

template <typename T>
std::vector<BasicTensor<T>> seeded_grads(const BasicModel<T>& model, std::span<const T> logit_seed) {
  std::vector<BasicTensor<T>> grads(model.spec->layers.size());
  if (!logit_seed.empty()) {
    if (static_cast<int>(logit_seed.size()) != model.class_count()) throw ConfigError("logit seed length mismatch");
    grads.back() = BasicTensor<T>(Shape{model.class_count()}, std::vector<T>(logit_seed.begin(), logit_seed.end()));
  }
  return grads;
}

}  // namespace

template <typename T>
ForwardCache<T> run_forward(const BasicModel<T>& model, const BasicTensor<T>& input) {
  check_input(model, input);
  ForwardCache<T> cache{input, std::vector<BasicTensor<T>>(model.spec->layers.size())};
  eval_range(model, cache, 0);
  return cache;
}

template <typename T>
ForwardOutput<T> forward(const BasicModel<T>& model, const BasicTensor<T>& input, std::optional<TapPoint> tap) {
  if (tap) validate_tap(*model.spec, *tap);
  ForwardCache<T> cache = run_forward(model, input);
  ForwardOutput<T> out{cache.logits(), std::nullopt};
  if (tap) out.feature = cache.values[static_cast<std::size_t>(tap->layer_id)];
  return out;
}

template <typename T>
BasicTensor<T> logits_with_feature(const BasicModel<T>& model, const ForwardCache<T>& cache, TapPoint tap,
                                   const BasicTensor<T>& feature) {
  validate_tap(*model.spec, tap);
  ForwardCache<T> patched = cache;
  auto& slot = patched.values[static_cast<std::size_t>(tap.layer_id)];
  require_same_shape(slot, feature, "feature override");
  slot = feature;
  eval_range(model, patched, tap.layer_id + 1);
  return patched.logits();
}

template <typename T>
BasicTensor<T> input_gradient(const BasicModel<T>& model, const ForwardCache<T>& cache, const BackwardSeed<T>& seed) {
  auto grads = seeded_grads<T>(model, seed.logits);
  if (seed.tap) {
    validate_tap(*model.spec, *seed.tap);
    if (!seed.feature) throw ConfigError("feature seed missing for tap");
    auto& g = grads[static_cast<std::size_t>(seed.tap->layer_id)];
    const Shape& fshape = model.spec->layer_shapes[static_cast<std::size_t>(seed.tap->layer_id)];
    if (seed.feature->shape() != fshape) {
      throw ConfigError("feature direction shape " + shape_string(seed.feature->shape()) + " does not match tap shape " +
                        shape_string(fshape));
    }
    if (g.empty()) {
      g = *seed.feature;
    } else {
      axpy(g, T{1}, *seed.feature);
    }
  }
  BasicTensor<T> gin(cache.input.shape());
  backprop<T>(model, cache, grads, 0, &gin, nullptr);
  return gin;
}

template <typename T>
BasicTensor<T> feature_gradient(const BasicModel<T>& model, const ForwardCache<T>& cache, TapPoint tap,
                                std::span<const T> logit_seed) {
  validate_tap(*model.spec, tap);
  auto grads = seeded_grads<T>(model, logit_seed);
  backprop<T>(model, cache, grads, tap.layer_id, nullptr, nullptr);
  auto& g = grads[static_cast<std::size_t>(tap.layer_id)];
  if (g.empty()) g = BasicTensor<T>(model.spec->layer_shapes[static_cast<std::size_t>(tap.layer_id)]);
  return std::move(g);
}

template <typename T>
void accumulate_param_gradients(const BasicModel<T>& model, const ForwardCache<T>& cache,
                                std::span<const T> logit_seed, std::vector<BasicTensor<T>>& grads) {
  if (grads.size() != model.params.size()) throw ConfigError("parameter gradient list mismatch");
  auto node_grads = seeded_grads<T>(model, logit_seed);
  backprop<T>(model, cache, node_grads, 0, nullptr, &grads);
}

template <typename T>
std::vector<double> softmax(std::span<const T> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (const T v : logits) m = std::max(m, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

template <typename T>
double cross_entropy(std::span<const T> logits, int label) {
  double m = -std::numeric_limits<double>::infinity();
  for (const T v : logits) m = std::max(m, static_cast<double>(v));
  double z = 0.0;
  for (const T v : logits) z += std::exp(static_cast<double>(v) - m);
  return std::log(z) + m - static_cast<double>(logits[static_cast<std::size_t>(label)]);
}

template <typename T>
int argmax(std::span<const T> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

template <typename T>
ScalarGradient<T> grad_input_of_scalar(const BasicModel<T>& model, const BasicTensor<T>& input,
                                       const ScalarSpec<T>& scalar) {
  if (const auto* fp = std::get_if<FeatureProjection<T>>(&scalar)) validate_tap(*model.spec, fp->tap);
  const ForwardCache<T> cache = run_forward(model, input);
  const auto logits = cache.logits().values();
  ScalarGradient<T> out;
  BackwardSeed<T> seed;

  if (const auto* ce = std::get_if<CrossEntropyAt>(&scalar)) {
    check_label(model, ce->label);
    out.value = cross_entropy(logits, ce->label);
    const auto p = softmax(logits);
    seed.logits.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      seed.logits[i] = static_cast<T>(p[i] - (static_cast<int>(i) == ce->label ? 1.0 : 0.0));
    }
  } else if (const auto* lg = std::get_if<LogitAt>(&scalar)) {
    check_label(model, lg->label);
    out.value = static_cast<double>(logits[static_cast<std::size_t>(lg->label)]);
    seed.logits.assign(logits.size(), T{0});
    seed.logits[static_cast<std::size_t>(lg->label)] = T{1};
  } else {
    const auto& fp = std::get<FeatureProjection<T>>(scalar);
    const auto& f = cache.values[static_cast<std::size_t>(fp.tap.layer_id)];
    if (fp.direction.shape() != f.shape()) {
      throw ConfigError("feature direction shape " + shape_string(fp.direction.shape()) + " does not match tap shape " +
                        shape_string(f.shape()));
    }
    out.value = dot(fp.direction, f);
    seed.tap = fp.tap;
    seed.feature = &fp.direction;
  }
  out.gradient = input_gradient(model, cache, seed);
  return out;
}

template <typename T>
BasicTensor<T> grad_feature_of_logit(const BasicModel<T>& model, const BasicTensor<T>& input, TapPoint tap, int label) {
  validate_tap(*model.spec, tap);
  check_label(model, label);
  const ForwardCache<T> cache = run_forward(model, input);
  std::vector<T> seed(static_cast<std::size_t>(model.class_count()), T{0});
  seed[static_cast<std::size_t>(label)] = T{1};
  return feature_gradient(model, cache, tap, std::span<const T>(seed));
}

int predict(const Model& model, const Image& image) {
  const ForwardCache<float> cache = run_forward(model, image);
  return argmax(cache.logits().values());
}

#define FEATFT_INSTANTIATE(T)                                                                                      \
  template ForwardCache<T> run_forward(const BasicModel<T>&, const BasicTensor<T>&);                               \
  template ForwardOutput<T> forward(const BasicModel<T>&, const BasicTensor<T>&, std::optional<TapPoint>);         \
  template BasicTensor<T> logits_with_feature(const BasicModel<T>&, const ForwardCache<T>&, TapPoint,              \
                                              const BasicTensor<T>&);                                              \
  template BasicTensor<T> input_gradient(const BasicModel<T>&, const ForwardCache<T>&, const BackwardSeed<T>&);    \
  template BasicTensor<T> feature_gradient(const BasicModel<T>&, const ForwardCache<T>&, TapPoint,                 \
                                           std::span<const T>);                                                    \
  template void accumulate_param_gradients(const BasicModel<T>&, const ForwardCache<T>&, std::span<const T>,       \
                                           std::vector<BasicTensor<T>>&);                                          \
  template std::vector<double> softmax(std::span<const T>);                                                        \
  template double cross_entropy(std::span<const T>, int);                                                          \
  template int argmax(std::span<const T>);                                                                         \
  template ScalarGradient<T> grad_input_of_scalar(const BasicModel<T>&, const BasicTensor<T>&,                     \
                                                  const ScalarSpec<T>&);                                           \
  template BasicTensor<T> grad_feature_of_logit(const BasicModel<T>&, const BasicTensor<T>&, TapPoint, int);

FEATFT_INSTANTIATE(float)
FEATFT_INSTANTIATE(double)
#undef FEATFT_INSTANTIATE

}  // namespace featft
