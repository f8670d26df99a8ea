#pragma once

#include <memory>

#include "featft/network.hpp"
#include "featft/rng.hpp"
#include "featft/zoo.hpp"

namespace featft::test {

inline Image random_image(const Shape& shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Image img(shape);
  for (auto& v : img.storage()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
  return img;
}

inline Tensor64 random_tensor64(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor64 t(shape);
  for (auto& v : t.storage()) v = rng.normal();
  return t;
}

/// Small random weights everywhere, biases included, so no unit is dead by construction.
template <typename T = float>
BasicModel<T> random_model(std::shared_ptr<const ModelSpec> spec, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  BasicModel<T> m{spec, {}};
  for (const auto& p : spec->params) {
    BasicTensor<T> t(p.shape);
    for (auto& v : t.storage()) v = static_cast<T>(scale * rng.normal());
    m.params.push_back(std::move(t));
  }
  return m;
}

inline std::shared_ptr<const ModelSpec> share(ModelSpec spec) {
  return std::make_shared<const ModelSpec>(std::move(spec));
}

/// conv3(4) → relu → maxpool → conv3(6) → relu [tap] → avgpool → dense(5).
inline ModelSpec tiny_spec(int size = 8, int classes = 5) {
  SpecBuilder b("tiny", {3, size, size}, classes);
  int x = b.conv(kNetworkInput, 4, 3, "c1");
  x = b.max_pool(x);
  const int tap = b.conv(x, 6, 3, "c2");
  x = b.avg_pool(tap);
  b.dense(x, classes, "fc");
  return b.finish({tap});
}

}  // namespace featft::test
