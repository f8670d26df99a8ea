#include "featft/tensor.hpp"

#include <cmath>

namespace featft {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (const int d : shape) {
    if (d < 0) throw ConfigError("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
double l1_norm(const BasicTensor<T>& a) {
  double s = 0.0;
  for (const T v : a.values()) s += std::abs(static_cast<double>(v));
  return s;
}

template <typename T>
double l2_norm(const BasicTensor<T>& a) {
  double s = 0.0;
  for (const T v : a.values()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template <typename T>
double max_abs(const BasicTensor<T>& a) {
  double m = 0.0;
  for (const T v : a.values()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
bool all_finite(const BasicTensor<T>& a) {
  for (const T v : a.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void axpy(BasicTensor<T>& a, T scale, const BasicTensor<T>& b) {
  require_same_shape(a, b, "axpy");
  T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += scale * pb[i];
}

template <typename T>
BasicTensor<T> sign(const BasicTensor<T>& a) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<T>((a[i] > T{0}) - (a[i] < T{0}));
  return out;
}

#define FEATFT_INSTANTIATE(T)                                          \
  template double dot(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template double l1_norm(const BasicTensor<T>&);                      \
  template double l2_norm(const BasicTensor<T>&);                      \
  template double max_abs(const BasicTensor<T>&);                      \
  template bool all_finite(const BasicTensor<T>&);                     \
  template void axpy(BasicTensor<T>&, T, const BasicTensor<T>&);       \
  template BasicTensor<T> sign(const BasicTensor<T>&);

FEATFT_INSTANTIATE(float)
FEATFT_INSTANTIATE(double)
#undef FEATFT_INSTANTIATE

}  // namespace featft
