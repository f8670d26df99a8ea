#include "featft/image_ops.hpp"

#include <algorithm>
#include <cmath>

namespace featft {

namespace {

struct Tap1d {
  int i0, i1;
  double w1;
};

std::vector<Tap1d> interpolation_taps(int in, int out) {
  std::vector<Tap1d> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    taps[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in - 1), src - i0};
  }
  return taps;
}

void require_image(const Image& image, const char* what) {
  if (image.rank() != 3) throw ConfigError(std::string(what) + ": expected a C×H×W image, got " + shape_string(image.shape()));
}

}  // namespace

Image resize_bilinear(const Image& image, int out_h, int out_w) {
  require_image(image, "resize_bilinear");
  const int c_n = image.dim(0), in_h = image.dim(1), in_w = image.dim(2);
  const auto ty = interpolation_taps(in_h, out_h);
  const auto tx = interpolation_taps(in_w, out_w);
  Image out({c_n, out_h, out_w});
  for (int c = 0; c < c_n; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const Tap1d& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const Tap1d& b = tx[static_cast<std::size_t>(x)];
        const double top = (1.0 - b.w1) * image.at(c, a.i0, b.i0) + b.w1 * image.at(c, a.i0, b.i1);
        const double bottom = (1.0 - b.w1) * image.at(c, a.i1, b.i0) + b.w1 * image.at(c, a.i1, b.i1);
        out.at(c, y, x) = static_cast<float>((1.0 - a.w1) * top + a.w1 * bottom);
      }
    }
  }
  return out;
}

Image resize_bilinear_adjoint(const Image& grad, int in_h, int in_w) {
  require_image(grad, "resize_bilinear_adjoint");
  const int c_n = grad.dim(0), out_h = grad.dim(1), out_w = grad.dim(2);
  const auto ty = interpolation_taps(in_h, out_h);
  const auto tx = interpolation_taps(in_w, out_w);
  std::vector<double> acc(static_cast<std::size_t>(c_n) * in_h * in_w, 0.0);
  auto cell = [&](int c, int y, int x) -> double& {
    return acc[(static_cast<std::size_t>(c) * in_h + y) * in_w + x];
  };
  for (int c = 0; c < c_n; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const Tap1d& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const Tap1d& b = tx[static_cast<std::size_t>(x)];
        const double g = grad.at(c, y, x);
        cell(c, a.i0, b.i0) += (1.0 - a.w1) * (1.0 - b.w1) * g;
        cell(c, a.i0, b.i1) += (1.0 - a.w1) * b.w1 * g;
        cell(c, a.i1, b.i0) += a.w1 * (1.0 - b.w1) * g;
        cell(c, a.i1, b.i1) += a.w1 * b.w1 * g;
      }
    }
  }
  return Image({c_n, in_h, in_w}, std::vector<float>(acc.begin(), acc.end()));
}

DiDraw draw_di(int size, double di_prob, double resize_range, Rng& rng) {
  DiDraw d;
  d.size = size;
  d.canvas = std::max(size, static_cast<int>(std::floor(size * resize_range)));
  const bool fire = rng.bernoulli(di_prob);
  d.resized = rng.uniform_int(size, d.canvas);
  d.off_y = rng.uniform_int(0, d.canvas - d.resized);
  d.off_x = rng.uniform_int(0, d.canvas - d.resized);
  d.applied = fire;
  return d;
}

Image apply_di(const Image& image, const DiDraw& draw) {
  if (!draw.applied) return image;
  const Image up = resize_bilinear(image, draw.resized, draw.resized);
  Image canvas({image.dim(0), draw.canvas, draw.canvas});
  for (int c = 0; c < image.dim(0); ++c) {
    for (int y = 0; y < draw.resized; ++y) {
      for (int x = 0; x < draw.resized; ++x) canvas.at(c, y + draw.off_y, x + draw.off_x) = up.at(c, y, x);
    }
  }
  return resize_bilinear(canvas, draw.size, draw.size);
}

Image di_adjoint(const Image& grad, const DiDraw& draw) {
  if (!draw.applied) return grad;
  const Image g_canvas = resize_bilinear_adjoint(grad, draw.canvas, draw.canvas);
  Image g_up({grad.dim(0), draw.resized, draw.resized});
  for (int c = 0; c < grad.dim(0); ++c) {
    for (int y = 0; y < draw.resized; ++y) {
      for (int x = 0; x < draw.resized; ++x) g_up.at(c, y, x) = g_canvas.at(c, y + draw.off_y, x + draw.off_x);
    }
  }
  return resize_bilinear_adjoint(g_up, draw.size, draw.size);
}

Image di_transform(const Image& image, double di_prob, double resize_range, Rng& rng) {
  require_image(image, "di_transform");
  return apply_di(image, draw_di(image.dim(1), di_prob, resize_range, rng));
}

std::vector<double> ti_kernel(int radius) {
  if (radius < 0) throw ConfigError("ti radius must be non-negative");
  const int side = 2 * radius + 1;
  std::vector<double> k(static_cast<std::size_t>(side) * side, 1.0);
  if (radius == 0) return k;
  const double sigma = radius / std::sqrt(3.0);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    for (int j = -radius; j <= radius; ++j) {
      const double v = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
      k[static_cast<std::size_t>((i + radius) * side + j + radius)] = v;
      sum += v;
    }
  }
  for (double& v : k) v /= sum;
  return k;
}

Image ti_smooth(const Image& grad, int radius) {
  require_image(grad, "ti_smooth");
  if (radius == 0) return grad;
  const auto k = ti_kernel(radius);
  const int side = 2 * radius + 1;
  const int c_n = grad.dim(0), h = grad.dim(1), w = grad.dim(2);
  Image out(grad.shape());
  for (int c = 0; c < c_n; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = y + i;
          if (yy < 0 || yy >= h) continue;
          for (int j = -radius; j <= radius; ++j) {
            const int xx = x + j;
            if (xx < 0 || xx >= w) continue;
            s += k[static_cast<std::size_t>((i + radius) * side + j + radius)] * grad.at(c, yy, xx);
          }
        }
        out.at(c, y, x) = static_cast<float>(s);
      }
    }
  }
  return out;
}

}  // namespace featft
