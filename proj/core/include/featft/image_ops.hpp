#pragma once

#include <vector>

#include "featft/rng.hpp"
#include "featft/tensor.hpp"

namespace featft {

/// Bilinear resampling with half-pixel centres; source coordinates are clamped at the border.
Image resize_bilinear(const Image& image, int out_h, int out_w);

/// Transpose of resize_bilinear: maps a gradient on the resized grid back to the source grid.
Image resize_bilinear_adjoint(const Image& grad, int in_h, int in_w);

/// One draw of the diverse-inputs transform. When applied, the image is enlarged to
/// `resized`, placed at (off_y, off_x) on a zero canvas of side `canvas`, and the canvas is
/// resampled back to the input size.
struct DiDraw {
  bool applied = false;
  int size = 0;
  int resized = 0;
  int canvas = 0;
  int off_y = 0;
  int off_x = 0;
};

/// Consumes the same number of draws whether or not the transform fires.
DiDraw draw_di(int size, double di_prob, double resize_range, Rng& rng);

Image apply_di(const Image& image, const DiDraw& draw);
Image di_adjoint(const Image& grad, const DiDraw& draw);

Image di_transform(const Image& image, double di_prob, double resize_range, Rng& rng);

/// Normalized (2r+1)×(2r+1) Gaussian, σ = r/√3, row-major.
std::vector<double> ti_kernel(int radius);

/// Channel-wise same-size convolution with ti_kernel, zero padded. Radius 0 is the identity.
Image ti_smooth(const Image& grad, int radius);

}  // namespace featft
