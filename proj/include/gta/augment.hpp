#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gta/rng.hpp"
#include "gta/tensor.hpp"

namespace gta {

// Half-open pixel box, clipped to the image.
struct CutBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long long area() const {
    return static_cast<long long>(width()) * height();
  }
  bool is_empty() const { return x0 >= x1 || y0 >= y1; }
};

struct MixedLabel {
  int label_a = 0;
  int label_b = 0;
  double coefficient = 0.0;  // weight of label_b, in [0, 1]
};

/// CutMix-style box: side lengths sqrt(fraction) * (W, H), center uniform
/// over the positions where the box fits, so the realized area matches the
/// requested fraction up to pixel rounding. Fraction one yields the full
/// image, zero an empty box.
inline CutBox sample_cut_box(Rng& rng, int height, int width,
                             double area_fraction) {
  if (!(area_fraction >= 0.0 && area_fraction <= 1.0))
    throw config_error("sample_cut_box: area fraction must lie in [0,1]");
  if (area_fraction >= 1.0) return {0, 0, width, height};
  const double side = std::sqrt(area_fraction);
  const double bw = side * width;
  const double bh = side * height;
  const double cx = rng.uniform(bw / 2.0, width - bw / 2.0);
  const double cy = rng.uniform(bh / 2.0, height - bh / 2.0);
  CutBox box;
  box.x0 = static_cast<int>(std::clamp<long long>(
      std::llround(cx - bw / 2.0), 0, width));
  box.x1 = static_cast<int>(std::clamp<long long>(
      std::llround(cx + bw / 2.0), 0, width));
  box.y0 = static_cast<int>(std::clamp<long long>(
      std::llround(cy - bh / 2.0), 0, height));
  box.y1 = static_cast<int>(std::clamp<long long>(
      std::llround(cy + bh / 2.0), 0, height));
  return box;
}

/// Pixels inside the box come from b, everything else from a.
inline Tensor mix_images(const Tensor& a, const Tensor& b, const CutBox& box) {
  if (a.shape() != b.shape())
    throw config_error("mix_images: shape mismatch " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
  if (a.shape().size() != 3 || a.shape()[0] != 3)
    throw config_error("mix_images: expects [3,H,W] images, got " +
                       shape_str(a.shape()));
  const int h = a.shape()[1];
  const int w = a.shape()[2];
  std::vector<double> out = a.data();
  const double* src = b.data().data();
  for (int c = 0; c < 3; ++c)
    for (int y = std::max(0, box.y0); y < std::min(h, box.y1); ++y)
      for (int x = std::max(0, box.x0); x < std::min(w, box.x1); ++x) {
        const std::size_t i =
            (static_cast<std::size_t>(c) * h + y) * w + x;
        out[i] = src[i];
      }
  return Tensor(a.shape(), std::move(out));
}

/// Patch marked when the majority of its pixels lie inside the box; an exact
/// half counts as inside.
inline std::vector<std::uint8_t> box_patch_mask(const CutBox& box, int height,
                                                int width, int patch) {
  const int gy = height / patch;
  const int gx = width / patch;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(gy) * gx, 0);
  for (int py = 0; py < gy; ++py)
    for (int px = 0; px < gx; ++px) {
      const int x_lo = std::max(box.x0, px * patch);
      const int x_hi = std::min(box.x1, (px + 1) * patch);
      const int y_lo = std::max(box.y0, py * patch);
      const int y_hi = std::min(box.y1, (py + 1) * patch);
      const int inside = std::max(0, x_hi - x_lo) * std::max(0, y_hi - y_lo);
      if (2 * inside >= patch * patch)
        mask[static_cast<std::size_t>(py) * gx + px] = 1;
    }
  return mask;
}

/// Label-mixing coefficient: the model's attention mass on the inserted
/// region. `cls_attention` is the post-softmax, head-averaged [cls] row over
/// the N patch tokens.
inline double transmix_coefficient(const std::vector<double>& cls_attention,
                                   const std::vector<std::uint8_t>& mask) {
  if (cls_attention.size() != mask.size())
    throw config_error("transmix_coefficient: attention/mask size mismatch");
  double total = 0.0;
  for (double v : cls_attention) {
    if (v < 0.0)
      throw config_error("transmix_coefficient: attention must be nonnegative");
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-6)
    throw config_error(
        "transmix_coefficient: attention must sum to 1 over the patch tokens");
  double mass = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) mass += cls_attention[i];
  return std::min(1.0, std::max(0.0, mass));
}

inline Tensor hflip(const Tensor& image) {
  const int h = image.shape()[1];
  const int w = image.shape()[2];
  std::vector<double> out(image.numel());
  const double* src = image.data().data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<std::size_t>(c) * h + y) * w + x] =
            src[(static_cast<std::size_t>(c) * h + y) * w + (w - 1 - x)];
  return Tensor(image.shape(), std::move(out));
}

inline constexpr int augment_pad = 4;

/// Deterministic core of basic_augment: optional flip, then a crop of the
/// zero-padded image at offset (oy, ox) in [0, 2*pad].
inline Tensor augment_apply(const Tensor& image, bool flip, int oy, int ox) {
  if (image.shape().size() != 3 || image.shape()[0] != 3)
    throw config_error("augment_apply: expects [3,H,W] images, got " +
                       shape_str(image.shape()));
  const Tensor base = flip ? hflip(image) : image;
  const int h = image.shape()[1];
  const int w = image.shape()[2];
  std::vector<double> out(image.numel(), 0.0);
  const double* src = base.data().data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y) {
      const int sy = y + oy - augment_pad;
      if (sy < 0 || sy >= h) continue;
      for (int x = 0; x < w; ++x) {
        const int sx = x + ox - augment_pad;
        if (sx < 0 || sx >= w) continue;
        out[(static_cast<std::size_t>(c) * h + y) * w + x] =
            src[(static_cast<std::size_t>(c) * h + sy) * w + sx];
      }
    }
  return Tensor(image.shape(), std::move(out));
}

/// Horizontal flip with probability one half, then pad-4 random crop.
inline Tensor basic_augment(const Tensor& image, Rng& rng) {
  const bool flip = rng.bernoulli(0.5);
  const int oy = static_cast<int>(rng.uniform_index(2 * augment_pad + 1));
  const int ox = static_cast<int>(rng.uniform_index(2 * augment_pad + 1));
  return augment_apply(image, flip, oy, ox);
}

}  // namespace gta
