#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gta/data.hpp"
#include "gta/vit.hpp"

namespace gta {

enum class MapMode { final_block, all_blocks_max };

inline std::string to_string(MapMode m) {
  return m == MapMode::final_block ? "final-block" : "all-blocks-max";
}

inline MapMode map_mode_from_string(const std::string& s) {
  if (s == "final-block") return MapMode::final_block;
  if (s == "all-blocks-max") return MapMode::all_blocks_max;
  throw config_error("unknown map mode '" + s +
                     "' (expected final-block|all-blocks-max)");
}

/// Fraction of samples whose argmax class logit equals the label. Ties break
/// toward the lowest class index.
inline double accuracy(const ViTModel& model, const Dataset& dataset) {
  if (dataset.samples.empty()) throw config_error("accuracy: empty dataset");
  std::size_t correct = 0;
  for (const Sample& s : dataset.samples) {
    const Tensor logits = model.forward(s.image, false).class_logits;
    const std::vector<double>& v = logits.data();
    std::size_t best = 0;
    for (std::size_t c = 1; c < v.size(); ++c)
      if (v[c] > v[best]) best = c;
    if (static_cast<int>(best) == s.label) ++correct;
  }
  return static_cast<double>(correct) /
         static_cast<double>(dataset.samples.size());
}

namespace detail {

/// Softmax of one head's [cls] row restricted to the N patch entries.
inline std::vector<double> head_patch_softmax(const Tensor& logit_matrix) {
  const int side = logit_matrix.rows();
  const int n = side - 1;
  const double* row = logit_matrix.data().data();  // row 0
  double mx = row[1];
  for (int j = 2; j <= n; ++j) mx = std::max(mx, row[j]);
  std::vector<double> out(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    out[static_cast<std::size_t>(j)] = std::exp(row[j + 1] - mx);
    sum += out[static_cast<std::size_t>(j)];
  }
  for (double& v : out) v /= sum;
  return out;
}

}  // namespace detail

/// Head-averaged post-softmax [cls] attention over the N patch tokens of one
/// block (sums to one). Used for TransMix coefficients and attention-mass
/// metrics.
inline std::vector<double> cls_patch_attention(const AttentionTrace& trace,
                                               int block) {
  if (block < 0 || block >= trace.depth)
    throw config_error("cls_patch_attention: block index out of range");
  const std::size_t n = static_cast<std::size_t>(trace.tokens) - 1;
  std::vector<double> avg(n, 0.0);
  for (int l = 0; l < trace.heads; ++l) {
    const std::vector<double> head =
        detail::head_patch_softmax(trace.logit(block, l));
    for (std::size_t j = 0; j < n; ++j) avg[j] += head[j];
  }
  for (double& v : avg) v /= trace.heads;
  return avg;
}

// Per-pixel attention map upsampled from the patch grid. Patch values are
// per-head softmaxed [cls] rows combined by elementwise max (and max over
// blocks in all-blocks-max mode), so they lie in [0, 1].
struct AttentionMap {
  int grid = 0;
  int image_size = 0;
  std::vector<double> patch_values;  // grid*grid
  std::vector<double> pixels;        // image_size*image_size
  std::string source;
  std::string normalization = "per-head-softmax-over-patches";
};

inline AttentionMap attention_map(const AttentionTrace& trace,
                                  const ViTConfig& config, MapMode mode) {
  if (trace.tokens != config.tokens())
    throw config_error("attention_map: trace does not match config");
  const std::size_t n = static_cast<std::size_t>(trace.tokens) - 1;
  std::vector<double> cells(n, 0.0);
  const int first_block =
      mode == MapMode::final_block ? trace.depth - 1 : 0;
  for (int m = first_block; m < trace.depth; ++m)
    for (int l = 0; l < trace.heads; ++l) {
      const std::vector<double> head =
          detail::head_patch_softmax(trace.logit(m, l));
      for (std::size_t j = 0; j < n; ++j)
        cells[j] = std::max(cells[j], head[j]);
    }
  AttentionMap map;
  map.grid = config.patches_per_side();
  map.image_size = config.image_size;
  map.patch_values = std::move(cells);
  map.source = to_string(mode);
  map.pixels.resize(static_cast<std::size_t>(config.image_size) *
                    config.image_size);
  const int p = config.patch_size;
  for (int y = 0; y < config.image_size; ++y)
    for (int x = 0; x < config.image_size; ++x)
      map.pixels[static_cast<std::size_t>(y) * config.image_size + x] =
          map.patch_values[static_cast<std::size_t>(y / p) * map.grid + x / p];
  return map;
}

/// Keep cells in descending value order until their renormalized mass
/// reaches `mass_fraction`; ties at the cut break toward lower row-major
/// index. Zero-valued cells are never kept.
inline std::vector<std::uint8_t> threshold_mask(
    const std::vector<double>& cells, double mass_fraction) {
  if (!(mass_fraction > 0.0 && mass_fraction <= 1.0))
    throw config_error("threshold_mask: mass fraction must lie in (0,1]");
  double total = 0.0;
  for (double v : cells) {
    if (v < 0.0) throw config_error("threshold_mask: negative cell value");
    total += v;
  }
  std::vector<std::uint8_t> keep(cells.size(), 0);
  if (total <= 0.0) return keep;
  std::vector<std::size_t> order(cells.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&cells](std::size_t a, std::size_t b) {
                     return cells[a] > cells[b];
                   });
  double accum = 0.0;
  for (std::size_t idx : order) {
    if (accum >= mass_fraction || cells[idx] <= 0.0) break;
    keep[idx] = 1;
    accum += cells[idx] / total;
  }
  return keep;
}

/// |pred intersect truth| / |pred union truth|; zero for an empty prediction.
inline double jaccard(const std::vector<std::uint8_t>& pred,
                      const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size())
    throw config_error("jaccard: mask sizes differ");
  std::size_t inter = 0, uni = 0, truth_count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    inter += p && t;
    uni += p || t;
    truth_count += t;
  }
  if (truth_count == 0) throw config_error("jaccard: empty truth mask");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Pixel mask downsampled to the patch grid: a patch is foreground when at
/// least half of its pixels are.
inline std::vector<std::uint8_t> mask_to_patch_grid(
    const std::vector<std::uint8_t>& pixel_mask, int image_size, int patch) {
  const int grid = image_size / patch;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(grid) * grid, 0);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      int count = 0;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          count += pixel_mask[static_cast<std::size_t>(gy * patch + py) *
                                  image_size +
                              gx * patch + px] != 0;
      if (2 * count >= patch * patch)
        out[static_cast<std::size_t>(gy) * grid + gx] = 1;
    }
  return out;
}

struct LogitDistanceStats {
  std::vector<double> per_head;  // depth*heads, row-major by block
  double mean = 0.0;
  double max = 0.0;
};

/// Per-(head, block) L2 distance between source and target [cls] logit rows
/// (self-logit excluded), with aggregates.
inline LogitDistanceStats logit_distance_stats(const AttentionTrace& src,
                                               const AttentionTrace& tgt) {
  require_compatible(src, tgt);
  LogitDistanceStats stats;
  stats.per_head.reserve(src.logits.size());
  for (std::size_t i = 0; i < src.logits.size(); ++i) {
    const double* a = src.logits[i].data().data();
    const double* b = tgt.logits[i].data().data();
    double sq = 0.0;
    for (int j = 1; j < src.tokens; ++j) {
      const double d = a[j] - b[j];
      sq += d * d;
    }
    const double dist = std::sqrt(sq);
    stats.per_head.push_back(dist);
    stats.mean += dist;
    stats.max = std::max(stats.max, dist);
  }
  stats.mean /= static_cast<double>(stats.per_head.size());
  return stats;
}

/// Red overlay: the red channel rises toward full intensity with the map,
/// green and blue dim by up to half. A zero map leaves the grayscale image
/// untouched; the map's maximum pixel saturates red.
inline void emit_overlay(const Tensor& image, const std::vector<double>& map,
                         const std::string& path) {
  const int h = image.shape()[1];
  const int w = image.shape()[2];
  if (map.size() != static_cast<std::size_t>(h) * w)
    throw config_error("emit_overlay: map size does not match image");
  double peak = 0.0;
  for (double v : map) peak = std::max(peak, v);
  const double* d = image.data().data();
  std::vector<double> out(image.numel());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t pix = static_cast<std::size_t>(y) * w + x;
      const double gray =
          (d[pix] + d[static_cast<std::size_t>(h) * w + pix] +
           d[2 * static_cast<std::size_t>(h) * w + pix]) /
          3.0;
      const double m = peak > 0.0 ? map[pix] / peak : 0.0;
      out[pix] = gray + (1.0 - gray) * m;
      out[static_cast<std::size_t>(h) * w + pix] = gray * (1.0 - 0.5 * m);
      out[2 * static_cast<std::size_t>(h) * w + pix] = gray * (1.0 - 0.5 * m);
    }
  write_ppm(Tensor({3, h, w}, std::move(out)), path);
}

// Aggregate quality metrics for one model on one dataset.
struct EvalRecord {
  double accuracy = 0.0;
  std::optional<double> mean_jaccard;        // patch-grid, vs ground truth
  std::optional<double> mean_fg_attention;   // head-averaged mass on truth
  std::optional<double> mean_logit_distance; // vs source, when provided
  double mass_fraction = 0.6;
  MapMode map_mode = MapMode::final_block;
  int samples_used = 0;
};

struct EvalOptions {
  double mass_fraction = 0.6;
  MapMode map_mode = MapMode::final_block;
  int max_samples = 0;  // 0 = whole dataset
  const ViTModel* source = nullptr;
};

inline EvalRecord evaluate_model(const ViTModel& model, const Dataset& dataset,
                                 const EvalOptions& options) {
  if (dataset.samples.empty())
    throw config_error("evaluate_model: empty dataset");
  const std::size_t limit =
      options.max_samples > 0
          ? std::min<std::size_t>(dataset.samples.size(),
                                  static_cast<std::size_t>(options.max_samples))
          : dataset.samples.size();
  const ViTConfig& cfg = model.config();
  std::size_t correct = 0;
  double jaccard_sum = 0.0, fg_sum = 0.0, dist_sum = 0.0;
  std::size_t jaccard_n = 0, fg_n = 0, dist_n = 0;
  for (std::size_t i = 0; i < limit; ++i) {
    const Sample& s = dataset.samples[i];
    const ForwardResult fr = model.forward(s.image, true);
    const std::vector<double>& v = fr.class_logits.data();
    std::size_t best = 0;
    for (std::size_t c = 1; c < v.size(); ++c)
      if (v[c] > v[best]) best = c;
    if (static_cast<int>(best) == s.label) ++correct;

    if (s.has_mask()) {
      const std::vector<std::uint8_t> truth =
          mask_to_patch_grid(s.mask, cfg.image_size, cfg.patch_size);
      bool nonempty = false;
      for (auto b : truth) nonempty |= b != 0;
      if (nonempty) {
        const AttentionMap map =
            attention_map(*fr.trace, cfg, options.map_mode);
        const std::vector<std::uint8_t> pred =
            threshold_mask(map.patch_values, options.mass_fraction);
        jaccard_sum += jaccard(pred, truth);
        ++jaccard_n;
        const std::vector<double> att =
            cls_patch_attention(*fr.trace, cfg.depth - 1);
        double fg = 0.0;
        for (std::size_t j = 0; j < truth.size(); ++j)
          if (truth[j]) fg += att[j];
        fg_sum += fg;
        ++fg_n;
      }
    }
    if (options.source) {
      const ForwardResult fs = options.source->forward(s.image, true);
      dist_sum += logit_distance_stats(*fs.trace, *fr.trace).mean;
      ++dist_n;
    }
  }
  EvalRecord record;
  record.accuracy = static_cast<double>(correct) / static_cast<double>(limit);
  if (jaccard_n > 0) record.mean_jaccard = jaccard_sum / jaccard_n;
  if (fg_n > 0) record.mean_fg_attention = fg_sum / fg_n;
  if (dist_n > 0) record.mean_logit_distance = dist_sum / dist_n;
  record.mass_fraction = options.mass_fraction;
  record.map_mode = options.map_mode;
  record.samples_used = static_cast<int>(limit);
  return record;
}

}  // namespace gta
