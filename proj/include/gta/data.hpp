#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "gta/rng.hpp"
#include "gta/tensor.hpp"

namespace gta {

// Synthetic fine-grained task: class identity lives only in glyph geometry,
// while the background texture carries a tunable train-time correlation with
// the label (the shortcut). At test time the correlation is removed.
struct SyntheticSpec {
  int classes = 8;
  int per_class = 60;
  int image_size = 32;
  int textures = 8;  // background families, must be >= classes
  double rho_train = 0.95;
  double rho_test = 0.0;
  double noise = 0.02;

  void validate() const {
    if (classes < 2) throw config_error("SyntheticSpec: need at least 2 classes");
    if (textures < classes)
      throw config_error("SyntheticSpec: need at least as many textures as classes");
    if (per_class < 1) throw config_error("SyntheticSpec: per_class must be positive");
    if (image_size < 16)
      throw config_error("SyntheticSpec: image size must be at least 16");
    if (rho_train < 0.0 || rho_train > 1.0 || rho_test < 0.0 || rho_test > 1.0)
      throw config_error("SyntheticSpec: correlations must lie in [0,1]");
    if (noise < 0.0) throw config_error("SyntheticSpec: noise must be nonnegative");
  }
};

enum class Split { upstream_train, train, test };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::upstream_train: return "upstream-train";
    case Split::train: return "train";
    case Split::test: return "test";
  }
  return "train";
}

struct Sample {
  Tensor image;  // [3,H,W], values in [0,1]
  int label = 0;
  std::vector<std::uint8_t> mask;  // H*W foreground mask; empty when absent
  int background_id = -1;

  bool has_mask() const { return !mask.empty(); }
};

struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 0;
  int image_size = 0;
  std::string split_tag;
  std::uint64_t seed = 0;
  SyntheticSpec spec;

  std::size_t size() const { return samples.size(); }
};

namespace detail {

struct GlyphParams {
  int family = 0;
  double size_frac = 0.8;  // scales the base radius
  double angle = 0.0;
  double cx = 0.5, cy = 0.5;  // center in unit coordinates
};

// Point-in-glyph test in glyph-local coordinates (u, v), half-extent r.
inline bool glyph_inside(int family, double u, double v, double r) {
  const double rr = r * r;
  switch (family % 8) {
    case 0:  // solid disk
      return u * u + v * v <= rr;
    case 1:  // ring
      return u * u + v * v <= rr && u * u + v * v >= 0.36 * rr;
    case 2:  // plus cross
      return (std::fabs(u) <= 0.28 * r && std::fabs(v) <= r) ||
             (std::fabs(v) <= 0.28 * r && std::fabs(u) <= r);
    case 3: {  // three parallel bars
      if (std::fabs(u) > r || std::fabs(v) > r) return false;
      const int stripe = static_cast<int>(std::floor((v + r) / (0.4 * r)));
      return stripe % 2 == 0;
    }
    case 4:  // triangle
      return v >= -0.7 * r && v <= r &&
             std::fabs(u) <= 0.62 * (r - v);
    case 5: {  // square frame
      const double m = std::max(std::fabs(u), std::fabs(v));
      return m <= r && m >= 0.62 * r;
    }
    case 6:  // solid square
      return std::max(std::fabs(u), std::fabs(v)) <= 0.8 * r;
    default: {  // four dots
      const double du = std::fabs(u) - 0.52 * r;
      const double dv = std::fabs(v) - 0.52 * r;
      const double rad = 0.42 * r;
      return du * du + dv * dv <= rad * rad;
    }
  }
}

// 3x3 supersampled coverage of the glyph at pixel (px, py) of a hw-sized
// image; geometry lives in unit coordinates.
inline double glyph_coverage(const GlyphParams& g, double base_radius, int px,
                             int py, int hw) {
  const double r = base_radius * g.size_frac;
  const double ca = std::cos(g.angle), sa = std::sin(g.angle);
  int hits = 0;
  for (int sy = 0; sy < 3; ++sy)
    for (int sx = 0; sx < 3; ++sx) {
      const double x = (px + (sx + 0.5) / 3.0) / hw;
      const double y = (py + (sy + 0.5) / 3.0) / hw;
      const double dx = x - g.cx, dy = y - g.cy;
      const double u = dx * ca + dy * sa;
      const double v = -dx * sa + dy * ca;
      if (glyph_inside(g.family, u, v, r)) ++hits;
    }
  return hits / 9.0;
}

struct TextureParams {
  double angle = 0.0;
  double freq = 2.0;  // cycles across the image
  double r0, g0, b0;  // bright stop
  double r1, g1, b1;  // dark stop
};

inline TextureParams texture_params(int id) {
  TextureParams t;
  std::uint64_t s = splitmix64(0x7e37be5eedULL + static_cast<std::uint64_t>(id));
  auto unit = [&s] {
    s = splitmix64(s);
    return static_cast<double>(s >> 11) * 0x1.0p-53;
  };
  t.angle = 3.14159265358979323846 * id / 8.0 + 0.13 * unit();
  t.freq = 1.5 + (id % 3) + unit();
  t.r0 = 0.15 + 0.4 * unit();
  t.g0 = 0.15 + 0.4 * unit();
  t.b0 = 0.15 + 0.4 * unit();
  t.r1 = t.r0 * 0.35;
  t.g1 = t.g0 * 0.35;
  t.b1 = t.b0 * 0.35;
  return t;
}

inline void texture_rgb(const TextureParams& t, double x, double y,
                        double phase, double* rgb) {
  const double wave =
      0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * t.freq *
                               (x * std::cos(t.angle) + y * std::sin(t.angle)) +
                           phase);
  rgb[0] = t.r1 + (t.r0 - t.r1) * wave;
  rgb[1] = t.g1 + (t.g0 - t.g1) * wave;
  rgb[2] = t.b1 + (t.b0 - t.b1) * wave;
}

}  // namespace detail

inline Dataset generate_synthetic_dataset(const SyntheticSpec& spec,
                                          std::uint64_t seed, Split split) {
  spec.validate();
  const double rho = split == Split::train
                         ? spec.rho_train
                         : (split == Split::test ? spec.rho_test : 0.0);
  const bool upstream = split == Split::upstream_train;
  const int hw = spec.image_size;
  const double base_radius = 0.30;  // unit-square half-extent before scaling

  Dataset ds;
  ds.num_classes = spec.classes;
  ds.image_size = hw;
  ds.split_tag = split_name(split);
  ds.seed = seed;
  ds.spec = spec;
  ds.samples.reserve(static_cast<std::size_t>(spec.classes) * spec.per_class);

  const std::string stream_tag = "sample/" + split_name(split);
  for (int label = 0; label < spec.classes; ++label) {
    for (int i = 0; i < spec.per_class; ++i) {
      const std::uint64_t index =
          static_cast<std::uint64_t>(label) * spec.per_class + i;
      Rng rng(derive_seed(seed, stream_tag, index));

      const int background =
          rng.uniform() < rho
              ? label % spec.textures
              : static_cast<int>(rng.uniform_index(spec.textures));
      const detail::TextureParams tex = detail::texture_params(background);
      const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);

      double color[3];
      for (double& c : color) c = rng.uniform(0.72, 1.0);

      // Glyph parameter ranges are disjoint between the upstream regime and
      // the downstream one, so the source task is related but not identical.
      Sample sample;
      sample.label = label;
      sample.background_id = background;
      for (int attempt = 0;; ++attempt) {
        detail::GlyphParams glyph;
        glyph.family = label % 8;
        glyph.size_frac =
            upstream ? rng.uniform(0.55, 0.68) : rng.uniform(0.72, 0.90);
        glyph.angle = upstream ? rng.uniform(0.0, 0.52) : rng.uniform(0.79, 1.40);
        glyph.cx = rng.uniform(0.36, 0.64);
        glyph.cy = rng.uniform(0.36, 0.64);

        std::vector<double> image(static_cast<std::size_t>(3) * hw * hw);
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(hw) * hw, 0);
        std::size_t fg_pixels = 0;
        for (int y = 0; y < hw; ++y)
          for (int x = 0; x < hw; ++x) {
            const double ux = static_cast<double>(x) / hw;
            const double uy = static_cast<double>(y) / hw;
            double rgb[3];
            detail::texture_rgb(tex, ux, uy, phase, rgb);
            const double cov =
                detail::glyph_coverage(glyph, base_radius, x, y, hw);
            const std::size_t pix = static_cast<std::size_t>(y) * hw + x;
            if (cov >= 0.5) {
              mask[pix] = 1;
              ++fg_pixels;
            }
            for (int c = 0; c < 3; ++c)
              image[static_cast<std::size_t>(c) * hw * hw + pix] =
                  rgb[c] + cov * (color[c] - rgb[c]);
          }
        const double fraction =
            static_cast<double>(fg_pixels) / (static_cast<double>(hw) * hw);
        if (fraction >= 0.05 && fraction <= 0.40) {
          if (spec.noise > 0.0)
            for (double& v : image)
              v = std::clamp(v + rng.normal() * spec.noise, 0.0, 1.0);
          sample.image = Tensor({3, hw, hw}, std::move(image));
          sample.mask = std::move(mask);
          break;
        }
        if (attempt >= 64)
          throw config_error(
              "generate_synthetic_dataset: could not place a glyph covering "
              "5-40% of the image; check spec geometry");
      }
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

/// Per class, keep floor(rate * count) samples (at least one), chosen
/// uniformly without replacement; original sample order is preserved.
inline Dataset subset_per_class(const Dataset& dataset, double rate,
                                std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0))
    throw config_error("subset_per_class: rate must lie in (0,1]");
  std::vector<std::vector<std::size_t>> by_class(
      static_cast<std::size_t>(dataset.num_classes));
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const int label = dataset.samples[i].label;
    if (label < 0 || label >= dataset.num_classes)
      throw config_error("subset_per_class: label outside [0,C)");
    by_class[static_cast<std::size_t>(label)].push_back(i);
  }
  std::vector<std::size_t> chosen;
  for (int c = 0; c < dataset.num_classes; ++c) {
    auto& indices = by_class[static_cast<std::size_t>(c)];
    if (indices.empty())
      throw config_error("subset_per_class: class " + std::to_string(c) +
                         " has no samples");
    const std::size_t keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(rate * static_cast<double>(indices.size())));
    Rng rng(derive_seed(seed, "subset", static_cast<std::uint64_t>(c)));
    for (std::size_t i = 0; i < keep; ++i) {
      const std::size_t j =
          i + static_cast<std::size_t>(rng.uniform_index(indices.size() - i));
      std::swap(indices[i], indices[j]);
    }
    chosen.insert(chosen.end(), indices.begin(), indices.begin() + keep);
  }
  std::sort(chosen.begin(), chosen.end());
  Dataset out;
  out.num_classes = dataset.num_classes;
  out.image_size = dataset.image_size;
  out.split_tag = dataset.split_tag;
  out.seed = dataset.seed;
  out.spec = dataset.spec;
  out.samples.reserve(chosen.size());
  for (std::size_t i : chosen) {
    const Sample& s = dataset.samples[i];
    Sample copy;
    copy.image = s.image;
    copy.label = s.label;
    copy.mask = s.mask;
    copy.background_id = s.background_id;
    out.samples.push_back(std::move(copy));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Disk format: labels.csv plus binary PPM (P6) images and optional PGM (P5)
// masks under masks/.
// ---------------------------------------------------------------------------

namespace detail {

inline int pnm_int(std::istream& in, const std::string& path) {
  // Skips whitespace and # comments per the PNM convention.
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF || !std::isdigit(ch))
    throw io_error("malformed PNM header in " + path);
  long value = 0;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    if (value > 1 << 20) throw io_error("malformed PNM header in " + path);
    ch = in.get();
  }
  if (ch == EOF) throw io_error("malformed PNM header in " + path);
  in.unget();
  return static_cast<int>(value);
}

inline std::uint8_t quantize8(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::nearbyint(clamped));
}

}  // namespace detail

inline void write_ppm(const Tensor& image, const std::string& path) {
  const int h = image.shape()[1];
  const int w = image.shape()[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  const double* d = image.data().data();
  std::vector<char> bytes(static_cast<std::size_t>(3) * h * w);
  std::size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        bytes[k++] = static_cast<char>(detail::quantize8(
            d[(static_cast<std::size_t>(c) * h + y) * w + x]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to " + path);
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw io_error("malformed PPM header in " + path);
  const int w = detail::pnm_int(in, path);
  const int h = detail::pnm_int(in, path);
  const int maxval = detail::pnm_int(in, path);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw io_error("malformed PPM header in " + path);
  in.get();  // single whitespace before the raster
  std::vector<char> bytes(static_cast<std::size_t>(3) * h * w);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw io_error("truncated PPM data in " + path);
  std::vector<double> out(bytes.size());
  std::size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<std::size_t>(c) * h + y) * w + x] =
            static_cast<std::uint8_t>(bytes[k++]) / 255.0;
  return Tensor({3, h, w}, std::move(out));
}

inline void write_pgm(const std::vector<std::uint8_t>& mask, int h, int w,
                      const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<char> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    bytes[i] = static_cast<char>(mask[i] ? 255 : 0);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to " + path);
}

/// Mask pixels are values strictly greater than 127.
inline std::vector<std::uint8_t> read_pgm(const std::string& path, int* h_out,
                                          int* w_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5') throw io_error("malformed PGM header in " + path);
  const int w = detail::pnm_int(in, path);
  const int h = detail::pnm_int(in, path);
  const int maxval = detail::pnm_int(in, path);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw io_error("malformed PGM header in " + path);
  in.get();
  std::vector<char> bytes(static_cast<std::size_t>(h) * w);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw io_error("truncated PGM data in " + path);
  std::vector<std::uint8_t> mask(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    mask[i] = static_cast<std::uint8_t>(bytes[i]) > 127 ? 1 : 0;
  if (h_out) *h_out = h;
  if (w_out) *w_out = w;
  return mask;
}

inline std::string sample_filename(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05zu.ppm", index);
  return buf;
}

inline void export_dataset(const Dataset& dataset, const std::string& path) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw io_error("cannot create directory " + path);
  bool any_mask = false;
  for (const Sample& s : dataset.samples) any_mask |= s.has_mask();
  if (any_mask) {
    fs::create_directories(path + "/masks", ec);
    if (ec) throw io_error("cannot create directory " + path + "/masks");
  }
  std::ofstream csv(path + "/labels.csv");
  if (!csv) throw io_error("cannot write " + path + "/labels.csv");
  csv << "filename,label\n";
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    const std::string name = sample_filename(i);
    csv << name << "," << s.label << "\n";
    write_ppm(s.image, path + "/" + name);
    if (s.has_mask()) {
      std::string mask_name = name.substr(0, name.size() - 4) + ".pgm";
      write_pgm(s.mask, dataset.image_size, dataset.image_size,
                path + "/masks/" + mask_name);
    }
  }
  if (!csv) throw io_error("short write to " + path + "/labels.csv");
}

inline Dataset load_image_dir(const std::string& path) {
  namespace fs = std::filesystem;
  const std::string csv_path = path + "/labels.csv";
  std::ifstream csv(csv_path);
  if (!csv) throw io_error("cannot open " + csv_path);
  std::string line;
  if (!std::getline(csv, line)) throw io_error("empty labels.csv in " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "filename,label")
    throw io_error("labels.csv in " + path +
                   " must start with a 'filename,label' header");

  Dataset ds;
  ds.split_tag = "external";
  std::set<std::string> seen;
  int max_label = -1;
  while (std::getline(csv, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw io_error("malformed row in " + csv_path + ": " + line);
    const std::string name = line.substr(0, comma);
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw io_error("malformed label in " + csv_path + " for " + name);
    }
    if (label < 0)
      throw io_error("label outside [0,C) in " + csv_path + " for " + name);
    if (!seen.insert(name).second)
      throw io_error("duplicate filename in " + csv_path + ": " + name);

    Sample s;
    s.label = label;
    s.image = read_ppm(path + "/" + name);
    if (s.image.shape()[1] != s.image.shape()[2])
      throw io_error("non-square image " + name + " in " + path);
    if (ds.image_size == 0) ds.image_size = s.image.shape()[1];
    if (s.image.shape()[1] != ds.image_size)
      throw io_error("inconsistent image sizes in " + path + " at " + name);
    const std::string mask_path =
        path + "/masks/" + name.substr(0, name.size() - 4) + ".pgm";
    if (fs::exists(mask_path)) {
      int mh = 0, mw = 0;
      s.mask = read_pgm(mask_path, &mh, &mw);
      if (mh != ds.image_size || mw != ds.image_size)
        throw io_error("mask size mismatch for " + name + " in " + path);
    }
    max_label = std::max(max_label, label);
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw io_error("empty labels.csv in " + path);
  ds.num_classes = max_label + 1;
  return ds;
}

}  // namespace gta
