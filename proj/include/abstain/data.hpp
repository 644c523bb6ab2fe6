#pragma once

// Synthetic segmentation scenes (disks and rectangles over a background) and
// ingestion of external PGM/PPM image-mask pairs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abstain/error.hpp"
#include "abstain/pnm.hpp"
#include "abstain/rng.hpp"
#include "abstain/tensor.hpp"

namespace abstain {

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 4;  // background (0) included
  std::size_t in_channels = 3;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  double min_extent = 0.10;  // shape half-size as a fraction of the shorter side
  double max_extent = 0.25;
  double sigma = 0.15;       // additive Gaussian pixel noise
  bool disks = true;
  bool rectangles = true;

  void validate() const {
    if (height == 0 || width == 0) throw ConfigError("scene: zero image area");
    if (num_classes < 2 || num_classes > 255) throw ConfigError("scene: num_classes must lie in [2, 255]");
    if (in_channels == 0) throw ConfigError("scene: in_channels must be positive");
    if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("scene: need 1 <= min_shapes <= max_shapes");
    if (!(min_extent > 0.0) || max_extent < min_extent) throw ConfigError("scene: need 0 < min_extent <= max_extent");
    if (!(sigma >= 0.0)) throw ConfigError("scene: sigma must be >= 0");
    if (!disks && !rectangles) throw ConfigError("scene: no shape kinds enabled");
  }

  // Base intensity of class c in channel j. Background is dark and flat; object classes
  // get distinct, deterministic colours.
  double base_intensity(std::size_t c, std::size_t j) const {
    if (c == 0) return 0.2;
    const double f = static_cast<double>(c * (j + 1)) * 0.6180339887498949;
    return 0.2 + 0.6 * (f - std::floor(f));
  }
};

inline nlohmann::json to_json(const SceneSpec& s) {
  return {{"height", s.height},         {"width", s.width},           {"num_classes", s.num_classes},
          {"in_channels", s.in_channels}, {"min_shapes", s.min_shapes}, {"max_shapes", s.max_shapes},
          {"min_extent", s.min_extent}, {"max_extent", s.max_extent}, {"sigma", s.sigma},
          {"disks", s.disks},           {"rectangles", s.rectangles}};
}

struct Sample {
  Tensor image;                       // [in_channels, h, w]
  LabelMask clean_labels;             // [1, h, w]
  std::optional<LabelMask> noisy_labels;
  std::size_t id = 0;

  const LabelMask& train_labels() const { return noisy_labels ? *noisy_labels : clean_labels; }
};

using Dataset = std::vector<Sample>;

namespace detail {

inline Sample draw_scene(const SceneSpec& spec, std::size_t id, std::uint64_t seed) {
  const std::size_t h = spec.height, w = spec.width;
  const double side = static_cast<double>(std::min(h, w));
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, attempt));
    LabelMask mask(h, w, 0);
    const auto n = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
    for (std::size_t s = 0; s < n; ++s) {
      const auto cls = static_cast<std::uint8_t>(1 + rng.below(spec.num_classes - 1));
      const bool disk = spec.disks && (!spec.rectangles || rng.uniform() < 0.5);
      const double cy = rng.uniform(0.0, static_cast<double>(h));
      const double cx = rng.uniform(0.0, static_cast<double>(w));
      const double ry = side * rng.uniform(spec.min_extent, spec.max_extent);
      const double rx = disk ? ry : side * rng.uniform(spec.min_extent, spec.max_extent);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          const bool inside = disk ? dy * dy + dx * dx <= ry * ry : std::fabs(dy) <= ry && std::fabs(dx) <= rx;
          if (inside) mask.at(y, x) = cls;  // later shapes occlude earlier ones
        }
    }
    const auto labels = mask.labels();
    const bool has_bg = std::find(labels.begin(), labels.end(), 0) != labels.end();
    const bool has_fg = std::any_of(labels.begin(), labels.end(), [](auto v) { return v != 0; });
    if (!has_bg || !has_fg) continue;

    Tensor image(Shape{spec.in_channels, h, w});
    for (std::size_t j = 0; j < spec.in_channels; ++j)
      for (std::size_t i = 0; i < h * w; ++i) {
        const double noise = spec.sigma > 0.0 ? spec.sigma * rng.normal() : 0.0;
        image[j * h * w + i] = spec.base_intensity(mask[i], j) + noise;
      }
    return Sample{std::move(image), std::move(mask), std::nullopt, id};
  }
}

}  // namespace detail

/// n scenes; scene i depends only on (spec, seed, i).
inline Dataset generate_dataset(const SceneSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n == 0) throw ConfigError("generate_dataset: n must be >= 1");
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(detail::draw_scene(spec, i, derive_seed(seed, i)));
  return out;
}

struct Splits {
  Dataset train, val, test;
};

/// Seeded shuffle, then contiguous train/val/test slices.
inline Splits split(const Dataset& data, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (!(f > 0.0)) throw ConfigError("split: fractions must be positive");
  if (std::fabs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n = static_cast<double>(data.size());
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
  const auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * n));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= data.size()) throw ConfigError("split: a split would be empty");
  Splits s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_train ? s.train : i < n_train + n_val ? s.val : s.test;
    dst.push_back(data[order[i]]);
  }
  return s;
}

struct Batch {
  Tensor images;     // [b, in, h, w]
  LabelMask labels;  // [b, h, w]
};

// Stacks the selected samples. `noisy` selects training labels where present.
inline Batch make_batch(const Dataset& data, std::span<const std::size_t> indices, bool noisy) {
  if (indices.empty()) throw ConfigError("make_batch: empty batch");
  const auto& first = data.at(indices[0]).image;
  const std::size_t c = first.dim(0), h = first.dim(1), w = first.dim(2);
  Batch b{Tensor(Shape{indices.size(), c, h, w}), {}};
  std::vector<const LabelMask*> masks;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = data.at(indices[i]);
    if (s.image.shape() != first.shape()) throw DimensionError("make_batch: samples differ in shape");
    std::copy(s.image.data().begin(), s.image.data().end(), b.images.data().begin() + static_cast<std::ptrdiff_t>(i * c * h * w));
    masks.push_back(noisy ? &s.train_labels() : &s.clean_labels);
  }
  b.labels = LabelMask::stack(masks);
  return b;
}

// ---------------------------------------------------------------------------
// Disk I/O

inline std::string sample_stem(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", id);
  return buf;
}

/// Writes images/<id>.ppm (or .pgm for one channel), masks/<id>.pgm and manifest.json.
/// Image intensities are clamped to [0, 1] and quantized to 8 bits.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& data, const SceneSpec& spec, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  nlohmann::json manifest;
  manifest["spec"] = to_json(spec);
  manifest["seed"] = seed;
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : data) {
    const std::size_t c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
    if (c != 1 && c != 3) throw ConfigError("write_dataset: only 1- or 3-channel images can be written");
    pnm::Image img;
    img.width = w;
    img.height = h;
    img.channels = c;
    img.pixels.resize(c * h * w);
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::clamp(s.image[j * h * w + i], 0.0, 1.0);
        img.pixels[i * c + j] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    const auto stem = sample_stem(s.id);
    const auto image_rel = "images/" + stem + (c == 1 ? ".pgm" : ".ppm");
    const auto mask_rel = "masks/" + stem + ".pgm";
    pnm::write((dir / image_rel).string(), img);
    pnm::write_mask((dir / mask_rel).string(), s.clean_labels);
    manifest["samples"].push_back({{"id", s.id}, {"image", image_rel}, {"mask", mask_rel}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

/// Pairs masks/<stem>.pgm with images/<stem>.{pgm,ppm} by filename. Empty directories
/// yield an empty dataset.
inline Dataset load_external(const std::filesystem::path& image_dir, const std::filesystem::path& mask_dir,
                             std::size_t num_classes) {
  namespace fs = std::filesystem;
  Dataset out;
  if (!fs::exists(mask_dir)) return out;
  std::vector<fs::path> masks;
  for (const auto& e : fs::directory_iterator(mask_dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") masks.push_back(e.path());
  std::sort(masks.begin(), masks.end());
  std::size_t id = 0;
  for (const auto& mp : masks) {
    const auto stem = mp.stem().string();
    fs::path ip = image_dir / (stem + ".ppm");
    if (!fs::exists(ip)) ip = image_dir / (stem + ".pgm");
    if (!fs::exists(ip)) throw FormatError(mp.string(), "no matching image in " + image_dir.string());
    auto mask = pnm::read_mask(mp.string());
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] >= num_classes) {
        throw FormatError(mp.string(), "class id " + std::to_string(mask[i]) + " >= num_classes " + std::to_string(num_classes));
      }
    }
    const auto img = pnm::read(ip.string());
    if (img.width != mask.width() || img.height != mask.height()) {
      throw FormatError(ip.string(), "dimension mismatch with mask " + mp.filename().string());
    }
    Tensor image(Shape{img.channels, img.height, img.width});
    const std::size_t plane = img.width * img.height;
    for (std::size_t j = 0; j < img.channels; ++j)
      for (std::size_t i = 0; i < plane; ++i)
        image[j * plane + i] = static_cast<double>(img.pixels[i * img.channels + j]) / static_cast<double>(img.maxval);
    std::size_t sample_id = id++;
    if (!stem.empty() && std::all_of(stem.begin(), stem.end(), ::isdigit)) sample_id = std::stoul(stem);
    out.push_back(Sample{std::move(image), std::move(mask), std::nullopt, sample_id});
  }
  return out;
}

}  // namespace abstain
