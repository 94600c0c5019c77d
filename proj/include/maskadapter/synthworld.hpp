#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskadapter/common.hpp"
#include "maskadapter/masks.hpp"

namespace maskadapter {

/// Feature-map stride fixed by the two stride-2 patchify convs.
inline constexpr int kFeatureStride = 4;

/// Category prototypes standing in for text embeddings, split into seen and
/// unseen vocabularies.
struct CategoryBank {
  Matrix prototypes;               // L x C, rows unit-L2-norm
  std::vector<std::string> names;  // L
  std::vector<std::uint8_t> seen_flags;

  int size() const { return prototypes.rows; }
  int channels() const { return prototypes.cols; }
  std::vector<int> seen_indices() const {
    std::vector<int> idx;
    for (int i = 0; i < size(); ++i)
      if (seen_flags[i]) idx.push_back(i);
    return idx;
  }
};

/// C x h x w real grid standing in for CLIP visual features.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;  // channel-major: data[(c*h + y)*w + x]

  FeatureMap() = default;
  FeatureMap(int c, int h, int w)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0) {}

  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

/// A generated scene: label map, per-region ground-truth masks and labels,
/// and the feature map at 1/4 resolution.
struct Scene {
  int height = 0;
  int width = 0;
  std::vector<int> label_map;  // H*W, values in [0, L)
  BinaryMaskBatch gt_masks;
  std::vector<int> gt_labels;
  FeatureMap features;
};

/// L unit-norm isotropic prototypes; round(L * seen_fraction) flagged seen.
inline CategoryBank make_category_bank(int categories, int channels, double seen_fraction,
                                       Rng& rng) {
  if (categories < 2) throw std::invalid_argument("make_category_bank: need at least 2 categories");
  if (channels < 4) throw std::invalid_argument("make_category_bank: need at least 4 channels");
  if (!(seen_fraction > 0.0 && seen_fraction < 1.0))
    throw std::invalid_argument("make_category_bank: seen_fraction must be in (0, 1)");
  const int n_seen = static_cast<int>(std::lround(categories * seen_fraction));
  if (n_seen <= 0 || n_seen >= categories)
    throw std::invalid_argument("make_category_bank: split leaves an empty seen or unseen set");

  CategoryBank bank;
  bank.prototypes = Matrix(categories, channels);
  bank.names.resize(categories);
  bank.seen_flags.assign(categories, 0);
  for (int i = 0; i < categories; ++i) {
    auto row = bank.prototypes.row(i);
    for (int c = 0; c < channels; ++c) row[c] = rng.normal();
    l2_normalize(row, "prototype");
    bank.names[i] = "cat" + std::to_string(i);
    bank.seen_flags[i] = i < n_seen ? 1 : 0;
  }
  return bank;
}

/// Voronoi scene at block granularity: sites live on the feature grid and each
/// 4x4 image block is uniform, so ground-truth masks align exactly with
/// feature cells and zero-noise mask pooling recovers the category prototype.
/// `allowed` restricts which categories may appear (empty = all); training
/// passes the seen subset.
///
/// `texture_strength` adds a per-region appearance pattern: a random direction
/// with a sign-balanced +/- layout over the region's cells. The pattern sums
/// to zero over every full region, so pooling a ground-truth mask still
/// recovers the prototype exactly; partial or reweighted coverage picks the
/// pattern up. This is the stand-in for intra-object appearance variation
/// that makes aggregation quality matter.
inline Scene generate_scene(const CategoryBank& bank, int height, int width, int regions,
                            double noise_sigma, Rng& rng, std::span<const int> allowed = {},
                            double texture_strength = 0.0) {
  if (height <= 0 || width <= 0 || height % kFeatureStride != 0 || width % kFeatureStride != 0)
    throw std::invalid_argument("generate_scene: H and W must be positive multiples of 4");
  std::vector<int> pool(allowed.begin(), allowed.end());
  if (pool.empty()) {
    pool.resize(bank.size());
    for (int i = 0; i < bank.size(); ++i) pool[i] = i;
  }
  if (regions < 1 || regions > static_cast<int>(pool.size()))
    throw std::invalid_argument("generate_scene: regions must be in [1, categories]");

  const int h = height / kFeatureStride;
  const int w = width / kFeatureStride;
  if (regions > h * w) throw std::invalid_argument("generate_scene: more regions than feature cells");

  // Distinct sites on the feature grid.
  std::vector<int> site_cell(regions);
  std::vector<std::uint8_t> taken(static_cast<std::size_t>(h) * w, 0);
  for (int r = 0; r < regions; ++r) {
    int cell;
    do {
      cell = rng.uniform_int(h * w);
    } while (taken[cell]);
    taken[cell] = 1;
    site_cell[r] = cell;
  }

  // Distinct categories via partial Fisher-Yates over the allowed pool.
  for (int r = 0; r < regions; ++r) {
    const int pick = r + rng.uniform_int(static_cast<int>(pool.size()) - r);
    std::swap(pool[r], pool[pick]);
  }

  // Nearest site per feature cell; ties go to the lower region index.
  std::vector<int> region_of(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      long best = -1;
      int best_r = 0;
      for (int r = 0; r < regions; ++r) {
        const int sy = site_cell[r] / w, sx = site_cell[r] % w;
        const long d = static_cast<long>(y - sy) * (y - sy) + static_cast<long>(x - sx) * (x - sx);
        if (best < 0 || d < best) {
          best = d;
          best_r = r;
        }
      }
      region_of[static_cast<std::size_t>(y) * w + x] = best_r;
    }
  }

  Scene scene;
  scene.height = height;
  scene.width = width;
  scene.label_map.resize(static_cast<std::size_t>(height) * width);
  scene.gt_masks = BinaryMaskBatch(regions, height, width);
  scene.gt_labels.resize(regions);
  for (int r = 0; r < regions; ++r) scene.gt_labels[r] = pool[r];

  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int r = region_of[static_cast<std::size_t>(y / kFeatureStride) * w + x / kFeatureStride];
      scene.label_map[static_cast<std::size_t>(y) * width + x] = pool[r];
      scene.gt_masks.at(r, y, x) = 1;
    }
  }

  // Per-region texture: random direction, sign-balanced over the region.
  std::vector<double> texture_sign(static_cast<std::size_t>(h) * w, 0.0);
  Matrix texture_dir(regions, bank.channels());
  if (texture_strength > 0.0) {
    for (int r = 0; r < regions; ++r) {
      auto dir = texture_dir.row(r);
      for (int c = 0; c < bank.channels(); ++c) dir[c] = rng.normal();
      l2_normalize(dir, "texture direction");
      std::vector<int> cells;
      for (std::size_t i = 0; i < region_of.size(); ++i)
        if (region_of[i] == r) cells.push_back(static_cast<int>(i));
      for (std::size_t i = 0; i + 1 < cells.size(); ++i) {
        const std::size_t j = i + rng.uniform_int(static_cast<int>(cells.size() - i));
        std::swap(cells[i], cells[j]);
      }
      // First half +1, second half -1; a leftover odd cell stays 0.
      const std::size_t half = cells.size() / 2;
      for (std::size_t i = 0; i < half; ++i) texture_sign[cells[i]] = 1.0;
      for (std::size_t i = half; i < 2 * half; ++i) texture_sign[cells[i]] = -1.0;
    }
  }

  scene.features = FeatureMap(bank.channels(), h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t cell = static_cast<std::size_t>(y) * w + x;
      const int r = region_of[cell];
      const auto proto = bank.prototypes.row(pool[r]);
      for (int c = 0; c < bank.channels(); ++c) {
        double v = proto[c];
        if (texture_strength > 0.0)
          v += texture_strength * texture_sign[cell] * texture_dir.at(r, c);
        if (noise_sigma > 0.0) v += noise_sigma * rng.normal();
        scene.features.at(c, y, x) = v;
      }
    }
  }
  return scene;
}

/// Toy stand-in for encoding a masked image crop: averages feature columns
/// over the tight bounding box of the crop mask, keeping covered columns at
/// full strength and zeroing the rest, then L2-normalizes. Any cell the mask
/// touches counts as covered, which reproduces the background-zeroing
/// artifact of mask cropping at feature resolution.
inline std::vector<double> toy_image_encoder(const FeatureMap& features, SoftMaskView crop_mask) {
  if (crop_mask.height != features.height || crop_mask.width != features.width)
    throw std::invalid_argument("toy_image_encoder: mask and feature resolutions differ");
  int y0 = crop_mask.height, y1 = -1, x0 = crop_mask.width, x1 = -1;
  for (int y = 0; y < crop_mask.height; ++y)
    for (int x = 0; x < crop_mask.width; ++x)
      if (crop_mask.at(y, x) > 0.0) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) throw std::invalid_argument("toy_image_encoder: crop mask is empty");

  const int box_area = (y1 - y0 + 1) * (x1 - x0 + 1);
  std::vector<double> acc(features.channels, 0.0);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (crop_mask.at(y, x) > 0.0)
        for (int c = 0; c < features.channels; ++c) acc[c] += features.at(c, y, x);
  for (double& v : acc) v /= box_area;
  l2_normalize(acc, "crop embedding");
  return acc;
}

}  // namespace maskadapter
