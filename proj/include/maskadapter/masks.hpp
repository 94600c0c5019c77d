#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskadapter/common.hpp"

namespace maskadapter {

/// Read-only view of one binary mask (values are 0 or 1).
struct BinaryMaskView {
  const std::uint8_t* data = nullptr;
  int height = 0;
  int width = 0;

  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  long area() const {
    long a = 0;
    const std::size_t n = static_cast<std::size_t>(height) * width;
    for (std::size_t i = 0; i < n; ++i) a += data[i];
    return a;
  }
};

/// A single owned binary mask.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  BinaryMaskView view() const { return {data.data(), height, width}; }
};

/// N binary masks sharing one resolution.
struct BinaryMaskBatch {
  int count = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // count * height * width, row-major per mask

  BinaryMaskBatch() = default;
  BinaryMaskBatch(int n, int h, int w)
      : count(n), height(h), width(w), data(static_cast<std::size_t>(n) * h * w, 0) {
    if (n < 0 || h <= 0 || w <= 0)
      throw std::invalid_argument("BinaryMaskBatch: invalid dimensions");
  }

  std::size_t mask_size() const { return static_cast<std::size_t>(height) * width; }
  std::uint8_t& at(int n, int y, int x) {
    return data[(static_cast<std::size_t>(n) * height + y) * width + x];
  }
  std::uint8_t at(int n, int y, int x) const {
    return data[(static_cast<std::size_t>(n) * height + y) * width + x];
  }
  BinaryMaskView mask(int n) const {
    return {data.data() + static_cast<std::size_t>(n) * mask_size(), height, width};
  }
  void append(BinaryMaskView m) {
    if (count == 0 && data.empty() && height == 0) {
      height = m.height;
      width = m.width;
    }
    if (m.height != height || m.width != width)
      throw std::invalid_argument("BinaryMaskBatch::append: resolution mismatch");
    data.insert(data.end(), m.data, m.data + mask_size());
    ++count;
  }
};

/// Read-only view of one soft mask (values in [0, 1]).
struct SoftMaskView {
  const double* data = nullptr;
  int height = 0;
  int width = 0;

  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// Masks downsampled to feature resolution; produced by downsample_masks.
struct SoftMaskBatch {
  int count = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  SoftMaskBatch() = default;
  SoftMaskBatch(int n, int h, int w)
      : count(n), height(h), width(w), data(static_cast<std::size_t>(n) * h * w, 0.0) {}

  std::size_t mask_size() const { return static_cast<std::size_t>(height) * width; }
  double& at(int n, int y, int x) {
    return data[(static_cast<std::size_t>(n) * height + y) * width + x];
  }
  double at(int n, int y, int x) const {
    return data[(static_cast<std::size_t>(n) * height + y) * width + x];
  }
  SoftMaskView mask(int n) const {
    return {data.data() + static_cast<std::size_t>(n) * mask_size(), height, width};
  }
};

/// Intersection over union of two same-resolution masks. Two empty masks are
/// identical, so their IoU is 1; empty vs nonempty is 0.
inline double iou(BinaryMaskView a, BinaryMaskView b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("iou: mask resolutions differ");
  const std::size_t n = static_cast<std::size_t>(a.height) * a.width;
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int va = a.data[i] != 0;
    const int vb = b.data[i] != 0;
    inter += va & vb;
    uni += va | vb;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Entry (i, j) = iou(gt_i, pred_j).
inline Matrix iou_matrix(const BinaryMaskBatch& gt, const BinaryMaskBatch& pred) {
  if (gt.count > 0 && pred.count > 0 && (gt.height != pred.height || gt.width != pred.width))
    throw std::invalid_argument("iou_matrix: mask resolutions differ");
  Matrix m(gt.count, pred.count);
  for (int i = 0; i < gt.count; ++i)
    for (int j = 0; j < pred.count; ++j) m.at(i, j) = iou(gt.mask(i), pred.mask(j));
  return m;
}

/// Block-mean (area) downsampling to feature resolution. The stride must
/// divide both dimensions; synthetic scenes are generated at compliant sizes.
inline SoftMaskBatch downsample_masks(const BinaryMaskBatch& masks, int stride) {
  if (stride < 1) throw std::invalid_argument("downsample_masks: stride must be >= 1");
  if (masks.height % stride != 0 || masks.width % stride != 0)
    throw std::invalid_argument("downsample_masks: stride " + std::to_string(stride) +
                                " does not divide " + std::to_string(masks.height) + "x" +
                                std::to_string(masks.width));
  const int h = masks.height / stride;
  const int w = masks.width / stride;
  SoftMaskBatch soft(masks.count, h, w);
  const double inv_area = 1.0 / (static_cast<double>(stride) * stride);
  for (int n = 0; n < masks.count; ++n) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        long s = 0;
        for (int dy = 0; dy < stride; ++dy)
          for (int dx = 0; dx < stride; ++dx) s += masks.at(n, y * stride + dy, x * stride + dx);
        soft.at(n, y, x) = static_cast<double>(s) * inv_area;
      }
    }
  }
  return soft;
}

inline SoftMaskBatch downsample_mask(BinaryMaskView mask, int stride) {
  BinaryMaskBatch one(1, mask.height, mask.width);
  std::copy(mask.data, mask.data + one.mask_size(), one.data.begin());
  return downsample_masks(one, stride);
}

namespace detail {

inline bool has_neighbor(const std::vector<std::uint8_t>& grid, int h, int w, int y, int x,
                         std::uint8_t value) {
  if (y > 0 && grid[static_cast<std::size_t>(y - 1) * w + x] == value) return true;
  if (y + 1 < h && grid[static_cast<std::size_t>(y + 1) * w + x] == value) return true;
  if (x > 0 && grid[static_cast<std::size_t>(y) * w + x - 1] == value) return true;
  if (x + 1 < w && grid[static_cast<std::size_t>(y) * w + x + 1] == value) return true;
  return false;
}

}  // namespace detail

/// Degrades a mask by random boundary-pixel flips (erosion of original pixels,
/// dilation into background) until the IoU with the input lands in
/// [target_iou - 0.05, min(1, target_iou + 0.05)]; the walk keeps degrading
/// until it reaches the target itself, so results sit in the lower half of
/// the band rather than hugging its top. Deterministic per seed. Throws if
/// the input is empty or the band is unreachable within 10*H*W flips.
inline BinaryMask perturb_mask(BinaryMaskView mask, double target_iou, Rng& rng) {
  if (!(target_iou > 0.0) || target_iou > 1.0)
    throw std::invalid_argument("perturb_mask: target_iou must be in (0, 1]");
  const int h = mask.height, w = mask.width;
  const std::size_t npx = static_cast<std::size_t>(h) * w;
  const long input_area = mask.area();
  if (input_area == 0) throw std::invalid_argument("perturb_mask: input mask is empty");

  BinaryMask out(h, w);
  std::copy(mask.data, mask.data + npx, out.data.begin());

  const double lo = target_iou - 0.05;
  const double hi = std::min(1.0, target_iou + 0.05);
  long inter = input_area;  // |input AND current|
  long uni = input_area;    // |input OR current|
  long cur_area = input_area;

  auto done = [&]() {
    const double r = static_cast<double>(inter) / static_cast<double>(uni);
    return r >= lo && r <= target_iou;
  };
  if (done()) return out;

  // Candidate indices refreshed periodically and re-validated at use time.
  std::vector<int> erode_cands, dilate_cands;
  auto refresh = [&]() {
    erode_cands.clear();
    dilate_cands.clear();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (out.data[i] == 1 && mask.data[i] == 1 && detail::has_neighbor(out.data, h, w, y, x, 0))
          erode_cands.push_back(static_cast<int>(i));
        else if (out.data[i] == 0 && mask.data[i] == 0 &&
                 detail::has_neighbor(out.data, h, w, y, x, 1))
          dilate_cands.push_back(static_cast<int>(i));
      }
    }
  };

  const long budget = 10L * h * w;
  long flips = 0;
  int since_refresh = 1 << 30;  // force initial refresh

  while (true) {
    const double ratio = static_cast<double>(inter) / static_cast<double>(uni);
    if (ratio >= lo && ratio <= hi) return out;
    if (flips >= budget)
      throw std::runtime_error("perturb_mask: IoU band unreachable within flip budget");

    if (ratio > hi) {
      // Degrade: erode an original pixel or dilate into background.
      if (since_refresh > 64) {
        refresh();
        since_refresh = 0;
      }
      bool flipped = false;
      bool prefer_erode = rng.uniform() < 0.5;
      for (int attempt = 0; attempt < 2 && !flipped; ++attempt) {
        auto& cands = (prefer_erode != (attempt == 1)) ? erode_cands : dilate_cands;
        const bool eroding = &cands == &erode_cands;
        while (!cands.empty()) {
          const int pick = rng.uniform_int(static_cast<int>(cands.size()));
          const int i = cands[pick];
          cands[pick] = cands.back();
          cands.pop_back();
          const int y = i / w, x = i % w;
          // Re-validate against the current state (the list may be stale).
          if (eroding) {
            if (cur_area <= 1 || out.data[i] != 1 || mask.data[i] != 1 ||
                !detail::has_neighbor(out.data, h, w, y, x, 0))
              continue;
            out.data[i] = 0;
            --inter;
            --cur_area;
          } else {
            if (out.data[i] != 0 || mask.data[i] != 0 ||
                !detail::has_neighbor(out.data, h, w, y, x, 1))
              continue;
            out.data[i] = 1;
            ++uni;
            ++cur_area;
          }
          flipped = true;
          break;
        }
      }
      if (!flipped) {
        // Lists exhausted; rebuild once, then give up if still empty.
        refresh();
        since_refresh = 0;
        if (erode_cands.empty() && dilate_cands.empty())
          throw std::runtime_error("perturb_mask: no boundary candidates left");
        continue;
      }
      ++flips;
      ++since_refresh;
    } else {
      // Overshot below the band: flip one differing pixel back toward the input.
      std::vector<int> diff;
      for (std::size_t i = 0; i < npx; ++i)
        if (out.data[i] != mask.data[i]) diff.push_back(static_cast<int>(i));
      if (diff.empty())
        throw std::runtime_error("perturb_mask: inconsistent state");  // ratio would be 1
      const int i = diff[rng.uniform_int(static_cast<int>(diff.size()))];
      if (mask.data[i] == 1) {
        out.data[i] = 1;
        ++inter;
        ++cur_area;
      } else {
        out.data[i] = 0;
        --uni;
        --cur_area;
      }
      ++flips;
      since_refresh = 1 << 30;  // geometry changed against the degrade lists
    }
  }
}

}  // namespace maskadapter
