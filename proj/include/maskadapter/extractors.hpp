#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskadapter/common.hpp"
#include "maskadapter/masks.hpp"
#include "maskadapter/synthworld.hpp"

namespace maskadapter {

/// N x C mask embeddings. When `normalized` is set every row is unit L2.
struct EmbeddingBatch {
  int count = 0;
  int channels = 0;
  bool normalized = false;
  std::vector<double> data;

  EmbeddingBatch() = default;
  EmbeddingBatch(int n, int c)
      : count(n), channels(c), data(static_cast<std::size_t>(n) * c, 0.0) {}

  std::span<double> row(int i) {
    return {data.data() + static_cast<std::size_t>(i) * channels, static_cast<std::size_t>(channels)};
  }
  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * channels, static_cast<std::size_t>(channels)};
  }
};

/// N x K x h x w nonnegative activation maps; each (n, k) slice sums to 1.
struct ActivationStack {
  int count = 0;
  int maps = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  ActivationStack() = default;
  ActivationStack(int n, int k, int h, int w)
      : count(n), maps(k), height(h), width(w),
        data(static_cast<std::size_t>(n) * k * h * w, 0.0) {}

  std::size_t slice_size() const { return static_cast<std::size_t>(height) * width; }
  double* slice(int n, int k) {
    return data.data() + (static_cast<std::size_t>(n) * maps + k) * slice_size();
  }
  const double* slice(int n, int k) const {
    return data.data() + (static_cast<std::size_t>(n) * maps + k) * slice_size();
  }
  double at(int n, int k, int y, int x) const {
    return slice(n, k)[static_cast<std::size_t>(y) * width + x];
  }
  double& at(int n, int k, int y, int x) {
    return slice(n, k)[static_cast<std::size_t>(y) * width + x];
  }
};

/// Checks the ActivationStack invariants (nonnegative, slice sums near 1).
inline void validate_activation_stack(const ActivationStack& acts, double sum_tol = 1e-4) {
  for (int n = 0; n < acts.count; ++n) {
    for (int k = 0; k < acts.maps; ++k) {
      const double* s = acts.slice(n, k);
      double sum = 0.0;
      for (std::size_t i = 0; i < acts.slice_size(); ++i) {
        if (s[i] < 0.0)
          throw std::invalid_argument("activation stack: negative entry in slice (" +
                                      std::to_string(n) + ", " + std::to_string(k) + ")");
        sum += s[i];
      }
      if (std::abs(sum - 1.0) > sum_tol)
        throw std::invalid_argument("activation stack: slice (" + std::to_string(n) + ", " +
                                    std::to_string(k) + ") sums to " + std::to_string(sum));
    }
  }
}

/// Area-normalized mask pooling: row n is the mask-weighted mean of feature
/// columns, L2-normalized afterwards so cosine matching is well-posed.
inline EmbeddingBatch mask_pool(const SoftMaskBatch& masks, const FeatureMap& features) {
  if (masks.height != features.height || masks.width != features.width)
    throw std::invalid_argument("mask_pool: mask and feature resolutions differ");
  EmbeddingBatch out(masks.count, features.channels);
  out.normalized = true;
  for (int n = 0; n < masks.count; ++n) {
    const SoftMaskView m = masks.mask(n);
    double mass = 0.0;
    for (std::size_t i = 0; i < masks.mask_size(); ++i) mass += m.data[i];
    if (!(mass > 0.0))
      throw std::invalid_argument("mask_pool: mask " + std::to_string(n) + " has zero mass");
    auto row = out.row(n);
    for (int c = 0; c < features.channels; ++c) {
      double acc = 0.0;
      const double* f = features.data.data() + static_cast<std::size_t>(c) * masks.mask_size();
      for (std::size_t i = 0; i < masks.mask_size(); ++i) acc += m.data[i] * f[i];
      row[c] = acc / mass;
    }
    l2_normalize(row, "pooled embedding " + std::to_string(n));
  }
  return out;
}

/// Mask-cropping extractor: downsample each binary mask to feature resolution
/// and run the toy masked-image encoder on it.
inline EmbeddingBatch mask_crop_embed(const BinaryMaskBatch& masks, const FeatureMap& features,
                                      int stride) {
  if (masks.height != features.height * stride || masks.width != features.width * stride)
    throw std::invalid_argument("mask_crop_embed: mask resolution must be stride x feature resolution");
  EmbeddingBatch out(masks.count, features.channels);
  out.normalized = true;
  for (int n = 0; n < masks.count; ++n) {
    if (masks.mask(n).area() == 0)
      throw std::invalid_argument("mask_crop_embed: mask " + std::to_string(n) + " is empty");
    const SoftMaskBatch soft = downsample_mask(masks.mask(n), stride);
    const std::vector<double> e = toy_image_encoder(features, soft.mask(0));
    std::copy(e.begin(), e.end(), out.row(n).begin());
  }
  return out;
}

/// Pre-normalization aggregation: row n = (1/K) sum_k sum_yx A[n,k,y,x] * F(:,y,x).
inline Matrix aggregate_pre_norm(const ActivationStack& acts, const FeatureMap& features) {
  if (acts.height != features.height || acts.width != features.width)
    throw std::invalid_argument("aggregate: activation and feature resolutions differ");
  Matrix out(acts.count, features.channels);
  const std::size_t hw = acts.slice_size();
  for (int n = 0; n < acts.count; ++n) {
    auto row = out.row(n);
    for (int k = 0; k < acts.maps; ++k) {
      const double* a = acts.slice(n, k);
      for (int c = 0; c < features.channels; ++c) {
        const double* f = features.data.data() + static_cast<std::size_t>(c) * hw;
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += a[i] * f[i];
        row[c] += acc;
      }
    }
    for (int c = 0; c < features.channels; ++c) row[c] /= acts.maps;
  }
  return out;
}

/// Gradient of aggregate_pre_norm w.r.t. the activation stack.
inline ActivationStack aggregate_backward(const Matrix& grad_pre_norm,
                                          const ActivationStack& acts,
                                          const FeatureMap& features) {
  ActivationStack grad(acts.count, acts.maps, acts.height, acts.width);
  const std::size_t hw = acts.slice_size();
  const double inv_k = 1.0 / acts.maps;
  for (int n = 0; n < acts.count; ++n) {
    const auto g = grad_pre_norm.row(n);
    std::vector<double> cell(hw, 0.0);
    for (int c = 0; c < features.channels; ++c) {
      const double* f = features.data.data() + static_cast<std::size_t>(c) * hw;
      for (std::size_t i = 0; i < hw; ++i) cell[i] += g[c] * f[i];
    }
    for (int k = 0; k < acts.maps; ++k) {
      double* s = grad.slice(n, k);
      for (std::size_t i = 0; i < hw; ++i) s[i] = inv_k * cell[i];
    }
  }
  return grad;
}

/// Embedding aggregation over K normalized activation maps, L2-normalized.
inline EmbeddingBatch aggregate(const ActivationStack& acts, const FeatureMap& features) {
  validate_activation_stack(acts);
  const Matrix pre = aggregate_pre_norm(acts, features);
  EmbeddingBatch out(acts.count, features.channels);
  out.normalized = true;
  for (int n = 0; n < acts.count; ++n) {
    auto row = out.row(n);
    std::copy(pre.row(n).begin(), pre.row(n).end(), row.begin());
    l2_normalize(row, "aggregated embedding " + std::to_string(n));
  }
  return out;
}

/// logits(i, j) = scale * embeds_i . prototypes_j
inline Matrix cosine_logits(const EmbeddingBatch& embeds, const Matrix& prototypes, double scale) {
  if (embeds.channels != prototypes.cols)
    throw std::invalid_argument("cosine_logits: channel mismatch");
  Matrix logits(embeds.count, prototypes.rows);
  for (int i = 0; i < embeds.count; ++i)
    for (int j = 0; j < prototypes.rows; ++j)
      logits.at(i, j) = scale * dot(embeds.row(i), prototypes.row(j));
  return logits;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix probs(logits.rows, logits.cols);
  for (int i = 0; i < logits.rows; ++i) {
    const auto in = logits.row(i);
    auto out = probs.row(i);
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double sum = 0.0;
    for (int j = 0; j < logits.cols; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (int j = 0; j < logits.cols; ++j) out[j] /= sum;
  }
  return probs;
}

/// Softmax over scaled cosine similarities against the bank prototypes.
inline Matrix classify(const EmbeddingBatch& embeds, const CategoryBank& bank, double logit_scale) {
  if (!embeds.normalized)
    throw std::invalid_argument("classify: embeddings must be L2-normalized");
  if (logit_scale < 0.0)
    throw std::invalid_argument("classify: logit_scale must be nonnegative");
  return softmax_rows(cosine_logits(embeds, bank.prototypes, logit_scale));
}

}  // namespace maskadapter
