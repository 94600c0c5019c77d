#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskadapter/common.hpp"
#include "maskadapter/extractors.hpp"
#include "maskadapter/masks.hpp"
#include "maskadapter/synthworld.hpp"

namespace maskadapter {

/// All trainable tensors of the adapter. The patchify block maps a binary
/// mask through two stride-2 3x3 convs (channels 1 -> C/2 -> C); the trunk is
/// three ConvNeXt-style blocks (depthwise 7x7, channelwise norm, 4x MLP with
/// a gated smooth nonlinearity, residual); the predictor is a 1x1 conv C -> K.
struct AdapterParams {
  int channels = 0;  // C
  int maps = 0;      // K

  std::vector<double> conv1_w;  // (C/2) x 1 x 3 x 3
  std::vector<double> conv1_b;  // C/2
  std::vector<double> conv2_w;  // C x (C/2) x 3 x 3
  std::vector<double> conv2_b;  // C

  struct Block {
    std::vector<double> dw_w;        // C x 7 x 7 depthwise kernel
    std::vector<double> norm_scale;  // C
    std::vector<double> norm_shift;  // C
    std::vector<double> expand_w;    // 4C x C
    std::vector<double> expand_b;    // 4C
    std::vector<double> project_w;   // C x 4C
    std::vector<double> project_b;   // C
  };
  std::array<Block, 3> blocks;

  std::vector<double> pred_w;  // K x C
  std::vector<double> pred_b;  // K
};

/// Named reference to one parameter tensor, in checkpoint order.
struct TensorRef {
  std::string name;
  std::vector<int> shape;
  std::vector<double>* data;
};

inline std::vector<TensorRef> tensor_refs(AdapterParams& p) {
  const int c = p.channels, half = p.channels / 2, k = p.maps;
  std::vector<TensorRef> refs;
  refs.push_back({"patchify_conv1.weight", {half, 1, 3, 3}, &p.conv1_w});
  refs.push_back({"patchify_conv1.bias", {half}, &p.conv1_b});
  refs.push_back({"patchify_conv2.weight", {c, half, 3, 3}, &p.conv2_w});
  refs.push_back({"patchify_conv2.bias", {c}, &p.conv2_b});
  for (int b = 0; b < 3; ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    auto& blk = p.blocks[b];
    refs.push_back({prefix + "depthwise.weight", {c, 7, 7}, &blk.dw_w});
    refs.push_back({prefix + "norm.scale", {c}, &blk.norm_scale});
    refs.push_back({prefix + "norm.shift", {c}, &blk.norm_shift});
    refs.push_back({prefix + "expand.weight", {4 * c, c}, &blk.expand_w});
    refs.push_back({prefix + "expand.bias", {4 * c}, &blk.expand_b});
    refs.push_back({prefix + "project.weight", {c, 4 * c}, &blk.project_w});
    refs.push_back({prefix + "project.bias", {c}, &blk.project_b});
  }
  refs.push_back({"predictor.weight", {k, c}, &p.pred_w});
  refs.push_back({"predictor.bias", {k}, &p.pred_b});
  return refs;
}

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

/// Fan-in-scaled uniform weights, unit norm scales, zero shifts and biases.
inline AdapterParams init_params(int channels, int maps, Rng& rng) {
  if (channels < 8 || channels % 2 != 0)
    throw std::invalid_argument("init_params: channels must be even and >= 8");
  if (maps < 1) throw std::invalid_argument("init_params: maps must be >= 1");
  AdapterParams p;
  p.channels = channels;
  p.maps = maps;
  auto fill_uniform = [&rng](std::vector<double>& v, std::size_t n, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    v.resize(n);
    for (double& x : v) x = rng.uniform(-bound, bound);
  };
  const int c = channels, half = channels / 2;
  fill_uniform(p.conv1_w, static_cast<std::size_t>(half) * 9, 1 * 9);
  p.conv1_b.assign(half, 0.0);
  fill_uniform(p.conv2_w, static_cast<std::size_t>(c) * half * 9, half * 9);
  p.conv2_b.assign(c, 0.0);
  for (auto& blk : p.blocks) {
    fill_uniform(blk.dw_w, static_cast<std::size_t>(c) * 49, 49);
    blk.norm_scale.assign(c, 1.0);
    blk.norm_shift.assign(c, 0.0);
    fill_uniform(blk.expand_w, static_cast<std::size_t>(4 * c) * c, c);
    blk.expand_b.assign(4 * c, 0.0);
    fill_uniform(blk.project_w, static_cast<std::size_t>(c) * 4 * c, 4 * c);
    blk.project_b.assign(c, 0.0);
  }
  fill_uniform(p.pred_w, static_cast<std::size_t>(maps) * c, c);
  p.pred_b.assign(maps, 0.0);
  return p;
}

/// Zero-valued gradient container with the same tensor layout as `like`.
inline AdapterParams zeros_like(const AdapterParams& like) {
  AdapterParams g;
  g.channels = like.channels;
  g.maps = like.maps;
  auto refs_src = tensor_refs(const_cast<AdapterParams&>(like));
  auto refs_dst = tensor_refs(g);
  for (std::size_t i = 0; i < refs_src.size(); ++i)
    refs_dst[i].data->assign(refs_src[i].data->size(), 0.0);
  return g;
}

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

inline double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) * 0.3989422804014327;  // standard normal pdf
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865475)) + x * phi;
}

constexpr double kNormEps = 1e-6;

inline void conv2d_forward(const double* in, int in_ch, int in_h, int in_w, const double* w,
                           const double* b, int out_ch, int ksize, int stride, int pad,
                           double* out, int out_h, int out_w) {
  for (int oc = 0; oc < out_ch; ++oc) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        double acc = b[oc];
        for (int ic = 0; ic < in_ch; ++ic) {
          const double* wk = w + ((static_cast<std::size_t>(oc) * in_ch + ic) * ksize) * ksize;
          const double* inp = in + static_cast<std::size_t>(ic) * in_h * in_w;
          for (int ky = 0; ky < ksize; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= in_h) continue;
            for (int kx = 0; kx < ksize; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= in_w) continue;
              acc += wk[ky * ksize + kx] * inp[static_cast<std::size_t>(iy) * in_w + ix];
            }
          }
        }
        out[(static_cast<std::size_t>(oc) * out_h + oy) * out_w + ox] = acc;
      }
    }
  }
}

inline void conv2d_backward(const double* dout, const double* in, const double* w, int in_ch,
                            int in_h, int in_w, int out_ch, int ksize, int stride, int pad,
                            int out_h, int out_w, double* din, double* dw, double* db) {
  for (int oc = 0; oc < out_ch; ++oc) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        const double g = dout[(static_cast<std::size_t>(oc) * out_h + oy) * out_w + ox];
        db[oc] += g;
        for (int ic = 0; ic < in_ch; ++ic) {
          double* dwk = dw + ((static_cast<std::size_t>(oc) * in_ch + ic) * ksize) * ksize;
          const double* wk = w + ((static_cast<std::size_t>(oc) * in_ch + ic) * ksize) * ksize;
          const double* inp = in + static_cast<std::size_t>(ic) * in_h * in_w;
          double* dinp = din ? din + static_cast<std::size_t>(ic) * in_h * in_w : nullptr;
          for (int ky = 0; ky < ksize; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= in_h) continue;
            for (int kx = 0; kx < ksize; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= in_w) continue;
              dwk[ky * ksize + kx] += g * inp[static_cast<std::size_t>(iy) * in_w + ix];
              if (dinp) dinp[static_cast<std::size_t>(iy) * in_w + ix] += g * wk[ky * ksize + kx];
            }
          }
        }
      }
    }
  }
}

inline void depthwise7_forward(const double* in, int ch, int h, int w, const double* kernel,
                               double* out) {
  constexpr int k = 7, pad = 3;
  for (int c = 0; c < ch; ++c) {
    const double* wk = kernel + static_cast<std::size_t>(c) * k * k;
    const double* inp = in + static_cast<std::size_t>(c) * h * w;
    double* outp = out + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = x + kx - pad;
            if (ix < 0 || ix >= w) continue;
            acc += wk[ky * k + kx] * inp[static_cast<std::size_t>(iy) * w + ix];
          }
        }
        outp[static_cast<std::size_t>(y) * w + x] = acc;
      }
    }
  }
}

inline void depthwise7_backward(const double* dout, const double* in, const double* kernel,
                                int ch, int h, int w, double* din, double* dkernel) {
  constexpr int k = 7, pad = 3;
  for (int c = 0; c < ch; ++c) {
    const double* wk = kernel + static_cast<std::size_t>(c) * k * k;
    double* dwk = dkernel + static_cast<std::size_t>(c) * k * k;
    const double* inp = in + static_cast<std::size_t>(c) * h * w;
    double* dinp = din + static_cast<std::size_t>(c) * h * w;
    const double* doutp = dout + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double g = doutp[static_cast<std::size_t>(y) * w + x];
        for (int ky = 0; ky < k; ++ky) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = x + kx - pad;
            if (ix < 0 || ix >= w) continue;
            dwk[ky * k + kx] += g * inp[static_cast<std::size_t>(iy) * w + ix];
            dinp[static_cast<std::size_t>(iy) * w + ix] += g * wk[ky * k + kx];
          }
        }
      }
    }
  }
}

/// 1x1 conv: out(oc, i) = b[oc] + sum_ic w[oc*in_ch + ic] * in(ic, i).
inline void pointwise_forward(const double* in, int in_ch, int hw, const double* w,
                              const double* b, int out_ch, double* out) {
  for (int oc = 0; oc < out_ch; ++oc) {
    double* outp = out + static_cast<std::size_t>(oc) * hw;
    for (int i = 0; i < hw; ++i) outp[i] = b[oc];
    const double* wrow = w + static_cast<std::size_t>(oc) * in_ch;
    for (int ic = 0; ic < in_ch; ++ic) {
      const double wv = wrow[ic];
      const double* inp = in + static_cast<std::size_t>(ic) * hw;
      for (int i = 0; i < hw; ++i) outp[i] += wv * inp[i];
    }
  }
}

inline void pointwise_backward(const double* dout, const double* in, const double* w, int in_ch,
                               int hw, int out_ch, double* din, double* dw, double* db) {
  for (int oc = 0; oc < out_ch; ++oc) {
    const double* doutp = dout + static_cast<std::size_t>(oc) * hw;
    for (int i = 0; i < hw; ++i) db[oc] += doutp[i];
    const double* wrow = w + static_cast<std::size_t>(oc) * in_ch;
    double* dwrow = dw + static_cast<std::size_t>(oc) * in_ch;
    for (int ic = 0; ic < in_ch; ++ic) {
      const double* inp = in + static_cast<std::size_t>(ic) * hw;
      double* dinp = din + static_cast<std::size_t>(ic) * hw;
      double acc = 0.0;
      const double wv = wrow[ic];
      for (int i = 0; i < hw; ++i) {
        acc += doutp[i] * inp[i];
        dinp[i] += wv * doutp[i];
      }
      dwrow[ic] += acc;
    }
  }
}

inline void check_finite(const std::vector<double>& v, const char* stage) {
  for (double x : v)
    if (!std::isfinite(x))
      throw std::runtime_error(std::string("adapter_forward: non-finite value after ") + stage);
}

}  // namespace detail

/// Cached intermediates for one mask, sufficient for exact reverse mode.
struct MaskTape {
  std::vector<double> mask_in;  // 1 x H x W as {0,1} doubles
  std::vector<double> z1;       // C/2 x H/2 x W/2 pre-nonlinearity
  std::vector<double> a1;       // C/2 x H/2 x W/2 post-nonlinearity
  std::vector<double> fused;    // C x h x w, F_m + F_clip
  struct BlockTape {
    std::vector<double> x_in;     // C x h x w block input
    std::vector<double> dconv;    // C x h x w depthwise output
    std::vector<double> xhat;     // C x h x w normalized (pre-affine)
    std::vector<double> inv_std;  // h*w
    std::vector<double> ln;       // C x h x w after affine
    std::vector<double> expanded; // 4C x h x w pre-nonlinearity
    std::vector<double> gated;    // 4C x h x w post-nonlinearity
  };
  std::array<BlockTape, 3> blocks;
  std::vector<double> trunk_out;  // C x h x w predictor input
  std::vector<double> raw;        // K x h x w pre-softmax
  std::vector<double> soft;       // K x h x w softmax output
};

/// Replayable record of one forward pass (self-contained: includes a copy of
/// the parameters it was produced with).
struct AdapterTape {
  AdapterParams params;
  int mask_h = 0, mask_w = 0;
  int feat_h = 0, feat_w = 0;
  std::vector<MaskTape> masks;
};

struct AdapterForwardResult {
  ActivationStack activations;
  AdapterTape tape;  // populated only when requested
  bool has_tape = false;
};

/// Forward pass: patchify each mask, fuse with features, run the trunk, and
/// spatially softmax the K predictor maps so every slice is a distribution.
inline AdapterForwardResult adapter_forward(const AdapterParams& params,
                                            const BinaryMaskBatch& masks,
                                            const FeatureMap& features, bool want_tape) {
  const int c = params.channels, half = c / 2, k = params.maps;
  const int fh = features.height, fw = features.width;
  if (features.channels != c)
    throw std::invalid_argument("adapter_forward: feature channels do not match params");
  if (masks.count > 0 &&
      (masks.height != fh * kFeatureStride || masks.width != fw * kFeatureStride))
    throw std::invalid_argument(
        "adapter_forward: mask resolution must be 4x feature resolution");

  const int h2 = masks.count > 0 ? masks.height / 2 : fh * 2;
  const int w2 = masks.count > 0 ? masks.width / 2 : fw * 2;
  const int hw = fh * fw;

  AdapterForwardResult res;
  res.activations = ActivationStack(masks.count, k, fh, fw);
  res.has_tape = want_tape;
  if (want_tape) {
    res.tape.params = params;
    res.tape.mask_h = masks.height;
    res.tape.mask_w = masks.width;
    res.tape.feat_h = fh;
    res.tape.feat_w = fw;
    res.tape.masks.resize(masks.count);
  }

  MaskTape scratch;
  for (int n = 0; n < masks.count; ++n) {
    MaskTape& t = want_tape ? res.tape.masks[n] : scratch;
    const BinaryMaskView m = masks.mask(n);

    t.mask_in.assign(static_cast<std::size_t>(masks.height) * masks.width, 0.0);
    for (std::size_t i = 0; i < t.mask_in.size(); ++i) t.mask_in[i] = m.data[i] ? 1.0 : 0.0;

    // Patchify: two stride-2 convs with a pointwise nonlinearity between.
    t.z1.assign(static_cast<std::size_t>(half) * h2 * w2, 0.0);
    detail::conv2d_forward(t.mask_in.data(), 1, masks.height, masks.width, params.conv1_w.data(),
                           params.conv1_b.data(), half, 3, 2, 1, t.z1.data(), h2, w2);
    t.a1.resize(t.z1.size());
    for (std::size_t i = 0; i < t.z1.size(); ++i) t.a1[i] = detail::gelu(t.z1[i]);
    t.fused.assign(static_cast<std::size_t>(c) * hw, 0.0);
    detail::conv2d_forward(t.a1.data(), half, h2, w2, params.conv2_w.data(),
                           params.conv2_b.data(), c, 3, 2, 1, t.fused.data(), fh, fw);
    for (std::size_t i = 0; i < t.fused.size(); ++i) t.fused[i] += features.data[i];
    detail::check_finite(t.fused, "patchify/fusion");

    // Trunk: three ConvNeXt blocks.
    std::vector<double> x = t.fused;
    for (int b = 0; b < 3; ++b) {
      auto& bt = t.blocks[b];
      const auto& bp = params.blocks[b];
      bt.x_in = x;
      bt.dconv.assign(x.size(), 0.0);
      detail::depthwise7_forward(x.data(), c, fh, fw, bp.dw_w.data(), bt.dconv.data());

      bt.xhat.resize(x.size());
      bt.inv_std.resize(hw);
      bt.ln.resize(x.size());
      for (int i = 0; i < hw; ++i) {
        double mean = 0.0;
        for (int ch = 0; ch < c; ++ch) mean += bt.dconv[static_cast<std::size_t>(ch) * hw + i];
        mean /= c;
        double var = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double d = bt.dconv[static_cast<std::size_t>(ch) * hw + i] - mean;
          var += d * d;
        }
        var /= c;
        const double inv_std = 1.0 / std::sqrt(var + detail::kNormEps);
        bt.inv_std[i] = inv_std;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t idx = static_cast<std::size_t>(ch) * hw + i;
          bt.xhat[idx] = (bt.dconv[idx] - mean) * inv_std;
          bt.ln[idx] = bp.norm_scale[ch] * bt.xhat[idx] + bp.norm_shift[ch];
        }
      }

      bt.expanded.assign(static_cast<std::size_t>(4 * c) * hw, 0.0);
      detail::pointwise_forward(bt.ln.data(), c, hw, bp.expand_w.data(), bp.expand_b.data(),
                                4 * c, bt.expanded.data());
      bt.gated.resize(bt.expanded.size());
      for (std::size_t i = 0; i < bt.expanded.size(); ++i)
        bt.gated[i] = detail::gelu(bt.expanded[i]);

      std::vector<double> projected(static_cast<std::size_t>(c) * hw, 0.0);
      detail::pointwise_forward(bt.gated.data(), 4 * c, hw, bp.project_w.data(),
                                bp.project_b.data(), c, projected.data());
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = bt.x_in[i] + projected[i];
      detail::check_finite(x, ("convnext block " + std::to_string(b)).c_str());
    }
    t.trunk_out = x;

    // Predictor + spatial softmax per map.
    t.raw.assign(static_cast<std::size_t>(k) * hw, 0.0);
    detail::pointwise_forward(x.data(), c, hw, params.pred_w.data(), params.pred_b.data(), k,
                              t.raw.data());
    detail::check_finite(t.raw, "predictor");
    for (int km = 0; km < k; ++km) {
      const double* rawp = t.raw.data() + static_cast<std::size_t>(km) * hw;
      double* outp = res.activations.slice(n, km);
      double mx = rawp[0];
      for (int i = 1; i < hw; ++i) mx = std::max(mx, rawp[i]);
      double sum = 0.0;
      for (int i = 0; i < hw; ++i) {
        outp[i] = std::exp(rawp[i] - mx);
        sum += outp[i];
      }
      for (int i = 0; i < hw; ++i) outp[i] /= sum;
    }
    if (want_tape) {
      t.soft.assign(res.activations.slice(n, 0),
                    res.activations.slice(n, 0) + static_cast<std::size_t>(k) * hw);
    }
  }
  return res;
}

/// Gradients produced by adapter_backward.
struct AdapterGrads {
  AdapterParams params;      // same tensor layout, holding d(loss)/d(param)
  FeatureMap feature_grad;   // d(loss)/d(F_clip) through the fusion add
};

/// Exact reverse-mode gradients of the forward map. `upstream` holds
/// d(loss)/d(activations) with the same shape as the forward output.
inline AdapterGrads adapter_backward(const AdapterTape& tape, const ActivationStack& upstream) {
  const AdapterParams& params = tape.params;
  const int c = params.channels, half = c / 2, k = params.maps;
  const int fh = tape.feat_h, fw = tape.feat_w, hw = fh * fw;
  const int n_masks = static_cast<int>(tape.masks.size());
  if (upstream.count != n_masks || upstream.maps != k || upstream.height != fh ||
      upstream.width != fw)
    throw std::invalid_argument("adapter_backward: upstream gradient shape mismatch");

  AdapterGrads grads;
  grads.params = zeros_like(params);
  grads.feature_grad = FeatureMap(c, fh, fw);

  const int h2 = tape.mask_h / 2, w2 = tape.mask_w / 2;

  for (int n = 0; n < n_masks; ++n) {
    const MaskTape& t = tape.masks[n];

    // Softmax backward per map.
    std::vector<double> draw(static_cast<std::size_t>(k) * hw, 0.0);
    for (int km = 0; km < k; ++km) {
      const double* a = t.soft.data() + static_cast<std::size_t>(km) * hw;
      const double* u = upstream.slice(n, km);
      double inner = 0.0;
      for (int i = 0; i < hw; ++i) inner += u[i] * a[i];
      double* d = draw.data() + static_cast<std::size_t>(km) * hw;
      for (int i = 0; i < hw; ++i) d[i] = a[i] * (u[i] - inner);
    }

    // Predictor backward.
    std::vector<double> dx(static_cast<std::size_t>(c) * hw, 0.0);
    detail::pointwise_backward(draw.data(), t.trunk_out.data(), params.pred_w.data(), c, hw, k,
                               dx.data(), grads.params.pred_w.data(), grads.params.pred_b.data());

    // Trunk backward.
    for (int b = 2; b >= 0; --b) {
      const auto& bt = t.blocks[b];
      const auto& bp = params.blocks[b];
      auto& bg = grads.params.blocks[b];

      // Residual: dx flows to both the block input and the projection.
      std::vector<double> dgated(static_cast<std::size_t>(4 * c) * hw, 0.0);
      detail::pointwise_backward(dx.data(), bt.gated.data(), bp.project_w.data(), 4 * c, hw, c,
                                 dgated.data(), bg.project_w.data(), bg.project_b.data());
      for (std::size_t i = 0; i < dgated.size(); ++i)
        dgated[i] *= detail::gelu_grad(bt.expanded[i]);
      std::vector<double> dln(static_cast<std::size_t>(c) * hw, 0.0);
      detail::pointwise_backward(dgated.data(), bt.ln.data(), bp.expand_w.data(), c, hw, 4 * c,
                                 dln.data(), bg.expand_w.data(), bg.expand_b.data());

      // Channelwise layer norm backward.
      std::vector<double> ddconv(static_cast<std::size_t>(c) * hw, 0.0);
      for (int i = 0; i < hw; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t idx = static_cast<std::size_t>(ch) * hw + i;
          const double dxhat = dln[idx] * bp.norm_scale[ch];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * bt.xhat[idx];
        }
        mean_dxhat /= c;
        mean_dxhat_xhat /= c;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t idx = static_cast<std::size_t>(ch) * hw + i;
          const double dxhat = dln[idx] * bp.norm_scale[ch];
          ddconv[idx] =
              bt.inv_std[i] * (dxhat - mean_dxhat - bt.xhat[idx] * mean_dxhat_xhat);
        }
      }
      for (int ch = 0; ch < c; ++ch) {
        double dscale = 0.0, dshift = 0.0;
        for (int i = 0; i < hw; ++i) {
          const std::size_t idx = static_cast<std::size_t>(ch) * hw + i;
          dscale += dln[idx] * bt.xhat[idx];
          dshift += dln[idx];
        }
        bg.norm_scale[ch] += dscale;
        bg.norm_shift[ch] += dshift;
      }

      std::vector<double> dxin(static_cast<std::size_t>(c) * hw, 0.0);
      detail::depthwise7_backward(ddconv.data(), bt.x_in.data(), bp.dw_w.data(), c, fh, fw,
                                  dxin.data(), bg.dw_w.data());
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dx[i] + dxin[i];
    }

    // Fusion add: gradient flows to the features and into the patchify stack.
    for (std::size_t i = 0; i < dx.size(); ++i) grads.feature_grad.data[i] += dx[i];

    std::vector<double> da1(static_cast<std::size_t>(half) * h2 * w2, 0.0);
    detail::conv2d_backward(dx.data(), t.a1.data(), params.conv2_w.data(), half, h2, w2, c, 3, 2,
                            1, fh, fw, da1.data(), grads.params.conv2_w.data(),
                            grads.params.conv2_b.data());
    for (std::size_t i = 0; i < da1.size(); ++i) da1[i] *= detail::gelu_grad(t.z1[i]);
    detail::conv2d_backward(da1.data(), t.mask_in.data(), params.conv1_w.data(), 1, tape.mask_h,
                            tape.mask_w, half, 3, 2, 1, h2, w2, nullptr,
                            grads.params.conv1_w.data(), grads.params.conv1_b.data());
  }
  return grads;
}

}  // namespace maskadapter
