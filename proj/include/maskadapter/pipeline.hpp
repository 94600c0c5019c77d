#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskadapter/adapter.hpp"
#include "maskadapter/common.hpp"
#include "maskadapter/extractors.hpp"
#include "maskadapter/losses.hpp"
#include "maskadapter/masks.hpp"
#include "maskadapter/matching.hpp"
#include "maskadapter/synthworld.hpp"

namespace maskadapter {

/// Synthetic-world dimensions shared by training and evaluation.
struct WorldConfig {
  int categories = 12;
  int channels = 16;
  int height = 64;
  int width = 64;
  double seen_fraction = 2.0 / 3.0;
  double noise_sigma = 0.5;
  double texture_strength = 1.0;  // intra-region appearance variation
  int regions_min = 3;
  int regions_max = 6;
  double logit_scale = 100.0;
};

enum class Stage { warmup, mixed };
enum class MatcherKind { iou, hungarian };
enum class OptimizerKind { gd, adamw };

/// One training stage. An epoch is one optimizer step over batch_scenes
/// freshly generated scenes; the 200/100 defaults keep the two stages at the
/// same 2:1 ratio as the full-scale schedule.
struct TrainConfig {
  Stage stage = Stage::warmup;
  int epochs = 200;
  int batch_scenes = 4;
  double learning_rate = 0.2;
  double weight_decay = 0.05;
  std::vector<double> lr_milestones{0.9, 0.95};  // step fractions
  double lr_decay = 0.1;
  double iou_threshold = 0.7;
  double lambda_ce = 2.0;
  double lambda_cos = 5.0;
  std::vector<double> perturb_iou_targets{0.7, 0.8, 0.9};
  double mix_ratio = 1.0;  // fraction of GT masks that get a perturbed twin
  MatcherKind matcher = MatcherKind::iou;
  OptimizerKind optimizer = OptimizerKind::adamw;
  std::uint64_t seed = 0;
  int maps = 16;  // K
  WorldConfig world;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (cfg.batch_scenes < 1) throw std::invalid_argument("train config: batch_scenes must be >= 1");
  if (cfg.learning_rate < 0.0)
    throw std::invalid_argument("train config: learning_rate must be nonnegative");
  if (cfg.weight_decay < 0.0)
    throw std::invalid_argument("train config: weight_decay must be nonnegative");
  if (cfg.mix_ratio < 0.0 || cfg.mix_ratio > 1.0)
    throw std::invalid_argument("train config: mix_ratio must be in [0, 1]");
  if (!(cfg.iou_threshold > 0.0) || cfg.iou_threshold > 1.0)
    throw std::invalid_argument("train config: iou_threshold must be in (0, 1]");
  if (cfg.lambda_ce < 0.0 || cfg.lambda_cos < 0.0)
    throw std::invalid_argument("train config: lambdas must be nonnegative");
  for (double t : cfg.perturb_iou_targets)
    if (!(t > 0.0) || t > 1.0)
      throw std::invalid_argument("train config: perturb targets must be in (0, 1]");
  if (cfg.world.regions_min < 1 || cfg.world.regions_max < cfg.world.regions_min)
    throw std::invalid_argument("train config: invalid region range");
}

/// Multi-step decay: the rate drops by lr_decay at each milestone fraction.
inline double lr_at_step(const TrainConfig& cfg, int step) {
  double lr = cfg.learning_rate;
  for (double frac : cfg.lr_milestones)
    if (step >= static_cast<int>(std::floor(frac * cfg.epochs))) lr *= cfg.lr_decay;
  return lr;
}

struct StepLog {
  int step = 0;
  double lr = 0.0;
  double total = 0.0;
  double ce = 0.0;
  double cos = 0.0;
  int n_matches = 0;
};
using TrainLog = std::vector<StepLog>;

/// Raised when the total loss stops being finite; carries the offending step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

namespace detail {

/// Normalizes rows of `pre` into an EmbeddingBatch, keeping the norms for the
/// normalization backward.
inline EmbeddingBatch normalize_rows(const Matrix& pre, std::vector<double>& norms) {
  EmbeddingBatch out(pre.rows, pre.cols);
  out.normalized = true;
  norms.resize(pre.rows);
  for (int i = 0; i < pre.rows; ++i) {
    const double n = l2_norm(pre.row(i));
    if (!(n > 0.0)) throw std::runtime_error("embedding normalization: zero-norm row");
    norms[i] = n;
    auto dst = out.row(i);
    const auto src = pre.row(i);
    for (int c = 0; c < pre.cols; ++c) dst[c] = src[c] / n;
  }
  return out;
}

/// d(loss)/d(pre-norm row) given d(loss)/d(normalized row).
inline void normalize_backward_row(std::span<const double> e, double norm,
                                   std::span<const double> de, std::span<double> dv) {
  const double inner = dot(e, de);
  for (std::size_t c = 0; c < e.size(); ++c) dv[c] = (de[c] - e[c] * inner) / norm;
}

/// Per-scene training material.
struct SceneBatchItem {
  Scene scene;
  ActivationStack acts_gt;
  AdapterTape tape_gt;
  Matrix pre_gt;
  std::vector<double> norms_gt;
  EmbeddingBatch e_gt;

  BinaryMaskBatch pred_masks;
  std::vector<int> pred_source;  // gt index each perturbed mask came from
  MatchSet matches;
  ActivationStack acts_pred;
  AdapterTape tape_pred;
  Matrix pre_pred;
  std::vector<double> norms_pred;
  EmbeddingBatch e_pred;
};

}  // namespace detail

namespace detail {

/// Shared two-stage trainer. The warmup stage trains on ground-truth masks
/// with the classification loss only; the mixed stage adds matcher-selected
/// perturbed masks and the mask-consistency loss. Classification during
/// training is restricted to seen-category prototypes.
inline std::pair<AdapterParams, TrainLog> train_stage(const TrainConfig& cfg,
                                                      const CategoryBank& bank,
                                                      AdapterParams params) {
  validate_train_config(cfg);
  const std::vector<int> seen_idx = bank.seen_indices();
  if (seen_idx.empty()) throw std::invalid_argument("train: bank has no seen categories");
  if (cfg.world.regions_max > static_cast<int>(seen_idx.size()))
    throw std::invalid_argument("train: regions_max exceeds the seen vocabulary");
  if (params.channels != bank.channels())
    throw std::invalid_argument("train: params/bank channel mismatch");

  // Seen-prototype submatrix and label -> seen-position map.
  Matrix protos_seen(static_cast<int>(seen_idx.size()), bank.channels());
  std::vector<int> seen_pos(bank.size(), -1);
  for (int s = 0; s < static_cast<int>(seen_idx.size()); ++s) {
    const auto src = bank.prototypes.row(seen_idx[s]);
    std::copy(src.begin(), src.end(), protos_seen.row(s).begin());
    seen_pos[seen_idx[s]] = s;
  }

  const bool mixed = cfg.stage == Stage::mixed;
  const double scale = cfg.world.logit_scale;
  Rng rng(cfg.seed + (mixed ? 0x6d69786564ull : 0));  // stage-salted stream
  TrainLog log;
  log.reserve(cfg.epochs);

  // AdamW moment buffers (unused under plain gradient descent).
  AdapterParams moment1 = zeros_like(params);
  AdapterParams moment2 = zeros_like(params);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

  for (int step = 0; step < cfg.epochs; ++step) {
    const double lr = lr_at_step(cfg, step);

    std::vector<SceneBatchItem> batch(cfg.batch_scenes);
    int total_pairs = 0;
    for (auto& item : batch) {
      const int regions =
          cfg.world.regions_min + rng.uniform_int(cfg.world.regions_max - cfg.world.regions_min + 1);
      item.scene = generate_scene(bank, cfg.world.height, cfg.world.width, regions,
                                  cfg.world.noise_sigma, rng, seen_idx,
                                  cfg.world.texture_strength);
      auto fwd = adapter_forward(params, item.scene.gt_masks, item.scene.features, true);
      item.acts_gt = std::move(fwd.activations);
      item.tape_gt = std::move(fwd.tape);
      item.pre_gt = aggregate_pre_norm(item.acts_gt, item.scene.features);
      item.e_gt = normalize_rows(item.pre_gt, item.norms_gt);

      if (mixed) {
        const int n_gt = item.scene.gt_masks.count;
        const int n_perturb = static_cast<int>(std::lround(cfg.mix_ratio * n_gt));
        std::vector<int> order(n_gt);
        for (int i = 0; i < n_gt; ++i) order[i] = i;
        for (int i = 0; i < n_gt - 1; ++i) {
          const int j = i + rng.uniform_int(n_gt - i);
          std::swap(order[i], order[j]);
        }
        item.pred_masks = BinaryMaskBatch(0, item.scene.height, item.scene.width);
        for (int i = 0; i < n_perturb; ++i) {
          const int src = order[i];
          const double target =
              cfg.perturb_iou_targets[rng.uniform_int(
                  static_cast<int>(cfg.perturb_iou_targets.size()))];
          const BinaryMask pm = perturb_mask(item.scene.gt_masks.mask(src), target, rng);
          item.pred_masks.append(pm.view());
          item.pred_source.push_back(src);
        }
        if (item.pred_masks.count > 0) {
          item.matches = cfg.matcher == MatcherKind::iou
                             ? iou_matcher(item.scene.gt_masks, item.pred_masks, cfg.iou_threshold)
                             : hungarian_matcher(item.scene.gt_masks, item.pred_masks);
          auto fwd_pred = adapter_forward(params, item.pred_masks, item.scene.features, true);
          item.acts_pred = std::move(fwd_pred.activations);
          item.tape_pred = std::move(fwd_pred.tape);
          item.pre_pred = aggregate_pre_norm(item.acts_pred, item.scene.features);
          item.e_pred = normalize_rows(item.pre_pred, item.norms_pred);
        }
        total_pairs += static_cast<int>(item.matches.size());
      }
    }

    // Assemble one classification batch: every GT mask, plus one row per
    // matched (gt, pred) pair carrying the matched GT label.
    struct RowRef {
      int scene;
      bool from_pred;
      int row;
    };
    std::vector<RowRef> row_refs;
    std::vector<int> targets;
    for (int s = 0; s < cfg.batch_scenes; ++s) {
      const auto& item = batch[s];
      for (int i = 0; i < item.e_gt.count; ++i) {
        row_refs.push_back({s, false, i});
        targets.push_back(seen_pos[item.scene.gt_labels[i]]);
      }
      for (const MatchPair& pr : item.matches.pairs) {
        row_refs.push_back({s, true, pr.pred_index});
        targets.push_back(seen_pos[item.scene.gt_labels[pr.gt_index]]);
      }
    }

    EmbeddingBatch ce_rows(static_cast<int>(row_refs.size()), bank.channels());
    ce_rows.normalized = true;
    for (std::size_t r = 0; r < row_refs.size(); ++r) {
      const auto& ref = row_refs[r];
      const auto src = ref.from_pred ? batch[ref.scene].e_pred.row(ref.row)
                                     : batch[ref.scene].e_gt.row(ref.row);
      std::copy(src.begin(), src.end(), ce_rows.row(static_cast<int>(r)).begin());
    }
    const Matrix logits = cosine_logits(ce_rows, protos_seen, scale);
    const CeResult ce = ce_loss(logits, targets);

    // Mask-consistency loss over matched seen-class pairs, averaged over all
    // pairs in the step.
    double cos_term = 0.0;
    std::vector<CosResult> cos_per_scene(cfg.batch_scenes);
    if (mixed && total_pairs > 0) {
      for (int s = 0; s < cfg.batch_scenes; ++s) {
        auto& item = batch[s];
        if (item.matches.empty()) continue;
        MatchSet seen_matches;  // policy: consistency applies to seen-class pairs
        for (const MatchPair& pr : item.matches.pairs)
          if (bank.seen_flags[item.scene.gt_labels[pr.gt_index]]) seen_matches.pairs.push_back(pr);
        if (seen_matches.empty()) continue;
        cos_per_scene[s] = cos_consistency_loss(item.e_gt, item.e_pred, seen_matches);
        const double w = static_cast<double>(seen_matches.size()) / total_pairs;
        cos_term += cos_per_scene[s].loss * w;
        // Rescale the per-scene mean gradient to the global mean.
        for (double& g : cos_per_scene[s].grad_gt.data)
          g *= static_cast<double>(seen_matches.size()) / total_pairs;
        for (double& g : cos_per_scene[s].grad_pred.data)
          g *= static_cast<double>(seen_matches.size()) / total_pairs;
      }
    }

    const LossReport report = total_loss(ce.loss, cos_term, cfg.lambda_ce,
                                         mixed ? cfg.lambda_cos : 0.0);
    if (!std::isfinite(report.total))
      throw TrainingDiverged(step, "training diverged at step " + std::to_string(step));

    // Backward: CE logits -> embeddings, plus cosine gradients, then through
    // row normalization, aggregation, and the adapter.
    std::vector<Matrix> d_e_gt(cfg.batch_scenes), d_e_pred(cfg.batch_scenes);
    for (int s = 0; s < cfg.batch_scenes; ++s) {
      d_e_gt[s] = Matrix(batch[s].e_gt.count, bank.channels());
      d_e_pred[s] = Matrix(batch[s].e_pred.count, bank.channels());
    }
    for (std::size_t r = 0; r < row_refs.size(); ++r) {
      const auto& ref = row_refs[r];
      auto dst = ref.from_pred ? d_e_pred[ref.scene].row(ref.row) : d_e_gt[ref.scene].row(ref.row);
      const auto dl = ce.grad_logits.row(static_cast<int>(r));
      for (int j = 0; j < protos_seen.rows; ++j) {
        const double g = cfg.lambda_ce * scale * dl[j];
        const auto proto = protos_seen.row(j);
        for (int c = 0; c < bank.channels(); ++c) dst[c] += g * proto[c];
      }
    }
    const double lcos = mixed ? cfg.lambda_cos : 0.0;
    if (lcos > 0.0) {
      for (int s = 0; s < cfg.batch_scenes; ++s) {
        if (cos_per_scene[s].grad_gt.rows == 0) continue;
        for (std::size_t i = 0; i < d_e_gt[s].data.size(); ++i)
          d_e_gt[s].data[i] += lcos * cos_per_scene[s].grad_gt.data[i];
        for (std::size_t i = 0; i < d_e_pred[s].data.size(); ++i)
          d_e_pred[s].data[i] += lcos * cos_per_scene[s].grad_pred.data[i];
      }
    }

    AdapterParams grads = zeros_like(params);
    auto grad_refs = tensor_refs(grads);
    auto accumulate = [&](const detail::SceneBatchItem& item, const Matrix& d_e,
                          const EmbeddingBatch& e, const std::vector<double>& norms,
                          const ActivationStack& acts, const AdapterTape& tape) {
      if (e.count == 0) return;
      Matrix d_pre(e.count, e.channels);
      for (int i = 0; i < e.count; ++i)
        normalize_backward_row(e.row(i), norms[i], d_e.row(i), d_pre.row(i));
      const ActivationStack d_acts = aggregate_backward(d_pre, acts, item.scene.features);
      const AdapterGrads g = adapter_backward(tape, d_acts);
      auto g_refs = tensor_refs(const_cast<AdapterParams&>(g.params));
      for (std::size_t t = 0; t < grad_refs.size(); ++t)
        for (std::size_t i = 0; i < grad_refs[t].data->size(); ++i)
          (*grad_refs[t].data)[i] += (*g_refs[t].data)[i];
    };
    for (int s = 0; s < cfg.batch_scenes; ++s) {
      accumulate(batch[s], d_e_gt[s], batch[s].e_gt, batch[s].norms_gt, batch[s].acts_gt,
                 batch[s].tape_gt);
      if (batch[s].e_pred.count > 0)
        accumulate(batch[s], d_e_pred[s], batch[s].e_pred, batch[s].norms_pred,
                   batch[s].acts_pred, batch[s].tape_pred);
    }

    // Parameter update with decoupled weight decay.
    auto param_refs = tensor_refs(params);
    if (cfg.optimizer == OptimizerKind::gd) {
      for (std::size_t t = 0; t < param_refs.size(); ++t) {
        auto& pv = *param_refs[t].data;
        const auto& gv = *grad_refs[t].data;
        for (std::size_t i = 0; i < pv.size(); ++i)
          pv[i] -= lr * gv[i] + lr * cfg.weight_decay * pv[i];
      }
    } else {
      auto m1_refs = tensor_refs(moment1);
      auto m2_refs = tensor_refs(moment2);
      const double bc1 = 1.0 - std::pow(kBeta1, step + 1);
      const double bc2 = 1.0 - std::pow(kBeta2, step + 1);
      for (std::size_t t = 0; t < param_refs.size(); ++t) {
        auto& pv = *param_refs[t].data;
        const auto& gv = *grad_refs[t].data;
        auto& m1 = *m1_refs[t].data;
        auto& m2 = *m2_refs[t].data;
        for (std::size_t i = 0; i < pv.size(); ++i) {
          m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * gv[i];
          m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * gv[i] * gv[i];
          const double mhat = m1[i] / bc1;
          const double vhat = m2[i] / bc2;
          pv[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps) + lr * cfg.weight_decay * pv[i];
        }
      }
    }

    log.push_back({step, lr, report.total, report.ce_term, report.cos_term, total_pairs});
  }
  return {std::move(params), std::move(log)};
}

}  // namespace detail

/// Ground-truth mask warmup: classification loss only, on GT masks.
inline std::pair<AdapterParams, TrainLog> train_warmup(const TrainConfig& cfg,
                                                       const CategoryBank& bank,
                                                       AdapterParams params) {
  if (cfg.stage != Stage::warmup)
    throw std::invalid_argument("train_warmup: config stage must be warmup");
  return detail::train_stage(cfg, bank, std::move(params));
}

/// Mixed-mask training: GT masks plus matcher-selected perturbed masks, with
/// the mask-consistency loss on matched pairs.
inline std::pair<AdapterParams, TrainLog> train_mixed(const TrainConfig& cfg,
                                                      const CategoryBank& bank,
                                                      AdapterParams params) {
  if (cfg.stage != Stage::mixed)
    throw std::invalid_argument("train_mixed: config stage must be mixed");
  return detail::train_stage(cfg, bank, std::move(params));
}

/// Per-class exponents for fusing two classifier outputs.
struct EnsembleConfig {
  double alpha = 0.7;
  double beta = 0.9;
  std::vector<std::uint8_t> seen_flags;
};

/// Weighted geometric mean per class: y_in^(1-w) * y_out^w with w = alpha for
/// seen columns and beta for unseen. Rows are renormalized for inspection;
/// the argmax is unchanged by that.
inline Matrix geometric_ensemble(const Matrix& y_in, const Matrix& y_out,
                                 const EnsembleConfig& cfg) {
  if (y_in.rows != y_out.rows || y_in.cols != y_out.cols)
    throw std::invalid_argument("geometric_ensemble: shape mismatch");
  if (static_cast<int>(cfg.seen_flags.size()) != y_in.cols)
    throw std::invalid_argument("geometric_ensemble: seen_flags length mismatch");
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0 || cfg.beta < 0.0 || cfg.beta > 1.0)
    throw std::invalid_argument("geometric_ensemble: alpha and beta must be in [0, 1]");
  Matrix out(y_in.rows, y_in.cols);
  for (int i = 0; i < y_in.rows; ++i) {
    double sum = 0.0;
    for (int j = 0; j < y_in.cols; ++j) {
      const double a = y_in.at(i, j), b = y_out.at(i, j);
      if (a < 0.0 || b < 0.0)
        throw std::invalid_argument("geometric_ensemble: negative probability");
      const double w = cfg.seen_flags[j] ? cfg.alpha : cfg.beta;
      out.at(i, j) = std::pow(a, 1.0 - w) * std::pow(b, w);
      sum += out.at(i, j);
    }
    if (!(sum > 0.0))
      throw std::runtime_error("geometric_ensemble: zero row after fusion");
    for (int j = 0; j < y_in.cols; ++j) out.at(i, j) /= sum;
  }
  return out;
}

inline constexpr int kVoidLabel = -1;

/// Per-pixel argmax of mask-weighted class scores; pixels covered by no mask
/// get the void label. Ties break toward the smaller class index.
inline std::vector<int> semantic_inference(const BinaryMaskBatch& masks,
                                           const Matrix& class_scores) {
  if (class_scores.rows != masks.count)
    throw std::invalid_argument("semantic_inference: score rows must match mask count");
  for (double v : class_scores.data)
    if (v < 0.0) throw std::invalid_argument("semantic_inference: negative score");
  const int npx = masks.height * masks.width;
  const int L = class_scores.cols;
  std::vector<double> acc(static_cast<std::size_t>(npx) * L, 0.0);
  std::vector<std::uint8_t> covered(npx, 0);
  for (int n = 0; n < masks.count; ++n) {
    const BinaryMaskView m = masks.mask(n);
    const auto row = class_scores.row(n);
    for (int i = 0; i < npx; ++i) {
      if (!m.data[i]) continue;
      covered[i] = 1;
      double* a = acc.data() + static_cast<std::size_t>(i) * L;
      for (int c = 0; c < L; ++c) a[c] += row[c];
    }
  }
  std::vector<int> labels(npx, kVoidLabel);
  for (int i = 0; i < npx; ++i) {
    if (!covered[i]) continue;
    const double* a = acc.data() + static_cast<std::size_t>(i) * L;
    int best = 0;
    for (int c = 1; c < L; ++c)
      if (a[c] > a[best]) best = c;
    labels[i] = best;
  }
  return labels;
}

enum class Extractor { pool, crop, adapter };

/// Where the in-vocabulary branch of the ensemble comes from: the toy world
/// has no separate in-vocabulary classifier, so mask pooling stands in;
/// one-hot ground truth is available for unit tests.
enum class EnsembleInSource { pool, onehot_gt };

struct EvalOptions {
  std::vector<double> perturb_targets{0.7, 0.8, 0.9};
  std::uint64_t seed = 0x45564143;
  double logit_scale = 100.0;
  EnsembleInSource in_source = EnsembleInSource::pool;
  int max_threads = -1;  // -1: MASKADAPTER_THREADS / hardware default
};

inline constexpr double kAbsentClass = -1.0;

struct EvalReport {
  double miou = 0.0;
  double miou_seen = 0.0;
  double miou_unseen = 0.0;
  std::vector<double> per_class_iou;  // kAbsentClass for classes absent from GT
  double mask_acc = 0.0;            // GT-mask classification accuracy
  double mask_acc_perturbed = 0.0;  // perturbed-mask classification accuracy
  int scene_count = 0;
  long gt_mask_count = 0;
};

namespace detail {

inline EmbeddingBatch extract_embeddings(Extractor extractor, const AdapterParams* params,
                                         const BinaryMaskBatch& masks, const FeatureMap& features) {
  switch (extractor) {
    case Extractor::pool:
      return mask_pool(downsample_masks(masks, kFeatureStride), features);
    case Extractor::crop:
      return mask_crop_embed(masks, features, kFeatureStride);
    case Extractor::adapter: {
      if (params == nullptr)
        throw std::invalid_argument("evaluate: adapter extractor requires trained params");
      auto fwd = adapter_forward(*params, masks, features, false);
      return aggregate(fwd.activations, features);
    }
  }
  throw std::invalid_argument("evaluate: unknown extractor");
}

inline Matrix onehot_scores(std::span<const int> labels, int n_classes) {
  Matrix m(static_cast<int>(labels.size()), n_classes);
  for (int i = 0; i < m.rows; ++i) m.at(i, labels[i]) = 1.0;
  return m;
}

}  // namespace detail

/// Evaluates one extractor over a scene list: classification accuracy on GT
/// masks, segmentation metrics (mIoU over classes present, split into seen
/// and unseen) on perturbed masks, optionally fusing with the in-vocabulary
/// surrogate via the geometric ensemble. Scenes are processed in parallel
/// with per-scene RNG streams; results do not depend on the thread count.
inline EvalReport evaluate(const std::vector<Scene>& scenes, const AdapterParams* params,
                           const CategoryBank& bank, Extractor extractor,
                           const std::optional<EnsembleConfig>& ensemble = std::nullopt,
                           const EvalOptions& opts = {}) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: scene list is empty");
  if (extractor == Extractor::adapter && params == nullptr)
    throw std::invalid_argument("evaluate: adapter extractor requires trained params");
  const int L = bank.size();

  struct SceneResult {
    long acc_hits = 0, acc_total = 0;
    long acc_pert_hits = 0, acc_pert_total = 0;
    std::vector<long> confusion;  // L x L, gt-major
  };
  std::vector<SceneResult> results(scenes.size());

  parallel_for(static_cast<int>(scenes.size()), [&](int si) {
    const Scene& scene = scenes[si];
    SceneResult& r = results[si];
    r.confusion.assign(static_cast<std::size_t>(L) * L, 0);
    Rng rng(Rng::mix(opts.seed, static_cast<std::uint64_t>(si)));

    auto scores_for = [&](const BinaryMaskBatch& masks,
                          std::span<const int> source_labels) -> Matrix {
      const EmbeddingBatch e = detail::extract_embeddings(extractor, params, masks, scene.features);
      Matrix scores = classify(e, bank, opts.logit_scale);
      if (ensemble.has_value()) {
        EnsembleConfig cfg = *ensemble;
        if (cfg.seen_flags.empty()) cfg.seen_flags = bank.seen_flags;
        Matrix y_in;
        if (opts.in_source == EnsembleInSource::onehot_gt) {
          y_in = detail::onehot_scores(source_labels, L);
        } else {
          const EmbeddingBatch pooled =
              mask_pool(downsample_masks(masks, kFeatureStride), scene.features);
          y_in = classify(pooled, bank, opts.logit_scale);
        }
        scores = geometric_ensemble(y_in, scores, cfg);
      }
      return scores;
    };

    // Classification-accuracy mode: ground-truth masks.
    const Matrix gt_scores = scores_for(scene.gt_masks, scene.gt_labels);
    for (int i = 0; i < gt_scores.rows; ++i) {
      r.acc_hits += argmax_row(gt_scores.row(i)) == scene.gt_labels[i];
      ++r.acc_total;
    }

    // Segmentation mode: perturbed masks stand in for an imperfect generator.
    BinaryMaskBatch pred_masks(0, scene.height, scene.width);
    for (int i = 0; i < scene.gt_masks.count; ++i) {
      const double target =
          opts.perturb_targets[rng.uniform_int(static_cast<int>(opts.perturb_targets.size()))];
      pred_masks.append(perturb_mask(scene.gt_masks.mask(i), target, rng).view());
    }
    const Matrix pred_scores = scores_for(pred_masks, scene.gt_labels);
    for (int i = 0; i < pred_scores.rows; ++i) {
      r.acc_pert_hits += argmax_row(pred_scores.row(i)) == scene.gt_labels[i];
      ++r.acc_pert_total;
    }

    const std::vector<int> pred_map = semantic_inference(pred_masks, pred_scores);
    for (std::size_t px = 0; px < pred_map.size(); ++px) {
      const int p = pred_map[px];
      if (p == kVoidLabel) continue;  // void pixels are excluded from metrics
      const int g = scene.label_map[px];
      ++r.confusion[static_cast<std::size_t>(g) * L + p];
    }
  }, opts.max_threads);

  // Ordered reduction.
  EvalReport report;
  report.scene_count = static_cast<int>(scenes.size());
  std::vector<long> confusion(static_cast<std::size_t>(L) * L, 0);
  long hits = 0, total = 0, pert_hits = 0, pert_total = 0;
  for (const SceneResult& r : results) {
    hits += r.acc_hits;
    total += r.acc_total;
    pert_hits += r.acc_pert_hits;
    pert_total += r.acc_pert_total;
    for (std::size_t i = 0; i < confusion.size(); ++i) confusion[i] += r.confusion[i];
  }
  report.mask_acc = total > 0 ? static_cast<double>(hits) / total : 0.0;
  report.mask_acc_perturbed = pert_total > 0 ? static_cast<double>(pert_hits) / pert_total : 0.0;
  report.gt_mask_count = total;

  report.per_class_iou.assign(L, kAbsentClass);
  double sum_all = 0.0, sum_seen = 0.0, sum_unseen = 0.0;
  int n_all = 0, n_seen = 0, n_unseen = 0;
  for (int c = 0; c < L; ++c) {
    long row_sum = 0, col_sum = 0;
    for (int j = 0; j < L; ++j) {
      row_sum += confusion[static_cast<std::size_t>(c) * L + j];
      col_sum += confusion[static_cast<std::size_t>(j) * L + c];
    }
    if (row_sum == 0) continue;  // class absent from GT
    const long tp = confusion[static_cast<std::size_t>(c) * L + c];
    const long denom = row_sum + col_sum - tp;
    const double class_iou = denom > 0 ? static_cast<double>(tp) / denom : 0.0;
    report.per_class_iou[c] = class_iou;
    sum_all += class_iou;
    ++n_all;
    if (bank.seen_flags[c]) {
      sum_seen += class_iou;
      ++n_seen;
    } else {
      sum_unseen += class_iou;
      ++n_unseen;
    }
  }
  report.miou = n_all > 0 ? sum_all / n_all : 0.0;
  report.miou_seen = n_seen > 0 ? sum_seen / n_seen : 0.0;
  report.miou_unseen = n_unseen > 0 ? sum_unseen / n_unseen : 0.0;
  return report;
}

/// Generates a deterministic evaluation set over the full vocabulary.
inline std::vector<Scene> make_eval_scenes(const CategoryBank& bank, const WorldConfig& world,
                                           int count, std::uint64_t seed) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  Rng rng(seed);
  const int max_regions = std::min(world.regions_max, bank.size());
  for (int i = 0; i < count; ++i) {
    const int regions =
        world.regions_min + rng.uniform_int(max_regions - world.regions_min + 1);
    scenes.push_back(generate_scene(bank, world.height, world.width, regions, world.noise_sigma,
                                    rng, {}, world.texture_strength));
  }
  return scenes;
}

}  // namespace maskadapter
