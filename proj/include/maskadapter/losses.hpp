#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "maskadapter/common.hpp"
#include "maskadapter/extractors.hpp"
#include "maskadapter/matching.hpp"

namespace maskadapter {

/// Decomposed training objective: total = lambda_ce * ce + lambda_cos * cos.
struct LossReport {
  double total = 0.0;
  double ce_term = 0.0;
  double cos_term = 0.0;
  double lambda_ce = 0.0;
  double lambda_cos = 0.0;
  std::vector<double> per_pair_cos;
};

struct CeResult {
  double loss = 0.0;
  Matrix grad_logits;  // (softmax - onehot) / N
};

/// Mean cross-entropy over rows of a logits matrix, via log-sum-exp.
inline CeResult ce_loss(const Matrix& logits, std::span<const int> targets) {
  if (logits.rows == 0) throw std::invalid_argument("ce_loss: empty batch");
  if (static_cast<int>(targets.size()) != logits.rows)
    throw std::invalid_argument("ce_loss: target count mismatch");
  CeResult res;
  res.grad_logits = Matrix(logits.rows, logits.cols);
  const double inv_n = 1.0 / logits.rows;
  for (int i = 0; i < logits.rows; ++i) {
    const int t = targets[i];
    if (t < 0 || t >= logits.cols) throw std::invalid_argument("ce_loss: target out of range");
    const auto in = logits.row(i);
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double sum = 0.0;
    for (int j = 0; j < logits.cols; ++j) sum += std::exp(in[j] - mx);
    const double lse = mx + std::log(sum);
    res.loss += (lse - in[t]) * inv_n;
    auto g = res.grad_logits.row(i);
    for (int j = 0; j < logits.cols; ++j) g[j] = std::exp(in[j] - lse) * inv_n;
    g[t] -= inv_n;
  }
  return res;
}

struct CosResult {
  double loss = 0.0;
  std::vector<double> per_pair;
  Matrix grad_gt;    // same shape as the gt embedding rows
  Matrix grad_pred;  // same shape as the pred embedding rows
};

/// Mean over matched pairs of 1 - cos(e_gt_i, e_pred_j). Gradients are exact,
/// differentiating through the cosine as if the inputs were unnormalized.
/// An empty match set is a legitimate zero-loss case, not an error: early
/// mixed-mask batches can produce no pairs above the threshold.
inline CosResult cos_consistency_loss(const EmbeddingBatch& e_gt, const EmbeddingBatch& e_pred,
                                      const MatchSet& matches) {
  if (!e_gt.normalized || !e_pred.normalized)
    throw std::invalid_argument("cos_consistency_loss: embeddings must be normalized");
  CosResult res;
  res.grad_gt = Matrix(e_gt.count, e_gt.channels);
  res.grad_pred = Matrix(e_pred.count, e_pred.channels);
  if (matches.empty()) return res;

  const double inv_p = 1.0 / static_cast<double>(matches.size());
  for (const MatchPair& pair : matches.pairs) {
    if (pair.gt_index < 0 || pair.gt_index >= e_gt.count || pair.pred_index < 0 ||
        pair.pred_index >= e_pred.count)
      throw std::invalid_argument("cos_consistency_loss: match index out of range");
    const auto a = e_gt.row(pair.gt_index);
    const auto b = e_pred.row(pair.pred_index);
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (!(na > 0.0) || !(nb > 0.0))
      throw std::invalid_argument("cos_consistency_loss: zero-norm embedding");
    const double ab = dot(a, b);
    const double cosine = ab / (na * nb);
    res.per_pair.push_back(1.0 - cosine);
    res.loss += (1.0 - cosine) * inv_p;
    // d(1 - cos)/da = -(b / (na*nb) - cos * a / na^2), accumulated per pair.
    auto ga = res.grad_gt.row(pair.gt_index);
    auto gb = res.grad_pred.row(pair.pred_index);
    for (int c = 0; c < e_gt.channels; ++c) {
      ga[c] += -inv_p * (b[c] / (na * nb) - cosine * a[c] / (na * na));
      gb[c] += -inv_p * (a[c] / (na * nb) - cosine * b[c] / (nb * nb));
    }
  }
  return res;
}

/// Combines the two terms into the total training objective.
inline LossReport total_loss(double ce, double cos, double lambda_ce, double lambda_cos) {
  if (lambda_ce < 0.0 || lambda_cos < 0.0)
    throw std::invalid_argument("total_loss: lambdas must be nonnegative");
  LossReport report;
  report.ce_term = ce;
  report.cos_term = cos;
  report.lambda_ce = lambda_ce;
  report.lambda_cos = lambda_cos;
  report.total = lambda_ce * ce + lambda_cos * cos;
  return report;
}

}  // namespace maskadapter
