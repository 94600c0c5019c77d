#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <numeric>

#include "maskadapter/matching.hpp"

using namespace maskadapter;

namespace {

BinaryMaskBatch random_batch(int n, int h, int w, double density, Rng& rng) {
  BinaryMaskBatch batch(n, h, w);
  for (auto& px : batch.data) px = rng.uniform() < density ? 1 : 0;
  return batch;
}

/// Exhaustive minimum over all permutations for N = M.
double exhaustive_min_cost(const Matrix& cost) {
  const int n = cost.rows;
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost.at(i, perm[i]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double matchset_cost(const MatchSet& matches) {
  double total = 0.0;
  for (const auto& p : matches.pairs) total += 1.0 - p.iou;
  return total;
}

}  // namespace

TEST_CASE("iou_matcher keeps the diagonal when pred equals gt") {
  Rng rng(0);
  const BinaryMaskBatch gt = random_batch(4, 8, 8, 0.4, rng);
  const MatchSet matches = iou_matcher(gt, gt, 0.7);
  int diagonal = 0;
  for (const auto& p : matches.pairs) {
    if (p.gt_index == p.pred_index) {
      ++diagonal;
      CHECK(p.iou == 1.0);
    }
  }
  CHECK(diagonal == 4);
}

TEST_CASE("iou_matcher returns an empty set when nothing qualifies") {
  Rng rng(1);
  BinaryMaskBatch gt(1, 8, 8), pred(1, 8, 8);
  gt.at(0, 0, 0) = 1;
  pred.at(0, 7, 7) = 1;
  const MatchSet matches = iou_matcher(gt, pred, 0.5);
  CHECK(matches.empty());
}

TEST_CASE("iou_matcher equals the brute-force filter of iou_matrix") {
  Rng rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    const BinaryMaskBatch gt = random_batch(3, 8, 8, 0.45, rng);
    const BinaryMaskBatch pred = random_batch(4, 8, 8, 0.45, rng);
    const double threshold = 0.5;
    const MatchSet matches = iou_matcher(gt, pred, threshold);
    const Matrix m = iou_matrix(gt, pred);
    std::vector<std::pair<int, int>> expected;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j)
        if (m.at(i, j) >= threshold) expected.push_back({i, j});
    REQUIRE(matches.size() == expected.size());
    for (std::size_t k = 0; k < expected.size(); ++k) {
      REQUIRE(matches.pairs[k].gt_index == expected[k].first);
      REQUIRE(matches.pairs[k].pred_index == expected[k].second);
      REQUIRE(matches.pairs[k].iou == m.at(expected[k].first, expected[k].second));
      REQUIRE(matches.pairs[k].iou >= threshold);
    }
  }
}

TEST_CASE("iou_matcher is monotone in the threshold") {
  Rng rng(3);
  const BinaryMaskBatch gt = random_batch(4, 8, 8, 0.5, rng);
  const BinaryMaskBatch pred = random_batch(5, 8, 8, 0.5, rng);
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (const double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const std::size_t count = iou_matcher(gt, pred, t).size();
    REQUIRE(count <= prev);
    prev = count;
  }
}

TEST_CASE("iou_matcher validates the threshold") {
  Rng rng(4);
  const BinaryMaskBatch gt = random_batch(1, 4, 4, 0.5, rng);
  CHECK_THROWS_AS(iou_matcher(gt, gt, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(iou_matcher(gt, gt, 1.5), std::invalid_argument);
}

TEST_CASE("hungarian_matcher recovers a permutation of distinct masks") {
  Rng rng(5);
  BinaryMaskBatch gt(4, 8, 8);
  // Four disjoint quadrant masks.
  for (int n = 0; n < 4; ++n) {
    const int oy = (n / 2) * 4, ox = (n % 2) * 4;
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) gt.at(n, oy + y, ox + x) = 1;
  }
  const std::vector<int> perm{2, 0, 3, 1};
  BinaryMaskBatch pred(4, 8, 8);
  for (int n = 0; n < 4; ++n) {
    const auto src = gt.mask(perm[n]);
    std::copy(src.data, src.data + gt.mask_size(),
              pred.data.begin() + n * static_cast<long>(gt.mask_size()));
  }
  const MatchSet matches = hungarian_matcher(gt, pred);
  REQUIRE(matches.size() == 4);
  CHECK(matchset_cost(matches) == 0.0);
  for (const auto& p : matches.pairs) CHECK(perm[p.pred_index] == p.gt_index);
}

TEST_CASE("hungarian_matcher picks the best pred for a single gt") {
  Rng rng(6);
  BinaryMaskBatch gt(1, 8, 8);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) gt.at(0, y, x) = 1;
  BinaryMaskBatch pred(3, 8, 8);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) pred.at(0, y, x + 4) = 1;  // disjoint
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 3; ++x) pred.at(1, y, x) = 1;  // high overlap
  pred.at(2, 7, 7) = 1;                                // nearly nothing
  const MatchSet matches = hungarian_matcher(gt, pred);
  REQUIRE(matches.size() == 1);
  CHECK(matches.pairs[0].gt_index == 0);
  CHECK(matches.pairs[0].pred_index == 1);
}

TEST_CASE("hungarian_matcher total cost equals the exhaustive minimum") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 4;  // N = M in 2..5
    const BinaryMaskBatch gt = random_batch(n, 8, 8, 0.45, rng);
    const BinaryMaskBatch pred = random_batch(n, 8, 8, 0.45, rng);
    const Matrix ious = iou_matrix(gt, pred);
    Matrix cost(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) cost.at(i, j) = 1.0 - ious.at(i, j);
    const MatchSet matches = hungarian_matcher(gt, pred);
    REQUIRE(matches.size() == static_cast<std::size_t>(n));
    REQUIRE(matchset_cost(matches) == Catch::Approx(exhaustive_min_cost(cost)).margin(1e-9));
    // One-to-one: all gt and pred indices distinct.
    std::vector<int> gts, preds;
    for (const auto& p : matches.pairs) {
      gts.push_back(p.gt_index);
      preds.push_back(p.pred_index);
    }
    std::sort(gts.begin(), gts.end());
    std::sort(preds.begin(), preds.end());
    REQUIRE(std::adjacent_find(gts.begin(), gts.end()) == gts.end());
    REQUIRE(std::adjacent_find(preds.begin(), preds.end()) == preds.end());
  }
}

TEST_CASE("hungarian_matcher rectangular cases have size min(N, M)") {
  Rng rng(8);
  for (const auto [n, m] : {std::pair{2, 5}, std::pair{5, 2}, std::pair{1, 3}, std::pair{4, 4}}) {
    const BinaryMaskBatch gt = random_batch(n, 8, 8, 0.5, rng);
    const BinaryMaskBatch pred = random_batch(m, 8, 8, 0.5, rng);
    const MatchSet matches = hungarian_matcher(gt, pred);
    REQUIRE(static_cast<int>(matches.size()) == std::min(n, m));
  }
  const BinaryMaskBatch none(0, 8, 8);
  const BinaryMaskBatch one = random_batch(1, 8, 8, 0.5, rng);
  CHECK(hungarian_matcher(none, one).empty());
  CHECK(hungarian_matcher(one, none).empty());
}

TEST_CASE("hungarian_matcher rectangular optimality vs exhaustive subsets") {
  // For N > M, checks against the exhaustive minimum over ordered injections.
  Rng rng(9);
  const int n = 4, m = 2;
  const BinaryMaskBatch gt = random_batch(n, 8, 8, 0.45, rng);
  const BinaryMaskBatch pred = random_batch(m, 8, 8, 0.45, rng);
  const Matrix ious = iou_matrix(gt, pred);
  double best = std::numeric_limits<double>::infinity();
  for (int i0 = 0; i0 < n; ++i0)
    for (int i1 = 0; i1 < n; ++i1) {
      if (i0 == i1) continue;
      best = std::min(best, (1.0 - ious.at(i0, 0)) + (1.0 - ious.at(i1, 1)));
    }
  const MatchSet matches = hungarian_matcher(gt, pred);
  REQUIRE(matches.size() == 2);
  REQUIRE(matchset_cost(matches) == Catch::Approx(best).margin(1e-9));
}

TEST_CASE("hungarian_matcher is deterministic under ties") {
  // Two identical gt masks and two identical pred masks: every assignment is
  // optimal; the lexicographic rule picks (0,0), (1,1).
  BinaryMaskBatch gt(2, 4, 4), pred(2, 4, 4);
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        gt.at(n, y, x) = 1;
        pred.at(n, y, x) = 1;
      }
  const MatchSet matches = hungarian_matcher(gt, pred);
  REQUIRE(matches.size() == 2);
  CHECK(matches.pairs[0].gt_index == 0);
  CHECK(matches.pairs[0].pred_index == 0);
  CHECK(matches.pairs[1].gt_index == 1);
  CHECK(matches.pairs[1].pred_index == 1);
}
