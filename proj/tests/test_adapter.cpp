#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "maskadapter/adapter.hpp"
#include "maskadapter/synthworld.hpp"

using namespace maskadapter;

namespace {

FeatureMap random_features(int c, int h, int w, std::uint64_t seed) {
  FeatureMap f(c, h, w);
  Rng rng(seed);
  for (auto& x : f.data) x = rng.normal();
  return f;
}

BinaryMaskBatch random_masks(int n, int h, int w, std::uint64_t seed) {
  BinaryMaskBatch masks(n, h, w);
  Rng rng(seed);
  // Random rectangles; always nonempty.
  for (int i = 0; i < n; ++i) {
    const int y0 = rng.uniform_int(h / 2), x0 = rng.uniform_int(w / 2);
    const int y1 = y0 + 1 + rng.uniform_int(h - y0 - 1), x1 = x0 + 1 + rng.uniform_int(w - x0 - 1);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) masks.at(i, y, x) = 1;
  }
  return masks;
}

/// Scalar loss for gradient checking: weighted sum of all activations.
double weighted_sum(const ActivationStack& acts, const std::vector<double>& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < acts.data.size(); ++i) s += weights[i] * acts.data[i];
  return s;
}

}  // namespace

TEST_CASE("init_params shapes and determinism") {
  Rng a(0), b(0);
  const AdapterParams pa = init_params(16, 16, a);
  const AdapterParams pb = init_params(16, 16, b);
  auto ra = tensor_refs(const_cast<AdapterParams&>(pa));
  auto rb = tensor_refs(const_cast<AdapterParams&>(pb));
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) REQUIRE(*ra[i].data == *rb[i].data);

  Rng c(1);
  const AdapterParams single_map = init_params(16, 1, c);
  CHECK(single_map.pred_w.size() == 16);
  CHECK(single_map.pred_b.size() == 1);

  Rng d(2);
  const AdapterParams small = init_params(8, 16, d);
  CHECK(small.conv1_w.size() == 4 * 9);   // 1 -> 4
  CHECK(small.conv2_w.size() == 8 * 4 * 9);  // 4 -> 8

  Rng e(3);
  CHECK_THROWS_AS(init_params(15, 16, e), std::invalid_argument);
  CHECK_THROWS_AS(init_params(6, 16, e), std::invalid_argument);
  CHECK_THROWS_AS(init_params(16, 0, e), std::invalid_argument);
}

TEST_CASE("adapter_forward output is a valid activation stack") {
  Rng rng(0);
  const AdapterParams params = init_params(16, 4, rng);
  const FeatureMap features = random_features(16, 8, 8, 1);
  const BinaryMaskBatch masks = random_masks(3, 32, 32, 2);
  const auto res = adapter_forward(params, masks, features, false);
  REQUIRE(res.activations.count == 3);
  REQUIRE(res.activations.maps == 4);
  REQUIRE(res.activations.height == 8);
  REQUIRE(res.activations.width == 8);
  for (int n = 0; n < 3; ++n)
    for (int k = 0; k < 4; ++k) {
      double sum = 0.0;
      for (std::size_t i = 0; i < res.activations.slice_size(); ++i) {
        const double v = res.activations.slice(n, k)[i];
        REQUIRE(v > 0.0);  // softmax output is strictly positive
        sum += v;
      }
      REQUIRE(sum == Catch::Approx(1.0).margin(1e-5));
    }
}

TEST_CASE("adapter_forward handles an empty batch") {
  Rng rng(0);
  const AdapterParams params = init_params(8, 2, rng);
  const FeatureMap features = random_features(8, 4, 4, 1);
  const BinaryMaskBatch none(0, 16, 16);
  const auto res = adapter_forward(params, none, features, false);
  CHECK(res.activations.count == 0);
}

TEST_CASE("adapter_forward processes masks independently") {
  Rng rng(4);
  const AdapterParams params = init_params(8, 3, rng);
  const FeatureMap features = random_features(8, 4, 4, 5);
  BinaryMaskBatch masks(2, 16, 16);
  for (int y = 4; y < 12; ++y)
    for (int x = 2; x < 10; ++x) {
      masks.at(0, y, x) = 1;
      masks.at(1, y, x) = 1;
    }
  const auto res = adapter_forward(params, masks, features, false);
  for (int k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < res.activations.slice_size(); ++i)
      REQUIRE(res.activations.slice(0, k)[i] == res.activations.slice(1, k)[i]);
}

TEST_CASE("adapter_forward permutation equivariance") {
  Rng rng(6);
  const AdapterParams params = init_params(8, 2, rng);
  const FeatureMap features = random_features(8, 4, 4, 7);
  const BinaryMaskBatch masks = random_masks(3, 16, 16, 8);
  BinaryMaskBatch reversed(0, 16, 16);
  for (int i = 2; i >= 0; --i) reversed.append(masks.mask(i));
  const auto a = adapter_forward(params, masks, features, false).activations;
  const auto b = adapter_forward(params, reversed, features, false).activations;
  for (int n = 0; n < 3; ++n)
    for (int k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < a.slice_size(); ++i)
        REQUIRE(a.slice(n, k)[i] == b.slice(2 - n, k)[i]);
}

TEST_CASE("adapter_forward rejects mismatched resolutions") {
  Rng rng(1);
  const AdapterParams params = init_params(8, 2, rng);
  const FeatureMap features = random_features(8, 4, 4, 2);
  const BinaryMaskBatch masks = random_masks(1, 12, 12, 3);
  CHECK_THROWS_AS(adapter_forward(params, masks, features, false), std::invalid_argument);
}

TEST_CASE("adapter_backward zero upstream gives zero gradients") {
  Rng rng(2);
  const AdapterParams params = init_params(8, 2, rng);
  const FeatureMap features = random_features(8, 4, 4, 3);
  const BinaryMaskBatch masks = random_masks(2, 16, 16, 4);
  const auto fwd = adapter_forward(params, masks, features, true);
  const ActivationStack zero_upstream(2, 2, 4, 4);
  const AdapterGrads grads = adapter_backward(fwd.tape, zero_upstream);
  auto refs = tensor_refs(const_cast<AdapterParams&>(grads.params));
  for (const auto& r : refs)
    for (double g : *r.data) REQUIRE(g == 0.0);
  for (double g : grads.feature_grad.data) REQUIRE(g == 0.0);
}

TEST_CASE("adapter_backward is linear in the upstream gradient") {
  Rng rng(3);
  const AdapterParams params = init_params(8, 2, rng);
  const FeatureMap features = random_features(8, 4, 4, 4);
  const BinaryMaskBatch masks = random_masks(1, 16, 16, 5);
  const auto fwd = adapter_forward(params, masks, features, true);

  ActivationStack g1(1, 2, 4, 4), g2(1, 2, 4, 4), g12(1, 2, 4, 4);
  Rng grng(6);
  for (std::size_t i = 0; i < g1.data.size(); ++i) {
    g1.data[i] = grng.normal();
    g2.data[i] = grng.normal();
    g12.data[i] = g1.data[i] + g2.data[i];
  }
  const AdapterGrads a = adapter_backward(fwd.tape, g1);
  const AdapterGrads b = adapter_backward(fwd.tape, g2);
  const AdapterGrads ab = adapter_backward(fwd.tape, g12);
  auto ra = tensor_refs(const_cast<AdapterParams&>(a.params));
  auto rb = tensor_refs(const_cast<AdapterParams&>(b.params));
  auto rab = tensor_refs(const_cast<AdapterParams&>(ab.params));
  for (std::size_t t = 0; t < ra.size(); ++t)
    for (std::size_t i = 0; i < ra[t].data->size(); ++i)
      REQUIRE((*rab[t].data)[i] ==
              Catch::Approx((*ra[t].data)[i] + (*rb[t].data)[i]).margin(1e-9));
}

TEST_CASE("adapter_backward parameter gradients match finite differences") {
  // C=8, K=2, 8x8 features; loss = weighted sum of activations. To keep the
  // suite fast, a random subset of coordinates per tensor is checked across
  // several draws; the acceptance suite runs the full 20-draw version.
  for (int draw = 0; draw < 4; ++draw) {
    Rng rng(100 + draw);
    AdapterParams params = init_params(8, 2, rng);
    const FeatureMap features = random_features(8, 8, 8, 200 + draw);
    const BinaryMaskBatch masks = random_masks(2, 32, 32, 300 + draw);

    const auto fwd = adapter_forward(params, masks, features, true);
    ActivationStack upstream(2, 2, 8, 8);
    Rng urng(400 + draw);
    std::vector<double> weights(upstream.data.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
      weights[i] = urng.normal();
      upstream.data[i] = weights[i];
    }
    const AdapterGrads grads = adapter_backward(fwd.tape, upstream);

    auto prefs = tensor_refs(params);
    auto grefs = tensor_refs(const_cast<AdapterParams&>(grads.params));
    Rng pick(500 + draw);
    const double step = 1e-4;
    for (std::size_t t = 0; t < prefs.size(); ++t) {
      auto& tensor = *prefs[t].data;
      for (int trial = 0; trial < 3; ++trial) {
        const std::size_t idx = pick.uniform_int(static_cast<int>(tensor.size()));
        const double saved = tensor[idx];
        tensor[idx] = saved + step;
        const double up =
            weighted_sum(adapter_forward(params, masks, features, false).activations, weights);
        tensor[idx] = saved - step;
        const double down =
            weighted_sum(adapter_forward(params, masks, features, false).activations, weights);
        tensor[idx] = saved;
        const double fd = (up - down) / (2.0 * step);
        const double analytic = (*grefs[t].data)[idx];
        const double tol = 1e-4 * std::max(1e-3, std::abs(fd));
        REQUIRE_THAT(analytic, Catch::Matchers::WithinAbs(fd, tol));
      }
    }
  }
}

TEST_CASE("adapter_backward feature gradients match finite differences") {
  Rng rng(7);
  const AdapterParams params = init_params(8, 2, rng);
  FeatureMap features = random_features(8, 8, 8, 8);
  const BinaryMaskBatch masks = random_masks(2, 32, 32, 9);

  const auto fwd = adapter_forward(params, masks, features, true);
  ActivationStack upstream(2, 2, 8, 8);
  Rng urng(10);
  std::vector<double> weights(upstream.data.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] = urng.normal();
    upstream.data[i] = weights[i];
  }
  const AdapterGrads grads = adapter_backward(fwd.tape, upstream);

  Rng pick(11);
  const double step = 1e-4;
  for (int trial = 0; trial < 24; ++trial) {
    const std::size_t idx = pick.uniform_int(static_cast<int>(features.data.size()));
    const double saved = features.data[idx];
    features.data[idx] = saved + step;
    const double up =
        weighted_sum(adapter_forward(params, masks, features, false).activations, weights);
    features.data[idx] = saved - step;
    const double down =
        weighted_sum(adapter_forward(params, masks, features, false).activations, weights);
    features.data[idx] = saved;
    const double fd = (up - down) / (2.0 * step);
    const double tol = 1e-4 * std::max(1e-3, std::abs(fd));
    REQUIRE_THAT(grads.feature_grad.data[idx], Catch::Matchers::WithinAbs(fd, tol));
  }
}
