#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace maskadapter {

/// Deterministic RNG: the engine is the fully-specified mt19937_64, and all
/// distribution transforms are done by hand so that streams are reproducible
/// across standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    return static_cast<int>(engine_() % static_cast<std::uint64_t>(n));
  }

  /// Standard normal via Box-Muller (cached second variate).
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  std::uint64_t next_u64() { return engine_(); }

  /// Derive an independent stream (used for per-scene workers).
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

/// Dense row-major matrix of doubles.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }
  std::span<double> row(int i) { return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int i) const { return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) {
  return std::sqrt(dot(v, v));
}

/// Normalizes in place; throws on a zero vector.
inline void l2_normalize(std::span<double> v, const std::string& what = "vector") {
  const double n = l2_norm(v);
  if (!(n > 0.0)) throw std::runtime_error("l2_normalize: zero-norm " + what);
  for (double& x : v) x /= n;
}

inline int argmax_row(std::span<const double> row) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(row.size()); ++j)
    if (row[j] > row[best]) best = j;  // ties keep the smaller index
  return best;
}

/// Worker cap: MASKADAPTER_THREADS if set, else hardware concurrency.
inline int worker_threads() {
  if (const char* env = std::getenv("MASKADAPTER_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Runs fn(i) for i in [0, n) on up to worker_threads() threads. Each index
/// must be independent; callers reduce results in index order afterwards so
/// the outcome does not depend on the thread count.
template <typename Fn>
void parallel_for(int n, Fn&& fn, int max_threads = -1) {
  if (n <= 0) return;
  int threads = max_threads > 0 ? max_threads : worker_threads();
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (int i = t; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace maskadapter
