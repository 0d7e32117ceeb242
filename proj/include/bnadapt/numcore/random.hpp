#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "bnadapt/errors.hpp"

namespace bnadapt {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Reproducible random stream keyed by (seed, stream_id). The engine is
// mt19937_64, whose output sequence is fixed by the standard; all
// distributions are implemented here so draws are bit-identical across
// standard libraries.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id), engine_(make_engine(seed, stream_id)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  // Independent sub-stream; depends only on (seed, stream_id, key).
  RandomStream child(std::uint64_t key) const {
    return RandomStream(seed_, splitmix64(stream_id_ * 0x100000001b3ULL ^ splitmix64(key + 0x51ed27)));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1).
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return u;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw Error("uniform_index(0)");
    // Rejection removes modulo bias.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
  }

  // log of a Gamma(shape, 1) draw. Marsaglia-Tsang; shapes below 1 use the
  // boost Gamma(a) = Gamma(a+1) * U^(1/a), kept in log space because
  // U^(1/a) underflows for a ~ 0.01.
  double log_gamma_variate(double shape) {
    if (!(shape > 0.0)) throw Error("gamma shape must be positive");
    if (shape < 1.0) {
      const double boosted = log_gamma_variate(shape + 1.0);
      return boosted + std::log(uniform_open()) / shape;
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::log(d * v);
    }
  }

  double gamma(double shape) { return std::exp(log_gamma_variate(shape)); }

  // Symmetric Dirichlet(alpha * 1_k) draw.
  std::vector<double> dirichlet(double alpha, std::size_t k) {
    std::vector<double> logs(k);
    for (auto& l : logs) l = log_gamma_variate(alpha);
    double mx = -std::numeric_limits<double>::infinity();
    for (double l : logs) mx = std::max(mx, l);
    double total = 0.0;
    std::vector<double> p(k);
    for (std::size_t i = 0; i < k; ++i) {
      p[i] = std::exp(logs[i] - mx);
      total += p[i];
    }
    for (auto& v : p) v /= total;
    return p;
  }

  // Index drawn from a probability vector (inverse CDF).
  std::size_t categorical(std::span<const double> p) {
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      acc += p[i];
      if (u < acc) return i;
    }
    // Rounding left u beyond the accumulated mass; return the last nonzero.
    for (std::size_t i = p.size(); i-- > 0;)
      if (p[i] > 0.0) return i;
    throw Error("categorical: empty probability vector");
  }

  // k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw Error("sample_without_replacement: k > n");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + uniform_index(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  std::vector<std::size_t> permutation(std::size_t n) { return sample_without_replacement(n, n); }

 private:
  static std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream_id) {
    const std::uint64_t a = splitmix64(seed);
    const std::uint64_t b = splitmix64(stream_id ^ 0xd1b54a32d192ed03ULL);
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return std::mt19937_64(seq);
  }

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace bnadapt
