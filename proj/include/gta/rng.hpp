#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "gta/common.hpp"

namespace gta {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stable named sub-stream derivation: hash the tag, mix with the seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a offset basis
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return splitmix64(seed ^ h);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::uint64_t index) {
  return splitmix64(derive_seed(seed, tag) ^ splitmix64(index + 1));
}

// mt19937_64 plus explicit distribution code. The engine output is fully
// specified by the standard; std:: distributions are not, so draws here are
// reproducible across compilers and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t raw() { return engine_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Lemire multiply-shift; bias is negligible
  /// for the dataset/batch sizes used here.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw config_error("uniform_index: n must be positive");
    return static_cast<std::uint64_t>(
        (static_cast<__uint128_t>(raw()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call, two draws consumed).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Normal(0, stddev) rejected outside two standard deviations.
  double truncated_normal(double stddev) {
    double z = normal();
    while (std::fabs(z) > 2.0) z = normal();
    return z * stddev;
  }

  /// Engine state as text (format fixed by the standard).
  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) throw io_error("Rng: malformed serialized state");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace gta
