#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <random>

namespace lgan {

// Deterministic random source. Every stochastic component takes an explicit
// Rng handle; there is no ambient global generator. The bit stream is fully
// specified by the seed (mt19937_64 plus the fixed transforms below), so a
// seeded run replays exactly, including after checkpoint restore.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0x853c49e6748fea9bULL) : engine_(seed) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("Rng::uniform: lo > hi");
    return lo + (hi - lo) * uniform();
  }

  // Standard normal via Box-Muller. The cached second value is part of the
  // serialized state so resumed streams stay aligned.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer on [lo, hi], inclusive. Rejection sampling kills the
  // modulo bias while keeping the stream deterministic.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("Rng::uniform_int: lo > hi");
    const uint64_t range = static_cast<uint64_t>(hi - lo) + 1u;
    if (range == 0) return static_cast<int64_t>(engine_());  // full 64-bit span
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - (std::numeric_limits<uint64_t>::max() % range + 1) % range;
    uint64_t x;
    do {
      x = engine_();
    } while (x > limit);
    return lo + static_cast<int64_t>(x % range);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Derive an independent child stream. Used for per-index dataset
  // determinism: (seed, index) alone decide a sample.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  Rng fork(uint64_t stream) {
    return Rng(mix(engine_(), stream));
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_ << ' ' << have_spare_ << ' ';
    os.precision(17);
    os << spare_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_ >> have_spare_ >> spare_;
    if (!is) throw std::runtime_error("Rng::deserialize: malformed state");
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace lgan
