#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace probtf {

// Counter-style PRNG (splitmix64 core) with a Box-Muller gaussian path.
// The full state is (state, has_spare, spare), so streams can be persisted
// and resumed bit-exactly across checkpoints. All draws are platform
// independent; nothing here depends on libstdc++ distribution internals.
class Rng {
 public:
  Rng() : Rng(0x853c49e6748fea9bULL) {}
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1), 53 bits of randomness.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Multiply-shift map; requires n >= 1.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  struct State {
    std::uint64_t state = 0;
    bool has_spare = false;
    double spare = 0.0;
  };

  State save() const { return {state_, has_spare_, spare_}; }
  void restore(const State& s) {
    state_ = s.state;
    has_spare_ = s.has_spare;
    spare_ = s.spare;
  }

 private:
  std::uint64_t state_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derives an independent named substream from a root seed. Streams for
// different names (init, data order, dropout, latent noise, ...) never
// interact, so any one of them can be frozen or replayed in isolation.
inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
  return fnv1a64(name) ^ (root * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
}

inline Rng substream(std::uint64_t root, std::string_view name) {
  return Rng(substream_seed(root, name));
}

// Stirs two values into a fresh seed (per-step/per-item stream derivation).
inline std::uint64_t mix_u64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 0x7F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace probtf
