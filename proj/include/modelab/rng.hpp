#pragma once

#include <cmath>
#include <cstdint>

namespace modelab {

// SplitMix64 mixing function (Steele, Lea, Flood 2014). Used both as the
// generator step and to derive independent substream states from a seed.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Deterministic 64-bit stream with fixed cross-platform output. Normal draws
// use Box-Muller on two fresh uniforms per call (no cached spare), so the
// entire stream state is the single counter word and checkpoints stay exact.
struct Rng {
  std::uint64_t state = 0;

  Rng() = default;
  explicit Rng(std::uint64_t seed) : state(seed) {}

  // Substream `tag` of `seed`; distinct tags give statistically independent
  // streams (data vs latent vs penalty noise, ...).
  static Rng stream(std::uint64_t seed, std::uint64_t tag) {
    return Rng(mix64(seed + 0x9E3779B97F4A7C15ULL * (tag + 1)));
  }

  std::uint64_t next_u64() {
    state += 0x9E3779B97F4A7C15ULL;
    return mix64(state);
  }

  // Uniform on (0, 1]; never returns 0 so log() below is safe.
  double next_unit() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double next_normal() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n) via 128-bit multiply-shift (Lemire).
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }
};

// Stream tags used across the project. Fixed constants: changing one changes
// every seeded artifact, so they are part of the reproducibility contract.
namespace stream_tag {
inline constexpr std::uint64_t init = 1;         // parameter init
inline constexpr std::uint64_t data = 2;         // real-batch sampling
inline constexpr std::uint64_t latent = 3;       // z draws
inline constexpr std::uint64_t noise = 4;        // instance noise
inline constexpr std::uint64_t gp = 5;           // WGAN-GP interpolation
inline constexpr std::uint64_t cr = 6;           // consistency perturbations
inline constexpr std::uint64_t fake_labels = 7;  // labels fed to a conditional G
inline constexpr std::uint64_t eval_latent = 8;  // fixed evaluation latents
inline constexpr std::uint64_t eval_data = 9;    // fixed evaluation ground truth
inline constexpr std::uint64_t eval_kid = 10;    // KID subset permutations
inline constexpr std::uint64_t eval_labels = 11; // labels for conditional eval draws
}  // namespace stream_tag

}  // namespace modelab
