#pragma once

// Portable counter-based random numbers (Philox4x32-10). Every draw is a pure
// function of (seed, stream, counter), so generated data is identical across
// platforms and standard libraries, and independent streams can be handed to
// parallel workers without coordination.

#include <array>
#include <cstdint>
#include <vector>

namespace sep {

/// One Philox4x32 block: 10 rounds over a 128-bit counter with a 64-bit key.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key);

/// Mix (seed, a, b) into a new 64-bit seed; used to derive per-pass and per-chain streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1), 53-bit resolution.
  double uniform();
  double normal();
  /// Uniform integer in [0, n), unbiased.
  std::uint64_t uniform_index(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Index drawn with probability proportional to weights.
  std::size_t categorical(const std::vector<double>& weights);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Fisher-Yates permutation of 0..n-1 driven by rng.
std::vector<std::size_t> random_permutation(std::size_t n, CounterRng& rng);

}  // namespace sep
