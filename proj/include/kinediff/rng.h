#pragma once

#include "kinediff/tensor.h"

#include <array>
#include <cstdint>

namespace kinediff {

/// Counter-based generator (Philox4x32-10). The stream is a pure function of
/// (seed, stream id, draw index), so identical seeds reproduce bit-identical
/// draws on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const {
    return seed_;
  }
  std::uint64_t stream() const {
    return stream_;
  }

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in the open interval (0, 1).
  double uniform();
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [lo, hi].
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi);

  Tensor normal_tensor(const Shape& shape);

  /// Independent generator sharing this seed: stream ids partition the
  /// counter space.
  Rng fork(std::uint64_t stream) const {
    return Rng(seed_, stream);
  }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// The raw Philox4x32-10 block function.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key);

} // namespace kinediff
