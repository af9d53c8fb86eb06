#ifndef FLOWALIGN_RNG_HPP
#define FLOWALIGN_RNG_HPP

#include "flowalign/numerics.hpp"

#include <array>
#include <cstdint>

namespace flowalign {

/// Counter-based generator (Philox4x32-10). The key is the seed, the upper half of the
/// counter is the stream id, so `split(k)` gives statistically independent streams and a
/// draw depends only on (seed, stream, position).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  /// Independent generator sharing this seed.
  Rng split(std::uint64_t stream) const { return Rng(seed_, stream); }

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double normal();

  /// Integer uniform on [0, n).
  std::uint64_t below(std::uint64_t n);

  DenseMatrix normal_matrix(Index rows, Index cols);
  DenseMatrix uniform_matrix(Index rows, Index cols, double lo = 0.0, double hi = 1.0);
  DenseVector uniform_vector(Index n);

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

/// Single Philox4x32-10 block; exposed for known-answer tests.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

}  // namespace flowalign

#endif  // FLOWALIGN_RNG_HPP
