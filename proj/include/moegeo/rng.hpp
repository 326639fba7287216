#pragma once

#include <cstdint>

#include "moegeo/numerics.hpp"

namespace moegeo {

/// xoshiro256** seeded through splitmix64, with Box-Muller normals.
///
/// The stream depends only on the seed and integer arithmetic, so it is
/// identical across compilers and platforms. Normal draws additionally go
/// through std::log / std::cos / std::sin.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform on (0, 1], 53-bit resolution.
  double uniform();
  double normal();

  /// Independent generator for a named substream of this generator's seed.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

/// n x d matrix of standard normal draws, filled row by row.
MatrixXd sample_gaussian(Rng& rng, Index n, Index d);

}  // namespace moegeo
