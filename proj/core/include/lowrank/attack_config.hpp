#pragma once

#include <cstdint>
#include <string>

#include "lowrank/tensor.hpp"

namespace lowrank::attacks {

enum class Algorithm : std::uint8_t { kFgsm, kPgd, kLoraPgd, kRankProjectedPgd };

/// Where the factors (or the full-rank starting point) come from.
enum class Init : std::uint8_t {
  kRandom,    // LoRa: Gaussian U, zero V. Full-rank: start at the clean image.
  kTransfer,  // FGSM on a separate standard model
  kWarmup,    // FGSM on the attacked model itself
};

/// How the LoRa-PGD backward pass treats normalize and clamp.
enum class GradThrough : std::uint8_t {
  kExact,            // clamp mask and the normalize Jacobian
  kStraightThrough,  // both treated as identity
};

const char* to_string(Algorithm a) noexcept;
const char* to_string(Init i) noexcept;
const char* to_string(GradThrough g) noexcept;
Algorithm algorithm_from_string(const std::string& s);
Init init_from_string(const std::string& s);
GradThrough grad_through_from_string(const std::string& s);

inline bool is_low_rank(Algorithm a) noexcept {
  return a == Algorithm::kLoraPgd || a == Algorithm::kRankProjectedPgd;
}

struct AttackConfig {
  Algorithm algorithm = Algorithm::kPgd;
  int steps = 10;
  double tau = 0.5;
  NormKind norm_kind = NormKind::kFrobenius;
  /// Fraction of min(N, M) used as the rank; only meaningful for low-rank algorithms.
  double rank_fraction = 0.1;
  Init init = Init::kRandom;
  std::uint64_t seed = 0;
  GradThrough grad_through = GradThrough::kExact;

  /// Throws ContractViolation when a field is out of range.
  void validate() const;
};

}  // namespace lowrank::attacks
