#pragma once

#include <cstdint>
#include <vector>

#include "ogfr/synth.hpp"

namespace ogfr {

/// Fine part (1..K) -> coarse part (0..C-1). Background is not mapped.
struct CoarseMap {
  std::vector<std::size_t> fine_to_coarse;  // index 0 unused
  std::size_t num_coarse = 4;

  /// {head}, {left arm, right arm}, {torso}, {legs and feet}.
  static CoarseMap standard();
  std::size_t num_fine() const { return fine_to_coarse.size() - 1; }
  void validate() const;
};

/// z: one bit per coarse part, 1 = occluded. Bit c carries weight 2^c in index().
struct OcclusionType {
  std::vector<std::uint8_t> bits;

  std::size_t index() const;
  static OcclusionType from_index(std::size_t index, std::size_t num_coarse);
  friend bool operator==(const OcclusionType&, const OcclusionType&) = default;
};

/// y(c): pixels whose fine label maps to coarse part c.
std::vector<long> pixel_counts(const synth::ParsingMask& mask, const CoarseMap& map);

/// l_c = 1 iff y(c) < lambda.
OcclusionType estimate(const synth::ParsingMask& mask, long lambda, const CoarseMap& map = CoarseMap::standard());

}  // namespace ogfr
