#include "ogfr/occlusion.hpp"

#include <string>

#include "ogfr/error.hpp"

namespace ogfr {

CoarseMap CoarseMap::standard() {
  using synth::Part;
  CoarseMap m;
  m.num_coarse = 4;
  m.fine_to_coarse.assign(synth::kNumParts + 1, 0);
  auto set = [&m](Part p, std::size_t c) { m.fine_to_coarse[static_cast<std::size_t>(p)] = c; };
  set(Part::kHead, 0);
  set(Part::kLeftArm, 1);
  set(Part::kRightArm, 1);
  set(Part::kTorso, 2);
  set(Part::kLeftLeg, 3);
  set(Part::kRightLeg, 3);
  set(Part::kLeftFoot, 3);
  set(Part::kRightFoot, 3);
  return m;
}

void CoarseMap::validate() const {
  if (fine_to_coarse.size() < 2 || num_coarse == 0) throw ConfigError("coarse map is empty");
  for (std::size_t k = 1; k < fine_to_coarse.size(); ++k) {
    if (fine_to_coarse[k] >= num_coarse) {
      throw ConfigError("fine part " + std::to_string(k) + " maps outside the coarse range");
    }
  }
}

std::size_t OcclusionType::index() const {
  std::size_t idx = 0;
  for (std::size_t c = 0; c < bits.size(); ++c) idx |= static_cast<std::size_t>(bits[c] != 0) << c;
  return idx;
}

OcclusionType OcclusionType::from_index(std::size_t index, std::size_t num_coarse) {
  OcclusionType z;
  z.bits.resize(num_coarse);
  for (std::size_t c = 0; c < num_coarse; ++c) z.bits[c] = static_cast<std::uint8_t>((index >> c) & 1U);
  return z;
}

std::vector<long> pixel_counts(const synth::ParsingMask& mask, const CoarseMap& map) {
  map.validate();
  if (mask.num_parts != map.num_fine()) {
    throw DimensionError("mask has " + std::to_string(mask.num_parts) + " parts, coarse map expects " +
                         std::to_string(map.num_fine()));
  }
  std::vector<long> y(map.num_coarse, 0);
  for (std::uint8_t label : mask.labels) {
    if (label == 0) continue;
    if (label > mask.num_parts) throw ContractError("mask label out of range");
    ++y[map.fine_to_coarse[label]];
  }
  return y;
}

OcclusionType estimate(const synth::ParsingMask& mask, long lambda, const CoarseMap& map) {
  if (lambda < 0) throw ConfigError("lambda must be non-negative");
  const std::vector<long> y = pixel_counts(mask, map);
  OcclusionType z;
  z.bits.resize(y.size());
  for (std::size_t c = 0; c < y.size(); ++c) z.bits[c] = y[c] < lambda ? 1 : 0;
  return z;
}

}  // namespace ogfr
