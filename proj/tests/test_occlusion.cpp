#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ogfr/error.hpp"
#include "ogfr/occlusion.hpp"

using namespace ogfr;
using synth::ParsingMask;
using synth::Part;

namespace {

// Writes `count` pixels of `part` in scan order starting at pixel `offset`.
void paint(ParsingMask& m, Part part, std::size_t count, std::size_t offset) {
  for (std::size_t i = 0; i < count; ++i) m.labels.at(offset + i) = static_cast<std::uint8_t>(part);
}

struct Case {
  const char* name;
  std::size_t head, left_arm, right_arm, torso, legs;
  std::vector<long> y;
  std::vector<std::uint8_t> z;
};

}  // namespace

TEST_CASE("hand-counted masks") {
  // y = {head, arms, torso, legs}; l_c = 1 iff y(c) < 5.
  const std::vector<Case> cases = {
      {"all background", 0, 0, 0, 0, 0, {0, 0, 0, 0}, {1, 1, 1, 1}},
      {"12 head pixels", 12, 0, 0, 0, 0, {12, 0, 0, 0}, {0, 1, 1, 1}},
      {"arms 7 + 5", 0, 7, 5, 0, 0, {0, 12, 0, 0}, {1, 0, 1, 1}},
      {"torso at 4", 0, 0, 0, 4, 0, {0, 0, 4, 0}, {1, 1, 1, 1}},
      {"torso at the boundary 5", 0, 0, 0, 5, 0, {0, 0, 5, 0}, {1, 1, 0, 1}},
      {"torso at 6", 0, 0, 0, 6, 0, {0, 0, 6, 0}, {1, 1, 0, 1}},
      {"arms 2 + 3 at the boundary", 0, 2, 3, 0, 0, {0, 5, 0, 0}, {1, 0, 1, 1}},
      {"all parts at 5", 5, 3, 2, 5, 5, {5, 5, 5, 5}, {0, 0, 0, 0}},
      {"legs only", 0, 0, 0, 0, 40, {0, 0, 0, 40}, {1, 1, 1, 0}},
      {"holistic", 30, 10, 10, 60, 50, {30, 20, 60, 50}, {0, 0, 0, 0}},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    ParsingMask m(16, 16);
    std::size_t at = 0;
    paint(m, Part::kHead, c.head, at), at += c.head;
    paint(m, Part::kLeftArm, c.left_arm, at), at += c.left_arm;
    paint(m, Part::kRightArm, c.right_arm, at), at += c.right_arm;
    paint(m, Part::kTorso, c.torso, at), at += c.torso;
    // Legs spread over the four leg and foot labels.
    for (std::size_t i = 0; i < c.legs; ++i) m.labels.at(at + i) = static_cast<std::uint8_t>(5 + i % 4);
    CHECK(pixel_counts(m, CoarseMap::standard()) == c.y);
    CHECK(estimate(m, 5).bits == c.z);
  }
}

TEST_CASE("occlusion type index puts the head in the lowest bit") {
  CHECK(OcclusionType{{0, 0, 0, 0}}.index() == 0);
  CHECK(OcclusionType{{1, 0, 0, 0}}.index() == 1);
  CHECK(OcclusionType{{0, 0, 0, 1}}.index() == 8);
  for (std::size_t i = 0; i < 16; ++i) CHECK(OcclusionType::from_index(i, 4).index() == i);
}

TEST_CASE("holistic render has no occluded coarse part") {
  Rng rng(2);
  for (int id = 0; id < 10; ++id) {
    const auto r = synth::render(synth::generate_identity_prototype(id, 1), 0, {}, synth::RenderConfig{}, rng);
    CHECK(estimate(r.mask, 5).index() == 0);
  }
}

TEST_CASE("doubling every count can only clear occlusion bits") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    ParsingMask small(8, 8), big(16, 8);
    for (std::size_t i = 0; i < small.labels.size(); ++i) {
      const auto label = static_cast<std::uint8_t>(rng.below(3) == 0 ? rng.below(9) : 0);
      small.labels[i] = label;
      big.labels[2 * i] = label;
      big.labels[2 * i + 1] = label;
    }
    const long lambda = static_cast<long>(rng.below(8));
    const auto a = estimate(small, lambda).bits, b = estimate(big, lambda).bits;
    for (std::size_t c = 0; c < 4; ++c) CHECK(b[c] <= a[c]);
  }
}

TEST_CASE("mismatched part count is rejected") {
  ParsingMask m(4, 4, 6);
  CHECK_THROWS_AS(pixel_counts(m, CoarseMap::standard()), DimensionError);
}
