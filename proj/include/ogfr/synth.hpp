#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ogfr/rng.hpp"

namespace ogfr::synth {

/// Fine-grained body parts; channel 0 of a parsing mask is background.
enum class Part : std::uint8_t {
  kBackground = 0,
  kHead,
  kLeftArm,
  kRightArm,
  kTorso,
  kLeftLeg,
  kRightLeg,
  kLeftFoot,
  kRightFoot,
};

inline constexpr std::size_t kNumParts = 8;

const char* part_name(Part p);

struct Rgb {
  float r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

double rgb_distance(const Rgb& a, const Rgb& b);

/// H×W×3 interleaved pixels in [0, 1].
struct SynthImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  int identity = 0;
  int camera = 0;

  float& at(std::size_t h, std::size_t w, std::size_t c) { return pixels[(h * width + w) * 3 + c]; }
  float at(std::size_t h, std::size_t w, std::size_t c) const { return pixels[(h * width + w) * 3 + c]; }
};

/// Per-pixel part label. Storing the active channel index makes the one-hot
/// property structural: every pixel has exactly one channel set.
struct ParsingMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_parts = kNumParts;  // K; channels are 0..K
  std::vector<std::uint8_t> labels;

  ParsingMask() = default;
  ParsingMask(std::size_t h, std::size_t w, std::size_t k = kNumParts)
      : height(h), width(w), num_parts(k), labels(h * w, 0) {}

  std::uint8_t& at(std::size_t h, std::size_t w) { return labels[h * width + w]; }
  std::uint8_t at(std::size_t h, std::size_t w) const { return labels[h * width + w]; }

  /// M[h, w, k] of the one-hot view.
  bool active(std::size_t h, std::size_t w, std::size_t k) const { return at(h, w) == k; }
  std::size_t channel_count(std::size_t k) const;
  /// True when every label names one of the K+1 channels.
  bool valid() const;
};

struct Rect {
  int top = 0, left = 0, height = 0, width = 0;
  long area() const { return static_cast<long>(height) * width; }
  bool contains(int h, int w) const { return h >= top && h < top + height && w >= left && w < left + width; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct Obstacle {
  Rect rect;
  std::uint64_t texture_seed = 0;
};

struct PartShape {
  Part part = Part::kBackground;
  bool ellipse = false;
  Rect box;
  /// Whether pixel (h, w) lies inside the shape (before clipping to the image).
  bool covers(int h, int w) const;
};

/// Colors and proportions that identify one synthetic person.
struct Prototype {
  int identity = 0;
  std::array<Rgb, kNumParts + 1> colors{};  // indexed by Part; [0] unused
  float head_scale = 1.f;
  float torso_frac = 0.3f;
  float leg_frac = 0.3f;
  float body_width_frac = 0.35f;

  friend bool operator==(const Prototype&, const Prototype&) = default;
};

struct RenderConfig {
  std::size_t height = 64;
  std::size_t width = 32;
  int num_cameras = 4;
};

struct PoseJitter {
  int dx = 0;
  int dy = 0;
};

struct Rendered {
  SynthImage image;
  ParsingMask mask;
  std::vector<PartShape> shapes;
};

struct OcclusionOptions {
  double min_area_frac = 0.1;
  double max_area_frac = 0.4;
  bool enabled() const { return max_area_frac > 0.0; }
};

struct Occluded {
  SynthImage image;
  ParsingMask mask;
  Obstacle obstacle;
};

/// Deterministic in (id, seed).
Prototype generate_identity_prototype(int id, std::uint64_t seed);

PoseJitter sample_jitter(Rng& rng, int max_shift = 2);

/// Draws the 8 parts over a noise background; the mask marks exactly the drawn pixels.
Rendered render(const Prototype& proto, int camera, PoseJitter jitter, const RenderConfig& cfg, Rng& rng);

/// Samples an obstacle rectangle covering [min, max] of the image area at a uniform position.
Obstacle sample_obstacle(std::size_t height, std::size_t width, const OcclusionOptions& opts, Rng& rng);

/// Paints the obstacle and reassigns the covered mask pixels to background.
Occluded apply_obstacle(const SynthImage& img, const ParsingMask& mask, const Obstacle& obstacle);

/// sample_obstacle + apply_obstacle; disabled options return the inputs unchanged with a zero-area rect.
Occluded occlude(const SynthImage& img, const ParsingMask& mask, const OcclusionOptions& opts, Rng& rng);

struct Sample {
  SynthImage image;
  ParsingMask mask;
  bool occluded = false;
};

struct SplitOptions {
  RenderConfig render;
  OcclusionOptions occlusion;
  int query_per_id = 1;
  int gallery_per_id = 2;
  // Evaluation identities are fresh ids instead of new renders of the training ids.
  bool disjoint_eval_ids = false;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> query;
  std::vector<std::size_t> gallery;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_parts = kNumParts;
  int num_cameras = 0;
  int num_train_ids = 0;
  std::uint64_t seed = 0;
};

/// Training images are holistic; query images are occluded and taken from a
/// camera that no gallery image of the same identity uses.
Dataset build_splits(int n_ids, int imgs_per_id, const SplitOptions& opts);

struct ArchiveStamp {
  std::string config_hash;
  std::string data_hash;
};

/// Writes meta.json plus one OGFRIMG1 record per sample under `dir`.
void write_archive(const Dataset& ds, const std::filesystem::path& dir, const ArchiveStamp& stamp);
Dataset read_archive(const std::filesystem::path& dir, ArchiveStamp* stamp = nullptr);

/// Single record codec, exposed for tests.
std::vector<std::uint8_t> encode_record(const SynthImage& img, const ParsingMask& mask);
void decode_record(const std::vector<std::uint8_t>& bytes, SynthImage& img, ParsingMask& mask);

}  // namespace ogfr::synth
