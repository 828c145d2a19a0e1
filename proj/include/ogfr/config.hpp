#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace ogfr {

/// Encoder / decoder geometry. Toy-scale defaults; see README for the full-scale values.
struct ModelConfig {
  std::size_t image_height = 64;
  std::size_t image_width = 32;
  std::size_t patch_size = 8;
  std::size_t stride = 8;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t ffn_hidden = 128;
  std::size_t num_parts = 8;   // K
  std::size_t num_coarse = 4;  // C
  double gamma1 = 3.0;         // occlusion-embedding weight
  double gamma2 = 3.0;         // camera-embedding weight
  int num_cameras = 4;
  int num_identities = 10;  // classifier width; not serialized, follows data.num_ids
  bool use_fep = true;      // false: teacher features bypass erasing and purification
  double init_std = 0.02;        // tables, replacement tokens and classifier heads
  double token_init_std = 1.0;   // cls, part tokens and positions; keeps part queries distinct at init

  std::size_t grid_rows() const;
  std::size_t grid_cols() const;
  std::size_t num_patches() const;
  std::size_t num_tokens() const { return num_patches() + num_parts + 2; }
  void validate() const;
};

struct LossWeights {
  double alpha = 0.3;
  double beta = 0.4;
  double mu1 = 0.5;
  double mu2 = 0.5;
  double margin = 0.3;
  // L_mse reduction over the T×D entries of one image: "mean" or "sum".
  std::string mse_reduction = "mean";
};

struct OcclusionConfig {
  long lambda = 5;
  double min_area_frac = 0.1;
  double max_area_frac = 0.4;
  double student_prob = 0.5;
};

struct DataConfig {
  int num_ids = 10;
  int images_per_id = 6;
  int query_per_id = 1;
  int gallery_per_id = 2;
  bool disjoint_eval_ids = false;
};

struct OptimConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 16;
  int images_per_id = 4;  // K of P×K batch sampling
  int epochs = 30;
  double grad_clip = 5.0;  // global L2 norm; 0 disables
};

struct RlConfig {
  double lr = 1.0;
  int baseline_refresh_epochs = 2;
  double reward_clamp = 1.0;
  double bias_init = 0.0;
  // "batch": one reward from the batch-mean true-class probability; "episode": one reward per image.
  std::string reward_scope = "batch";
};

struct Config {
  std::uint64_t seed = 0;
  std::string precision = "float32";  // or "float64"
  ModelConfig model;
  LossWeights loss;
  OcclusionConfig occlusion;
  DataConfig data;
  OptimConfig optim;
  RlConfig rl;

  void validate() const;
  /// Stable digest of the full configuration.
  std::string hash() const;
  /// Digest of the fields that determine the generated dataset.
  std::string data_hash() const;
};

nlohmann::json to_json(const Config& cfg);
/// Strict parse: unknown keys and wrong types raise ConfigError. Missing keys keep defaults.
Config config_from_json(const nlohmann::json& j);
Config load_config(const std::string& path);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace ogfr
