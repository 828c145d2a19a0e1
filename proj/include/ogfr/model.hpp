#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ogfr/config.hpp"
#include "ogfr/layers.hpp"
#include "ogfr/occlusion.hpp"
#include "ogfr/synth.hpp"

namespace ogfr {

/// floor((H+S-P)/S) * floor((W+S-P)/S); throws ConfigError when empty.
std::size_t patch_count(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride);

/// N × (P·P·3) rows in grid raster order, pixels centered to [-0.5, 0.5].
template <typename T>
Tensor<T> patchify(const synth::SynthImage& img, std::size_t patch, std::size_t stride);

/// Bilinear interpolation from the patch-center grid to every pixel: (H·W) × N, rows sum to 1.
template <typename T>
Tensor<T> upsample_matrix(const ModelConfig& cfg);

/// Encoder output split by token role. For encoder bundles `parts` holds
/// f^0..f^K; for purified and student bundles it holds f^1..f^K.
template <typename T>
struct FeatureBundle {
  Var<T> tokens;   // full row stack [global; parts; patches]
  Var<T> global;   // 1 × D
  Var<T> parts;    // (K+1) × D or K × D
  Var<T> patches;  // N × D
  bool with_background = false;

  /// Splits [global; parts; patches] where parts has K rows, plus one leading background row if requested.
  static FeatureBundle split(Var<T> tokens, std::size_t num_parts, bool with_background);
  /// f^1..f^K regardless of layout.
  Var<T> foreground_parts() const;
};

/// E = [cls; parts; patches] + pos + γ1·E_o + γ2·C_e, with E_o and C_e on every row.
template <typename T>
Var<T> assemble_sequence(Var<T> patches, Var<T> cls, Var<T> parts, Var<T> pos, Var<T> occlusion_embedding,
                         Var<T> camera_embedding, double gamma1, double gamma2);

template <typename T>
class OcclusionAwareEncoder {
 public:
  OcclusionAwareEncoder() = default;
  OcclusionAwareEncoder(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng);

  /// Row z.index() of O_e as a 1 × D node; gradient reaches only that row.
  Var<T> lookup_occlusion_embedding(Tape<T>& tape, const OcclusionType& z) const;
  Var<T> camera_embedding(Tape<T>& tape, int camera) const;
  Var<T> embed_patches(Tape<T>& tape, const Tensor<T>& patches) const;

  /// Runs the blocks and the final norm over an assembled sequence.
  Var<T> encode_sequence(Tape<T>& tape, Var<T> sequence) const;
  FeatureBundle<T> encode(Tape<T>& tape, const Tensor<T>& patches, const OcclusionType& z, int camera) const;

  Linear<T> patch_embed;
  Parameter<T>* cls = nullptr;          // 1 × D
  Parameter<T>* part_tokens = nullptr;  // (K+1) × D
  Parameter<T>* position = nullptr;     // (N+K+2) × D
  Parameter<T>* occlusion_table = nullptr;  // 2^C × D
  Parameter<T>* camera_table = nullptr;     // n_cameras × D
  std::vector<EncoderBlock<T>> blocks;
  LayerNorm<T> final_norm;

 private:
  ModelConfig cfg_;
};

/// I = softmax over parts of f_patch · f_partsᵀ / sqrt(D); N × (K+1).
template <typename T>
Var<T> correlation(Var<T> patches, Var<T> parts);

/// One-step Bernoulli policy over patches: m = sigmoid(I·Gᵀ + b). Trained only
/// through reinforce_update, never by backpropagation.
template <typename T>
struct ErasingAgent {
  Parameter<T>* weight = nullptr;  // 1 × (K+1)
  Parameter<T>* bias = nullptr;    // 1 × 1

  static ErasingAgent create(ParameterStore<T>& store, std::size_t num_parts, double bias_init);
  std::vector<double> forward(const Tensor<T>& correlation) const;
};

std::vector<std::uint8_t> sample_actions(std::span<const double> retain_prob, Rng& rng);
double log_prob(std::span<const double> retain_prob, std::span<const std::uint8_t> actions);

/// (p_m − p_b) / (1 − p_b) clamped to [−clamp, clamp]. Throws ContractError for p_b ≥ 1.
double reward(double p_m, double p_b, double clamp = 1.0);

struct Episode {
  std::vector<double> state;  // N × (K+1) row-major copy of I
  std::vector<std::uint8_t> actions;
  double reward = 0.0;
};

struct PolicyGradient {
  std::vector<double> weight;  // d J / d G
  double bias = 0.0;
};

/// (1/B) Σ_b R_b Σ_t ∇ log π(a_bt | s_bt), with ∇_z log π = a − m for z = G·s + b.
template <typename T>
PolicyGradient reinforce_gradient(const ErasingAgent<T>& agent, std::span<const Episode> episodes);

/// Gradient ascent on G and b. Returns the applied gradient.
template <typename T>
PolicyGradient reinforce_update(ErasingAgent<T>& agent, std::span<const Episode> episodes, double lr);

template <typename T>
class FeaturePurifier {
 public:
  FeaturePurifier() = default;
  FeaturePurifier(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng);

  /// F̃_h = [f^g; f^1..f^K; a ? f^p : replacement], the decoder input.
  Var<T> erase(Tape<T>& tape, const FeatureBundle<T>& encoded, std::span<const std::uint8_t> actions) const;
  /// Layer 1 uses fixed-prefix attention, layer 2 conventional attention.
  FeatureBundle<T> purify(Tape<T>& tape, const FeatureBundle<T>& encoded, std::span<const std::uint8_t> actions,
                          AttentionTrace<T>* first_layer = nullptr) const;

  Parameter<T>* replacements = nullptr;  // N × D
  DecoderLayer<T> layer1;
  DecoderLayer<T> layer2;

 private:
  std::size_t num_parts_ = 0;
};

/// Two conventional decoder layers over {f^g, f^1..f^K, f^p} of the occluded branch.
template <typename T>
class StudentLayers {
 public:
  StudentLayers() = default;
  StudentLayers(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng);
  FeatureBundle<T> forward(Tape<T>& tape, const FeatureBundle<T>& encoded) const;

  DecoderLayer<T> layer1;
  DecoderLayer<T> layer2;

 private:
  std::size_t num_parts_ = 0;
};

/// Bias-free linear identity classifiers, index 0 for the global feature and i for part i.
template <typename T>
struct ClassifierHeads {
  std::vector<Parameter<T>*> weights;  // K+1 entries, D × n_identities

  static ClassifierHeads create(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng);
  Var<T> logits(Tape<T>& tape, std::size_t head, Var<T> feature) const;
};

/// Everything a forward pass needs about one image.
template <typename T>
struct ModelInput {
  Tensor<T> patches;
  OcclusionType z;
  int camera = 0;
  int label = 0;
  synth::ParsingMask mask;
};

template <typename T>
ModelInput<T> make_input(const synth::SynthImage& img, const synth::ParsingMask& mask, const ModelConfig& cfg,
                         long lambda);

/// Full dual-branch model. Parameters live in `store`; layers hold pointers into it.
template <typename T>
class OgfrModel {
 public:
  OgfrModel(const ModelConfig& cfg, std::uint64_t seed, double agent_bias_init = 0.0);
  OgfrModel(const OgfrModel&) = delete;
  OgfrModel& operator=(const OgfrModel&) = delete;

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;

 public:
  /// Upsampled, row-renormalized correlation Ĩ: (H·W) × (K+1).
  Var<T> upsample_correlation(Tape<T>& tape, Var<T> corr) const;
  /// Student-branch retrieval features for one image, computed without gradients.
  struct Embedding {
    std::vector<double> global;               // D
    std::vector<std::vector<double>> parts;   // K × D
    std::vector<std::uint8_t> visibility;     // K
  };
  Embedding embed(const ModelInput<T>& input) const;

  ParameterStore<T> store;
  OcclusionAwareEncoder<T> encoder;
  FeaturePurifier<T> purifier;
  StudentLayers<T> student;
  ClassifierHeads<T> heads;
  ErasingAgent<T> agent;
  Tensor<T> upsample;  // (H·W) × N
};

/// v_i = 1 iff part channel i wins the per-pixel argmax of Ĩ at least once.
template <typename T>
std::vector<std::uint8_t> visibility(const Tensor<T>& upsampled);

}  // namespace ogfr
