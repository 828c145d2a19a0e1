#include "ogfr/model.hpp"

#include <algorithm>
#include <cmath>

#include "ogfr/ops.hpp"

namespace ogfr {

std::size_t patch_count(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride) {
  if (stride == 0 || patch == 0 || patch > height || patch > width) {
    throw ConfigError("patch_count: need 1 <= patch <= min(H, W) and stride >= 1");
  }
  const std::size_t n = ((height + stride - patch) / stride) * ((width + stride - patch) / stride);
  if (n == 0) throw ConfigError("patch_count: configuration yields no patches");
  return n;
}

template <typename T>
Tensor<T> patchify(const synth::SynthImage& img, std::size_t patch, std::size_t stride) {
  const std::size_t rows = (img.height + stride - patch) / stride;
  const std::size_t cols = (img.width + stride - patch) / stride;
  if (patch_count(img.height, img.width, patch, stride) != rows * cols) throw ContractError("patchify: grid mismatch");
  Tensor<T> out = Tensor<T>::matrix(rows * cols, patch * patch * 3);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      T* dst = out.ptr() + (r * cols + c) * out.cols();
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch)
            *dst++ = static_cast<T>(img.at(r * stride + dy, c * stride + dx, ch) - 0.5f);
    }
  }
  return out;
}

namespace {

// Fractional grid coordinate of pixel `p` between patch centers, clamped to the grid.
struct Interp {
  std::size_t lo, hi;
  double w_hi;
};

Interp interp_axis(std::size_t p, std::size_t patch, std::size_t stride, std::size_t cells) {
  double g = (static_cast<double>(p) + 0.5 - 0.5 * static_cast<double>(patch)) / static_cast<double>(stride);
  g = std::clamp(g, 0.0, static_cast<double>(cells - 1));
  const auto lo = static_cast<std::size_t>(std::floor(g));
  const std::size_t hi = std::min(lo + 1, cells - 1);
  return {lo, hi, g - static_cast<double>(lo)};
}

}  // namespace

template <typename T>
Tensor<T> upsample_matrix(const ModelConfig& cfg) {
  const std::size_t gr = cfg.grid_rows(), gc = cfg.grid_cols();
  Tensor<T> u = Tensor<T>::matrix(cfg.image_height * cfg.image_width, gr * gc);
  for (std::size_t h = 0; h < cfg.image_height; ++h) {
    const Interp y = interp_axis(h, cfg.patch_size, cfg.stride, gr);
    for (std::size_t w = 0; w < cfg.image_width; ++w) {
      const Interp x = interp_axis(w, cfg.patch_size, cfg.stride, gc);
      const std::size_t row = h * cfg.image_width + w;
      u(row, y.lo * gc + x.lo) += static_cast<T>((1 - y.w_hi) * (1 - x.w_hi));
      u(row, y.lo * gc + x.hi) += static_cast<T>((1 - y.w_hi) * x.w_hi);
      u(row, y.hi * gc + x.lo) += static_cast<T>(y.w_hi * (1 - x.w_hi));
      u(row, y.hi * gc + x.hi) += static_cast<T>(y.w_hi * x.w_hi);
    }
  }
  return u;
}

template <typename T>
FeatureBundle<T> FeatureBundle<T>::split(Var<T> tokens, std::size_t num_parts, bool with_background) {
  const std::size_t part_rows = num_parts + (with_background ? 1 : 0);
  if (tokens.rows() <= 1 + part_rows) throw DimensionError("FeatureBundle::split: too few token rows");
  FeatureBundle b;
  b.tokens = tokens;
  b.global = slice_rows(tokens, 0, 1);
  b.parts = slice_rows(tokens, 1, part_rows);
  b.patches = slice_rows(tokens, 1 + part_rows, tokens.rows() - 1 - part_rows);
  b.with_background = with_background;
  return b;
}

template <typename T>
Var<T> FeatureBundle<T>::foreground_parts() const {
  return with_background ? slice_rows(parts, 1, parts.rows() - 1) : parts;
}

template <typename T>
Var<T> assemble_sequence(Var<T> patches, Var<T> cls, Var<T> parts, Var<T> pos, Var<T> occlusion_embedding,
                         Var<T> camera_embedding, double gamma1, double gamma2) {
  const std::size_t d = patches.cols();
  if (cls.rows() != 1 || cls.cols() != d || parts.cols() != d || occlusion_embedding.cols() != d ||
      camera_embedding.cols() != d || occlusion_embedding.rows() != 1 || camera_embedding.rows() != 1) {
    throw DimensionError("assemble_sequence: token widths disagree");
  }
  Var<T> seq = concat_rows<T>({cls, parts, patches});
  if (pos.shape() != seq.shape()) {
    throw DimensionError("assemble_sequence: position table " + shape_str(pos.shape()) + " vs sequence " +
                         shape_str(seq.shape()));
  }
  Var<T> broadcast = add(scale(occlusion_embedding, gamma1), scale(camera_embedding, gamma2));
  return add_row(add(seq, pos), broadcast);
}

template <typename T>
OcclusionAwareEncoder<T>::OcclusionAwareEncoder(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  patch_embed = Linear<T>::create(store, "encoder.patch_embed", cfg.patch_size * cfg.patch_size * 3, d, rng);
  cls = &store.add("encoder.cls", normal_init<T>(1, d, cfg.token_init_std, rng), false);
  part_tokens = &store.add("encoder.part_tokens", normal_init<T>(cfg.num_parts + 1, d, cfg.token_init_std, rng), false);
  position = &store.add("encoder.position", normal_init<T>(cfg.num_tokens(), d, cfg.token_init_std, rng), false);
  occlusion_table =
      &store.add("encoder.occlusion_table", normal_init<T>(std::size_t{1} << cfg.num_coarse, d, cfg.init_std, rng), false);
  camera_table = &store.add("encoder.camera_table",
                            normal_init<T>(static_cast<std::size_t>(cfg.num_cameras), d, cfg.init_std, rng), false);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    blocks.push_back(
        EncoderBlock<T>::create(store, "encoder.block" + std::to_string(i), d, cfg.heads, cfg.ffn_hidden, rng));
  }
  final_norm = LayerNorm<T>::create(store, "encoder.norm", d);
}

template <typename T>
Var<T> OcclusionAwareEncoder<T>::lookup_occlusion_embedding(Tape<T>& tape, const OcclusionType& z) const {
  if (z.bits.size() != cfg_.num_coarse) throw DimensionError("occlusion type has the wrong number of bits");
  return gather_rows(tape.param(*occlusion_table), {z.index()});
}

template <typename T>
Var<T> OcclusionAwareEncoder<T>::camera_embedding(Tape<T>& tape, int camera) const {
  if (camera < 0 || camera >= cfg_.num_cameras) throw DimensionError("camera id out of range");
  return gather_rows(tape.param(*camera_table), {static_cast<std::size_t>(camera)});
}

template <typename T>
Var<T> OcclusionAwareEncoder<T>::embed_patches(Tape<T>& tape, const Tensor<T>& patches) const {
  if (patches.rows() != cfg_.num_patches() || patches.cols() != cfg_.patch_size * cfg_.patch_size * 3) {
    throw DimensionError("encoder: patch matrix " + shape_str(patches.shape()) + " does not match the config");
  }
  return patch_embed(tape, tape.constant(patches));
}

template <typename T>
Var<T> OcclusionAwareEncoder<T>::encode_sequence(Tape<T>& tape, Var<T> sequence) const {
  Var<T> x = sequence;
  for (const auto& block : blocks) x = block(tape, x);
  return final_norm(tape, x);
}

template <typename T>
FeatureBundle<T> OcclusionAwareEncoder<T>::encode(Tape<T>& tape, const Tensor<T>& patches, const OcclusionType& z,
                                                  int camera) const {
  Var<T> seq = assemble_sequence(embed_patches(tape, patches), tape.param(*cls), tape.param(*part_tokens),
                                 tape.param(*position), lookup_occlusion_embedding(tape, z),
                                 camera_embedding(tape, camera), cfg_.gamma1, cfg_.gamma2);
  return FeatureBundle<T>::split(encode_sequence(tape, seq), cfg_.num_parts, true);
}

template <typename T>
Var<T> correlation(Var<T> patches, Var<T> parts) {
  if (patches.cols() != parts.cols()) throw DimensionError("correlation: feature widths disagree");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(patches.cols()));
  return softmax_rows(scale(matmul(patches, transpose(parts)), inv_sqrt));
}

template <typename T>
ErasingAgent<T> ErasingAgent<T>::create(ParameterStore<T>& store, std::size_t num_parts, double bias_init) {
  ErasingAgent a;
  a.weight = &store.add("agent.weight", Tensor<T>::matrix(1, num_parts + 1), false, false);
  a.bias = &store.add("agent.bias", Tensor<T>::matrix(1, 1, static_cast<T>(bias_init)), false, false);
  return a;
}

template <typename T>
std::vector<double> ErasingAgent<T>::forward(const Tensor<T>& corr) const {
  if (corr.cols() != weight->value.cols()) throw DimensionError("agent: state width does not match G");
  std::vector<double> m(corr.rows());
  for (std::size_t t = 0; t < corr.rows(); ++t) {
    double z = static_cast<double>(bias->value[0]);
    for (std::size_t j = 0; j < corr.cols(); ++j) z += static_cast<double>(weight->value[j]) * corr(t, j);
    m[t] = 1.0 / (1.0 + std::exp(-z));
  }
  return m;
}

std::vector<std::uint8_t> sample_actions(std::span<const double> retain_prob, Rng& rng) {
  std::vector<std::uint8_t> a(retain_prob.size());
  for (std::size_t t = 0; t < a.size(); ++t) a[t] = rng.bernoulli(retain_prob[t]) ? 1 : 0;
  return a;
}

double log_prob(std::span<const double> retain_prob, std::span<const std::uint8_t> actions) {
  if (retain_prob.size() != actions.size()) throw DimensionError("log_prob: length mismatch");
  double lp = 0.0;
  for (std::size_t t = 0; t < actions.size(); ++t) {
    lp += actions[t] ? std::log(retain_prob[t]) : std::log1p(-retain_prob[t]);
  }
  return lp;
}

double reward(double p_m, double p_b, double clamp) {
  if (!(p_b < 1.0)) throw ContractError("reward: degenerate baseline p_b = " + std::to_string(p_b));
  if (p_b < 0.0 || p_m < 0.0 || p_m > 1.0) throw ContractError("reward: probabilities must lie in [0, 1]");
  return std::clamp((p_m - p_b) / (1.0 - p_b), -clamp, clamp);
}

template <typename T>
PolicyGradient reinforce_gradient(const ErasingAgent<T>& agent, std::span<const Episode> episodes) {
  if (episodes.empty()) throw ContractError("reinforce: need at least one episode");
  const std::size_t width = agent.weight->value.cols();
  PolicyGradient g;
  g.weight.assign(width, 0.0);
  for (const Episode& ep : episodes) {
    const std::size_t n = ep.actions.size();
    if (ep.state.size() != n * width) throw DimensionError("reinforce: episode state does not match actions");
    if (ep.reward == 0.0) continue;
    for (std::size_t t = 0; t < n; ++t) {
      const double* s = ep.state.data() + t * width;
      double z = static_cast<double>(agent.bias->value[0]);
      for (std::size_t j = 0; j < width; ++j) z += static_cast<double>(agent.weight->value[j]) * s[j];
      const double score = (ep.actions[t] ? 1.0 : 0.0) - 1.0 / (1.0 + std::exp(-z));
      for (std::size_t j = 0; j < width; ++j) g.weight[j] += ep.reward * score * s[j];
      g.bias += ep.reward * score;
    }
  }
  const double inv_b = 1.0 / static_cast<double>(episodes.size());
  for (double& w : g.weight) w *= inv_b;
  g.bias *= inv_b;
  return g;
}

template <typename T>
PolicyGradient reinforce_update(ErasingAgent<T>& agent, std::span<const Episode> episodes, double lr) {
  PolicyGradient g = reinforce_gradient(agent, episodes);
  for (std::size_t j = 0; j < g.weight.size(); ++j) agent.weight->value[j] += static_cast<T>(lr * g.weight[j]);
  agent.bias->value[0] += static_cast<T>(lr * g.bias);
  return g;
}

template <typename T>
FeaturePurifier<T>::FeaturePurifier(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng)
    : num_parts_(cfg.num_parts) {
  replacements = &store.add("fep.replacements", normal_init<T>(cfg.num_patches(), cfg.dim, cfg.init_std, rng), false);
  layer1 = DecoderLayer<T>::create(store, "fep.layer1", cfg.dim, cfg.heads, cfg.ffn_hidden, 1 + cfg.num_parts, rng);
  layer2 = DecoderLayer<T>::create(store, "fep.layer2", cfg.dim, cfg.heads, cfg.ffn_hidden, 0, rng);
}

template <typename T>
Var<T> FeaturePurifier<T>::erase(Tape<T>& tape, const FeatureBundle<T>& encoded,
                                 std::span<const std::uint8_t> actions) const {
  Var<T> patches = select_rows(actions, encoded.patches, tape.param(*replacements));
  return concat_rows<T>({encoded.global, encoded.foreground_parts(), patches});
}

template <typename T>
FeatureBundle<T> FeaturePurifier<T>::purify(Tape<T>& tape, const FeatureBundle<T>& encoded,
                                            std::span<const std::uint8_t> actions,
                                            AttentionTrace<T>* first_layer) const {
  Var<T> x = layer1(tape, erase(tape, encoded, actions), first_layer);
  return FeatureBundle<T>::split(layer2(tape, x), num_parts_, false);
}

template <typename T>
StudentLayers<T>::StudentLayers(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng)
    : num_parts_(cfg.num_parts) {
  layer1 = DecoderLayer<T>::create(store, "student.layer1", cfg.dim, cfg.heads, cfg.ffn_hidden, 0, rng);
  layer2 = DecoderLayer<T>::create(store, "student.layer2", cfg.dim, cfg.heads, cfg.ffn_hidden, 0, rng);
}

template <typename T>
FeatureBundle<T> StudentLayers<T>::forward(Tape<T>& tape, const FeatureBundle<T>& encoded) const {
  Var<T> x = concat_rows<T>({encoded.global, encoded.foreground_parts(), encoded.patches});
  return FeatureBundle<T>::split(layer2(tape, layer1(tape, x)), num_parts_, false);
}

template <typename T>
ClassifierHeads<T> ClassifierHeads<T>::create(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  ClassifierHeads h;
  const auto n_ids = static_cast<std::size_t>(cfg.num_identities);
  for (std::size_t i = 0; i <= cfg.num_parts; ++i) {
    const std::string name = i == 0 ? "head.global" : "head.part" + std::to_string(i);
    h.weights.push_back(&store.add(name, normal_init<T>(cfg.dim, n_ids, cfg.init_std, rng), true));
  }
  return h;
}

template <typename T>
Var<T> ClassifierHeads<T>::logits(Tape<T>& tape, std::size_t head, Var<T> feature) const {
  return matmul(feature, tape.param(*weights.at(head)));
}

template <typename T>
ModelInput<T> make_input(const synth::SynthImage& img, const synth::ParsingMask& mask, const ModelConfig& cfg,
                         long lambda) {
  if (img.height != cfg.image_height || img.width != cfg.image_width) {
    throw DimensionError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " does not match the configured resolution");
  }
  ModelInput<T> in;
  in.patches = patchify<T>(img, cfg.patch_size, cfg.stride);
  in.z = estimate(mask, lambda);
  in.camera = img.camera;
  in.label = img.identity;
  in.mask = mask;
  return in;
}

template <typename T>
OgfrModel<T>::OgfrModel(const ModelConfig& cfg, std::uint64_t seed, double agent_bias_init) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = Rng(seed).split(0x6d6f64656c);
  Rng enc_rng = rng.split(1), fep_rng = rng.split(2), stu_rng = rng.split(3), head_rng = rng.split(4);
  encoder = OcclusionAwareEncoder<T>(store, cfg_, enc_rng);
  purifier = FeaturePurifier<T>(store, cfg_, fep_rng);
  student = StudentLayers<T>(store, cfg_, stu_rng);
  heads = ClassifierHeads<T>::create(store, cfg_, head_rng);
  agent = ErasingAgent<T>::create(store, cfg_.num_parts, agent_bias_init);
  upsample = upsample_matrix<T>(cfg_);
}

template <typename T>
Var<T> OgfrModel<T>::upsample_correlation(Tape<T>& tape, Var<T> corr) const {
  Var<T> up = matmul(tape.constant(upsample), corr);
  return div_col(up, sum_rows(up));
}

template <typename T>
typename OgfrModel<T>::Embedding OgfrModel<T>::embed(const ModelInput<T>& input) const {
  Tape<T> tape(false);
  FeatureBundle<T> enc = encoder.encode(tape, input.patches, input.z, input.camera);
  FeatureBundle<T> out = student.forward(tape, enc);
  Var<T> up = upsample_correlation(tape, correlation(enc.patches, enc.parts));

  Embedding e;
  const Tensor<T>& g = out.global.value();
  e.global.assign(g.data().begin(), g.data().end());
  const Tensor<T>& p = out.parts.value();
  for (std::size_t i = 0; i < p.rows(); ++i) {
    e.parts.emplace_back(p.ptr() + i * p.cols(), p.ptr() + (i + 1) * p.cols());
  }
  e.visibility = visibility(up.value());
  return e;
}

template <typename T>
std::vector<std::uint8_t> visibility(const Tensor<T>& upsampled) {
  require_matrix(upsampled, "visibility");
  if (upsampled.cols() < 2) throw DimensionError("visibility: need background plus at least one part channel");
  std::vector<std::uint8_t> v(upsampled.cols() - 1, 0);
  for (std::size_t r = 0; r < upsampled.rows(); ++r) {
    const T* row = upsampled.ptr() + r * upsampled.cols();
    const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + upsampled.cols()) - row);
    if (best > 0) v[best - 1] = 1;
  }
  return v;
}

#define OGFR_INSTANTIATE(T)                                                                                    \
  template Tensor<T> patchify<T>(const synth::SynthImage&, std::size_t, std::size_t);                         \
  template Tensor<T> upsample_matrix<T>(const ModelConfig&);                                                   \
  template struct FeatureBundle<T>;                                                                            \
  template Var<T> assemble_sequence<T>(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, double, double);       \
  template class OcclusionAwareEncoder<T>;                                                                     \
  template Var<T> correlation<T>(Var<T>, Var<T>);                                                              \
  template struct ErasingAgent<T>;                                                                             \
  template PolicyGradient reinforce_gradient<T>(const ErasingAgent<T>&, std::span<const Episode>);            \
  template PolicyGradient reinforce_update<T>(ErasingAgent<T>&, std::span<const Episode>, double);            \
  template class FeaturePurifier<T>;                                                                           \
  template class StudentLayers<T>;                                                                             \
  template struct ClassifierHeads<T>;                                                                          \
  template ModelInput<T> make_input<T>(const synth::SynthImage&, const synth::ParsingMask&, const ModelConfig&, \
                                       long);                                                                  \
  template class OgfrModel<T>;                                                                                 \
  template std::vector<std::uint8_t> visibility<T>(const Tensor<T>&);

OGFR_INSTANTIATE(float)
OGFR_INSTANTIATE(double)

}  // namespace ogfr
