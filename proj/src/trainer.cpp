#include "ogfr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "ogfr/ops.hpp"

namespace ogfr {

namespace {

// Rng stream tags, split off the master key per step.
constexpr std::uint64_t kTagEpochOrder = 1;
constexpr std::uint64_t kTagBatchImages = 2;
constexpr std::uint64_t kTagAugment = 3;
constexpr std::uint64_t kTagActions = 4;

constexpr double kMaxBaseline = 1.0 - 1e-6;

template <typename T>
double true_class_probability(const Tensor<T>& feature, const Tensor<T>& head, std::size_t label) {
  std::vector<double> logits(head.cols(), 0.0);
  for (std::size_t c = 0; c < head.cols(); ++c)
    for (std::size_t d = 0; d < head.rows(); ++d) logits[c] += static_cast<double>(feature[d]) * head(d, c);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double l : logits) z += std::exp(l - mx);
  return std::exp(logits[label] - mx) / z;
}

template <typename T>
Var<T> stack(const std::vector<Var<T>>& rows) {
  return rows.size() == 1 ? rows.front() : concat_rows(rows);
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

template <typename T>
StepGraph<T> build_step(Tape<T>& tape, const OgfrModel<T>& model, const StepBatch<T>& batch, const Config& cfg,
                        double baseline, Rng& action_rng) {
  const std::size_t n = batch.holistic.size();
  if (n == 0 || batch.augmented.size() != n || batch.labels.size() != n) {
    throw ContractError("build_step: inconsistent batch");
  }
  const std::size_t k = cfg.model.num_parts;
  StepGraph<T> g;
  std::vector<FeatureBundle<T>> hp, op;
  std::vector<Var<T>> hp_tokens, op_tokens, teacher_global, student_global, mask_h, mask_o;
  for (std::size_t b = 0; b < n; ++b) {
    const ModelInput<T>& hin = batch.holistic[b];
    const ModelInput<T>& oin = batch.augmented[b];
    FeatureBundle<T> eh = model.encoder.encode(tape, hin.patches, hin.z, hin.camera);
    FeatureBundle<T> eo = model.encoder.encode(tape, oin.patches, oin.z, oin.camera);
    Var<T> corr_h = correlation(eh.patches, eh.parts);
    Var<T> corr_o = correlation(eo.patches, eo.parts);
    mask_h.push_back(loss_mask(model.upsample_correlation(tape, corr_h), hin.mask));
    mask_o.push_back(loss_mask(model.upsample_correlation(tape, corr_o), oin.mask));

    if (cfg.model.use_fep) {
      const std::vector<double> m = model.agent.forward(corr_h.value());
      Episode ep;
      ep.actions = sample_actions(m, action_rng);
      ep.state.assign(corr_h.value().data().begin(), corr_h.value().data().end());
      hp.push_back(model.purifier.purify(tape, eh, ep.actions));
      g.episodes.push_back(std::move(ep));
    } else {
      hp.push_back(FeatureBundle<T>::split(concat_rows<T>({eh.global, eh.foreground_parts(), eh.patches}), k, false));
    }
    op.push_back(model.student.forward(tape, eo));
    hp_tokens.push_back(hp.back().tokens);
    op_tokens.push_back(op.back().tokens);
    teacher_global.push_back(eh.global);
    student_global.push_back(eo.global);
  }

  LossBreakdown<T>& L = g.losses;
  L.mse = loss_mse(hp_tokens, op_tokens, cfg.loss.mse_reduction == "mean");
  L.cos = loss_cos(hp, op);
  KdTerms<T> kd = loss_kd(tape, model.heads, hp, op, batch.labels, cfg.loss.alpha, cfg.loss.beta);
  L.kd = kd.total;
  L.kd_ce = kd.ce;
  L.kd_kl = kd.kl;
  L.en = loss_en(tape, model.heads, stack(student_global), stack(teacher_global), batch.labels);
  L.tr = loss_tr(hp, batch.labels, cfg.loss.margin);
  const double inv_n = 1.0 / static_cast<double>(n);
  L.mask = add(scale(sum(stack(mask_h)), inv_n), scale(sum(stack(mask_o)), inv_n));
  L.total = total_loss(L.mse, L.cos, L.kd, L.en, L.tr, L.mask, cfg.loss);

  const Tensor<T>& head = model.heads.weights.front()->value;
  double p_mean = 0;
  for (std::size_t b = 0; b < n; ++b) {
    g.true_class_prob.push_back(true_class_probability(hp[b].global.value(), head, batch.labels[b]));
    p_mean += g.true_class_prob.back() * inv_n;
  }
  if (!g.episodes.empty()) {
    const double p_b = std::min(baseline, kMaxBaseline);
    double total_reward = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const double p_m = cfg.rl.reward_scope == "episode" ? g.true_class_prob[b] : p_mean;
      g.episodes[b].reward = reward(std::clamp(p_m, 0.0, 1.0), p_b, cfg.rl.reward_clamp);
      total_reward += g.episodes[b].reward;
    }
    g.mean_reward = total_reward * inv_n;
  }
  return g;
}

template <typename T>
double baseline_probability(const OgfrModel<T>& model, const std::vector<ModelInput<T>>& inputs) {
  if (inputs.empty()) throw ContractError("baseline_probability: no inputs");
  const Tensor<T>& head = model.heads.weights.front()->value;
  const std::vector<std::uint8_t> keep_all(model.config().num_patches(), 1);
  double total = 0;
  for (const auto& in : inputs) {
    Tape<T> tape(false);
    FeatureBundle<T> eh = model.encoder.encode(tape, in.patches, in.z, in.camera);
    FeatureBundle<T> hp = model.purifier.purify(tape, eh, keep_all);
    total += true_class_probability(hp.global.value(), head, static_cast<std::size_t>(in.label));
  }
  return total / static_cast<double>(inputs.size());
}

double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step},
          {"epoch", r.epoch},
          {"lr", r.lr},
          {"p_b", r.baseline},
          {"mean_reward", r.mean_reward},
          {"grad_norm", finite_or_null(r.grad_norm)},
          {"loss_mse", finite_or_null(r.losses.mse)},
          {"loss_cos", finite_or_null(r.losses.cos)},
          {"loss_kd", finite_or_null(r.losses.kd)},
          {"loss_en", finite_or_null(r.losses.en)},
          {"loss_tr", finite_or_null(r.losses.tr)},
          {"loss_mask", finite_or_null(r.losses.mask)},
          {"loss_total", finite_or_null(r.losses.total)}};
}

synth::SplitOptions split_options(const Config& cfg) {
  synth::SplitOptions o;
  o.render.height = cfg.model.image_height;
  o.render.width = cfg.model.image_width;
  o.render.num_cameras = cfg.model.num_cameras;
  o.occlusion.min_area_frac = cfg.occlusion.min_area_frac;
  o.occlusion.max_area_frac = cfg.occlusion.max_area_frac;
  o.query_per_id = cfg.data.query_per_id;
  o.gallery_per_id = cfg.data.gallery_per_id;
  o.disjoint_eval_ids = cfg.data.disjoint_eval_ids;
  o.seed = cfg.seed;
  return o;
}

template <typename T>
Trainer<T>::Trainer(const Config& cfg, const synth::Dataset& data) : cfg_(cfg), data_(&data) {
  cfg_.model.num_identities = cfg_.data.num_ids;
  cfg_.validate();
  if (data.train.empty()) throw ConfigError("training split is empty");
  if (data.height != cfg_.model.image_height || data.width != cfg_.model.image_width) {
    throw ConfigError("dataset resolution does not match the model config");
  }
  if (data.num_train_ids != cfg_.data.num_ids) throw ConfigError("dataset identity count does not match data.num_ids");
  master_ = Rng(cfg_.seed).split(0x747261696e);
  model_ = std::make_unique<OgfrModel<T>>(cfg_.model, cfg_.seed, cfg_.rl.bias_init);

  by_identity_.resize(static_cast<std::size_t>(data.num_train_ids));
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    const auto& s = data.samples[data.train[i]];
    if (s.image.identity < 0 || s.image.identity >= data.num_train_ids) {
      throw ConfigError("training sample has an identity outside the classifier range");
    }
    train_inputs_.push_back(make_input<T>(s.image, s.mask, cfg_.model, cfg_.occlusion.lambda));
    by_identity_[static_cast<std::size_t>(s.image.identity)].push_back(i);
  }
  for (const auto& imgs : by_identity_) {
    if (imgs.empty()) throw ConfigError("every training identity needs at least one image");
  }
  const auto n_ids = by_identity_.size();
  ids_per_batch_ = std::min<std::size_t>(static_cast<std::size_t>(cfg_.optim.batch_size / cfg_.optim.images_per_id),
                                         n_ids);
  steps_per_epoch_ = static_cast<std::int64_t>((n_ids + ids_per_batch_ - 1) / ids_per_batch_);
  for (std::size_t i = 0; i < model_->store.size(); ++i) {
    momentum_.push_back(Tensor<T>(model_->store[i].value.shape()));
  }
}

template <typename T>
std::vector<std::size_t> Trainer<T>::batch_indices(std::int64_t step) const {
  const std::int64_t epoch = step / steps_per_epoch_;
  const std::int64_t within = step % steps_per_epoch_;
  const std::size_t n_ids = by_identity_.size();
  std::vector<std::size_t> order(n_ids);
  for (std::size_t i = 0; i < n_ids; ++i) order[i] = i;
  Rng er = master_.split(kTagEpochOrder, static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n_ids; i > 1; --i) std::swap(order[i - 1], order[er.below(i)]);

  Rng ir = master_.split(kTagBatchImages, static_cast<std::uint64_t>(step));
  const auto k = static_cast<std::size_t>(cfg_.optim.images_per_id);
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < ids_per_batch_; ++p) {
    // The final chunk of an epoch wraps around so every batch holds P distinct identities.
    const std::size_t id = order[(static_cast<std::size_t>(within) * ids_per_batch_ + p) % n_ids];
    std::vector<std::size_t> pool = by_identity_[id];
    if (pool.size() >= k) {
      for (std::size_t j = 0; j < k; ++j) {
        std::swap(pool[j], pool[j + ir.below(pool.size() - j)]);
        out.push_back(pool[j]);
      }
    } else {
      for (std::size_t j = 0; j < k; ++j) out.push_back(pool[ir.below(pool.size())]);
    }
  }
  return out;
}

template <typename T>
StepBatch<T> Trainer<T>::make_batch(std::int64_t step) const {
  StepBatch<T> batch;
  Rng aug = master_.split(kTagAugment, static_cast<std::uint64_t>(step));
  synth::OcclusionOptions occ;
  occ.min_area_frac = cfg_.occlusion.min_area_frac;
  occ.max_area_frac = cfg_.occlusion.max_area_frac;
  for (std::size_t pos : batch_indices(step)) {
    const ModelInput<T>& in = train_inputs_[pos];
    batch.holistic.push_back(in);
    batch.labels.push_back(static_cast<std::size_t>(in.label));
    const bool augment = aug.bernoulli(cfg_.occlusion.student_prob);
    if (augment && occ.enabled()) {
      const auto& s = data_->samples[data_->train[pos]];
      synth::Occluded o = synth::occlude(s.image, s.mask, occ, aug);
      batch.augmented.push_back(make_input<T>(o.image, o.mask, cfg_.model, cfg_.occlusion.lambda));
    } else {
      batch.augmented.push_back(in);
    }
  }
  return batch;
}

template <typename T>
void Trainer<T>::refresh_baseline() {
  baseline_ = std::min(baseline_probability(*model_, train_inputs_), kMaxBaseline);
}

template <typename T>
void Trainer<T>::sgd_update(double lr, double* grad_norm) {
  auto& store = model_->store;
  double sq = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store[i].sgd) continue;
    for (T v : store[i].grad.data()) sq += static_cast<double>(v) * v;
  }
  *grad_norm = std::sqrt(sq);
  const double clip = cfg_.optim.grad_clip > 0 && *grad_norm > cfg_.optim.grad_clip ? cfg_.optim.grad_clip / *grad_norm
                                                                                     : 1.0;
  const auto mu = static_cast<T>(cfg_.optim.momentum);
  const auto wd = static_cast<T>(cfg_.optim.weight_decay);
  const auto step = static_cast<T>(lr);
  const auto scale_g = static_cast<T>(clip);
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter<T>& p = store[i];
    if (!p.sgd) continue;
    Tensor<T>& v = momentum_[i];
    for (std::size_t j = 0; j < p.value.numel(); ++j) {
      T g = scale_g * p.grad[j];
      if (p.weight_decay) g += wd * p.value[j];
      v[j] = mu * v[j] + g;
      p.value[j] -= step * v[j];
    }
  }
}

template <typename T>
StepRecord Trainer<T>::train_step() {
  if (cfg_.model.use_fep && step_ % steps_per_epoch_ == 0 && epoch() % cfg_.rl.baseline_refresh_epochs == 0) {
    refresh_baseline();
    if (!std::isfinite(baseline_)) {
      nan_dump_ = {{"step", step_}, {"reason", "non-finite baseline probability"}};
      throw NumericError("step " + std::to_string(step_) + ": non-finite baseline probability");
    }
  }
  StepBatch<T> batch = make_batch(step_);
  Tape<T> tape;
  Rng action_rng = master_.split(kTagActions, static_cast<std::uint64_t>(step_));
  StepGraph<T> graph = build_step(tape, *model_, batch, cfg_, baseline_, action_rng);

  StepRecord rec;
  rec.step = step_;
  rec.epoch = epoch();
  rec.lr = cosine_lr(cfg_.optim.lr, step_, total_steps());
  rec.baseline = baseline_;
  rec.mean_reward = graph.mean_reward;
  rec.losses = values(graph.losses);

  auto fail = [&](const std::string& why) {
    nan_dump_ = to_json(rec);
    nan_dump_["reason"] = why;
    nan_dump_["labels"] = batch.labels;
    nlohmann::json norms = nlohmann::json::object();
    for (std::size_t i = 0; i < model_->store.size(); ++i) {
      const auto& p = model_->store[i];
      double v2 = 0, g2 = 0;
      for (T x : p.value.data()) v2 += static_cast<double>(x) * x;
      for (T x : p.grad.data()) g2 += static_cast<double>(x) * x;
      norms[p.name] = {{"value_norm", finite_or_null(std::sqrt(v2))}, {"grad_norm", finite_or_null(std::sqrt(g2))}};
    }
    nan_dump_["parameters"] = norms;
    throw NumericError("step " + std::to_string(step_) + ": " + why);
  };
  if (!std::isfinite(rec.losses.total)) fail("non-finite total loss");

  model_->store.zero_grad();
  tape.backward(graph.losses.total);
  for (std::size_t i = 0; i < model_->store.size(); ++i) {
    if (!model_->store[i].grad.all_finite()) fail("non-finite gradient in " + model_->store[i].name);
  }
  sgd_update(rec.lr, &rec.grad_norm);
  if (!graph.episodes.empty() && cfg_.rl.lr > 0) reinforce_update(model_->agent, graph.episodes, cfg_.rl.lr);
  ++step_;
  return rec;
}

template <typename T>
std::vector<GalleryEntry> embed_samples(const OgfrModel<T>& model, const synth::Dataset& data,
                                        const std::vector<std::size_t>& sample_indices, long lambda) {
  std::vector<GalleryEntry> out;
  for (std::size_t idx : sample_indices) {
    const auto& s = data.samples.at(idx);
    auto e = model.embed(make_input<T>(s.image, s.mask, model.config(), lambda));
    out.push_back({s.image.identity, s.image.camera, std::move(e.global), std::move(e.parts),
                   std::move(e.visibility)});
  }
  return out;
}

template <typename T>
EvalResult evaluate_model(const OgfrModel<T>& model, const synth::Dataset& data, long lambda) {
  return evaluate(embed_samples(model, data, data.query, lambda), embed_samples(model, data, data.gallery, lambda));
}

template <typename T>
void load_parameters(OgfrModel<T>& model, const Checkpoint& ckpt) {
  for (std::size_t i = 0; i < model.store.size(); ++i) ckpt.load("param/" + model.store[i].name, model.store[i].value);
}

template <typename T>
std::vector<GalleryEntry> Trainer<T>::embed(const std::vector<std::size_t>& sample_indices) const {
  return embed_samples(*model_, *data_, sample_indices, cfg_.occlusion.lambda);
}

template <typename T>
double Trainer<T>::train_rank1() const {
  const auto entries = embed(data_->train);
  EvalOptions opts;
  opts.exclude_same_camera = false;
  opts.leave_one_out = true;
  return evaluate(entries, entries, opts).rank1;
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint c;
  for (std::size_t i = 0; i < model_->store.size(); ++i) {
    c.add("param/" + model_->store[i].name, model_->store[i].value);
  }
  for (std::size_t i = 0; i < model_->store.size(); ++i) {
    if (model_->store[i].sgd) c.add("momentum/" + model_->store[i].name, momentum_[i]);
  }
  c.trailer.epoch = epoch();
  c.trailer.step = step_;
  c.trailer.baseline = baseline_;
  c.trailer.rng_key = master_.key();
  c.trailer.rng_counter = master_.counter();
  c.trailer.config_hash = cfg_.hash();
  c.trailer.config_json = to_json(cfg_).dump();
  return c;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ckpt) {
  if (ckpt.trailer.config_hash != cfg_.hash()) {
    throw CheckpointError("checkpoint config hash " + ckpt.trailer.config_hash + " does not match " + cfg_.hash());
  }
  load_parameters(*model_, ckpt);
  for (std::size_t i = 0; i < model_->store.size(); ++i) {
    if (model_->store[i].sgd) ckpt.load("momentum/" + model_->store[i].name, momentum_[i]);
  }
  step_ = ckpt.trailer.step;
  baseline_ = ckpt.trailer.baseline;
  master_ = Rng(ckpt.trailer.rng_key, ckpt.trailer.rng_counter);
}

template <typename T>
TrainSummary run_training(const Config& cfg, const synth::Dataset& data, const TrainOptions& opts) {
  Trainer<T> trainer(cfg, data);
  if (!opts.resume.empty()) trainer.restore(read_checkpoint(opts.resume));

  namespace fs = std::filesystem;
  std::ofstream metrics;
  const fs::path out(opts.out_dir);
  if (!opts.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
    metrics.open(out / "metrics.jsonl", opts.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot open " + (out / "metrics.jsonl").string());
  }
  auto save = [&] {
    if (!opts.out_dir.empty()) write_checkpoint((out / "checkpoint.bin").string(), trainer.checkpoint());
  };

  TrainSummary summary;
  const std::int64_t total = trainer.total_steps();
  while (trainer.step() < total && (opts.max_steps < 0 || summary.steps < opts.max_steps)) {
    StepRecord rec;
    try {
      rec = trainer.train_step();
    } catch (const NumericError&) {
      if (!opts.out_dir.empty()) {
        std::ofstream dump(out / "nan_dump.json");
        dump << trainer.nan_dump().dump(2) << "\n";
      }
      throw;
    }
    if (summary.steps == 0) summary.first_loss = rec.losses.total;
    summary.last_loss = rec.losses.total;
    ++summary.steps;
    if (metrics.is_open()) metrics << to_json(rec).dump() << "\n" << std::flush;
    if (opts.on_step) opts.on_step(rec);
    if (opts.checkpoint_each_epoch && trainer.step() % trainer.steps_per_epoch() == 0) save();
  }
  summary.train_rank1 = trainer.train_rank1();
  if (metrics.is_open()) {
    metrics << nlohmann::json{{"final", true}, {"step", trainer.step()}, {"train_rank1", summary.train_rank1},
                              {"config_hash", cfg.hash()}}
                   .dump()
            << "\n";
  }
  save();
  return summary;
}

#define OGFR_INSTANTIATE(T)                                                                                     \
  template StepGraph<T> build_step<T>(Tape<T>&, const OgfrModel<T>&, const StepBatch<T>&, const Config&, double, \
                                      Rng&);                                                                   \
  template double baseline_probability<T>(const OgfrModel<T>&, const std::vector<ModelInput<T>>&);            \
  template class Trainer<T>;                                                                                   \
  template TrainSummary run_training<T>(const Config&, const synth::Dataset&, const TrainOptions&);           \
  template void load_parameters<T>(OgfrModel<T>&, const Checkpoint&);                                          \
  template std::vector<GalleryEntry> embed_samples<T>(const OgfrModel<T>&, const synth::Dataset&,             \
                                                      const std::vector<std::size_t>&, long);                  \
  template EvalResult evaluate_model<T>(const OgfrModel<T>&, const synth::Dataset&, long);

OGFR_INSTANTIATE(float)
OGFR_INSTANTIATE(double)

}  // namespace ogfr
