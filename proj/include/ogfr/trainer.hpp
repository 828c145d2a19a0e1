#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ogfr/checkpoint.hpp"
#include "ogfr/config.hpp"
#include "ogfr/losses.hpp"
#include "ogfr/model.hpp"
#include "ogfr/retrieval.hpp"
#include "ogfr/synth.hpp"

namespace ogfr {

/// One training batch: holistic images for the teacher, augmented copies for the student.
template <typename T>
struct StepBatch {
  std::vector<ModelInput<T>> holistic;
  std::vector<ModelInput<T>> augmented;
  std::vector<std::size_t> labels;
};

template <typename T>
struct StepGraph {
  LossBreakdown<T> losses;
  std::vector<Episode> episodes;        // empty when FEP is off
  std::vector<double> true_class_prob;  // per image, global head on f_hp^g
  double mean_reward = 0.0;
};

/// Records the complete forward pass of one step on `tape`. Actions are drawn
/// from `action_rng`; rewards are scored against `baseline`.
template <typename T>
StepGraph<T> build_step(Tape<T>& tape, const OgfrModel<T>& model, const StepBatch<T>& batch, const Config& cfg,
                        double baseline, Rng& action_rng);

/// Mean true-class probability of the global head with every patch retained, no gradients.
template <typename T>
double baseline_probability(const OgfrModel<T>& model, const std::vector<ModelInput<T>>& inputs);

/// Base lr scaled by 0.5·(1 + cos(π·step/total)).
double cosine_lr(double base, std::int64_t step, std::int64_t total);

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  double baseline = 0.0;
  double mean_reward = 0.0;
  double grad_norm = 0.0;
  LossValues losses;
};

nlohmann::json to_json(const StepRecord& r);

template <typename T>
class Trainer {
 public:
  Trainer(const Config& cfg, const synth::Dataset& data);

  OgfrModel<T>& model() { return *model_; }
  const OgfrModel<T>& model() const { return *model_; }
  const Config& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  std::int64_t epoch() const { return step_ / steps_per_epoch_; }
  std::int64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::int64_t total_steps() const { return steps_per_epoch_ * cfg_.optim.epochs; }
  double baseline() const { return baseline_; }

  /// Identity-balanced batch for a given global step: P identities × K images.
  std::vector<std::size_t> batch_indices(std::int64_t step) const;
  StepBatch<T> make_batch(std::int64_t step) const;

  /// Baseline refresh (on schedule), forward, backward, SGD and REINFORCE updates.
  /// Throws NumericError on a non-finite loss or gradient after filling nan_dump().
  StepRecord train_step();

  /// Leave-one-out rank-1 over the training images (no camera filter).
  double train_rank1() const;
  std::vector<GalleryEntry> embed(const std::vector<std::size_t>& sample_indices) const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

  const nlohmann::json& nan_dump() const { return nan_dump_; }

 private:
  void refresh_baseline();
  void sgd_update(double lr, double* grad_norm);

  Config cfg_;
  const synth::Dataset* data_;
  std::unique_ptr<OgfrModel<T>> model_;
  std::vector<ModelInput<T>> train_inputs_;       // aligned with data_->train
  std::vector<std::vector<std::size_t>> by_identity_;  // positions into data_->train
  std::vector<Tensor<T>> momentum_;
  Rng master_;
  std::int64_t step_ = 0;
  std::int64_t steps_per_epoch_ = 1;
  std::size_t ids_per_batch_ = 2;
  double baseline_ = 0.0;
  nlohmann::json nan_dump_;
};

struct TrainOptions {
  std::string out_dir;       // empty: no files written
  std::string resume;        // checkpoint path, optional
  std::int64_t max_steps = -1;  // stop early; -1 runs all epochs
  bool checkpoint_each_epoch = true;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainSummary {
  std::int64_t steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  double train_rank1 = 0.0;
};

/// Full training loop with metrics.jsonl, per-epoch checkpoint.bin and a final
/// record carrying train_rank1. Writes nan_dump.json before rethrowing a NumericError.
template <typename T>
TrainSummary run_training(const Config& cfg, const synth::Dataset& data, const TrainOptions& opts);

/// Copies every "param/<name>" tensor of a checkpoint into the model.
template <typename T>
void load_parameters(OgfrModel<T>& model, const Checkpoint& ckpt);

/// Student-branch retrieval entries for the given dataset samples.
template <typename T>
std::vector<GalleryEntry> embed_samples(const OgfrModel<T>& model, const synth::Dataset& data,
                                        const std::vector<std::size_t>& sample_indices, long lambda);

/// Query/gallery evaluation with the standard same-camera exclusion.
template <typename T>
EvalResult evaluate_model(const OgfrModel<T>& model, const synth::Dataset& data, long lambda);

/// Dataset generation options derived from a config.
synth::SplitOptions split_options(const Config& cfg);

}  // namespace ogfr
