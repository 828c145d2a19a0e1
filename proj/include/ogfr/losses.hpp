#pragma once

#include <vector>

#include "ogfr/config.hpp"
#include "ogfr/model.hpp"

namespace ogfr {

/// Squared L2 distance per image, averaged over the batch. `per_entry` divides
/// each image's sum over T×D entries by T·D.
template <typename T>
Var<T> loss_mse(const std::vector<Var<T>>& teacher_tokens, const std::vector<Var<T>>& student_tokens,
                bool per_entry = false);

/// Mean over the batch of (1/(K+1)) Σ_i (1 − cos(f_hp^i, f_op^i)), i ∈ {g, 1..K}.
/// Norms are sqrt(|f|² + eps²), so a zero vector has cosine 0.
template <typename T>
Var<T> loss_cos(const std::vector<FeatureBundle<T>>& teacher, const std::vector<FeatureBundle<T>>& student,
                double eps = 1e-8);

/// Row-mean KL(softmax(teacher) ∥ softmax(student)). Teacher logits are detached.
template <typename T>
Var<T> kl_divergence(Var<T> teacher_logits, Var<T> student_logits);

template <typename T>
struct KdTerms {
  Var<T> total;  // (1/(K+1)) Σ_i (α·CE_i + β·KL_i)
  Var<T> ce;     // (1/(K+1)) Σ_i CE_i
  Var<T> kl;     // (1/(K+1)) Σ_i KL_i
};

template <typename T>
KdTerms<T> loss_kd(Tape<T>& tape, const ClassifierHeads<T>& heads, const std::vector<FeatureBundle<T>>& teacher,
                   const std::vector<FeatureBundle<T>>& student, const std::vector<std::size_t>& labels,
                   double alpha, double beta);

/// CE(head_g(f_o^g)) + CE(head_g(f_h^g)); inputs are B × D stacks.
template <typename T>
Var<T> loss_en(Tape<T>& tape, const ClassifierHeads<T>& heads, Var<T> student_global, Var<T> teacher_global,
               const std::vector<std::size_t>& labels);

/// −(1/HW) Σ_{h,w} log Ĩ_{label(h,w)}(h,w) for one image; Ĩ is (H·W) × (K+1).
template <typename T>
Var<T> loss_mask(Var<T> upsampled, const synth::ParsingMask& mask);

/// Batch-hard triplet loss over rows of `features` (B × D). The anchor counts
/// as its own positive. Throws SamplingError for a single-identity batch.
template <typename T>
Var<T> loss_triplet(Var<T> features, const std::vector<std::size_t>& labels, double margin);

/// L_tri(f_hp^g) + (1/K) Σ_i L_tri(f_hp^i).
template <typename T>
Var<T> loss_tr(const std::vector<FeatureBundle<T>>& teacher, const std::vector<std::size_t>& labels, double margin);

template <typename T>
struct LossBreakdown {
  Var<T> mse, cos, kd, en, tr, mask, total;
  Var<T> kd_ce, kd_kl;
};

struct LossValues {
  double mse = 0, cos = 0, kd = 0, en = 0, tr = 0, mask = 0, total = 0;
};

/// (L_mse + μ1·L_cos + L_kd) + (L_en + μ2·L_tr) + L_mask.
template <typename T>
Var<T> total_loss(Var<T> mse, Var<T> cos, Var<T> kd, Var<T> en, Var<T> tr, Var<T> mask, const LossWeights& w);

template <typename T>
LossValues values(const LossBreakdown<T>& b);

/// Rows f^g, f^1..f^K of a non-background bundle as a (K+1) × D stack.
template <typename T>
Var<T> global_and_parts(const FeatureBundle<T>& b);

}  // namespace ogfr
