#include "ogfr/losses.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "ogfr/ops.hpp"

namespace ogfr {

namespace {

template <typename T>
void require_batch(std::size_t a, std::size_t b, const char* what) {
  if (a == 0) throw ContractError(std::string(what) + ": empty batch");
  if (a != b) throw DimensionError(std::string(what) + ": branch batch sizes differ");
}

// Row i of every image's (K+1) × D stack, as a B × D matrix.
template <typename T>
Var<T> stack_row(const std::vector<Var<T>>& per_image, std::size_t row) {
  std::vector<Var<T>> rows;
  rows.reserve(per_image.size());
  for (const Var<T>& v : per_image) rows.push_back(slice_rows(v, row, 1));
  return rows.size() == 1 ? rows.front() : concat_rows(rows);
}

}  // namespace

template <typename T>
Var<T> global_and_parts(const FeatureBundle<T>& b) {
  return concat_rows<T>({b.global, b.foreground_parts()});
}

template <typename T>
Var<T> loss_mse(const std::vector<Var<T>>& teacher_tokens, const std::vector<Var<T>>& student_tokens,
                bool per_entry) {
  require_batch<T>(teacher_tokens.size(), student_tokens.size(), "loss_mse");
  std::vector<Var<T>> terms;
  for (std::size_t b = 0; b < teacher_tokens.size(); ++b) {
    if (teacher_tokens[b].shape() != student_tokens[b].shape()) {
      throw DimensionError("loss_mse: token shapes " + shape_str(teacher_tokens[b].shape()) + " and " +
                           shape_str(student_tokens[b].shape()) + " differ");
    }
    Var<T> sq = square(sub(teacher_tokens[b], student_tokens[b]));
    terms.push_back(per_entry ? mean(sq) : sum(sq));
  }
  return scale(sum(concat_rows(terms)), 1.0 / static_cast<double>(terms.size()));
}

template <typename T>
Var<T> loss_cos(const std::vector<FeatureBundle<T>>& teacher, const std::vector<FeatureBundle<T>>& student,
                double eps) {
  require_batch<T>(teacher.size(), student.size(), "loss_cos");
  std::vector<Var<T>> ts, ss;
  for (std::size_t b = 0; b < teacher.size(); ++b) {
    ts.push_back(global_and_parts(teacher[b]));
    ss.push_back(global_and_parts(student[b]));
  }
  Var<T> a = concat_rows(ts), s = concat_rows(ss);
  const double eps2 = eps * eps;
  Var<T> dot = sum_rows(mul(a, s));
  Var<T> na = sqrt(add_scalar(sum_rows(square(a)), eps2));
  Var<T> ns = sqrt(add_scalar(sum_rows(square(s)), eps2));
  Var<T> cosine = div(dot, mul(na, ns));
  // mean over all B·(K+1) rows = batch mean of the per-image (1/(K+1)) average
  return add_scalar(neg(mean(cosine)), 1.0);
}

template <typename T>
Var<T> kl_divergence(Var<T> teacher_logits, Var<T> student_logits) {
  Var<T> lt = log_softmax_rows(detach(teacher_logits));
  Var<T> ls = log_softmax_rows(student_logits);
  Var<T> pt = exp(lt);
  return scale(sum(mul(pt, sub(lt, ls))), 1.0 / static_cast<double>(teacher_logits.rows()));
}

template <typename T>
KdTerms<T> loss_kd(Tape<T>& tape, const ClassifierHeads<T>& heads, const std::vector<FeatureBundle<T>>& teacher,
                   const std::vector<FeatureBundle<T>>& student, const std::vector<std::size_t>& labels,
                   double alpha, double beta) {
  require_batch<T>(teacher.size(), student.size(), "loss_kd");
  if (labels.size() != student.size()) throw DimensionError("loss_kd: one label per image required");
  std::vector<Var<T>> ts, ss;
  for (std::size_t b = 0; b < teacher.size(); ++b) {
    ts.push_back(global_and_parts(teacher[b]));
    ss.push_back(global_and_parts(student[b]));
  }
  const std::size_t n_heads = heads.weights.size();
  if (ts.front().rows() != n_heads) throw DimensionError("loss_kd: head count does not match K+1");
  std::vector<Var<T>> ces, kls;
  for (std::size_t i = 0; i < n_heads; ++i) {
    Var<T> student_logits = heads.logits(tape, i, stack_row(ss, i));
    Var<T> teacher_logits = heads.logits(tape, i, stack_row(ts, i));
    ces.push_back(cross_entropy(student_logits, labels));
    kls.push_back(kl_divergence(teacher_logits, student_logits));
  }
  const double inv = 1.0 / static_cast<double>(n_heads);
  KdTerms<T> out;
  out.ce = scale(sum(concat_rows(ces)), inv);
  out.kl = scale(sum(concat_rows(kls)), inv);
  out.total = add(scale(out.ce, alpha), scale(out.kl, beta));
  return out;
}

template <typename T>
Var<T> loss_en(Tape<T>& tape, const ClassifierHeads<T>& heads, Var<T> student_global, Var<T> teacher_global,
               const std::vector<std::size_t>& labels) {
  return add(cross_entropy(heads.logits(tape, 0, student_global), labels),
             cross_entropy(heads.logits(tape, 0, teacher_global), labels));
}

template <typename T>
Var<T> loss_mask(Var<T> upsampled, const synth::ParsingMask& mask) {
  if (upsampled.rows() != mask.height * mask.width || upsampled.cols() != mask.num_parts + 1) {
    throw DimensionError("loss_mask: correlation map " + shape_str(upsampled.shape()) + " does not match the mask");
  }
  std::vector<std::size_t> labels(mask.labels.begin(), mask.labels.end());
  return neg(mean(log(pick(upsampled, std::move(labels)))));
}

template <typename T>
Var<T> loss_triplet(Var<T> features, const std::vector<std::size_t>& labels, double margin) {
  const std::size_t n = features.rows();
  if (labels.size() != n) throw DimensionError("loss_triplet: one label per row required");
  if (std::set<std::size_t>(labels.begin(), labels.end()).size() < 2) {
    throw SamplingError("loss_triplet: batch needs at least two identities");
  }
  const Tensor<T>& x = features.value();
  auto dist2 = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double d = static_cast<double>(x(i, c)) - static_cast<double>(x(j, c));
      s += d * d;
    }
    return s;
  };
  // Mining is a discrete choice on current values; gradients flow through the chosen pairs.
  std::vector<std::size_t> pos(n), negs(n);
  for (std::size_t a = 0; a < n; ++a) {
    double hardest_pos = -1, hardest_neg = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dist2(a, j);
      if (labels[j] == labels[a]) {
        if (d > hardest_pos) hardest_pos = d, pos[a] = j;
      } else if (d < hardest_neg) {
        hardest_neg = d, negs[a] = j;
      }
    }
  }
  constexpr double kEps = 1e-12;
  Var<T> dp = sqrt(add_scalar(sum_rows(square(sub(features, gather_rows(features, pos)))), kEps));
  Var<T> dn = sqrt(add_scalar(sum_rows(square(sub(features, gather_rows(features, negs)))), kEps));
  return mean(relu(add_scalar(sub(dp, dn), margin)));
}

template <typename T>
Var<T> loss_tr(const std::vector<FeatureBundle<T>>& teacher, const std::vector<std::size_t>& labels, double margin) {
  std::vector<Var<T>> ts;
  for (const auto& b : teacher) ts.push_back(global_and_parts(b));
  if (ts.empty()) throw ContractError("loss_tr: empty batch");
  const std::size_t k = ts.front().rows() - 1;
  Var<T> global_term = loss_triplet(stack_row(ts, 0), labels, margin);
  std::vector<Var<T>> part_terms;
  for (std::size_t i = 1; i <= k; ++i) part_terms.push_back(loss_triplet(stack_row(ts, i), labels, margin));
  return add(global_term, scale(sum(concat_rows(part_terms)), 1.0 / static_cast<double>(k)));
}

template <typename T>
Var<T> total_loss(Var<T> mse, Var<T> cos, Var<T> kd, Var<T> en, Var<T> tr, Var<T> mask, const LossWeights& w) {
  Var<T> distill = add(add(mse, scale(cos, w.mu1)), kd);
  Var<T> enhance = add(en, scale(tr, w.mu2));
  return add(add(distill, enhance), mask);
}

template <typename T>
LossValues values(const LossBreakdown<T>& b) {
  LossValues v;
  v.mse = b.mse.item();
  v.cos = b.cos.item();
  v.kd = b.kd.item();
  v.en = b.en.item();
  v.tr = b.tr.item();
  v.mask = b.mask.item();
  v.total = b.total.item();
  return v;
}

#define OGFR_INSTANTIATE(T)                                                                                     \
  template Var<T> global_and_parts<T>(const FeatureBundle<T>&);                                                \
  template Var<T> loss_mse<T>(const std::vector<Var<T>>&, const std::vector<Var<T>>&, bool);                    \
  template Var<T> loss_cos<T>(const std::vector<FeatureBundle<T>>&, const std::vector<FeatureBundle<T>>&,      \
                              double);                                                                         \
  template Var<T> kl_divergence<T>(Var<T>, Var<T>);                                                            \
  template KdTerms<T> loss_kd<T>(Tape<T>&, const ClassifierHeads<T>&, const std::vector<FeatureBundle<T>>&,    \
                                 const std::vector<FeatureBundle<T>>&, const std::vector<std::size_t>&, double, \
                                 double);                                                                      \
  template Var<T> loss_en<T>(Tape<T>&, const ClassifierHeads<T>&, Var<T>, Var<T>,                             \
                             const std::vector<std::size_t>&);                                                 \
  template Var<T> loss_mask<T>(Var<T>, const synth::ParsingMask&);                                             \
  template Var<T> loss_triplet<T>(Var<T>, const std::vector<std::size_t>&, double);                           \
  template Var<T> loss_tr<T>(const std::vector<FeatureBundle<T>>&, const std::vector<std::size_t>&, double);  \
  template Var<T> total_loss<T>(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, const LossWeights&);           \
  template LossValues values<T>(const LossBreakdown<T>&);

OGFR_INSTANTIATE(float)
OGFR_INSTANTIATE(double)

}  // namespace ogfr
