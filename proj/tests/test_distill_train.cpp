#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>

#include "ogfr/losses.hpp"
#include "ogfr/ops.hpp"
#include "ogfr/trainer.hpp"
#include "test_util.hpp"

using namespace ogfr;
using ogfr::testing::random_matrix;

namespace {

constexpr std::size_t K = 8;

FeatureBundle<double> bundle(Tape<double>& tape, const Tensor<double>& tokens) {
  return FeatureBundle<double>::split(tape.constant(tokens), K, false);
}

Config overfit_config() {
  Config cfg;
  cfg.data.num_ids = 2;
  cfg.data.images_per_id = 4;
  cfg.model.num_identities = 2;
  return cfg;
}

double scalar(Var<double> v) { return v.item(); }

}  // namespace

TEST_CASE("student layers: shape, determinism and gradient") {
  ModelConfig cfg;
  cfg.num_identities = 3;
  OgfrModel<double> a(cfg, 9), b(cfg, 9);
  Rng rng(1);
  const auto r = synth::render(synth::generate_identity_prototype(1, 1), 2, {}, synth::RenderConfig{}, rng);
  const ModelInput<double> in = make_input<double>(r.image, r.mask, cfg, 5);

  Tape<double> tape(false);
  const FeatureBundle<double> out = a.student.forward(tape, a.encoder.encode(tape, in.patches, in.z, in.camera));
  CHECK(out.tokens.rows() == 1 + K + cfg.num_patches());
  const FeatureBundle<double> again = b.student.forward(tape, b.encoder.encode(tape, in.patches, in.z, in.camera));
  CHECK(out.tokens.value() == again.tokens.value());

  const Tensor<double> w = random_matrix(1 + K + cfg.num_patches(), cfg.dim, rng);
  auto f = [&](Tape<double>& t) {
    return sum(mul(a.student.forward(t, a.encoder.encode(t, in.patches, in.z, in.camera)).tokens, t.constant(w)));
  };
  auto probes = testing::sample_probes(a.store, "student.", 4, rng);
  CHECK(grad_check<double>(f, probes).max_rel_error < 1e-4);
}

TEST_CASE("mse: zero, both reductions on a unit difference, symmetry") {
  Rng rng(2);
  const std::size_t t = 1 + K + 5, d = 4;
  Tape<double> tape(false);
  const Tensor<double> a = random_matrix(t, d, rng);
  Tensor<double> b = a;
  for (std::size_t i = 0; i < b.numel(); ++i) b[i] += 1.0;
  Var<double> va = tape.constant(a), vb = tape.constant(b);

  CHECK(scalar(loss_mse<double>({va}, {va})) == 0.0);
  CHECK(scalar(loss_mse<double>({va}, {vb})) == doctest::Approx(static_cast<double>(t * d)));
  CHECK(scalar(loss_mse<double>({va}, {vb}, true)) == doctest::Approx(1.0));

  Var<double> vc = tape.constant(random_matrix(t, d, rng));
  CHECK(scalar(loss_mse<double>({va, vc}, {vc, vb})) == scalar(loss_mse<double>({vc, vb}, {va, vc})));
  CHECK_THROWS_AS(loss_mse<double>({va}, {tape.constant(random_matrix(t, d + 1, rng))}), DimensionError);
}

TEST_CASE("cosine loss: identical, opposite and scaled") {
  Rng rng(3);
  Tape<double> tape(false);
  const Tensor<double> a = random_matrix(1 + K + 3, 5, rng);
  Tensor<double> neg_a = a, big = a;
  for (std::size_t i = 0; i < a.numel(); ++i) neg_a[i] = -a[i], big[i] = 10 * a[i];
  const Tensor<double> other = random_matrix(1 + K + 3, 5, rng);

  CHECK(std::abs(scalar(loss_cos<double>({bundle(tape, a)}, {bundle(tape, a)}))) < 1e-12);
  CHECK(scalar(loss_cos<double>({bundle(tape, a)}, {bundle(tape, neg_a)})) == doctest::Approx(2.0));
  CHECK(scalar(loss_cos<double>({bundle(tape, other)}, {bundle(tape, big)})) ==
        doctest::Approx(scalar(loss_cos<double>({bundle(tape, other)}, {bundle(tape, a)}))).epsilon(1e-12));
}

TEST_CASE("distillation loss: zero cases and non-negative KL") {
  ModelConfig cfg;
  cfg.dim = 6, cfg.num_identities = 4;
  ParameterStore<double> store;
  Rng rng(4);
  const auto heads = ClassifierHeads<double>::create(store, cfg, rng);
  for (std::size_t i = 0; i <= K; ++i) heads.weights[i]->value = random_matrix(6, 4, rng);
  Tape<double> tape(false);
  const Tensor<double> a = random_matrix(1 + K + 2, 6, rng), b = random_matrix(1 + K + 2, 6, rng);

  const KdTerms<double> same = loss_kd<double>(tape, heads, {bundle(tape, a)}, {bundle(tape, a)}, {1}, 0.3, 0.4);
  CHECK(std::abs(scalar(same.kl)) <= 1e-10);
  const KdTerms<double> off = loss_kd<double>(tape, heads, {bundle(tape, a)}, {bundle(tape, b)}, {1}, 0.0, 0.0);
  CHECK(scalar(off.total) == 0.0);

  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<double> lt = random_matrix(3, 7, rng, 3.0), ls = random_matrix(3, 7, rng, 3.0);
    CHECK(scalar(kl_divergence(tape.constant(lt), tape.constant(ls))) >= 0.0);
  }
}

TEST_CASE("KL teacher side receives no gradient") {
  Rng rng(5);
  Tape<double> tape;
  Var<double> t = tape.leaf(random_matrix(2, 5, rng)), s = tape.leaf(random_matrix(2, 5, rng));
  tape.backward(kl_divergence(t, s));
  const Tensor<double> gt = tape.grad(t), gs = tape.grad(s);
  for (double g : gt.data()) CHECK(g == 0.0);
  double norm = 0;
  for (double g : gs.data()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("identity loss: uniform, confident and non-negative") {
  ModelConfig cfg;
  cfg.dim = 4, cfg.num_identities = 10;
  ParameterStore<double> store;
  Rng rng(6);
  const auto heads = ClassifierHeads<double>::create(store, cfg, rng);
  const Tensor<double> f = random_matrix(3, 4, rng);
  // A tape snapshots parameter values on first use, so each case gets its own.
  auto en = [&](const Tensor<double>& x, const std::vector<std::size_t>& labels) {
    Tape<double> tape(false);
    return scalar(loss_en<double>(tape, heads, tape.constant(x), tape.constant(x), labels));
  };

  heads.weights[0]->value.fill(0.0);
  CHECK(en(f, {0, 4, 9}) == doctest::Approx(2 * std::log(10.0)));

  // Feature e_0 against a head with a huge weight on class 2.
  Tensor<double> e0 = Tensor<double>::matrix(1, 4);
  e0[0] = 1.0;
  heads.weights[0]->value(0, 2) = 100.0;
  CHECK(en(e0, {2}) < 1e-40);

  heads.weights[0]->value = random_matrix(4, 10, rng);
  CHECK(en(f, {1, 2, 3}) >= 0.0);
}

TEST_CASE("mask loss: one-hot limit and uniform value") {
  synth::ParsingMask mask(4, 2);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) mask.labels[i] = static_cast<std::uint8_t>(i % (K + 1));
  Tape<double> tape(false);
  Tensor<double> one_hot = Tensor<double>::matrix(8, K + 1, 1e-14);
  for (std::size_t i = 0; i < 8; ++i) one_hot(i, mask.labels[i]) = 1.0 - K * 1e-14;
  CHECK(scalar(loss_mask(tape.constant(one_hot), mask)) < 1e-12);
  const Tensor<double> uniform = Tensor<double>::matrix(8, K + 1, 1.0 / (K + 1));
  CHECK(scalar(loss_mask(tape.constant(uniform), mask)) == doctest::Approx(std::log(K + 1.0)));
  CHECK_THROWS_AS(loss_mask(tape.constant(Tensor<double>::matrix(7, K + 1, 0.1)), mask), DimensionError);
}

TEST_CASE("triplet loss: collapsed, separated and non-negative") {
  Tape<double> tape(false);
  const std::vector<std::size_t> labels = {0, 0, 1, 1};
  CHECK(scalar(loss_triplet(tape.constant(Tensor<double>::matrix(4, 3, 0.5)), labels, 0.3)) ==
        doctest::Approx(0.3));

  Tensor<double> apart = Tensor<double>::matrix(4, 3);
  apart(2, 0) = apart(3, 0) = 5.0;
  CHECK(scalar(loss_triplet(tape.constant(apart), labels, 0.3)) == 0.0);

  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial)
    CHECK(scalar(loss_triplet(tape.constant(random_matrix(4, 3, rng)), labels, 0.3)) >= 0.0);
  CHECK_THROWS_AS(loss_triplet(tape.constant(apart), {1, 1, 1, 1}, 0.3), SamplingError);
}

TEST_CASE("total loss composition") {
  Tape<double> tape(false);
  auto c = [&](double v) { return tape.constant(Tensor<double>::scalar(v)); };
  LossWeights w;
  w.mu1 = w.mu2 = 0.0;
  CHECK(scalar(total_loss(c(1), c(2), c(4), c(8), c(16), c(32), w)) == 1 + 4 + 8 + 32);
  CHECK(scalar(total_loss(c(0), c(0), c(0), c(0), c(0), c(0), LossWeights{})) == 0.0);

  LossWeights up, down;
  up.mu1 = 0.5 + 1e-3, down.mu1 = 0.5 - 1e-3;
  const double slope =
      (scalar(total_loss(c(1), c(2.5), c(4), c(8), c(16), c(32), up)) -
       scalar(total_loss(c(1), c(2.5), c(4), c(8), c(16), c(32), down))) / 2e-3;
  CHECK(slope == doctest::Approx(2.5));
}

TEST_CASE("cosine learning-rate schedule") {
  CHECK(cosine_lr(0.05, 0, 100) == doctest::Approx(0.05));
  CHECK(cosine_lr(0.05, 50, 100) == doctest::Approx(0.025));
  CHECK(cosine_lr(0.05, 100, 100) == doctest::Approx(0.0));
}

TEST_CASE("identity-balanced batches") {
  Config cfg;
  cfg.data.num_ids = 6;
  cfg.model.num_identities = 6;
  const synth::Dataset ds = synth::build_splits(6, 6, split_options(cfg));
  Trainer<float> tr(cfg, ds);
  CHECK(tr.steps_per_epoch() == 2);
  for (std::int64_t step = 0; step < 4; ++step) {
    const auto idx = tr.batch_indices(step);
    CHECK(idx.size() == 16);
    std::map<int, int> per_id;
    for (std::size_t i : idx) ++per_id[ds.samples[ds.train[i]].image.identity];
    CHECK(per_id.size() == 4);
    for (const auto& [id, n] : per_id) CHECK(n == 4);
  }
}

TEST_CASE("resume reproduces the uninterrupted run bit for bit") {
  const Config cfg = overfit_config();
  const synth::Dataset ds = synth::build_splits(2, 4, split_options(cfg));
  Trainer<float> straight(cfg, ds);
  for (int i = 0; i < 3; ++i) straight.train_step();
  const Checkpoint mid = straight.checkpoint();
  for (int i = 0; i < 5; ++i) straight.train_step();

  Trainer<float> resumed(cfg, ds);
  resumed.restore(decode_checkpoint(encode_checkpoint(mid)));
  for (int i = 0; i < 5; ++i) resumed.train_step();
  CHECK(encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(straight.checkpoint()));
}

TEST_CASE("restore rejects a checkpoint from another config") {
  Config cfg = overfit_config();
  const synth::Dataset ds = synth::build_splits(2, 4, split_options(cfg));
  Trainer<float> a(cfg, ds);
  const Checkpoint ckpt = a.checkpoint();
  cfg.loss.margin = 0.7;
  Trainer<float> b(cfg, ds);
  CHECK_THROWS_AS(b.restore(ckpt), CheckpointError);
}

TEST_CASE("training lowers the loss") {
  const Config cfg = overfit_config();
  const synth::Dataset ds = synth::build_splits(2, 4, split_options(cfg));
  Trainer<float> tr(cfg, ds);
  const double first = tr.train_step().losses.total;
  double at_200 = 0;
  for (int step = 2; step <= 200; ++step) at_200 = tr.train_step().losses.total;
  CHECK(at_200 < first);
}

TEST_CASE("non-finite parameters raise NumericError with a dump") {
  const Config cfg = overfit_config();
  const synth::Dataset ds = synth::build_splits(2, 4, split_options(cfg));
  Trainer<float> tr(cfg, ds);
  tr.model().store.at("encoder.cls").value[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(tr.train_step(), NumericError);
  CHECK_FALSE(tr.nan_dump().empty());
}
