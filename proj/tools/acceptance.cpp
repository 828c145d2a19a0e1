// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is 0 when every failing criterion is listed in --known-failures,
// 1 otherwise. A listed criterion still prints its honest FAIL line.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "ogfr/checkpoint.hpp"
#include "ogfr/losses.hpp"
#include "ogfr/occlusion.hpp"
#include "ogfr/retrieval.hpp"
#include "ogfr/trainer.hpp"
#include "ogfr/verify.hpp"

using namespace ogfr;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome from_report(const verify::Report& r) {
  std::ostringstream os;
  bool pass = !r.checks.empty();
  for (const verify::Check& c : r.checks) {
    pass = pass && c.pass;
    if (!c.pass) os << c.name << " measured " << c.measured << "; ";
  }
  if (pass) os << r.checks.size() << " checks";
  return {pass, os.str()};
}

Outcome c1_gradients() {
  verify::GradcheckOptions opts;
  opts.tolerance = 1e-3;
  opts.random_probes = 32;
  const verify::Report r = verify::gradcheck(Config{}, opts);
  Outcome o = from_report(r);
  o.detail = r.checks.front().detail;
  return o;
}

Outcome c2_reinforce() { return from_report(verify::reinforce()); }

Outcome c3_fixed_rows() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) worst = std::max(worst, verify::fixed_row_leakage(ModelConfig{}, seed));
  return {worst <= 1e-12, fmt("max |J| %.3g over 20 seeds", worst)};
}

// Masks are painted with known per-part pixel counts; the expected y and z follow from the counts alone.
Outcome c4_estimator() {
  struct Case {
    std::size_t head, arms_l, arms_r, torso, legs;
    std::vector<std::uint8_t> z;
  };
  const std::vector<Case> cases = {
      {0, 0, 0, 0, 0, {1, 1, 1, 1}},    {12, 0, 0, 0, 0, {0, 1, 1, 1}}, {0, 7, 5, 0, 0, {1, 0, 1, 1}},
      {0, 0, 0, 4, 0, {1, 1, 1, 1}},    {0, 0, 0, 5, 0, {1, 1, 0, 1}},  {0, 0, 0, 6, 0, {1, 1, 0, 1}},
      {0, 2, 3, 0, 0, {1, 0, 1, 1}},    {5, 3, 2, 5, 5, {0, 0, 0, 0}},  {0, 0, 0, 0, 40, {1, 1, 1, 0}},
      {30, 10, 10, 60, 50, {0, 0, 0, 0}},
  };
  std::size_t correct = 0;
  for (const Case& c : cases) {
    synth::ParsingMask m(16, 16);
    std::size_t at = 0;
    auto paint = [&](synth::Part p, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) m.labels[at++] = static_cast<std::uint8_t>(p);
    };
    paint(synth::Part::kHead, c.head);
    paint(synth::Part::kLeftArm, c.arms_l);
    paint(synth::Part::kRightArm, c.arms_r);
    paint(synth::Part::kTorso, c.torso);
    for (std::size_t i = 0; i < c.legs; ++i) m.labels[at++] = static_cast<std::uint8_t>(5 + i % 4);
    const std::vector<long> y = {static_cast<long>(c.head), static_cast<long>(c.arms_l + c.arms_r),
                                 static_cast<long>(c.torso), static_cast<long>(c.legs)};
    correct += pixel_counts(m, CoarseMap::standard()) == y && estimate(m, 5).bits == c.z;
  }
  return {correct == cases.size(), fmt("%zu/%zu masks, boundary y=5 gives l=0", correct, cases.size())};
}

Outcome c5_distance() {
  Rng rng(5);
  auto vec = [&] {
    std::vector<double> v(16);
    for (double& x : v) x = rng.normal();
    return v;
  };
  auto entry = [&](std::uint8_t vis) {
    GalleryEntry e;
    e.global = vec();
    for (int i = 0; i < 8; ++i) e.parts.push_back(vec());
    e.visibility.assign(8, vis);
    return e;
  };
  double invisible = 0, identical = 0, equal_parts = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const GalleryEntry q = entry(0), g = entry(0);
    double d2 = 0;
    for (std::size_t c = 0; c < q.global.size(); ++c) d2 += (q.global[c] - g.global[c]) * (q.global[c] - g.global[c]);
    invisible = std::max(invisible, std::abs(distance(q, g) - std::sqrt(d2)));

    const GalleryEntry v = entry(1);
    identical = std::max(identical, std::abs(distance(v, v)));

    GalleryEntry a = entry(1), b = a;
    const std::vector<double> shift = vec();
    double s2 = 0;
    for (std::size_t c = 0; c < shift.size(); ++c) {
      s2 += shift[c] * shift[c];
      b.global[c] += shift[c];
      for (auto& p : b.parts) p[c] += shift[c];
    }
    equal_parts = std::max(equal_parts, std::abs(distance(a, b) - std::sqrt(s2)));
  }
  return {invisible == 0.0 && identical == 0.0 && equal_parts <= 1e-12,
          fmt("invisible %.3g, identical %.3g, equal-part %.3g", invisible, identical, equal_parts)};
}

Outcome c6_loss_zeros() {
  Config cfg;
  OgfrModel<double> model(cfg.model, 6);
  const synth::Dataset ds = synth::build_splits(2, 2, split_options(cfg));
  Tape<double> tape(false);
  std::vector<FeatureBundle<double>> hp, op;
  std::vector<Var<double>> hp_tokens, op_tokens;
  std::vector<std::size_t> labels;
  for (std::size_t i : ds.train) {
    const ModelInput<double> in = make_input<double>(ds.samples[i].image, ds.samples[i].mask, cfg.model, 5);
    const FeatureBundle<double> enc = model.encoder.encode(tape, in.patches, in.z, in.camera);
    const std::vector<std::uint8_t> keep(cfg.model.num_patches(), 1);
    hp.push_back(model.purifier.purify(tape, enc, keep));
    op.push_back(FeatureBundle<double>::split(tape.constant(hp.back().tokens.value()), cfg.model.num_parts, false));
    hp_tokens.push_back(hp.back().tokens);
    op_tokens.push_back(op.back().tokens);
    labels.push_back(static_cast<std::size_t>(in.label));
  }
  const double mse = loss_mse(hp_tokens, op_tokens, true).item();
  const double cos = loss_cos(hp, op).item();
  const double kl = loss_kd(tape, model.heads, hp, op, labels, cfg.loss.alpha, cfg.loss.beta).kl.item();
  const double worst = std::max({std::abs(mse), std::abs(cos), std::abs(kl)});
  return {worst <= 1e-10, fmt("mse %.3g, cos %.3g, kl %.3g", mse, cos, kl)};
}

Outcome c7_overfit() {
  Config cfg;
  cfg.data.num_ids = 2;
  cfg.data.images_per_id = 4;
  cfg.model.num_identities = 2;
  cfg.optim.epochs = 300;
  const synth::Dataset ds = synth::build_splits(2, 4, split_options(cfg));
  Trainer<float> tr(cfg, ds);
  double first = 0, last = 0;
  for (std::int64_t s = 0; s < 300; ++s) {
    last = tr.train_step().losses.total;
    if (s == 0) first = last;
  }
  const double r1 = tr.train_rank1(), ratio = last / first;
  return {r1 == 1.0 && ratio < 0.1, fmt("train rank-1 %.3f, final/first loss %.4f (%.4f / %.4f)", r1, ratio, last, first)};
}

Outcome c8_agent() {
  std::ostringstream os;
  int passed = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    verify::AgentSanityOptions opts;
    opts.seed = seed;
    const verify::AgentSanityResult r = verify::agent_sanity(opts);
    passed += r.pass;
    os << fmt("seed %d poison %.3f gold %.3f; ", static_cast<int>(seed), r.poison_retain, r.gold_retain);
  }
  std::string detail = os.str();
  detail.resize(detail.size() - 2);
  return {passed == 3, fmt("%d/3: ", passed) + detail};
}

Outcome c9_ablation_direction() {
  std::ostringstream os;
  int wins = 0;
  for (int s = 0; s < 5; ++s) {
    double r1[2] = {0, 0};
    for (int full = 0; full < 2; ++full) {
      Config cfg;
      cfg.seed = 1000 + static_cast<std::uint64_t>(s);
      cfg.data.num_ids = 20;
      cfg.data.query_per_id = 3;
      cfg.model.num_identities = 20;
      if (!full) {
        cfg.model.gamma1 = 0.0;
        cfg.model.use_fep = false;
      }
      const synth::Dataset ds = synth::build_splits(20, cfg.data.images_per_id, split_options(cfg));
      Trainer<float> tr(cfg, ds);
      for (std::int64_t i = 0; i < tr.total_steps(); ++i) tr.train_step();
      r1[full] = evaluate_model<float>(tr.model(), ds, cfg.occlusion.lambda).rank1;
    }
    wins += r1[1] > r1[0];
    os << fmt("%.3f/%.3f ", r1[1], r1[0]);
  }
  return {wins >= 4, fmt("full beats ablation on %d/5 seeds, rank-1 full/ablation: ", wins) + os.str()};
}

Outcome c10_determinism() {
  Config cfg;
  const synth::Dataset ds = synth::build_splits(cfg.data.num_ids, cfg.data.images_per_id, split_options(cfg));
  Trainer<float> a(cfg, ds), b(cfg, ds), half(cfg, ds);
  for (int i = 0; i < 50; ++i) a.train_step(), b.train_step();
  for (int i = 0; i < 25; ++i) half.train_step();
  const bool same = encode_checkpoint(a.checkpoint()) == encode_checkpoint(b.checkpoint());

  const std::string path = (std::filesystem::temp_directory_path() / "ogfr_acceptance_resume.bin").string();
  write_checkpoint(path, half.checkpoint());
  Trainer<float> resumed(cfg, ds);
  resumed.restore(read_checkpoint(path));
  std::filesystem::remove(path);
  for (int i = 0; i < 25; ++i) resumed.train_step();
  const bool resume_same = encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(a.checkpoint());
  return {same && resume_same, fmt("two 50-step runs %s; 25+25 resume %s", same ? "identical" : "differ",
                                   resume_same ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  std::vector<int> only, known;
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  app.add_option("--known-failures", known, "Criteria whose FAIL does not change the exit status")
      ->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", c1_gradients},
      {"policy-gradient unbiasedness", c2_reinforce},
      {"fixed-row Jacobian", c3_fixed_rows},
      {"occlusion estimator", c4_estimator},
      {"distance collapse cases", c5_distance},
      {"loss zero cases", c6_loss_zeros},
      {"overfit sanity", c7_overfit},
      {"agent learning sanity", c8_agent},
      {"ablation direction", c9_ablation_direction},
      {"determinism", c10_determinism},
  };
  const std::set<int> selected(only.begin(), only.end()), allowed(known.begin(), known.end());
  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << id << (id < 10 ? "  " : " ") << (o.pass ? "PASS" : "FAIL") << "  "
              << criteria[i].first << ": " << o.detail << fmt(" [%.1fs]", secs)
              << (!o.pass && allowed.count(id) ? " (known failure)" : "") << std::endl;
    unexpected += !o.pass && !allowed.count(id);
  }
  return unexpected == 0 ? 0 : 1;
}
