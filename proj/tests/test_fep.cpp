#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ogfr/model.hpp"
#include "ogfr/ops.hpp"
#include "ogfr/verify.hpp"
#include "test_util.hpp"

using namespace ogfr;
using ogfr::testing::max_abs_diff;
using ogfr::testing::random_matrix;

namespace {

ModelConfig toy() {
  ModelConfig cfg;
  cfg.num_identities = 3;
  return cfg;
}

FeatureBundle<double> encoded(const OgfrModel<double>& m, Tape<double>& tape, int id = 0) {
  Rng rng(static_cast<std::uint64_t>(id) + 50);
  const auto r = synth::render(synth::generate_identity_prototype(id, 2), 0, {}, synth::RenderConfig{}, rng);
  const ModelInput<double> in = make_input<double>(r.image, r.mask, m.config(), 5);
  return m.encoder.encode(tape, in.patches, in.z, in.camera);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// log π(a | s) as a plain function of (G, b), independent of the library's gradient code.
double episode_log_prob(const std::vector<double>& g, double b, const Episode& ep) {
  const std::size_t w = g.size();
  double lp = 0;
  for (std::size_t t = 0; t < ep.actions.size(); ++t) {
    double z = b;
    for (std::size_t j = 0; j < w; ++j) z += g[j] * ep.state[t * w + j];
    const double m = sigmoid(z);
    lp += ep.actions[t] ? std::log(m) : std::log(1 - m);
  }
  return lp;
}

}  // namespace

TEST_CASE("correlation: symmetric, concentrating and normalized") {
  Rng rng(1);
  Tape<double> tape(false);
  Var<double> patches = tape.constant(random_matrix(6, 4, rng));
  Tensor<double> same = Tensor<double>::matrix(9, 4);
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 4; ++c) same(r, c) = 0.7 * (c + 1);
  const Tensor<double> uniform = correlation(patches, tape.constant(same)).value();
  for (double v : uniform.data()) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-12));

  Tensor<double> parts = random_matrix(9, 4, rng, 0.1);
  for (std::size_t c = 0; c < 4; ++c) parts(3, c) = 200.0 * patches.value()(2, c);
  CHECK(correlation(patches, tape.constant(parts)).value()(2, 3) > 0.999);

  const Tensor<double> r = correlation(patches, tape.constant(random_matrix(9, 4, rng, 3.0))).value();
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 9; ++j) s += r(i, j);
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("agent forward: neutral at zero and monotone in a positive weight") {
  ParameterStore<double> store;
  auto agent = ErasingAgent<double>::create(store, 8, 0.0);
  Rng rng(2);
  const Tensor<double> corr = random_matrix(5, 9, rng);
  for (double m : agent.forward(corr)) CHECK(m == 0.5);

  agent.weight->value[0] = 2.0;
  Tensor<double> more = corr;
  for (std::size_t t = 0; t < 5; ++t) more(t, 0) += 0.5;
  const auto a = agent.forward(corr), b = agent.forward(more);
  for (std::size_t t = 0; t < 5; ++t) CHECK(b[t] > a[t]);
}

TEST_CASE("policy score matches finite differences of log pi") {
  ParameterStore<double> store;
  auto agent = ErasingAgent<double>::create(store, 3, 0.2);
  Rng rng(3);
  std::vector<double> g = {0.3, -0.8, 0.5, 1.1};
  for (std::size_t j = 0; j < 4; ++j) agent.weight->value[j] = g[j];
  Episode ep;
  ep.state.resize(6 * 4);
  for (double& s : ep.state) s = rng.uniform();
  ep.actions = {1, 0, 0, 1, 1, 0};
  ep.reward = 1.0;
  const PolicyGradient pg = reinforce_gradient(agent, std::span<const Episode>(&ep, 1));

  const double h = 1e-6;
  for (std::size_t j = 0; j < 4; ++j) {
    auto up = g, down = g;
    up[j] += h, down[j] -= h;
    const double numeric = (episode_log_prob(up, 0.2, ep) - episode_log_prob(down, 0.2, ep)) / (2 * h);
    CHECK(pg.weight[j] == doctest::Approx(numeric).epsilon(1e-6));
  }
  const double nb = (episode_log_prob(g, 0.2 + h, ep) - episode_log_prob(g, 0.2 - h, ep)) / (2 * h);
  CHECK(pg.bias == doctest::Approx(nb).epsilon(1e-6));
}

TEST_CASE("action sampling and log-probability") {
  Rng rng(4);
  const std::vector<double> sure(50, 1.0 - 1e-12);
  for (auto a : sample_actions(sure, rng)) CHECK(a == 1);

  const std::vector<double> m(10000, 0.3);
  const auto a = sample_actions(m, rng);
  double mean = 0;
  for (auto v : a) mean += v;
  mean /= static_cast<double>(a.size());
  CHECK(std::abs(mean - 0.3) < 0.02);

  const std::vector<double> half(4, 0.5);
  const std::vector<std::uint8_t> ones(4, 1);
  CHECK(log_prob(half, ones) == doctest::Approx(4 * std::log(0.5)));
}

TEST_CASE("reward arithmetic and contract") {
  CHECK(reward(0.4, 0.4) == 0.0);
  CHECK(reward(1.0, 0.3) == 1.0);
  CHECK(reward(0.75, 0.5) == 0.5);
  CHECK(reward(0.0, 0.9) == -1.0);  // −9 before the clamp
  CHECK(reward(0.0, 0.9, 20.0) == doctest::Approx(-9.0));
  CHECK_THROWS_AS(reward(0.5, 1.0), ContractError);
}

TEST_CASE("REINFORCE update: zero reward, batch averaging and linearity") {
  ParameterStore<double> store;
  auto agent = ErasingAgent<double>::create(store, 2, 0.1);
  Rng rng(5);
  Episode e;
  e.state.resize(4 * 3);
  for (double& s : e.state) s = rng.uniform();
  e.actions = {1, 0, 1, 1};

  e.reward = 0.0;
  const Tensor<double> w0 = agent.weight->value;
  reinforce_update(agent, std::span<const Episode>(&e, 1), 1.0);
  CHECK(agent.weight->value == w0);

  e.reward = 0.7;
  const std::vector<Episode> two = {e, e};
  Episode doubled = e, silent = e;
  doubled.reward = 1.4;
  silent.reward = 0.0;
  const std::vector<Episode> weighted = {doubled, silent};
  const PolicyGradient a = reinforce_gradient(agent, std::span<const Episode>(two));
  const PolicyGradient b = reinforce_gradient(agent, std::span<const Episode>(&e, 1));
  const PolicyGradient c = reinforce_gradient(agent, std::span<const Episode>(weighted));
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(a.weight[j] == doctest::Approx(b.weight[j]).epsilon(1e-14));
    CHECK(a.weight[j] == doctest::Approx(c.weight[j]).epsilon(1e-14));
  }
}

TEST_CASE("REINFORCE estimator agrees with exhaustive enumeration") {
  verify::ReinforceOptions opts;
  opts.min_patches = 3;
  opts.max_patches = 3;
  const verify::Report r = verify::reinforce(opts);
  for (const auto& c : r.checks) {
    CAPTURE(c.name);
    CAPTURE(c.detail);
    CHECK(c.pass);
  }
}

TEST_CASE("erase keeps or replaces whole rows and is idempotent") {
  const ModelConfig cfg = toy();
  OgfrModel<double> m(cfg, 1);
  Tape<double> tape(false);
  const FeatureBundle<double> e = encoded(m, tape);
  const std::size_t n = cfg.num_patches(), k = cfg.num_parts;

  const Tensor<double> kept = m.purifier.erase(tape, e, std::vector<std::uint8_t>(n, 1)).value();
  const Tensor<double> replaced = m.purifier.erase(tape, e, std::vector<std::uint8_t>(n, 0)).value();
  const Tensor<double>& patches = e.patches.value();
  const Tensor<double>& repl = m.purifier.replacements->value;
  for (std::size_t i = 0; i < n * cfg.dim; ++i) {
    CHECK(kept[(k + 1) * cfg.dim + i] == patches[i]);
    CHECK(replaced[(k + 1) * cfg.dim + i] == repl[i]);
  }

  Rng rng(2);
  std::vector<std::uint8_t> a(n);
  for (auto& v : a) v = static_cast<std::uint8_t>(rng.below(2));
  Var<double> once = select_rows(a, e.patches, tape.param(*m.purifier.replacements));
  Var<double> twice = select_rows(a, once, tape.param(*m.purifier.replacements));
  CHECK(once.value() == twice.value());
}

TEST_CASE("gradient through purify and a scalar head") {
  const ModelConfig cfg = toy();
  OgfrModel<double> m(cfg, 2);
  Rng rng(3);
  std::vector<std::uint8_t> a(cfg.num_patches());
  for (auto& v : a) v = static_cast<std::uint8_t>(rng.below(2));
  const Tensor<double> w = random_matrix(cfg.dim, 1, rng);
  auto f = [&](Tape<double>& t) {
    return sum(matmul(m.purifier.purify(t, encoded(m, t), a).global, t.constant(w)));
  };
  auto probes = testing::sample_probes(m.store, "fep.", 4, rng);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i]) probes.push_back({m.purifier.replacements, i * cfg.dim + rng.below(cfg.dim)});
  const GradCheckResult r = grad_check<double>(f, probes);
  INFO(r.worst << " analytic " << r.worst_analytic << " numeric " << r.worst_numeric);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("fixed-prefix attention: fixed rows are their own value rows") {
  ParameterStore<double> store;
  Rng rng(6);
  const std::size_t d = 8, heads = 2, fixed = 3, rows = 7, dh = d / heads;
  auto attn = MultiHeadAttention<double>::create(store, "fix", d, heads, rng);
  const Tensor<double> x = random_matrix(rows, d, rng);

  Tape<double> tape(false);
  AttentionTrace<double> trace;
  attn.fixed(tape, tape.constant(x), fixed, &trace);
  const Tensor<double> v = attn.value(tape, tape.constant(x)).value();
  REQUIRE(trace.head_outputs.size() == heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor<double>& oh = trace.head_outputs[h].value();
    for (std::size_t r = 0; r < fixed; ++r)
      for (std::size_t c = 0; c < dh; ++c) CHECK(oh(r, c) == v(r, h * dh + c));
    const Tensor<double>& w = trace.weights[h].value();
    CHECK(w.rows() == rows - fixed);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < w.cols(); ++c) s += w(r, c);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }

  // Moving one patch row leaves every fixed row unchanged.
  Tensor<double> moved = x;
  for (std::size_t c = 0; c < d; ++c) moved(rows - 2, c) += 5.0 * rng.normal();
  AttentionTrace<double> trace2;
  attn.fixed(tape, tape.constant(moved), fixed, &trace2);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor<double>& a = trace.head_outputs[h].value();
    const Tensor<double>& b = trace2.head_outputs[h].value();
    for (std::size_t i = 0; i < fixed * dh; ++i) CHECK(a[i] == b[i]);
    CHECK(max_abs_diff(a, b) > 1e-6);
  }
}

TEST_CASE("fixed rows have a zero Jacobian with respect to patch rows") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(verify::fixed_row_leakage(toy(), seed) <= 1e-12);
}

TEST_CASE("agent sanity: poison patch is erased, gold patch retained") {
  verify::AgentSanityOptions opts;
  opts.seed = 1;
  const verify::AgentSanityResult r = verify::agent_sanity(opts);
  CHECK(r.poison_retain < 0.5);
  CHECK(r.gold_retain > 0.5);
}
