#include "ogfr/verify.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "ogfr/grad_check.hpp"
#include "ogfr/losses.hpp"
#include "ogfr/model.hpp"
#include "ogfr/ops.hpp"
#include "ogfr/trainer.hpp"

namespace ogfr::verify {

bool Report::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

nlohmann::json Report::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const Check& c : checks) {
    list.push_back({{"name", c.name},
                    {"pass", c.pass},
                    {"measured", c.measured},
                    {"threshold", c.threshold},
                    {"detail", c.detail}});
  }
  return {{"suite", suite}, {"pass", passed()}, {"checks", list}};
}

namespace {

Check at_most(std::string name, double measured, double threshold, std::string detail) {
  return Check{std::move(name), measured <= threshold, measured, threshold, std::move(detail)};
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// Two renders of distinct identities. The augmented copies carry an obstacle
// over the legs and over the head, so both branches see non-zero occlusion types.
StepBatch<double> two_image_batch(const Config& cfg, std::uint64_t seed) {
  synth::RenderConfig rc{cfg.model.image_height, cfg.model.image_width, cfg.model.num_cameras};
  Rng rng = Rng(seed).split(0x6772616463);
  StepBatch<double> batch;
  const int h = static_cast<int>(rc.height), w = static_cast<int>(rc.width);
  const synth::Rect covers[2] = {{h / 2, 0, h - h / 2, w}, {0, 0, h / 5, w}};
  for (int id = 0; id < 2; ++id) {
    const synth::Prototype proto = synth::generate_identity_prototype(id, seed);
    synth::Rendered r = synth::render(proto, id % rc.num_cameras, {}, rc, rng);
    const synth::Occluded occ = synth::apply_obstacle(r.image, r.mask, synth::Obstacle{covers[id], seed + 1});
    batch.holistic.push_back(make_input<double>(r.image, r.mask, cfg.model, cfg.occlusion.lambda));
    batch.augmented.push_back(make_input<double>(occ.image, occ.mask, cfg.model, cfg.occlusion.lambda));
    batch.labels.push_back(static_cast<std::size_t>(id));
  }
  return batch;
}

}  // namespace

Report gradcheck(const Config& base, const GradcheckOptions& opts) {
  Config cfg = base;
  cfg.precision = "float64";
  cfg.model.num_identities = 2;
  // A wide margin keeps every triplet hinge active, so the triplet term carries gradient.
  cfg.loss.margin = 100.0;
  cfg.model.use_fep = true;
  OgfrModel<double> model(cfg.model, opts.seed, cfg.rl.bias_init);
  const StepBatch<double> batch = two_image_batch(cfg, opts.seed);
  const Rng action_seed = Rng(opts.seed).split(0x616374);

  std::vector<Tensor<double>> stops;
  std::vector<Episode> episodes;
  auto f = [&](Tape<double>& tape) {
    if (tape.grad_enabled()) {
      stops.clear();
      tape.record_stops(&stops);
    } else {
      tape.replay_stops(&stops);
    }
    Rng actions = action_seed;
    StepGraph<double> g = build_step(tape, model, batch, cfg, 0.5, actions);
    if (tape.grad_enabled()) episodes = g.episodes;
    return g.losses.total;
  };
  // A first pass fixes the sampled actions, which decide the targeted replacement rows.
  {
    Tape<double> tape(true);
    f(tape);
  }

  Rng pick = Rng(opts.seed).split(0x70726f6265);
  std::vector<GradProbe<double>> probes;
  auto probe_row = [&](Parameter<double>* p, std::size_t row, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) probes.push_back({p, row * p->value.cols() + pick.below(p->value.cols())});
  };
  auto probe_any = [&](Parameter<double>* p, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) probes.push_back({p, pick.below(p->value.numel())});
  };

  std::set<std::size_t> used_rows;
  for (std::size_t b = 0; b < 2; ++b) {
    used_rows.insert(batch.holistic[b].z.index());
    used_rows.insert(batch.augmented[b].z.index());
  }
  Parameter<double>* table = model.encoder.occlusion_table;
  for (std::size_t row : used_rows) probe_row(table, row, 2);
  std::size_t unused = 0;
  while (used_rows.count(unused) != 0) ++unused;
  probe_row(table, unused, 2);

  probe_any(model.agent.weight, 3);
  probe_any(model.agent.bias, 1);

  Parameter<double>* repl = model.purifier.replacements;
  std::size_t erased = 0, kept = 0;
  const auto& acts = episodes.front().actions;
  for (std::size_t i = 0; i < acts.size(); ++i) {
    if (acts[i] == 0 && erased < 3) probe_row(repl, i, 1), ++erased;
    if (acts[i] == 1 && kept < 1) probe_row(repl, i, 1), ++kept;
  }

  const auto& fixed_attn = model.purifier.layer1.attn;
  for (const Linear<double>* l : {&fixed_attn.query, &fixed_attn.key, &fixed_attn.value, &fixed_attn.out}) {
    probe_any(l->weight, 2);
  }
  const std::size_t targeted = probes.size();

  std::size_t total = model.store.total_elements();
  for (std::size_t i = 0; i < opts.random_probes; ++i) {
    std::size_t flat = pick.below(total);
    for (std::size_t k = 0; k < model.store.size(); ++k) {
      Parameter<double>& p = model.store[k];
      if (flat < p.value.numel()) {
        probes.push_back({&p, flat});
        break;
      }
      flat -= p.value.numel();
    }
  }

  GradCheckResult res = grad_check<double>(f, probes, GradCheckOptions{opts.step, 1e-6});
  Report report{"gradcheck", {}};
  report.checks.push_back(at_most("total_loss_vs_central_differences", res.max_rel_error, opts.tolerance,
                                  std::to_string(res.checked) + " coordinates (" + std::to_string(targeted) +
                                      " targeted), worst " + res.worst + " analytic " + fmt(res.worst_analytic) +
                                      " numeric " + fmt(res.worst_numeric)));

  // Backpropagation must not reach the agent: its only update is the policy gradient.
  double agent_grad = 0.0;
  for (Parameter<double>* p : {model.agent.weight, model.agent.bias})
    for (double g : p->grad.data()) agent_grad = std::max(agent_grad, std::abs(g));
  report.checks.push_back(at_most("agent_receives_no_backprop_gradient", agent_grad, 0.0, "max |dL/dG|, |dL/db|"));

  double unused_grad = 0.0;
  for (std::size_t c = 0; c < table->value.cols(); ++c)
    unused_grad = std::max(unused_grad, std::abs(table->grad(unused, c)));
  report.checks.push_back(at_most("unused_occlusion_row_gradient", unused_grad, 0.0,
                                  "max |dL/dO_e| on row " + std::to_string(unused) + ", which no input selects"));
  return report;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Deterministic reward in [0, 1] with a pairwise interaction.
double rigged_reward(const std::vector<std::uint8_t>& a, const std::vector<double>& c) {
  double r = 0;
  for (std::size_t i = 0; i < a.size(); ++i) r += c[i] * a[i];
  r /= static_cast<double>(a.size());
  r += 0.3 * a.front() * a.back();
  return r / 1.8;
}

}  // namespace

Report reinforce(const ReinforceOptions& opts) {
  constexpr std::size_t kCols = synth::kNumParts + 1;
  Report report{"reinforce", {}};
  for (std::size_t n = opts.min_patches; n <= opts.max_patches; ++n) {
    Rng rng = Rng(opts.seed).split(0x7265696e, n);
    ParameterStore<double> store;
    ErasingAgent<double> agent = ErasingAgent<double>::create(store, synth::kNumParts, 0.0);
    for (double& g : agent.weight->value.data()) g = rng.uniform(-1.0, 1.0);
    agent.bias->value[0] = rng.uniform(-0.5, 0.5);

    // Softmax-normalized states, like rows of a correlation matrix.
    Tensor<double> state = Tensor<double>::matrix(n, kCols);
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < kCols; ++j) z += (state(i, j) = std::exp(2.0 * rng.normal()));
      for (std::size_t j = 0; j < kCols; ++j) state(i, j) /= z;
    }
    std::vector<double> coef(n);
    for (double& c : coef) c = rng.uniform(0.5, 1.5);

    // Exact expectation over all 2^n action vectors, written independently of the agent code.
    std::vector<double> m(n);
    for (std::size_t i = 0; i < n; ++i) {
      double z = agent.bias->value[0];
      for (std::size_t j = 0; j < kCols; ++j) z += state(i, j) * agent.weight->value[j];
      m[i] = sigmoid(z);
    }
    std::vector<double> exact(kCols + 1, 0.0);
    for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
      std::vector<std::uint8_t> a(n);
      double prob = 1;
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = (mask >> i) & 1U;
        prob *= a[i] ? m[i] : 1 - m[i];
      }
      const double r = rigged_reward(a, coef);
      for (std::size_t i = 0; i < n; ++i) {
        const double score = a[i] - m[i];
        for (std::size_t j = 0; j < kCols; ++j) exact[j] += prob * r * score * state(i, j);
        exact[kCols] += prob * r * score;
      }
    }

    const std::vector<double> retain = agent.forward(state);
    std::vector<Episode> episodes(opts.episodes);
    for (Episode& ep : episodes) {
      ep.state.assign(state.data().begin(), state.data().end());
      ep.actions = sample_actions(retain, rng);
      ep.reward = rigged_reward(ep.actions, coef);
    }
    const PolicyGradient mc = reinforce_gradient(agent, episodes);

    double worst = 0;
    std::size_t compared = 0;
    for (std::size_t j = 0; j <= kCols; ++j) {
      if (std::abs(exact[j]) <= opts.min_magnitude) continue;
      const double est = j < kCols ? mc.weight[j] : mc.bias;
      worst = std::max(worst, std::abs(est - exact[j]) / std::abs(exact[j]));
      ++compared;
    }
    report.checks.push_back(at_most("unbiased_N" + std::to_string(n), worst, opts.tolerance,
                                    std::to_string(compared) + " components over " + std::to_string(opts.episodes) +
                                        " episodes, max relative error"));
  }
  return report;
}

AgentSanityResult agent_sanity(const AgentSanityOptions& opts) {
  constexpr std::size_t kCols = synth::kNumParts + 1;
  constexpr std::size_t kPoisonCol = 3, kGoldCol = 6;
  Rng rng = Rng(opts.seed).split(0x706f69736f6e);
  ParameterStore<double> store;
  ErasingAgent<double> agent = ErasingAgent<double>::create(store, synth::kNumParts, 0.0);
  const std::size_t n = opts.num_patches;
  const std::size_t poison = 0, gold = n - 1;

  // Ordinary patches have diffuse affinities; the two designated patches are
  // dominated by one part channel each.
  Tensor<double> state = Tensor<double>::matrix(n, kCols);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < kCols; ++j) {
      double logit = 0.3 * rng.normal();
      if (i == poison && j == kPoisonCol) logit += 4.0;
      if (i == gold && j == kGoldCol) logit += 4.0;
      z += (state(i, j) = std::exp(logit));
    }
    for (std::size_t j = 0; j < kCols; ++j) state(i, j) /= z;
  }

  constexpr double kBaseline = 0.5;  // p_m with every patch retained
  for (std::size_t u = 0; u < opts.updates; ++u) {
    const std::vector<double> retain = agent.forward(state);
    std::vector<Episode> episodes(opts.episodes_per_update);
    for (Episode& ep : episodes) {
      ep.state.assign(state.data().begin(), state.data().end());
      ep.actions = sample_actions(retain, rng);
      const double p_m = kBaseline + 0.25 * (1 - ep.actions[poison]) - 0.25 * (1 - ep.actions[gold]);
      ep.reward = reward(p_m, kBaseline);
    }
    reinforce_update(agent, episodes, opts.lr);
  }
  const std::vector<double> retain = agent.forward(state);
  AgentSanityResult res;
  res.poison_retain = retain[poison];
  res.gold_retain = retain[gold];
  res.pass = res.poison_retain < 0.5 && res.gold_retain > 0.5;
  return res;
}

double fixed_row_leakage(const ModelConfig& cfg, std::uint64_t seed) {
  ParameterStore<double> store;
  Rng rng = Rng(seed).split(0x6571313);
  const std::size_t nf = 1 + cfg.num_parts;
  const auto attn = MultiHeadAttention<double>::create(store, "fix", cfg.dim, cfg.heads, rng);
  const std::size_t rows = nf + cfg.num_patches();
  Tensor<double> input = normal_init<double>(rows, cfg.dim, 1.0, rng);

  Tape<double> tape(true);
  Var<double> x = tape.leaf(input);
  AttentionTrace<double> trace;
  attn.fixed(tape, x, nf, &trace);
  double worst = 0;
  for (const Var<double>& oh : trace.head_outputs) {
    for (std::size_t r = 0; r < nf; ++r) {
      for (std::size_t c = 0; c < oh.cols(); ++c) {
        Tensor<double> seed_grad(oh.shape());
        seed_grad(r, c) = 1.0;
        tape.backward(oh, seed_grad);
        const Tensor<double> g = tape.grad(x);
        for (std::size_t i = nf; i < rows; ++i)
          for (std::size_t d = 0; d < cfg.dim; ++d) worst = std::max(worst, std::abs(g(i, d)));
      }
    }
  }
  return worst;
}

Report invariants(const Config& base, std::uint64_t seed, std::size_t seeds) {
  Config cfg = base;
  cfg.precision = "float64";
  cfg.model.num_identities = 2;
  Report report{"invariants", {}};

  double leak = 0;
  for (std::size_t s = 0; s < seeds; ++s) leak = std::max(leak, fixed_row_leakage(cfg.model, seed + s));
  report.checks.push_back(at_most("fixed_rows_ignore_patch_inputs", leak, 1e-12,
                                  "max |Jacobian| over " + std::to_string(seeds) + " seeds"));

  OgfrModel<double> model(cfg.model, seed, cfg.rl.bias_init);
  const StepBatch<double> batch = two_image_batch(cfg, seed);
  Rng rng = Rng(seed).split(0x696e76);

  {
    Tape<double> tape(false);
    const ModelInput<double>& in = batch.holistic.front();
    FeatureBundle<double> enc = model.encoder.encode(tape, in.patches, in.z, in.camera);
    std::vector<std::uint8_t> a(enc.patches.rows());
    for (auto& v : a) v = rng.bernoulli(0.5);
    Var<double> repl = tape.param(*model.purifier.replacements);
    Var<double> once = select_rows<double>(a, enc.patches, repl);
    Var<double> twice = select_rows<double>(a, once, repl);
    double diff = 0;
    for (std::size_t i = 0; i < once.value().numel(); ++i)
      diff = std::max(diff, std::abs(once.value()[i] - twice.value()[i]));
    report.checks.push_back(at_most("selection_idempotent", diff, 0.0, "max |select(select(P)) - select(P)|"));
  }

  {
    Tape<double> tape(true);
    Var<double> teacher = tape.leaf(normal_init<double>(3, cfg.model.dim, 1.0, rng));
    Var<double> student = tape.leaf(normal_init<double>(3, cfg.model.dim, 1.0, rng));
    Var<double> kl = kl_divergence(model.heads.logits(tape, 0, teacher), model.heads.logits(tape, 0, student));
    tape.backward(kl);
    double teacher_grad = 0;
    const Tensor<double> grad = tape.grad(teacher);
    for (double g : grad.data()) teacher_grad = std::max(teacher_grad, std::abs(g));
    report.checks.push_back(at_most("kl_teacher_side_detached", teacher_grad, 0.0, "max |dKL/dF_hp|"));
  }

  {
    Tape<double> tape(true);
    Rng actions = rng.split(1);
    StepGraph<double> g = build_step(tape, model, batch, cfg, 0.5, actions);
    const LossBreakdown<double>& L = g.losses;
    const LossWeights& w = cfg.loss;
    const double recomposed = L.mse.item() + w.mu1 * L.cos.item() + L.kd.item() + L.en.item() + w.mu2 * L.tr.item() +
                              L.mask.item();
    const double kd = w.alpha * L.kd_ce.item() + w.beta * L.kd_kl.item();
    report.checks.push_back(at_most("total_loss_decomposition",
                                    std::max(std::abs(recomposed - L.total.item()), std::abs(kd - L.kd.item())),
                                    1e-10, "|total - weighted component sum|"));

    model.store.zero_grad();
    tape.backward(L.total);
    std::set<std::size_t> used;
    for (std::size_t b = 0; b < 2; ++b) used.insert(batch.holistic[b].z.index()), used.insert(batch.augmented[b].z.index());
    const Parameter<double>& table = *model.encoder.occlusion_table;
    double outside = 0, inside = 0;
    for (std::size_t r = 0; r < table.value.rows(); ++r) {
      double& bound = used.count(r) ? inside : outside;
      for (std::size_t c = 0; c < table.value.cols(); ++c) bound = std::max(bound, std::abs(table.grad(r, c)));
    }
    report.checks.push_back(at_most("occlusion_gradient_only_on_selected_rows", outside, 0.0,
                                    std::to_string(used.size()) + " selected rows, max |grad| there " + fmt(inside)));
  }

  std::size_t violations = 0;
  std::string first;
  for (std::size_t i = 0; i < model.store.size(); ++i) {
    const Parameter<double>& p = model.store[i];
    const bool agent = p.name.rfind("agent.", 0) == 0;
    const bool decayed = !agent && (p.name.rfind("head.", 0) == 0 || p.name.ends_with(".weight"));
    if (p.weight_decay != decayed || p.sgd == agent) {
      if (violations++ == 0) first = p.name;
    }
  }
  report.checks.push_back(at_most("parameter_groups", static_cast<double>(violations), 0.0,
                                  violations ? "first offender " + first
                                             : "decay on weight matrices and heads only; agent outside SGD"));
  return report;
}

Report run_suite(const std::string& suite, const Config& cfg, std::uint64_t seed) {
  if (suite == "gradcheck") {
    GradcheckOptions o;
    o.seed = seed;
    return gradcheck(cfg, o);
  }
  if (suite == "reinforce") {
    ReinforceOptions o;
    o.seed = seed;
    Report r = reinforce(o);
    for (std::uint64_t s = 0; s < 3; ++s) {
      AgentSanityOptions a;
      a.seed = seed + s;
      a.lr = cfg.rl.lr;
      const AgentSanityResult res = agent_sanity(a);
      r.checks.push_back(Check{"poison_gold_seed" + std::to_string(seed + s), res.pass, res.poison_retain, 0.5,
                               "poison m " + fmt(res.poison_retain) + " (< 0.5), gold m " + fmt(res.gold_retain) +
                                   " (> 0.5) after " + std::to_string(a.updates) + " updates"});
    }
    return r;
  }
  if (suite == "invariants") return invariants(cfg, seed);
  throw ConfigError("unknown verify suite '" + suite + "' (expected gradcheck, reinforce or invariants)");
}

}  // namespace ogfr::verify
