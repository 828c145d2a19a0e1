#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ogfr/config.hpp"

namespace ogfr::verify {

/// One measured property. `measured` is compared against `threshold` in the
/// direction the check documents; `detail` says which.
struct Check {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct Report {
  std::string suite;
  std::vector<Check> checks;
  bool passed() const;
  nlohmann::json to_json() const;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t random_probes = 32;  // drawn uniformly over all coordinates, on top of the targeted ones
  double step = 1e-5;
  double tolerance = 1e-4;
};

/// Central differences of the total loss on a two-image batch in double
/// precision. Stopped (detached) values are frozen at the base point, so the
/// oracle differentiates the same surrogate the tape does.
Report gradcheck(const Config& base, const GradcheckOptions& opts = {});

struct ReinforceOptions {
  std::uint64_t seed = 0;
  std::size_t episodes = 100000;
  std::size_t min_patches = 3;
  std::size_t max_patches = 8;
  double tolerance = 0.05;
  double min_magnitude = 1e-3;
};

/// Monte-Carlo policy gradient against exhaustive enumeration of all 2^N
/// action vectors under a deterministic reward.
Report reinforce(const ReinforceOptions& opts = {});

struct AgentSanityOptions {
  std::uint64_t seed = 0;
  std::size_t updates = 200;
  std::size_t episodes_per_update = 16;
  std::size_t num_patches = 12;
  double lr = 1.0;
};

struct AgentSanityResult {
  double poison_retain = 0.0;
  double gold_retain = 0.0;
  bool pass = false;
};

/// Rigged environment: erasing the poison patch raises p_m, erasing the gold
/// patch lowers it, every other patch is irrelevant.
AgentSanityResult agent_sanity(const AgentSanityOptions& opts);

/// Largest |∂(fixed-row per-head output)/∂(patch input)| over every entry of
/// the first purification layer's fixed-prefix attention, for one random input.
double fixed_row_leakage(const ModelConfig& cfg, std::uint64_t seed);

/// Structural properties: fixed-row independence, selection idempotence,
/// teacher-logit detachment, loss decomposition, parameter groups and
/// occlusion-embedding gradient sparsity.
Report invariants(const Config& base, std::uint64_t seed = 0, std::size_t seeds = 20);

/// Dispatches "gradcheck", "reinforce" or "invariants"; ConfigError otherwise.
Report run_suite(const std::string& suite, const Config& cfg, std::uint64_t seed);

}  // namespace ogfr::verify
