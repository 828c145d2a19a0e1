// Command-line entry point: gen-data, train, eval, verify.
//
// Exit codes: 0 success, 2 validation, 3 numeric failure, 4 IO / format / checkpoint.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "ogfr/checkpoint.hpp"
#include "ogfr/config.hpp"
#include "ogfr/trainer.hpp"
#include "ogfr/verify.hpp"

namespace fs = std::filesystem;
using namespace ogfr;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

Config resolve_config(const std::string& path, std::optional<std::uint64_t> seed) {
  Config cfg = path.empty() ? Config{} : load_config(path);
  if (seed) cfg.seed = *seed;
  cfg.model.num_identities = static_cast<std::size_t>(cfg.data.num_ids);
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

synth::Dataset load_checked_archive(const std::string& dir, const Config& cfg, bool force) {
  if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir);
  synth::ArchiveStamp stamp;
  synth::Dataset ds = synth::read_archive(dir, &stamp);
  if (stamp.data_hash != cfg.data_hash() && !force) {
    throw ConfigError("dataset at " + dir + " was generated for data hash " + stamp.data_hash +
                      ", the config expects " + cfg.data_hash() + " (use --force to override)");
  }
  return ds;
}

int cmd_gen_data(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out) {
  const Config cfg = resolve_config(config_path, seed);
  const synth::Dataset ds = synth::build_splits(cfg.data.num_ids, cfg.data.images_per_id, split_options(cfg));
  synth::write_archive(ds, out, synth::ArchiveStamp{cfg.hash(), cfg.data_hash()});
  std::cout << nlohmann::json{{"out", out},
                              {"samples", ds.samples.size()},
                              {"train", ds.train.size()},
                              {"query", ds.query.size()},
                              {"gallery", ds.gallery.size()},
                              {"config_hash", cfg.hash()},
                              {"data_hash", cfg.data_hash()}}
                   .dump()
            << "\n";
  return 0;
}

template <typename T>
TrainSummary train_as(const Config& cfg, const synth::Dataset& ds, const TrainOptions& opts) {
  return run_training<T>(cfg, ds, opts);
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& data,
              const std::string& out, const std::string& resume, bool force, std::int64_t max_steps) {
  const Config cfg = resolve_config(config_path, seed);
  const synth::Dataset ds = load_checked_archive(data, cfg, force);
  TrainOptions opts;
  opts.out_dir = out;
  opts.resume = resume;
  opts.max_steps = max_steps;
  const TrainSummary s = cfg.precision == "float64" ? train_as<double>(cfg, ds, opts) : train_as<float>(cfg, ds, opts);
  std::cout << nlohmann::json{{"steps", s.steps},
                              {"first_loss", s.first_loss},
                              {"last_loss", s.last_loss},
                              {"train_rank1", s.train_rank1},
                              {"checkpoint", (fs::path(out) / "checkpoint.bin").string()},
                              {"config_hash", cfg.hash()}}
                   .dump()
            << "\n";
  return 0;
}

template <typename T>
EvalResult eval_as(const Config& cfg, const Checkpoint& ckpt, const synth::Dataset& ds) {
  OgfrModel<T> model(cfg.model, cfg.seed, cfg.rl.bias_init);
  load_parameters(model, ckpt);
  return evaluate_model(model, ds, cfg.occlusion.lambda);
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& config_path,
             const std::string& out, bool force) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  Config cfg;
  try {
    cfg = config_from_json(nlohmann::json::parse(ckpt.trailer.config_json));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(checkpoint + ": embedded config is not valid JSON: " + e.what());
  }
  if (!config_path.empty()) {
    const Config given = resolve_config(config_path, std::nullopt);
    if (given.hash() != ckpt.trailer.config_hash && !force) {
      throw ConfigError("config " + config_path + " (hash " + given.hash() + ") does not match the checkpoint (hash " +
                        ckpt.trailer.config_hash + "); use --force to override");
    }
    if (force) cfg = given;
  }
  const synth::Dataset ds = load_checked_archive(data, cfg, force);
  const EvalResult r =
      cfg.precision == "float64" ? eval_as<double>(cfg, ckpt, ds) : eval_as<float>(cfg, ckpt, ds);
  const nlohmann::json j = to_json(r, ckpt.trailer.config_hash);
  std::cout << j.dump() << "\n";
  if (!out.empty()) write_json(out, j);
  return 0;
}

int cmd_verify(const std::string& suite, const std::string& config_path, std::optional<std::uint64_t> seed,
               const std::string& out) {
  const Config cfg = resolve_config(config_path, std::nullopt);
  const verify::Report report = verify::run_suite(suite, cfg, seed.value_or(0));
  for (const verify::Check& c : report.checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << "  measured=" << c.measured << " threshold=" << c.threshold
              << "  " << c.detail << "\n";
  }
  if (!out.empty()) write_json(out, report.to_json());
  return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Occlusion-aware re-identification: data generation, training, evaluation and verification"};
  app.require_subcommand(1);

  std::string config_path, data, out, resume, checkpoint, suite = "invariants";
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::int64_t max_steps = -1;

  auto add_seed = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { seed = s; },
                                            "Override the config seed");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset archive");
  gen->add_option("--config", config_path, "JSON config (defaults when omitted)");
  add_seed(gen);
  gen->add_option("--out", out, "Archive directory")->required();

  CLI::App* train = app.add_subcommand("train", "Train on an archive");
  train->add_option("--config", config_path, "JSON config (defaults when omitted)");
  add_seed(train);
  train->add_option("--data", data, "Archive directory")->required();
  train->add_option("--out", out, "Run directory for checkpoint.bin and metrics.jsonl")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
  train->add_flag("--force", force, "Accept an archive generated for a different config");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the query/gallery split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint.bin")->required();
  eval->add_option("--data", data, "Archive directory")->required();
  eval->add_option("--config", config_path, "Config expected to match the checkpoint");
  eval->add_option("--out", out, "Results JSON path");
  eval->add_flag("--force", force, "Accept mismatched config, checkpoint and archive");

  CLI::App* ver = app.add_subcommand("verify", "Run a property suite at 64-bit precision");
  ver->add_option("--suite", suite, "gradcheck, reinforce or invariants")
      ->check(CLI::IsMember({"gradcheck", "reinforce", "invariants"}));
  ver->add_option("--config", config_path, "JSON config (defaults when omitted)");
  add_seed(ver);
  ver->add_option("--out", out, "Report JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_data(config_path, seed, out);
    if (*train) return cmd_train(config_path, seed, data, out, resume, force, max_steps);
    if (*eval) return cmd_eval(checkpoint, data, config_path, out, force);
    if (*ver) return cmd_verify(suite, config_path, seed, out);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  }
  return 0;
}
