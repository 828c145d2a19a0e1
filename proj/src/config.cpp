#include "ogfr/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>

#include "ogfr/error.hpp"

namespace ogfr {

std::size_t ModelConfig::grid_rows() const {
  return stride == 0 || patch_size > image_height ? 0 : (image_height + stride - patch_size) / stride;
}
std::size_t ModelConfig::grid_cols() const {
  return stride == 0 || patch_size > image_width ? 0 : (image_width + stride - patch_size) / stride;
}
std::size_t ModelConfig::num_patches() const { return grid_rows() * grid_cols(); }

void ModelConfig::validate() const {
  if (patch_size == 0 || stride == 0) throw ConfigError("patch_size and stride must be positive");
  if (patch_size > image_height || patch_size > image_width) throw ConfigError("patch_size exceeds the image");
  if (num_patches() == 0) throw ConfigError("configuration yields no patches");
  if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("dim must be a positive multiple of heads");
  if (dim < 2) throw ConfigError("dim must be at least 2");
  if (depth == 0 || ffn_hidden == 0) throw ConfigError("depth and ffn_hidden must be positive");
  if (num_parts != 8) throw ConfigError("num_parts must be 8 (fixed part order)");
  if (num_coarse != 4) throw ConfigError("num_coarse must be 4 (head, arms, torso, legs)");
  if (num_cameras < 1) throw ConfigError("num_cameras must be positive");
  if (num_identities < 2) throw ConfigError("num_identities must be at least 2");
  if (gamma1 < 0 || gamma2 < 0) throw ConfigError("gamma1/gamma2 must be non-negative");
  if (init_std <= 0 || token_init_std <= 0) throw ConfigError("init_std and token_init_std must be positive");
}

void Config::validate() const {
  if (precision != "float32" && precision != "float64") throw ConfigError("precision must be float32 or float64");
  if (data.num_ids < 2) throw ConfigError("data.num_ids must be at least 2, got " + std::to_string(data.num_ids));
  model.validate();
  if (loss.alpha < 0 || loss.beta < 0 || loss.mu1 < 0 || loss.mu2 < 0 || loss.margin < 0) {
    throw ConfigError("loss weights and margin must be non-negative");
  }
  if (loss.mse_reduction != "mean" && loss.mse_reduction != "sum") {
    throw ConfigError("loss.mse_reduction must be mean or sum");
  }
  if (occlusion.lambda < 0) throw ConfigError("lambda must be non-negative");
  if (occlusion.min_area_frac < 0 || occlusion.max_area_frac > 1 || occlusion.min_area_frac > occlusion.max_area_frac) {
    throw ConfigError("occlusion area fractions must satisfy 0 <= min <= max <= 1");
  }
  if (occlusion.student_prob < 0 || occlusion.student_prob > 1) throw ConfigError("student_prob must be in [0, 1]");
  if (data.images_per_id < 2) throw ConfigError("data.images_per_id must be at least 2");
  if (data.query_per_id < 1 || data.gallery_per_id < 1) throw ConfigError("query_per_id/gallery_per_id must be >= 1");
  if (model.num_cameras < 2) throw ConfigError("num_cameras must be at least 2 for cross-camera evaluation");
  if (optim.lr <= 0 || optim.momentum < 0 || optim.momentum >= 1 || optim.weight_decay < 0) {
    throw ConfigError("optimizer settings out of range");
  }
  if (optim.batch_size < 2 || optim.images_per_id < 1 || optim.epochs < 0 || optim.grad_clip < 0) {
    throw ConfigError("batch settings out of range");
  }
  if (rl.lr < 0 || rl.baseline_refresh_epochs < 1 || rl.reward_clamp <= 0) throw ConfigError("rl settings out of range");
  if (rl.reward_scope != "batch" && rl.reward_scope != "episode") {
    throw ConfigError("rl.reward_scope must be batch or episode");
  }
  if (optim.batch_size / optim.images_per_id < 2) {
    throw ConfigError("batch_size / images_per_id must be at least 2 identities per batch");
  }
}

nlohmann::json to_json(const Config& c) {
  const auto& m = c.model;
  return {
      {"seed", c.seed},
      {"precision", c.precision},
      {"model",
       {{"image_height", m.image_height}, {"image_width", m.image_width}, {"patch_size", m.patch_size},
        {"stride", m.stride}, {"dim", m.dim}, {"heads", m.heads}, {"depth", m.depth}, {"ffn_hidden", m.ffn_hidden},
        {"num_parts", m.num_parts}, {"num_coarse", m.num_coarse}, {"gamma1", m.gamma1}, {"gamma2", m.gamma2},
        {"num_cameras", m.num_cameras}, {"use_fep", m.use_fep},
        {"init_std", m.init_std}, {"token_init_std", m.token_init_std}}},
      {"loss",
       {{"alpha", c.loss.alpha}, {"beta", c.loss.beta}, {"mu1", c.loss.mu1}, {"mu2", c.loss.mu2},
        {"margin", c.loss.margin}, {"mse_reduction", c.loss.mse_reduction}}},
      {"occlusion",
       {{"lambda", c.occlusion.lambda}, {"min_area_frac", c.occlusion.min_area_frac},
        {"max_area_frac", c.occlusion.max_area_frac}, {"student_prob", c.occlusion.student_prob}}},
      {"data",
       {{"num_ids", c.data.num_ids}, {"images_per_id", c.data.images_per_id}, {"query_per_id", c.data.query_per_id},
        {"gallery_per_id", c.data.gallery_per_id}, {"disjoint_eval_ids", c.data.disjoint_eval_ids}}},
      {"optim",
       {{"lr", c.optim.lr}, {"momentum", c.optim.momentum}, {"weight_decay", c.optim.weight_decay},
        {"batch_size", c.optim.batch_size}, {"images_per_id", c.optim.images_per_id}, {"epochs", c.optim.epochs},
        {"grad_clip", c.optim.grad_clip}}},
      {"rl",
       {{"lr", c.rl.lr}, {"baseline_refresh_epochs", c.rl.baseline_refresh_epochs},
        {"reward_clamp", c.rl.reward_clamp}, {"bias_init", c.rl.bias_init},
        {"reward_scope", c.rl.reward_scope}}},
  };
}

namespace {

// Reads the keys of one JSON object into bound fields, rejecting anything unknown.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename U>
  Section& field(const char* key, U& target) {
    known_.emplace(key, [this, key, &target](const nlohmann::json& v) {
      try {
        if constexpr (std::is_same_v<U, bool>) {
          if (!v.is_boolean()) throw ConfigError("");
        } else if constexpr (std::is_integral_v<U>) {
          if (!v.is_number_integer()) throw ConfigError("");
          if constexpr (std::is_unsigned_v<U>) {
            if (v.get<long long>() < 0) throw ConfigError("");
          }
        } else if constexpr (std::is_floating_point_v<U>) {
          if (!v.is_number()) throw ConfigError("");
        } else {
          if (!v.is_string()) throw ConfigError("");
        }
        target = v.get<U>();
      } catch (const std::exception&) {
        throw ConfigError(path_ + "." + key + ": wrong type or out of range");
      }
    });
    return *this;
  }

  Section& object(const char* key, const std::function<void(const nlohmann::json&, const std::string&)>& parse) {
    known_.emplace(key, [this, key, parse](const nlohmann::json& v) { parse(v, path_ + "." + key); });
    return *this;
  }

  void parse() {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      auto k = known_.find(it.key());
      if (k == known_.end()) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
      k->second(it.value());
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::map<std::string, std::function<void(const nlohmann::json&)>> known_;
};

}  // namespace

Config config_from_json(const nlohmann::json& j) {
  Config c;
  auto& m = c.model;
  Section(j, "config")
      .field("seed", c.seed)
      .field("precision", c.precision)
      .object("model",
              [&m](const nlohmann::json& v, const std::string& p) {
                Section(v, p)
                    .field("image_height", m.image_height)
                    .field("image_width", m.image_width)
                    .field("patch_size", m.patch_size)
                    .field("stride", m.stride)
                    .field("dim", m.dim)
                    .field("heads", m.heads)
                    .field("depth", m.depth)
                    .field("ffn_hidden", m.ffn_hidden)
                    .field("num_parts", m.num_parts)
                    .field("num_coarse", m.num_coarse)
                    .field("gamma1", m.gamma1)
                    .field("gamma2", m.gamma2)
                    .field("num_cameras", m.num_cameras)
                    .field("use_fep", m.use_fep)
                    .field("init_std", m.init_std)
                    .field("token_init_std", m.token_init_std)
                    .parse();
              })
      .object("loss",
              [&c](const nlohmann::json& v, const std::string& p) {
                Section(v, p)
                    .field("alpha", c.loss.alpha)
                    .field("beta", c.loss.beta)
                    .field("mu1", c.loss.mu1)
                    .field("mu2", c.loss.mu2)
                    .field("margin", c.loss.margin)
                    .field("mse_reduction", c.loss.mse_reduction)
                    .parse();
              })
      .object("occlusion",
              [&c](const nlohmann::json& v, const std::string& p) {
                Section(v, p)
                    .field("lambda", c.occlusion.lambda)
                    .field("min_area_frac", c.occlusion.min_area_frac)
                    .field("max_area_frac", c.occlusion.max_area_frac)
                    .field("student_prob", c.occlusion.student_prob)
                    .parse();
              })
      .object("data",
              [&c](const nlohmann::json& v, const std::string& p) {
                Section(v, p)
                    .field("num_ids", c.data.num_ids)
                    .field("images_per_id", c.data.images_per_id)
                    .field("query_per_id", c.data.query_per_id)
                    .field("gallery_per_id", c.data.gallery_per_id)
                    .field("disjoint_eval_ids", c.data.disjoint_eval_ids)
                    .parse();
              })
      .object("optim",
              [&c](const nlohmann::json& v, const std::string& p) {
                Section(v, p)
                    .field("lr", c.optim.lr)
                    .field("momentum", c.optim.momentum)
                    .field("weight_decay", c.optim.weight_decay)
                    .field("batch_size", c.optim.batch_size)
                    .field("images_per_id", c.optim.images_per_id)
                    .field("epochs", c.optim.epochs)
                    .field("grad_clip", c.optim.grad_clip)
                    .parse();
              })
      .object("rl",
              [&c](const nlohmann::json& v, const std::string& p) {
                Section(v, p)
                    .field("lr", c.rl.lr)
                    .field("baseline_refresh_epochs", c.rl.baseline_refresh_epochs)
                    .field("reward_clamp", c.rl.reward_clamp)
                    .field("bias_init", c.rl.bias_init)
                    .field("reward_scope", c.rl.reward_scope)
                    .parse();
              })
      .parse();
  c.model.num_identities = c.data.num_ids;
  c.validate();
  return c;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string Config::hash() const { return fnv1a_hex(to_json(*this).dump()); }

std::string Config::data_hash() const {
  const nlohmann::json j = {
      {"seed", seed},
      {"image_height", model.image_height},
      {"image_width", model.image_width},
      {"num_parts", model.num_parts},
      {"num_cameras", model.num_cameras},
      {"min_area_frac", occlusion.min_area_frac},
      {"max_area_frac", occlusion.max_area_frac},
      {"data", to_json(*this).at("data")},
  };
  return fnv1a_hex(j.dump());
}

}  // namespace ogfr
