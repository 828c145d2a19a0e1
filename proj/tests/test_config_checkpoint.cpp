#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ogfr/checkpoint.hpp"
#include "ogfr/config.hpp"
#include "ogfr/error.hpp"

using namespace ogfr;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.add("a", Tensor<float>::matrix(2, 3, {1.5f, -0.0f, 3e-38f, 7.0f, -2.25f, 1e20f}));
  c.add("b", Tensor<double>::matrix(1, 2, {M_PI, -1e-300}));
  c.trailer.epoch = 3;
  c.trailer.step = 42;
  c.trailer.baseline = 0.123456789;
  c.trailer.rng_key = 0xdeadbeefcafef00dULL;
  c.trailer.rng_counter = 17;
  c.trailer.config_hash = "abc";
  c.trailer.config_json = "{}";
  return c;
}

}  // namespace

TEST_CASE("config survives a JSON round trip with the same hash") {
  Config c;
  c.seed = 99;
  c.model.gamma1 = 1.5;
  c.loss.margin = 0.25;
  c.rl.reward_scope = "episode";
  const Config back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.hash() == c.hash());
  CHECK(back.data_hash() == c.data_hash());
}

TEST_CASE("hashes react to the right fields") {
  const Config base;
  Config lr = base;
  lr.optim.lr = 0.01;
  CHECK(lr.hash() != base.hash());
  CHECK(lr.data_hash() == base.data_hash());
  Config ids = base;
  ids.data.num_ids = 12;
  CHECK(ids.data_hash() != base.data_hash());
}

TEST_CASE("strict parsing") {
  CHECK_THROWS_AS(config_from_json({{"sed", 1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"model", {{"dimm", 8}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"model", {{"dim", "wide"}}}}), ConfigError);
  const Config partial = config_from_json({{"optim", {{"epochs", 3}}}});
  CHECK(partial.optim.epochs == 3);
  CHECK(partial.optim.lr == Config{}.optim.lr);
}

TEST_CASE("validation rejects out-of-range settings") {
  auto invalid = [](auto mutate) {
    Config c;
    mutate(c);
    return [c] { c.validate(); };
  };
  CHECK_NOTHROW(Config{}.validate());
  CHECK_THROWS_AS(invalid([](Config& c) { c.data.num_ids = 0; })(), ConfigError);
  CHECK_THROWS_AS(invalid([](Config& c) { c.model.dim = 30; })(), ConfigError);
  CHECK_THROWS_AS(invalid([](Config& c) { c.model.patch_size = 100; })(), ConfigError);
  CHECK_THROWS_AS(invalid([](Config& c) { c.precision = "float16"; })(), ConfigError);
  CHECK_THROWS_AS(invalid([](Config& c) { c.loss.alpha = -1; })(), ConfigError);
  CHECK_THROWS_AS(invalid([](Config& c) { c.occlusion.max_area_frac = 1.5; })(), ConfigError);
  CHECK_THROWS_AS(invalid([](Config& c) { c.optim.momentum = 1.0; })(), ConfigError);
  CHECK_THROWS_AS(invalid([](Config& c) { c.optim.images_per_id = 16; })(), ConfigError);
}

TEST_CASE("load_config: missing file and malformed JSON") {
  CHECK_THROWS_AS(load_config("/nonexistent/ogfr.json"), IoError);
  const fs::path p = fs::temp_directory_path() / "ogfr_test_bad_config.json";
  std::ofstream(p) << "{ \"seed\": ";
  CHECK_THROWS_AS(load_config(p.string()), ConfigError);
  fs::remove(p);
}

TEST_CASE("checkpoint encoding is lossless and deterministic") {
  const Checkpoint c = sample_checkpoint();
  const auto bytes = encode_checkpoint(c);
  CHECK(encode_checkpoint(c) == bytes);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.trailer.rng_key == c.trailer.rng_key);
  CHECK(back.trailer.baseline == c.trailer.baseline);

  Tensor<float> a = Tensor<float>::matrix(2, 3);
  back.load("a", a);
  CHECK(a[5] == 1e20f);
  CHECK(std::signbit(a[1]));
  Tensor<double> b = Tensor<double>::matrix(1, 2);
  back.load("b", b);
  CHECK(b[0] == M_PI);
}

TEST_CASE("checkpoint load contract") {
  const Checkpoint c = sample_checkpoint();
  Tensor<float> wrong = Tensor<float>::matrix(3, 2);
  CHECK_THROWS_AS(c.load("a", wrong), CheckpointError);
  CHECK_THROWS_AS(c.load("missing", wrong), CheckpointError);
}

TEST_CASE("corrupt checkpoints raise FormatError") {
  const auto bytes = encode_checkpoint(sample_checkpoint());

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[8] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), FormatError);

  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    CAPTURE(cut);
    CHECK_THROWS_AS(decode_checkpoint({bytes.begin(), bytes.begin() + static_cast<long>(cut)}), FormatError);
  }

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(trailing), FormatError);
}

TEST_CASE("checkpoint files") {
  const fs::path p = fs::temp_directory_path() / "ogfr_test_ckpt.bin";
  write_checkpoint(p.string(), sample_checkpoint());
  CHECK(encode_checkpoint(read_checkpoint(p.string())) == encode_checkpoint(sample_checkpoint()));
  fs::remove(p);
  CHECK_THROWS_AS(read_checkpoint(p.string()), IoError);
}
