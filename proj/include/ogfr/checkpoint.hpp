#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ogfr/tensor.hpp"

namespace ogfr {

/// Layout: "OGFRCKP1", u32 version, u64 tensor count; per tensor u32 name
/// length, UTF-8 name, u8 dtype (0 f32, 1 f64), u8 rank, u64 dims, row-major
/// payload; then the trailer fields in declaration order.
struct CheckpointTensor {
  std::string name;
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<double> values;  // exact for both dtypes
};

struct CheckpointTrailer {
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  double baseline = 0.0;  // p_b
  std::uint64_t rng_key = 0;
  std::uint64_t rng_counter = 0;
  std::string config_hash;
  std::string config_json;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<CheckpointTensor> tensors;
  CheckpointTrailer trailer;

  const CheckpointTensor* find(const std::string& name) const;

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t);
  /// Copies a stored tensor into `dst`; missing names and shape mismatches raise CheckpointError.
  template <typename T>
  void load(const std::string& name, Tensor<T>& dst) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint");

/// Writes via a temporary file and rename.
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace ogfr
