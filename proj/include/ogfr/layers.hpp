#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ogfr/autograd.hpp"
#include "ogfr/rng.hpp"

namespace ogfr {

/// Owns every parameter of a model in creation order. Layers keep raw
/// pointers into it; the pointees never move.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter<T>& add(std::string name, Tensor<T> init, bool weight_decay, bool sgd = true);
  Parameter<T>* find(const std::string& name);
  const Parameter<T>* find(const std::string& name) const;
  Parameter<T>& at(const std::string& name);

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }
  std::size_t total_elements() const;

  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

template <typename T>
Tensor<T> normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;  // in × out
  Parameter<T>* bias = nullptr;    // 1 × out

  static Linear create(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  static LayerNorm create(ParameterStore<T>& store, const std::string& name, std::size_t dim);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
};

template <typename T>
struct FeedForward {
  Linear<T> fc1;
  Linear<T> fc2;

  static FeedForward create(ParameterStore<T>& store, const std::string& name, std::size_t dim, std::size_t hidden,
                            Rng& rng);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
};

/// Per-head intermediate values, captured on request for tests and diagnostics.
template <typename T>
struct AttentionTrace {
  std::vector<Var<T>> weights;       // softmax attention matrices, one per head
  std::vector<Var<T>> head_outputs;  // rows × head_dim, before head concat and projection
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> query, key, value, out;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                                   std::size_t heads, Rng& rng);

  /// Conventional self-attention over all rows of x.
  Var<T> operator()(Tape<T>& tape, Var<T> x, AttentionTrace<T>* trace = nullptr) const;

  /// Fixed-prefix attention: the first `num_fixed` rows output their own value
  /// projections, only the remaining rows issue queries (against all keys).
  Var<T> fixed(Tape<T>& tape, Var<T> x, std::size_t num_fixed, AttentionTrace<T>* trace = nullptr) const;
};

/// Pre-norm residual block: x + MHSA(LN(x)), then + FFN(LN(.)).
template <typename T>
struct EncoderBlock {
  LayerNorm<T> norm1;
  MultiHeadAttention<T> attn;
  LayerNorm<T> norm2;
  FeedForward<T> ffn;

  static EncoderBlock create(ParameterStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                             std::size_t hidden, Rng& rng);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
};

/// FFN(LN(MHSA(x))). With num_fixed > 0 the attention is the fixed-prefix variant.
template <typename T>
struct DecoderLayer {
  MultiHeadAttention<T> attn;
  LayerNorm<T> norm;
  FeedForward<T> ffn;
  std::size_t num_fixed = 0;

  static DecoderLayer create(ParameterStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                             std::size_t hidden, std::size_t num_fixed, Rng& rng);
  Var<T> operator()(Tape<T>& tape, Var<T> x, AttentionTrace<T>* trace = nullptr) const;
};

}  // namespace ogfr
