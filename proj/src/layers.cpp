#include "ogfr/layers.hpp"

#include <cmath>

#include "ogfr/ops.hpp"

namespace ogfr {

template <typename T>
Parameter<T>& ParameterStore<T>::add(std::string name, Tensor<T> init, bool weight_decay, bool sgd) {
  if (find(name) != nullptr) throw ContractError("duplicate parameter name " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = std::move(name);
  p->value = std::move(init);
  p->weight_decay = weight_decay;
  p->sgd = sgd;
  p->zero_grad();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>* ParameterStore<T>::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

template <typename T>
const Parameter<T>* ParameterStore<T>::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

template <typename T>
Parameter<T>& ParameterStore<T>::at(const std::string& name) {
  Parameter<T>* p = find(name);
  if (p == nullptr) throw ContractError("no parameter named " + name);
  return *p;
}

template <typename T>
std::size_t ParameterStore<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
Tensor<T> normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor<T> t = Tensor<T>::matrix(rows, cols);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(stddev * rng.normal());
  return t;
}

template <typename T>
Linear<T> Linear<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                            Rng& rng) {
  // Xavier-normal weights, zero bias.
  const double std = std::sqrt(2.0 / static_cast<double>(in + out));
  Linear l;
  l.weight = &store.add(name + ".weight", normal_init<T>(in, out, std, rng), true);
  l.bias = &store.add(name + ".bias", Tensor<T>::matrix(1, out), false);
  return l;
}

template <typename T>
Var<T> Linear<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return add_row(matmul(x, tape.param(*weight)), tape.param(*bias));
}

template <typename T>
LayerNorm<T> LayerNorm<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t dim) {
  LayerNorm n;
  n.gain = &store.add(name + ".gain", Tensor<T>::matrix(1, dim, T(1)), false);
  n.bias = &store.add(name + ".bias", Tensor<T>::matrix(1, dim), false);
  return n;
}

template <typename T>
Var<T> LayerNorm<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return layer_norm_rows(x, tape.param(*gain), tape.param(*bias));
}

template <typename T>
FeedForward<T> FeedForward<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                                      std::size_t hidden, Rng& rng) {
  FeedForward f;
  f.fc1 = Linear<T>::create(store, name + ".fc1", dim, hidden, rng);
  f.fc2 = Linear<T>::create(store, name + ".fc2", hidden, dim, rng);
  return f;
}

template <typename T>
Var<T> FeedForward<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return fc2(tape, gelu(fc1(tape, x)));
}

template <typename T>
MultiHeadAttention<T> MultiHeadAttention<T>::create(ParameterStore<T>& store, const std::string& name,
                                                    std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("attention dim must be divisible by heads");
  MultiHeadAttention a;
  a.query = Linear<T>::create(store, name + ".q", dim, dim, rng);
  a.key = Linear<T>::create(store, name + ".k", dim, dim, rng);
  a.value = Linear<T>::create(store, name + ".v", dim, dim, rng);
  a.out = Linear<T>::create(store, name + ".o", dim, dim, rng);
  a.heads = heads;
  return a;
}

template <typename T>
Var<T> MultiHeadAttention<T>::operator()(Tape<T>& tape, Var<T> x, AttentionTrace<T>* trace) const {
  const std::size_t dh = x.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var<T> q = query(tape, x), k = key(tape, x), v = value(tape, x);
  std::vector<Var<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(q, h * dh, dh), kh = slice_cols(k, h * dh, dh), vh = slice_cols(v, h * dh, dh);
    Var<T> w = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    Var<T> oh = matmul(w, vh);
    if (trace) {
      trace->weights.push_back(w);
      trace->head_outputs.push_back(oh);
    }
    outs.push_back(oh);
  }
  return out(tape, heads == 1 ? outs.front() : concat_cols(outs));
}

template <typename T>
Var<T> MultiHeadAttention<T>::fixed(Tape<T>& tape, Var<T> x, std::size_t num_fixed, AttentionTrace<T>* trace) const {
  if (num_fixed >= x.rows()) throw DimensionError("fixed attention needs at least one non-fixed row");
  const std::size_t dh = x.cols() / heads;
  const std::size_t n_free = x.rows() - num_fixed;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // Queries come from the free (patch) rows only; keys and values from every row.
  Var<T> q = query(tape, slice_rows(x, num_fixed, n_free));
  Var<T> k = key(tape, x), v = value(tape, x);
  std::vector<Var<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(q, h * dh, dh), kh = slice_cols(k, h * dh, dh), vh = slice_cols(v, h * dh, dh);
    Var<T> w = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    Var<T> updated = matmul(w, vh);
    Var<T> kept = slice_rows(vh, 0, num_fixed);
    Var<T> oh = concat_rows<T>({kept, updated});
    if (trace) {
      trace->weights.push_back(w);
      trace->head_outputs.push_back(oh);
    }
    outs.push_back(oh);
  }
  return out(tape, heads == 1 ? outs.front() : concat_cols(outs));
}

template <typename T>
EncoderBlock<T> EncoderBlock<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                                        std::size_t heads, std::size_t hidden, Rng& rng) {
  EncoderBlock b;
  b.norm1 = LayerNorm<T>::create(store, name + ".norm1", dim);
  b.attn = MultiHeadAttention<T>::create(store, name + ".attn", dim, heads, rng);
  b.norm2 = LayerNorm<T>::create(store, name + ".norm2", dim);
  b.ffn = FeedForward<T>::create(store, name + ".ffn", dim, hidden, rng);
  return b;
}

template <typename T>
Var<T> EncoderBlock<T>::operator()(Tape<T>& tape, Var<T> x) const {
  Var<T> h = add(x, attn(tape, norm1(tape, x)));
  return add(h, ffn(tape, norm2(tape, h)));
}

template <typename T>
DecoderLayer<T> DecoderLayer<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                                        std::size_t heads, std::size_t hidden, std::size_t num_fixed, Rng& rng) {
  DecoderLayer d;
  d.attn = MultiHeadAttention<T>::create(store, name + ".attn", dim, heads, rng);
  d.norm = LayerNorm<T>::create(store, name + ".norm", dim);
  d.ffn = FeedForward<T>::create(store, name + ".ffn", dim, hidden, rng);
  d.num_fixed = num_fixed;
  return d;
}

template <typename T>
Var<T> DecoderLayer<T>::operator()(Tape<T>& tape, Var<T> x, AttentionTrace<T>* trace) const {
  Var<T> a = num_fixed > 0 ? attn.fixed(tape, x, num_fixed, trace) : attn(tape, x, trace);
  Var<T> h = norm(tape, add(x, a));
  return add(h, ffn(tape, h));
}

#define OGFR_INSTANTIATE(T)                                                           \
  template class ParameterStore<T>;                                                   \
  template Tensor<T> normal_init<T>(std::size_t, std::size_t, double, Rng&);          \
  template struct Linear<T>;                                                          \
  template struct LayerNorm<T>;                                                       \
  template struct FeedForward<T>;                                                     \
  template struct MultiHeadAttention<T>;                                              \
  template struct EncoderBlock<T>;                                                    \
  template struct DecoderLayer<T>;

OGFR_INSTANTIATE(float)
OGFR_INSTANTIATE(double)

}  // namespace ogfr
