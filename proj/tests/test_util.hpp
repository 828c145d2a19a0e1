#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ogfr/grad_check.hpp"
#include "ogfr/layers.hpp"
#include "ogfr/rng.hpp"
#include "ogfr/tensor.hpp"

namespace ogfr::testing {

inline Tensor<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Tensor<double> t = Tensor<double>::matrix(rows, cols);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline Parameter<double> make_param(std::string name, Tensor<double> value) {
  Parameter<double> p;
  p.name = std::move(name);
  p.value = std::move(value);
  return p;
}

/// Every coordinate of every listed parameter against central differences.
inline double max_grad_error(const std::function<Var<double>(Tape<double>&)>& f,
                             const std::vector<Parameter<double>*>& params, double step = 1e-5) {
  GradCheckOptions opts;
  opts.step = step;
  return grad_check<double>(f, params, opts).max_rel_error;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace ogfr::testing

namespace ogfr::testing {

/// `per_param` random coordinates of every parameter in `store` whose name starts with `prefix`.
/// Attention key biases are skipped: they shift a whole softmax row, so their
/// gradient is identically zero and the relative error would measure rounding only.
inline std::vector<GradProbe<double>> sample_probes(ParameterStore<double>& store, const std::string& prefix,
                                                    std::size_t per_param, Rng& rng) {
  std::vector<GradProbe<double>> probes;
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter<double>& p = store[i];
    if (p.name.rfind(prefix, 0) != 0 || p.name.ends_with(".k.bias")) continue;
    for (std::size_t k = 0; k < per_param; ++k) probes.push_back({&p, rng.below(p.value.numel())});
  }
  return probes;
}

}  // namespace ogfr::testing
