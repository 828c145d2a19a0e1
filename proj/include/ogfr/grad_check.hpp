#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ogfr/autograd.hpp"

namespace ogfr {

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor: |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
};

/// One perturbed coordinate: parameter and flat index.
template <typename T>
struct GradProbe {
  Parameter<T>* param;
  std::size_t index;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "name[index]" of the worst coordinate
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares tape gradients of a scalar computation against central differences
/// at the given coordinates. `f` must be deterministic and build the whole
/// computation on the tape it is handed.
template <typename T>
GradCheckResult grad_check(const std::function<Var<T>(Tape<T>&)>& f, const std::vector<GradProbe<T>>& probes,
                           GradCheckOptions opts = {}) {
  std::vector<Parameter<T>*> touched;
  for (const auto& p : probes) {
    if (std::find(touched.begin(), touched.end(), p.param) == touched.end()) touched.push_back(p.param);
  }
  for (Parameter<T>* p : touched) p->zero_grad();
  {
    Tape<T> tape;
    Var<T> out = f(tape);
    if (out.value().numel() != 1) {
      throw ContractError("grad_check: computation output has shape " + shape_str(out.shape()) + ", expected a scalar");
    }
    tape.backward(out);
  }
  auto eval = [&f]() {
    Tape<T> tape(false);
    return static_cast<double>(f(tape).item());
  };

  GradCheckResult result;
  for (const auto& probe : probes) {
    T& x = probe.param->value[probe.index];
    const T saved = x;
    x = static_cast<T>(static_cast<double>(saved) + opts.step);
    const double up = eval();
    x = static_cast<T>(static_cast<double>(saved) - opts.step);
    const double down = eval();
    x = saved;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double analytic = static_cast<double>(probe.param->grad[probe.index]);
    const double err = relative_error(analytic, numeric, opts.floor);
    ++result.checked;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = probe.param->name + "[" + std::to_string(probe.index) + "]";
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

/// Checks every coordinate of every listed parameter.
template <typename T>
GradCheckResult grad_check(const std::function<Var<T>(Tape<T>&)>& f, const std::vector<Parameter<T>*>& params,
                           GradCheckOptions opts = {}) {
  std::vector<GradProbe<T>> probes;
  for (Parameter<T>* p : params)
    for (std::size_t i = 0; i < p->value.numel(); ++i) probes.push_back({p, i});
  return grad_check<T>(f, probes, opts);
}

}  // namespace ogfr
