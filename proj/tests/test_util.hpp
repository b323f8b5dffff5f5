#pragma once

// Shared test oracles. The finite-difference checker and the window/index
// oracles here stay independent of the library's backward implementations.

#include <cmath>
#include <functional>
#include <vector>

#include "kn/autograd.hpp"
#include "kn/rng.hpp"
#include "kn/tensor.hpp"

namespace kntest {

template <typename T>
kn::Tensor4<T> random_tensor(int n, int c, int h, int w, kn::Rng& rng,
                             double scale = 1.0) {
  kn::Tensor4<T> t(n, c, h, w);
  for (auto& v : t.data) v = static_cast<T>(rng.next_normal() * scale);
  return t;
}

struct GradCheckResult {
  double max_rel_err = 0;
  std::size_t worst_index = 0;
  double analytic = 0, numeric = 0;
};

// Central finite differences of a scalar-valued function against an
// analytic gradient. rel err per element: |a - n| / max(1, |a|, |n|).
inline GradCheckResult compare_gradients(const std::vector<double>& analytic,
                                         const std::vector<double>& numeric) {
  GradCheckResult r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom =
        std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric[i])});
    const double rel = std::fabs(analytic[i] - numeric[i]) / denom;
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = i;
      r.analytic = analytic[i];
      r.numeric = numeric[i];
    }
  }
  return r;
}

// Checks d(scalar_fn)/d(probe tensor) by central differences with step h.
// scalar_fn must be a pure function of probe->value (graph rebuilt inside).
template <typename T>
GradCheckResult finite_diff_check(
    kn::Tensor4<T>& storage, const std::function<double()>& scalar_fn,
    const std::vector<double>& analytic, double step = 1e-5) {
  std::vector<double> numeric(storage.size());
  for (std::size_t i = 0; i < storage.size(); ++i) {
    const T keep = storage.data[i];
    storage.data[i] = keep + static_cast<T>(step);
    const double fp = scalar_fn();
    storage.data[i] = keep - static_cast<T>(step);
    const double fm = scalar_fn();
    storage.data[i] = keep;
    numeric[i] = (fp - fm) / (2.0 * step);
  }
  return compare_gradients(analytic, numeric);
}

template <typename T>
std::vector<double> grad_as_doubles(const kn::Value<T>& v) {
  std::vector<double> out(v->value.size(), 0.0);
  if (v->grad.size())
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<double>(v->grad.data[i]);
  return out;
}

}  // namespace kntest
