#pragma once

// Central finite-difference verification of reverse-mode gradients.  Meant to
// run with T = double; the relative-error floor keeps near-zero coordinates
// from drowning the report in quantization noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "memcom/rng.hpp"
#include "memcom/tensor.hpp"

namespace memcom {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
  std::string worst_param;
  int64_t worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double rel_err(double a, double n) {
  double denom = std::max({std::abs(a), std::abs(n), 1e-6});
  return std::abs(a - n) / denom;
}

// loss_fn must rebuild the forward pass from the current parameter values and
// return a scalar.  Probes coords_per_param random coordinates of each listed
// parameter (all coordinates when coords_per_param < 0).
template <typename T, typename F>
GradCheckReport gradcheck_params(F&& loss_fn,
                                 const std::vector<std::pair<std::string, Tensor<T>>>& params,
                                 T h, int64_t coords_per_param, Rng rng) {
  for (const auto& [name, p] : params)
    MEMCOM_CHECK(p.requires_grad(), "gradcheck: parameter '" + name + "' not trainable");
  for (const auto& [name, p] : params) {
    Tensor<T> t = p;
    t.zero_grad();
  }
  Tensor<T> loss = loss_fn();
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) analytic.push_back(p.grad());

  GradCheckReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, p] = params[pi];
    Tensor<T> t = p;
    int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (coords_per_param < 0 || coords_per_param >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      Rng local = rng.split(name);
      for (int64_t i = 0; i < coords_per_param; ++i)
        coords.push_back(local.uniform_int(0, n - 1));
    }
    for (int64_t c : coords) {
      T orig = t.data_mut()[static_cast<size_t>(c)];
      double up, dn;
      {
        NoGradGuard ng;
        t.data_mut()[static_cast<size_t>(c)] = orig + h;
        up = static_cast<double>(loss_fn().item());
        t.data_mut()[static_cast<size_t>(c)] = orig - h;
        dn = static_cast<double>(loss_fn().item());
        t.data_mut()[static_cast<size_t>(c)] = orig;
      }
      double numeric = (up - dn) / (2.0 * static_cast<double>(h));
      double a = static_cast<double>(analytic[pi][static_cast<size_t>(c)]);
      double e = rel_err(a, numeric);
      ++rep.coords_checked;
      if (e > rep.max_rel_err) {
        rep.max_rel_err = e;
        rep.worst_param = name;
        rep.worst_coord = c;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

// Single-tensor convenience used by the op-level unit tests.
template <typename T, typename F>
GradCheckReport gradcheck_single(F&& loss_fn, Tensor<T> x, T h, int64_t coords, Rng rng) {
  std::vector<std::pair<std::string, Tensor<T>>> params{{x.name().empty() ? "x" : x.name(), x}};
  return gradcheck_params(std::forward<F>(loss_fn), params, h, coords, rng);
}

}  // namespace memcom
