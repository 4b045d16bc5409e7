#pragma once

// Central-difference gradient verification for scalar-valued tape programs.
//
// The function under test rebuilds its graph on a fresh tape from the given
// leaf tensors, so each perturbed evaluation is independent. Error metric per
// coordinate: |analytic - numeric| / max(1, |analytic|, |numeric|).

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"

namespace kinepose {

// Builds a scalar output from leaves already registered on the tape.
using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckOptions {
  double step = 1e-6;          // central-difference step
  std::size_t max_coords = 0;  // per input; 0 checks every coordinate
  std::uint64_t pick_seed = 1; // coordinate subsampling
};

// Returns the worst relative error across all checked coordinates.
inline double grad_check(const TapeFn& fn, const std::vector<Tensor>& inputs,
                         const GradCheckOptions& opt = {}) {
  if (opt.step < 1e-7 || opt.step > 1e-4) {
    throw std::invalid_argument("grad_check: step must lie in [1e-7, 1e-4]");
  }

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(xs.size());
    for (const Tensor& x : xs) leaves.push_back(tape.input(x));
    Var out = fn(tape, leaves);
    if (tape.value(out).size() != 1) {
      throw std::invalid_argument("grad_check: function must produce a scalar");
    }
    return tape.value(out)[0];
  };

  // Analytic gradients from one backward pass.
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& x : inputs) leaves.push_back(tape.input(x));
    Var out = fn(tape, leaves);
    if (tape.value(out).size() != 1) {
      throw std::invalid_argument("grad_check: function must produce a scalar");
    }
    tape.backward(out);
    for (Var v : leaves) analytic.push_back(tape.grad(v));
  }

  Rng pick(opt.pick_seed);
  double worst = 0.0;
  std::vector<Tensor> work = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const std::size_t n = inputs[t].size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (opt.max_coords > 0 && opt.max_coords < n) {
      // Partial Fisher-Yates: the first max_coords entries become the sample.
      for (std::size_t i = 0; i < opt.max_coords; ++i) {
        std::size_t j = i + static_cast<std::size_t>(pick.uniform_int(n - i));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(opt.max_coords);
    }
    for (std::size_t c : coords) {
      const double saved = work[t][c];
      work[t][c] = saved + opt.step;
      const double fp = eval(work);
      work[t][c] = saved - opt.step;
      const double fm = eval(work);
      work[t][c] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[t][c];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace kinepose
