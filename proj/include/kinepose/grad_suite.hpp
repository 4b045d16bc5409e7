#pragma once

// Canonical finite-difference battery: one pass over every differentiable
// tape op, the composed joint-matching module, and a tiny end-to-end network.
// The gradcheck subcommand and the acceptance harness both run this; the unit
// tests keep their own richer per-op variants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "kmm.hpp"
#include "network.hpp"
#include "rng.hpp"

namespace kinepose {

enum class GradScope { op, kmm, pipeline };

inline const char* grad_scope_name(GradScope s) {
  switch (s) {
    case GradScope::op: return "op";
    case GradScope::kmm: return "kmm";
    default: return "pipeline";
  }
}

inline GradScope grad_scope_from_name(const std::string& name) {
  if (name == "op") return GradScope::op;
  if (name == "kmm") return GradScope::kmm;
  if (name == "pipeline") return GradScope::pipeline;
  throw std::invalid_argument("unknown gradient scope \"" + name +
                              "\" (want op, kmm, or pipeline)");
}

// Pass bar on the worst relative error. The end-to-end graph tolerates more
// because thousands of chained ops amplify the finite-difference noise.
inline double grad_scope_threshold(GradScope s) {
  return s == GradScope::pipeline ? 1e-4 : 1e-5;
}

namespace detail {

inline Tensor suite_tensor(Rng& rng, const std::vector<std::size_t>& shape, double scale = 1.0) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

// relu is not differentiable at 0, so keep its inputs clear of the kink.
inline Tensor suite_off_kink(Rng& rng, const std::vector<std::size_t>& shape) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double mag = rng.uniform(0.1, 1.0);
    t[i] = rng.coin() ? mag : -mag;
  }
  return t;
}

}  // namespace detail

// Worst relative error across one randomized check of each op.
inline double run_op_grad_checks(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gradsuite/op");
  const GradCheckOptions opt{};
  double worst = 0.0;

  // A fixed random projection keeps the scalar sensitive to every output
  // coordinate of the op under test.
  auto readout = [&](Tape& t, Var v, std::size_t cols) {
    Rng wr = Rng::stream(seed, "gradsuite/readout");
    Tensor w({cols, 1});
    for (std::size_t i = 0; i < cols; ++i) w(i, 0) = wr.normal();
    const Tensor& val = t.value(v);
    Var flat = v;
    if (val.ndim() != 2 || val.dim(1) != cols) flat = t.reshape(v, {val.size() / cols, cols});
    return t.sum(t.matmul(flat, t.input(w)));
  };
  auto check = [&](const TapeFn& fn, const std::vector<Tensor>& inputs) {
    worst = std::max(worst, grad_check(fn, inputs, opt));
  };

  {  // matmul (its gradient also backs the readout everywhere below)
    Tensor a = detail::suite_tensor(rng, {3, 4});
    Tensor b = detail::suite_tensor(rng, {4, 2});
    check([](Tape& t, const std::vector<Var>& in) { return t.sum(t.matmul(in[0], in[1])); },
          {a, b});
  }
  {  // 3x3 convolution, stride 1
    Tensor x = detail::suite_tensor(rng, {2, 6, 6});
    Tensor w = detail::suite_tensor(rng, {3, 2, 3, 3});
    check([&](Tape& t, const std::vector<Var>& in) {
      return readout(t, t.conv2d(in[0], in[1]), 3 * 6 * 6);
    }, {x, w});
  }
  {  // 3x3 convolution, stride 2
    Tensor x = detail::suite_tensor(rng, {2, 6, 6});
    Tensor w = detail::suite_tensor(rng, {3, 2, 3, 3});
    check([&](Tape& t, const std::vector<Var>& in) {
      return readout(t, t.conv2d(in[0], in[1], 2), 3 * 3 * 3);
    }, {x, w});
  }
  {  // 1x1 convolution
    Tensor x = detail::suite_tensor(rng, {2, 5, 5});
    Tensor w = detail::suite_tensor(rng, {4, 2, 1, 1});
    check([&](Tape& t, const std::vector<Var>& in) {
      return readout(t, t.conv2d(in[0], in[1]), 4 * 5 * 5);
    }, {x, w});
  }
  {  // relu
    Tensor x = detail::suite_off_kink(rng, {3, 7});
    check([&](Tape& t, const std::vector<Var>& in) { return readout(t, t.relu(in[0]), 7); }, {x});
  }
  {  // row softmax with divisor
    Tensor x = detail::suite_tensor(rng, {3, 6}, 2.0);
    check([&](Tape& t, const std::vector<Var>& in) {
      return readout(t, t.softmax_rows(in[0], std::sqrt(6.0)), 6);
    }, {x});
  }
  {  // mean squared error
    Tensor p = detail::suite_tensor(rng, {2, 8});
    Tensor q = detail::suite_tensor(rng, {2, 8});
    check([](Tape& t, const std::vector<Var>& in) { return t.mse_loss(in[0], in[1]); }, {p, q});
  }
  {  // channel concatenation
    Tensor a = detail::suite_tensor(rng, {2, 3, 4});
    Tensor b = detail::suite_tensor(rng, {3, 3, 4});
    check([&](Tape& t, const std::vector<Var>& in) {
      return readout(t, t.concat_channels(in[0], in[1]), 5 * 12);
    }, {a, b});
  }
  {  // transpose
    Tensor x = detail::suite_tensor(rng, {4, 3});
    check([&](Tape& t, const std::vector<Var>& in) { return readout(t, t.transpose(in[0]), 4); },
          {x});
  }
  {  // add and scale
    Tensor a = detail::suite_tensor(rng, {5});
    Tensor b = detail::suite_tensor(rng, {5});
    check([&](Tape& t, const std::vector<Var>& in) {
      return readout(t, t.add(t.scale(in[0], -1.7), in[1]), 5);
    }, {a, b});
  }
  return worst;
}

// Composed matching module, weights included; even seeds tie query and key.
inline double run_kmm_grad_check(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gradsuite/kmm");
  const std::size_t K = 2, D = 3, h = 3, w = 3;
  Tensor f_t = detail::suite_tensor(rng, {D, h, w});
  Tensor f_next = detail::suite_tensor(rng, {D, h, w});
  Tensor m_t = detail::suite_tensor(rng, {K, h, w});
  Tensor w_query = detail::suite_tensor(rng, {K, D, 1, 1}, 0.7);
  Tensor w_key = detail::suite_tensor(rng, {K, D, 1, 1}, 0.7);
  Tensor readout({K * h * w, 1});
  for (std::size_t i = 0; i < readout.size(); ++i) readout(i, 0) = rng.normal();

  const bool share = seed % 2 == 0;
  std::vector<Tensor> inputs = {f_t, f_next, m_t, w_query};
  if (!share) inputs.push_back(w_key);
  auto fn = [&](Tape& t, const std::vector<Var>& in) {
    KmmVars vars{in[3], share ? in[3] : in[4]};
    KmmOutput out = kmm_forward(t, in[0], in[1], in[2], vars);
    Var flat = t.reshape(out.initial_heatmaps, {1, K * h * w});
    return t.sum(t.matmul(flat, t.input(readout)));
  };
  return grad_check(fn, inputs);
}

// Whole forward pass on a tiny model: loss gradients with respect to every
// parameter tensor, spot-checking a sample of coordinates per tensor.
inline double run_pipeline_grad_check(std::uint64_t seed) {
  const std::size_t joints = 2, channels = 4, side = 12, frames_n = 2;
  ModelParams params = init_params(joints, channels, Variant::full, seed);
  Rng rng = Rng::stream(seed, "gradsuite/pipeline");
  std::vector<Tensor> frames, targets;
  for (std::size_t t = 0; t < frames_n; ++t) {
    Tensor f({3, side, side});
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = rng.uniform();
    frames.push_back(std::move(f));
    targets.push_back(detail::suite_tensor(rng, {joints, side / 4, side / 4}, 0.5));
  }
  std::vector<Tensor> inputs;
  for (auto& [name, tensor] : named_tensors(params)) inputs.push_back(*tensor);

  TapeFn fn = [&](Tape& t, const std::vector<Var>& vs) {
    ModelVars mv;
    std::size_t i = 0;
    mv.enc_conv1 = vs.at(i++);
    mv.enc_conv2 = vs.at(i++);
    mv.init_conv = vs.at(i++);
    mv.kmm.w_query = vs.at(i++);
    mv.kmm.w_key = params.kmm.share_qk ? mv.kmm.w_query : vs.at(i++);
    mv.fuse_g = vs.at(i++);
    mv.fuse_d = vs.at(i++);
    mv.dec_conv1 = vs.at(i++);
    mv.dec_conv2 = vs.at(i++);
    SequenceOutput so = forward_sequence(t, params, mv, frames);
    Var loss = t.mse_loss(so.heatmaps[0], t.input(targets[0]));
    for (std::size_t k = 1; k < so.heatmaps.size(); ++k) {
      loss = t.add(loss, t.mse_loss(so.heatmaps[k], t.input(targets[k])));
    }
    return t.scale(loss, 1.0 / static_cast<double>(so.heatmaps.size()));
  };
  GradCheckOptions opt;
  opt.max_coords = 20;
  opt.pick_seed = seed;
  return grad_check(fn, inputs, opt);
}

struct GradSuiteReport {
  GradScope scope = GradScope::op;
  double max_error = 0.0;
  double threshold = 0.0;
  std::size_t seeds = 0;
  bool pass() const { return max_error < threshold; }
};

inline GradSuiteReport run_grad_suite(GradScope scope, std::uint64_t first_seed,
                                      std::size_t seeds) {
  if (seeds == 0) throw std::invalid_argument("run_grad_suite: need at least one seed");
  GradSuiteReport report;
  report.scope = scope;
  report.threshold = grad_scope_threshold(scope);
  report.seeds = seeds;
  for (std::size_t i = 0; i < seeds; ++i) {
    const std::uint64_t seed = first_seed + i;
    double err = 0.0;
    switch (scope) {
      case GradScope::op: err = run_op_grad_checks(seed); break;
      case GradScope::kmm: err = run_kmm_grad_check(seed); break;
      case GradScope::pipeline: err = run_pipeline_grad_check(seed); break;
    }
    report.max_error = std::max(report.max_error, err);
  }
  return report;
}

}  // namespace kinepose
