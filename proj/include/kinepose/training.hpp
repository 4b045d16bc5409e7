#pragma once

// Loss, Adam, and the training loop. Supervision touches only the final
// per-frame heatmaps — the carried (pre-fuse) heatmaps are an internal
// signal. Batches run their sequences independently, then gradients are
// summed in slot order and averaged, so a run is reproducible for any
// thread count.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kinepose/autodiff.hpp"
#include "kinepose/evaluation.hpp"
#include "kinepose/network.hpp"
#include "kinepose/parallel.hpp"
#include "kinepose/rng.hpp"
#include "kinepose/synthdata.hpp"
#include "kinepose/tensor.hpp"

namespace kinepose {

// Adam with bias correction. Moment tensors are laid out parallel to
// named_tensors() order; step counts completed updates.
struct AdamState {
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline AdamState make_adam_state(const ModelParams& p, double lr) {
  AdamState s;
  s.lr = lr;
  for (auto& [name, t] : named_tensors(p)) {
    s.m.push_back(Tensor::zeros_like(*t));
    s.v.push_back(Tensor::zeros_like(*t));
  }
  return s;
}

// One update over an explicit name->tensor list (the ModelParams overload
// below is the common entry). Rejects non-finite gradients by name before
// touching anything.
inline void adam_update(const std::vector<std::pair<std::string, Tensor*>>& params,
                        const std::vector<Tensor>& grads, AdamState& s) {
  if (params.size() != grads.size() || params.size() != s.m.size()) {
    throw std::invalid_argument("adam_update: parameter/gradient/state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(*params[i].second)) {
      throw std::invalid_argument("adam_update: gradient shape mismatch for " + params[i].first);
    }
    if (!grads[i].all_finite()) {
      throw std::runtime_error("adam_update: non-finite gradient for " + params[i].first);
    }
  }
  s.step += 1;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].second;
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      double gj = g[j];
      s.m[i][j] = s.beta1 * s.m[i][j] + (1.0 - s.beta1) * gj;
      s.v[i][j] = s.beta2 * s.v[i][j] + (1.0 - s.beta2) * gj * gj;
      double mhat = s.m[i][j] / bc1;
      double vhat = s.v[i][j] / bc2;
      p[j] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
}

inline void adam_step(ModelParams& p, const std::vector<Tensor>& grads, AdamState& s) {
  adam_update(named_tensors(p), grads, s);
  // Tied projections store one trainable tensor; mirror it into the key slot.
  if (p.kmm.share_qk) p.kmm.w_key = p.kmm.w_query;
}

// Mean over frames of the per-frame MSE against ground-truth heatmaps.
inline Var sequence_loss(Tape& tape, const SequenceOutput& out,
                         const std::vector<Tensor>& gt_heatmaps) {
  if (out.heatmaps.empty() || out.heatmaps.size() != gt_heatmaps.size()) {
    throw std::invalid_argument("sequence_loss: frame counts differ");
  }
  Var loss = tape.mse_loss(out.heatmaps[0], tape.input(gt_heatmaps[0]));
  for (std::size_t t = 1; t < out.heatmaps.size(); ++t) {
    loss = tape.add(loss, tape.mse_loss(out.heatmaps[t], tape.input(gt_heatmaps[t])));
  }
  return tape.scale(loss, 1.0 / static_cast<double>(out.heatmaps.size()));
}

struct TrainConfig {
  double lr = 0.005;  // peak Adam step size, reached after one epoch of warmup
  std::size_t batch_size = 5;
  std::size_t frames = 5;  // contiguous window length sampled from each clip
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  bool flip = false;  // horizontal flip + left/right channel swap
  std::size_t checkpoint_interval = 10;  // epochs between snapshots; 0 = final only
  double heatmap_sigma = 2.0;
};

// Mirror a [C,H,W] image in x.
inline Tensor flip_frame(const Tensor& frame) {
  const std::size_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  Tensor out({C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) out(c, y, x) = frame(c, y, W - 1 - x);
    }
  }
  return out;
}

// Mirror joint coordinates in x and swap each left/right pair, so channel k
// keeps meaning "joint k" after the flip.
inline std::vector<std::array<double, 2>> flip_joints(
    const std::vector<std::array<double, 2>>& joints, std::size_t width,
    const std::vector<std::array<std::size_t, 2>>& lr_pairs) {
  std::vector<std::array<double, 2>> out = joints;
  for (auto& j : out) j[0] = static_cast<double>(width - 1) - j[0];
  for (const auto& pair : lr_pairs) std::swap(out[pair[0]], out[pair[1]]);
  return out;
}

struct TrainResult {
  ModelParams params;
  std::string metrics_csv;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<double> step_losses;   // one entry per optimizer step
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

namespace detail {

// One planned training example: which clip, which window, mirrored or not.
struct ClipPlan {
  std::size_t seq = 0;
  std::size_t start = 0;
  bool flip = false;
};

struct SlotResult {
  std::vector<Tensor> grads;
  double loss = 0.0;
};

inline SlotResult run_clip(const ModelParams& params, const PoseSequence& seq,
                           const ClipPlan& plan, const TrainConfig& cfg) {
  std::vector<Tensor> clip;
  std::vector<Tensor> gts;
  const std::size_t h = seq.height() / 4, w = seq.width() / 4;
  for (std::size_t t = plan.start; t < plan.start + cfg.frames; ++t) {
    Tensor frame = plan.flip ? flip_frame(seq.frames[t]) : seq.frames[t];
    auto joints = plan.flip ? flip_joints(seq.joints[t], seq.width(), seq.lr_pairs)
                            : seq.joints[t];
    clip.push_back(std::move(frame));
    gts.push_back(render_gt_heatmaps(joints, h, w, cfg.heatmap_sigma, 4));
  }

  Tape tape;
  ModelVars vars = register_params(tape, params);
  SequenceOutput out = forward_sequence(tape, params, vars, clip);
  Var loss = sequence_loss(tape, out, gts);
  tape.backward(loss);

  SlotResult slot;
  slot.loss = tape.value(loss)[0];
  for (Var v : param_vars(params, vars)) slot.grads.push_back(tape.grad(v));
  return slot;
}

}  // namespace detail

// Run the optimization loop. Per epoch: seeded shuffle, per-clip window and
// flip draws, batched updates, one metrics row, and periodic checkpoints.
// Writes <name>.metrics.csv, <name>.ep<E>.kim snapshots, and a final
// <name>.kim under out_dir; with 0 epochs the initial weights and a
// header-only CSV still land on disk.
inline TrainResult train(const ModelParams& initial, const std::vector<PoseSequence>& trainset,
                         const std::vector<PoseSequence>& holdout, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const std::string& name = "model", const PckConfig& eval_cfg = {}) {
  if (trainset.empty()) throw std::invalid_argument("train: empty training set");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (cfg.frames < 2) throw std::invalid_argument("train: need at least 2 frames per clip");
  if (!(cfg.heatmap_sigma > 0.0)) throw std::invalid_argument("train: sigma must be positive");
  for (const PoseSequence& seq : trainset) {
    if (seq.joint_count() != initial.joints) {
      throw std::invalid_argument("train: dataset joints do not match the model");
    }
    if (seq.frame_count() < cfg.frames) {
      throw std::invalid_argument("train: sequence shorter than the clip window");
    }
  }

  TrainResult result;
  result.params = initial;
  AdamState adam = make_adam_state(result.params, cfg.lr);
  // Ramp the step size up linearly over the first epoch (at least 16 steps).
  // Early Adam updates move every weight by nearly the full step size
  // regardless of gradient magnitude, which at this scale can push a whole
  // layer into the dead ReLU regime before any signal arrives; easing in
  // keeps the start stable.
  const std::size_t warmup_steps =
      std::max<std::size_t>(16, (trainset.size() + cfg.batch_size - 1) / cfg.batch_size);
  std::filesystem::create_directories(out_dir);

  std::string csv = "step,epoch,loss,holdout_mpck\n";
  std::size_t steps = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Deterministic order and augmentation draws, fixed before any work.
    std::vector<std::size_t> order(trainset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle = Rng::stream(cfg.seed, "train/shuffle/" + std::to_string(epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle.uniform_int(i)]);
    }
    Rng aug = Rng::stream(cfg.seed, "train/aug/" + std::to_string(epoch));
    std::vector<detail::ClipPlan> plans;
    for (std::size_t idx : order) {
      detail::ClipPlan plan;
      plan.seq = idx;
      plan.start = aug.uniform_int(trainset[idx].frame_count() - cfg.frames + 1);
      plan.flip = cfg.flip && aug.coin();
      plans.push_back(plan);
    }

    double epoch_loss_sum = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t base = 0; base < plans.size(); base += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, plans.size() - base);
      std::vector<detail::SlotResult> slots(count);
      parallel_for(count, [&](std::size_t i) {
        slots[i] = detail::run_clip(result.params, trainset[plans[base + i].seq],
                                    plans[base + i], cfg);
      });

      // Fixed-order reduction: slot 0 first, every time.
      std::vector<Tensor> grads = std::move(slots[0].grads);
      double batch_loss = slots[0].loss;
      for (std::size_t i = 1; i < count; ++i) {
        for (std::size_t j = 0; j < grads.size(); ++j) {
          for (std::size_t e = 0; e < grads[j].size(); ++e) {
            grads[j][e] += slots[i].grads[j][e];
          }
        }
        batch_loss += slots[i].loss;
      }
      const double inv = 1.0 / static_cast<double>(count);
      for (Tensor& g : grads) {
        for (std::size_t e = 0; e < g.size(); ++e) g[e] *= inv;
      }
      batch_loss *= inv;

      adam.lr = cfg.lr * std::min(1.0, static_cast<double>(steps + 1) /
                                           static_cast<double>(warmup_steps));
      adam_step(result.params, grads, adam);
      ++steps;
      result.step_losses.push_back(batch_loss);
      epoch_loss_sum += batch_loss;
      ++epoch_batches;
    }

    const double epoch_loss = epoch_loss_sum / static_cast<double>(epoch_batches);
    result.epoch_losses.push_back(epoch_loss);
    const double mpck =
        holdout.empty() ? 0.0 : evaluate_model(result.params, holdout, eval_cfg).mpck;
    csv += std::to_string(steps) + "," + std::to_string(epoch) + "," +
           detail::g17(epoch_loss) + "," + detail::g17(mpck) + "\n";

    if (cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0 &&
        epoch != cfg.epochs) {
      std::filesystem::path snap = out_dir / (name + ".ep" + std::to_string(epoch) + ".kim");
      save_checkpoint(result.params, snap);
      result.checkpoints.push_back(snap);
    }
  }

  std::filesystem::path final_path = out_dir / (name + ".kim");
  save_checkpoint(result.params, final_path);
  result.checkpoints.push_back(final_path);
  result.metrics_csv = csv;
  detail::write_file_atomic(out_dir / (name + ".metrics.csv"), csv);
  return result;
}

// Train one architecture variant from scratch and score it on the holdout.
inline MetricsReport ablation_run(Variant variant, const std::vector<PoseSequence>& trainset,
                                  const std::vector<PoseSequence>& holdout,
                                  const TrainConfig& cfg, std::size_t channels,
                                  const PckConfig& eval_cfg,
                                  const std::filesystem::path& out_dir) {
  if (trainset.empty()) throw std::invalid_argument("ablation_run: empty training set");
  if (holdout.empty()) throw std::invalid_argument("ablation_run: empty holdout");
  ModelParams p0 =
      init_params(trainset[0].joint_count(), channels, variant, cfg.seed);
  TrainResult run = train(p0, trainset, holdout, cfg, out_dir,
                          std::string("ablation_") + variant_name(variant), eval_cfg);
  return evaluate_model(run.params, holdout, eval_cfg);
}

}  // namespace kinepose
