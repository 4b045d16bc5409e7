#pragma once

// Keypoint metrics and the occlusion experiment. Predictions are decoded
// from heatmaps by argmax, then scored with PCK: a joint counts as correct
// when its distance to ground truth, normalized by a per-frame length
// (person box side or torso segment), stays within alpha. mPCK pools every
// evaluated joint instance, so joints seen more often weigh more.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinepose/network.hpp"
#include "kinepose/parallel.hpp"
#include "kinepose/synthdata.hpp"
#include "kinepose/tensor.hpp"

namespace kinepose {

enum class NormMode : std::uint8_t { person, torso };

inline const char* norm_mode_name(NormMode m) {
  return m == NormMode::person ? "person" : "torso";
}

inline NormMode norm_mode_from_name(const std::string& name) {
  if (name == "person") return NormMode::person;
  if (name == "torso") return NormMode::torso;
  throw std::invalid_argument("unknown norm mode: " + name);
}

struct PckConfig {
  double alpha = 0.2;
  NormMode norm_mode = NormMode::person;
};

// Final scores plus the raw instance counts behind them. skipped_frames
// counts frames dropped for a degenerate (zero-length) normalizer.
struct MetricsReport {
  std::vector<double> per_joint_pck;
  double mpck = 0.0;
  std::vector<std::size_t> counts;
  std::size_t skipped_frames = 0;
};

// Per-frame joint estimates, indexed [t][k] = {x, y} in pixels.
using JointEstimates = std::vector<std::vector<std::array<double, 2>>>;

// Running correct/total counters; sequences are scored independently and
// their tallies summed, which is also how parallel evaluation merges.
struct PckTally {
  std::vector<std::size_t> correct;
  std::vector<std::size_t> total;
  std::size_t skipped_frames = 0;

  void add(const PckTally& o) {
    if (correct.empty()) {
      *this = o;
      return;
    }
    if (o.correct.size() != correct.size()) {
      throw std::invalid_argument("tally merge: joint counts differ");
    }
    for (std::size_t k = 0; k < correct.size(); ++k) {
      correct[k] += o.correct[k];
      total[k] += o.total[k];
    }
    skipped_frames += o.skipped_frames;
  }

  MetricsReport report() const {
    MetricsReport r;
    r.counts = total;
    r.skipped_frames = skipped_frames;
    std::size_t all_correct = 0, all_total = 0;
    for (std::size_t k = 0; k < correct.size(); ++k) {
      r.per_joint_pck.push_back(
          total[k] == 0 ? 0.0
                        : static_cast<double>(correct[k]) / static_cast<double>(total[k]));
      all_correct += correct[k];
      all_total += total[k];
    }
    r.mpck = all_total == 0
                 ? 0.0
                 : static_cast<double>(all_correct) / static_cast<double>(all_total);
    return r;
  }
};

// Decode each channel's peak to image coordinates. Scanning in flat order
// and replacing only on a strictly larger value makes ties land on the
// lowest flat index, the same on every platform.
inline std::vector<std::array<double, 2>> argmax_joints(const Tensor& heatmaps,
                                                        std::size_t stride) {
  if (heatmaps.ndim() != 3) {
    throw std::invalid_argument("argmax_joints: heatmaps must be [K,h,w], got " +
                                heatmaps.shape_str());
  }
  if (stride == 0) throw std::invalid_argument("argmax_joints: stride must be >= 1");
  const std::size_t K = heatmaps.dim(0), h = heatmaps.dim(1), w = heatmaps.dim(2);
  std::vector<std::array<double, 2>> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double* chan = heatmaps.data() + k * h * w;
    std::size_t best = 0;
    for (std::size_t i = 1; i < h * w; ++i) {
      if (chan[i] > chan[best]) best = i;
    }
    out[k] = {static_cast<double>((best % w) * stride),
              static_cast<double>((best / w) * stride)};
  }
  return out;
}

namespace detail {

// Normalizing length for one frame; not positive means "skip this frame".
inline double norm_length(const PoseSequence& gt, std::size_t t, NormMode mode) {
  if (mode == NormMode::person) {
    const auto& b = gt.bbox.at(t);
    return std::max(b[2] - b[0], b[3] - b[1]);
  }
  const auto& a = gt.joints[t].at(gt.torso_pair[0]);
  const auto& b = gt.joints[t].at(gt.torso_pair[1]);
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Score predictions against a sequence's ground truth. Occluded joints are
// scored like any other: the model is expected to locate them anyway.
inline PckTally pck_tally(const JointEstimates& pred, const PoseSequence& gt,
                          const PckConfig& cfg) {
  if (!(cfg.alpha > 0.0) || cfg.alpha > 1.0) {
    throw std::invalid_argument("pck: alpha must be in (0,1]");
  }
  const std::size_t T = gt.joints.size();
  const std::size_t K = T == 0 ? 0 : gt.joints[0].size();
  if (pred.size() != T) throw std::invalid_argument("pck: frame counts differ");

  PckTally tally;
  tally.correct.assign(K, 0);
  tally.total.assign(K, 0);
  for (std::size_t t = 0; t < T; ++t) {
    if (pred[t].size() != K) throw std::invalid_argument("pck: joint counts differ");
    double L = detail::norm_length(gt, t, cfg.norm_mode);
    if (!(L > 0.0)) {
      ++tally.skipped_frames;
      continue;
    }
    for (std::size_t k = 0; k < K; ++k) {
      double d = std::hypot(pred[t][k][0] - gt.joints[t][k][0],
                            pred[t][k][1] - gt.joints[t][k][1]);
      if (d / L <= cfg.alpha) ++tally.correct[k];
      ++tally.total[k];
    }
  }
  return tally;
}

inline MetricsReport pck(const JointEstimates& pred, const PoseSequence& gt,
                         const PckConfig& cfg) {
  return pck_tally(pred, gt, cfg).report();
}

// Forward one clip and decode every frame's peaks.
inline JointEstimates predict_sequence(const ModelParams& p, const PoseSequence& seq) {
  Tape tape;
  ModelVars v = register_params(tape, p);
  SequenceOutput so = forward_sequence(tape, p, v, seq.frames);
  std::size_t stride = seq.height() / tape.value(so.heatmaps[0]).dim(1);
  JointEstimates est;
  est.reserve(so.heatmaps.size());
  for (Var h : so.heatmaps) est.push_back(argmax_joints(tape.value(h), stride));
  return est;
}

inline MetricsReport evaluate_model(const ModelParams& p,
                                    const std::vector<PoseSequence>& data,
                                    const PckConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("evaluate_model: no sequences");
  std::vector<PckTally> tallies(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    tallies[i] = pck_tally(predict_sequence(p, data[i]), data[i], cfg);
  });
  PckTally sum;
  for (const PckTally& t : tallies) sum.add(t);
  return sum.report();
}

// One row of the occlusion experiment: the same masked inputs scored with
// the full model and with joint mixing disabled.
struct SweepRow {
  std::size_t occluded_count = 0;
  double mpck_full = 0.0;
  double mpck_identity = 0.0;
};

// For each count, hide that many joints in every later frame of each holdout
// clip (fresh copies; ground truth stays intact) and score both models on
// identical pixels. Per-clip mask seeds are fixed, and a larger count keeps
// the joints picked for smaller ones, so the curves are comparable
// point-to-point.
inline std::vector<SweepRow> occlusion_sweep(const ModelParams& p,
                                             const std::vector<PoseSequence>& holdout,
                                             const std::vector<std::size_t>& counts,
                                             const PckConfig& cfg, std::uint64_t occ_seed,
                                             std::size_t mask_size = 12) {
  if (holdout.empty()) throw std::invalid_argument("occlusion_sweep: no sequences");
  ModelParams identity = p;
  identity.variant = Variant::identity_attention;

  std::vector<SweepRow> rows;
  for (std::size_t count : counts) {
    std::vector<PoseSequence> masked(holdout.size());
    parallel_for(holdout.size(), [&](std::size_t i) {
      OcclusionSpec spec;
      spec.mode = OcclusionMode::count_sweep;
      spec.count = count;
      spec.mask_size = mask_size;
      spec.seed = Rng::stream(occ_seed, "sweep/seq/" + std::to_string(i)).next_u64();
      masked[i] = apply_occlusion(holdout[i], spec);
    });
    SweepRow row;
    row.occluded_count = count;
    row.mpck_full = evaluate_model(p, masked, cfg).mpck;
    row.mpck_identity = evaluate_model(identity, masked, cfg).mpck;
    rows.push_back(row);
  }
  return rows;
}

inline std::string metrics_csv(const MetricsReport& r) {
  std::string out = "joint,pck\n";
  for (std::size_t k = 0; k < r.per_joint_pck.size(); ++k) {
    out += std::to_string(k) + "," + detail::g17(r.per_joint_pck[k]) + "\n";
  }
  out += "mpck," + detail::g17(r.mpck) + "\n";
  return out;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "occluded_count,mpck_full,mpck_identity\n";
  for (const SweepRow& row : rows) {
    out += std::to_string(row.occluded_count) + "," + detail::g17(row.mpck_full) + "," +
           detail::g17(row.mpck_identity) + "\n";
  }
  return out;
}

}  // namespace kinepose
