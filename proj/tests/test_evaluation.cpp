#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "kinepose/evaluation.hpp"
#include "kinepose/network.hpp"
#include "kinepose/rng.hpp"
#include "kinepose/synthdata.hpp"

using kinepose::JointEstimates;
using kinepose::MetricsReport;
using kinepose::ModelParams;
using kinepose::NormMode;
using kinepose::PckConfig;
using kinepose::PoseSequence;
using kinepose::Rng;
using kinepose::Tensor;
using kinepose::Variant;

namespace {

// Ground truth with hand-picked geometry; only the fields the metrics read.
PoseSequence make_gt(std::vector<std::vector<std::array<double, 2>>> joints,
                     std::array<std::size_t, 2> torso = {0, 1}) {
  PoseSequence gt;
  gt.joints = std::move(joints);
  gt.torso_pair = torso;
  for (const auto& frame : gt.joints) {
    gt.visible.emplace_back(frame.size(), 1);
    gt.bbox.push_back(kinepose::detail::joints_bbox(frame));
  }
  return gt;
}

// Independent reimplementation: per-frame normalizers first, then one joint
// at a time over all frames, pooling at the end.
struct OracleScores {
  std::vector<double> per_joint;
  std::vector<std::size_t> counts;
  double mpck = 0.0;
  std::size_t skipped = 0;
};

OracleScores oracle_pck(const JointEstimates& pred, const PoseSequence& gt,
                        const PckConfig& cfg) {
  const std::size_t T = gt.joints.size();
  const std::size_t K = T == 0 ? 0 : gt.joints[0].size();
  std::vector<double> lengths(T);
  std::vector<bool> usable(T);
  for (std::size_t t = 0; t < T; ++t) {
    double L;
    if (cfg.norm_mode == NormMode::person) {
      L = std::max(gt.bbox[t][2] - gt.bbox[t][0], gt.bbox[t][3] - gt.bbox[t][1]);
    } else {
      double dx = gt.joints[t][gt.torso_pair[0]][0] - gt.joints[t][gt.torso_pair[1]][0];
      double dy = gt.joints[t][gt.torso_pair[0]][1] - gt.joints[t][gt.torso_pair[1]][1];
      L = std::hypot(dx, dy);
    }
    lengths[t] = L;
    usable[t] = L > 0.0;
  }

  OracleScores out;
  std::size_t pooled_correct = 0, pooled_total = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t correct = 0, total = 0;
    for (std::size_t t = 0; t < T; ++t) {
      if (!usable[t]) continue;
      double d = std::hypot(pred[t][k][0] - gt.joints[t][k][0],
                            pred[t][k][1] - gt.joints[t][k][1]);
      if (d / lengths[t] <= cfg.alpha) ++correct;
      ++total;
    }
    out.per_joint.push_back(total == 0 ? 0.0 : double(correct) / double(total));
    out.counts.push_back(total);
    pooled_correct += correct;
    pooled_total += total;
  }
  for (std::size_t t = 0; t < T; ++t) {
    if (!usable[t]) ++out.skipped;
  }
  out.mpck = pooled_total == 0 ? 0.0 : double(pooled_correct) / double(pooled_total);
  return out;
}

}  // namespace

TEST_CASE("argmax decoding picks the peak cell in image coordinates", "[evaluation]") {
  SECTION("one-hot peak lands at col*stride, row*stride") {
    Tensor h({1, 6, 8});
    h(0, 2, 3) = 1.0;
    auto joints = kinepose::argmax_joints(h, 4);
    REQUIRE(joints.size() == 1);
    REQUIRE(joints[0][0] == 12.0);
    REQUIRE(joints[0][1] == 8.0);
  }
  SECTION("a constant channel resolves to the first cell") {
    Tensor h({2, 5, 5});
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = 0.25;
    auto joints = kinepose::argmax_joints(h, 4);
    for (const auto& j : joints) {
      REQUIRE(j[0] == 0.0);
      REQUIRE(j[1] == 0.0);
    }
  }
  SECTION("ties go to the lowest flat index") {
    Tensor h({1, 4, 4});
    h(0, 1, 2) = 3.0;
    h(0, 3, 1) = 3.0;  // later in flat order, must lose
    auto joints = kinepose::argmax_joints(h, 2);
    REQUIRE(joints[0][0] == 4.0);
    REQUIRE(joints[0][1] == 2.0);
  }
  SECTION("matches a full-scan oracle on random heatmaps") {
    Rng rng(81);
    for (int trial = 0; trial < 50; ++trial) {
      Tensor h({3, 7, 9});
      for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.normal();
      auto joints = kinepose::argmax_joints(h, 4);
      for (std::size_t k = 0; k < 3; ++k) {
        double best = h(k, 0, 0);
        std::size_t by = 0, bx = 0;
        for (std::size_t y = 0; y < 7; ++y) {
          for (std::size_t x = 0; x < 9; ++x) {
            if (h(k, y, x) > best) {
              best = h(k, y, x);
              by = y;
              bx = x;
            }
          }
        }
        REQUIRE(joints[k][0] == double(bx * 4));
        REQUIRE(joints[k][1] == double(by * 4));
      }
    }
  }
  SECTION("channel permutation permutes the output") {
    Rng rng(82);
    Tensor h({4, 5, 6});
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.normal();
    auto base = kinepose::argmax_joints(h, 4);
    std::vector<std::size_t> perm = {2, 0, 3, 1};
    Tensor hp({4, 5, 6});
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t i = 0; i < 30; ++i) {
        hp.data()[k * 30 + i] = h.data()[perm[k] * 30 + i];
      }
    }
    auto permuted = kinepose::argmax_joints(hp, 4);
    for (std::size_t k = 0; k < 4; ++k) {
      REQUIRE(permuted[k][0] == base[perm[k]][0]);
      REQUIRE(permuted[k][1] == base[perm[k]][1]);
    }
  }
  SECTION("bad inputs are rejected") {
    REQUIRE_THROWS_AS(kinepose::argmax_joints(Tensor({2, 3}), 4), std::invalid_argument);
    REQUIRE_THROWS_AS(kinepose::argmax_joints(Tensor({1, 3, 3}), 0), std::invalid_argument);
  }
}

TEST_CASE("exact predictions score a perfect PCK", "[evaluation]") {
  PoseSequence gt = make_gt({{{10, 10}, {20, 30}}, {{12, 11}, {21, 29}}});
  JointEstimates pred = gt.joints;
  for (NormMode mode : {NormMode::person, NormMode::torso}) {
    PckConfig cfg;
    cfg.norm_mode = mode;
    MetricsReport r = kinepose::pck(pred, gt, cfg);
    REQUIRE(r.per_joint_pck == std::vector<double>{1.0, 1.0});
    REQUIRE(r.mpck == 1.0);
    REQUIRE(r.counts == std::vector<std::size_t>{2, 2});
    REQUIRE(r.skipped_frames == 0);
  }
}

TEST_CASE("the PCK boundary is inclusive", "[evaluation]") {
  // One frame, two joints; explicit box of side 10 so alpha*L = 2 exactly.
  PoseSequence gt = make_gt({{{0, 0}, {2, 2}}});
  gt.bbox[0] = {0.0, 0.0, 10.0, 10.0};
  PckConfig cfg;  // alpha 0.2, person

  JointEstimates on_edge = {{{2, 0}, {2, 2}}};  // joint 0 at distance 2.0
  MetricsReport r = kinepose::pck(on_edge, gt, cfg);
  REQUIRE(r.per_joint_pck[0] == 1.0);

  JointEstimates over = {{{2.0000001, 0}, {2, 2}}};
  r = kinepose::pck(over, gt, cfg);
  REQUIRE(r.per_joint_pck[0] == 0.0);
  REQUIRE(r.per_joint_pck[1] == 1.0);
  REQUIRE(r.mpck == 0.5);
}

TEST_CASE("PCK agrees with a brute-force oracle on random instances", "[evaluation]") {
  Rng rng(4021);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t K = 1 + rng.uniform_int(6);
    std::size_t T = 1 + rng.uniform_int(8);
    std::vector<std::vector<std::array<double, 2>>> joints(T);
    for (auto& frame : joints) {
      frame.resize(K);
      for (auto& j : frame) j = {rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0)};
    }
    std::array<std::size_t, 2> torso = {rng.uniform_int(K), rng.uniform_int(K)};
    PoseSequence gt = make_gt(joints, torso);
    if (trial % 7 == 0 && T > 1) {
      // Degenerate frame: torso endpoints coincide.
      gt.joints[1][torso[1]] = gt.joints[1][torso[0]];
    }

    JointEstimates pred(T);
    for (std::size_t t = 0; t < T; ++t) {
      pred[t].resize(K);
      for (std::size_t k = 0; k < K; ++k) {
        pred[t][k] = {gt.joints[t][k][0] + rng.uniform(-12.0, 12.0),
                      gt.joints[t][k][1] + rng.uniform(-12.0, 12.0)};
      }
    }
    PckConfig cfg;
    cfg.alpha = rng.uniform(0.05, 1.0);
    cfg.norm_mode = rng.coin() ? NormMode::person : NormMode::torso;

    MetricsReport got = kinepose::pck(pred, gt, cfg);
    OracleScores want = oracle_pck(pred, gt, cfg);
    REQUIRE(got.per_joint_pck == want.per_joint);
    REQUIRE(got.counts == want.counts);
    REQUIRE(got.mpck == want.mpck);
    REQUIRE(got.skipped_frames == want.skipped);

    // Pooled score stays inside the per-joint range.
    double lo = 1.0, hi = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (got.counts[k] == 0) continue;
      lo = std::min(lo, got.per_joint_pck[k]);
      hi = std::max(hi, got.per_joint_pck[k]);
    }
    if (got.mpck > 0.0 || hi > 0.0) {
      REQUIRE(got.mpck >= lo);
      REQUIRE(got.mpck <= hi);
    }
  }
}

TEST_CASE("PCK is invariant to uniform scale", "[evaluation]") {
  Rng rng(55);
  std::vector<std::vector<std::array<double, 2>>> joints(4);
  for (auto& frame : joints) {
    frame.resize(3);
    for (auto& j : frame) j = {rng.uniform(0.0, 40.0), rng.uniform(0.0, 40.0)};
  }
  PoseSequence gt = make_gt(joints, {0, 2});
  JointEstimates pred(4);
  for (std::size_t t = 0; t < 4; ++t) {
    pred[t].resize(3);
    for (std::size_t k = 0; k < 3; ++k) {
      pred[t][k] = {gt.joints[t][k][0] + rng.uniform(-8.0, 8.0),
                    gt.joints[t][k][1] + rng.uniform(-8.0, 8.0)};
    }
  }

  for (double s : {2.0, 1.7, 0.25}) {
    PoseSequence scaled = gt;
    JointEstimates pred_scaled = pred;
    for (std::size_t t = 0; t < 4; ++t) {
      for (auto& j : scaled.joints[t]) {
        j[0] *= s;
        j[1] *= s;
      }
      for (auto& c : scaled.bbox[t]) c *= s;
      for (auto& j : pred_scaled[t]) {
        j[0] *= s;
        j[1] *= s;
      }
    }
    for (NormMode mode : {NormMode::person, NormMode::torso}) {
      PckConfig cfg;
      cfg.norm_mode = mode;
      MetricsReport base = kinepose::pck(pred, gt, cfg);
      MetricsReport after = kinepose::pck(pred_scaled, scaled, cfg);
      REQUIRE(after.counts == base.counts);
      for (std::size_t k = 0; k < 3; ++k) {
        REQUIRE(std::abs(after.per_joint_pck[k] - base.per_joint_pck[k]) < 1e-12);
      }
      REQUIRE(std::abs(after.mpck - base.mpck) < 1e-12);
    }
  }
}

TEST_CASE("degenerate torso frames are excluded and counted", "[evaluation]") {
  // Frame 1's torso endpoints coincide; frames 0 and 2 are fine.
  PoseSequence gt = make_gt({{{0, 0}, {10, 0}}, {{5, 5}, {5, 5}}, {{0, 0}, {0, 12}}});
  JointEstimates pred = gt.joints;
  PckConfig cfg;
  cfg.norm_mode = NormMode::torso;
  MetricsReport r = kinepose::pck(pred, gt, cfg);
  REQUIRE(r.skipped_frames == 1);
  REQUIRE(r.counts == std::vector<std::size_t>{2, 2});
  REQUIRE(r.mpck == 1.0);

  SECTION("an all-degenerate sequence evaluates nothing") {
    PoseSequence flat = make_gt({{{3, 3}, {3, 3}}});
    MetricsReport empty = kinepose::pck({{{3, 3}, {3, 3}}}, flat, cfg);
    REQUIRE(empty.skipped_frames == 1);
    REQUIRE(empty.counts == std::vector<std::size_t>{0, 0});
    REQUIRE(empty.mpck == 0.0);
  }
}

TEST_CASE("occluded joints still count toward PCK", "[evaluation]") {
  PoseSequence gt = make_gt({{{10, 10}, {20, 20}}, {{11, 10}, {21, 20}}});
  gt.visible[1] = {0, 0};
  MetricsReport r = kinepose::pck(gt.joints, gt, PckConfig{});
  REQUIRE(r.counts == std::vector<std::size_t>{2, 2});
  REQUIRE(r.mpck == 1.0);
}

TEST_CASE("shape mismatches and bad thresholds are rejected", "[evaluation]") {
  PoseSequence gt = make_gt({{{1, 1}, {2, 2}}});
  REQUIRE_THROWS_AS(kinepose::pck({}, gt, PckConfig{}), std::invalid_argument);
  REQUIRE_THROWS_AS(kinepose::pck({{{1, 1}}}, gt, PckConfig{}), std::invalid_argument);
  PckConfig bad;
  bad.alpha = 0.0;
  REQUIRE_THROWS_AS(kinepose::pck(gt.joints, gt, bad), std::invalid_argument);
  bad.alpha = 1.5;
  REQUIRE_THROWS_AS(kinepose::pck(gt.joints, gt, bad), std::invalid_argument);
}

TEST_CASE("model evaluation composes prediction and scoring", "[evaluation]") {
  kinepose::GenConfig cfg;
  cfg.joints = 3;
  cfg.frames = 3;
  cfg.height = 32;
  cfg.width = 32;
  cfg.seed = 71;
  std::vector<PoseSequence> data = kinepose::generate_dataset(cfg, 2);
  ModelParams p = kinepose::init_params(3, 6, Variant::full, 19);

  PckConfig pcfg;
  MetricsReport got = kinepose::evaluate_model(p, data, pcfg);

  kinepose::PckTally sum;
  for (const PoseSequence& seq : data) {
    sum.add(kinepose::pck_tally(kinepose::predict_sequence(p, seq), seq, pcfg));
  }
  MetricsReport want = sum.report();
  REQUIRE(got.per_joint_pck == want.per_joint_pck);
  REQUIRE(got.mpck == want.mpck);
  REQUIRE(got.counts == want.counts);
  REQUIRE(got.counts == std::vector<std::size_t>{6, 6, 6});

  REQUIRE_THROWS_AS(kinepose::evaluate_model(p, {}, pcfg), std::invalid_argument);
}

TEST_CASE("the occlusion sweep compares both models on identical pixels", "[evaluation]") {
  kinepose::GenConfig cfg;
  cfg.joints = 3;
  cfg.frames = 3;
  cfg.height = 32;
  cfg.width = 32;
  cfg.seed = 72;
  std::vector<PoseSequence> holdout = kinepose::generate_dataset(cfg, 2);
  ModelParams p = kinepose::init_params(3, 6, Variant::full, 23);
  PckConfig pcfg;

  auto rows = kinepose::occlusion_sweep(p, holdout, {0, 1, 3}, pcfg, 99, 10);
  REQUIRE(rows.size() == 3);
  REQUIRE(rows[0].occluded_count == 0);
  REQUIRE(rows[0].mpck_full == kinepose::evaluate_model(p, holdout, pcfg).mpck);
  ModelParams ident = p;
  ident.variant = Variant::identity_attention;
  REQUIRE(rows[0].mpck_identity == kinepose::evaluate_model(ident, holdout, pcfg).mpck);
  for (const auto& row : rows) {
    REQUIRE(row.mpck_full >= 0.0);
    REQUIRE(row.mpck_full <= 1.0);
    REQUIRE(row.mpck_identity >= 0.0);
    REQUIRE(row.mpck_identity <= 1.0);
  }

  SECTION("asking to occlude more joints than exist fails") {
    REQUIRE_THROWS_AS(kinepose::occlusion_sweep(p, holdout, {4}, pcfg, 99, 10),
                      std::invalid_argument);
  }
  SECTION("repeating the sweep reproduces it bitwise") {
    auto again = kinepose::occlusion_sweep(p, holdout, {0, 1, 3}, pcfg, 99, 10);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      REQUIRE(again[i].mpck_full == rows[i].mpck_full);
      REQUIRE(again[i].mpck_identity == rows[i].mpck_identity);
    }
  }
}

TEST_CASE("metric reports print as CSV", "[evaluation]") {
  kinepose::PckTally tally;
  tally.correct = {2, 1};
  tally.total = {2, 2};
  MetricsReport r = tally.report();
  REQUIRE(kinepose::metrics_csv(r) == "joint,pck\n0,1\n1,0.5\nmpck,0.75\n");

  std::vector<kinepose::SweepRow> rows = {{0, 1.0, 0.5}, {2, 0.25, 0.125}};
  REQUIRE(kinepose::sweep_csv(rows) ==
          "occluded_count,mpck_full,mpck_identity\n0,1,0.5\n2,0.25,0.125\n");
}
