#pragma once

// Synthetic moving-keypoint videos: K colored Gaussian blobs drift over a
// textured background with constant velocity plus a small random walk,
// reflecting off frame borders. Ground truth carries joint coordinates,
// visibility, per-frame bounding boxes, and a torso pair for PCK norms.
// Everything is a pure function of the seed.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace kinepose {

struct PoseSequence {
  std::vector<Tensor> frames;                              // T x [3,H,W], values in [0,1]
  std::vector<std::vector<std::array<double, 2>>> joints;  // [T][K] = {x, y} in pixels
  std::vector<std::vector<std::uint8_t>> visible;          // [T][K], 0 iff masked over
  std::vector<std::array<double, 4>> bbox;                 // [T] = {x_min, y_min, x_max, y_max}
  std::array<std::size_t, 2> torso_pair{0, 0};
  std::vector<std::array<std::size_t, 2>> lr_pairs;        // mirror pairs for flip augmentation
  std::uint64_t seed = 0;

  std::size_t frame_count() const { return frames.size(); }
  std::size_t joint_count() const { return joints.empty() ? 0 : joints[0].size(); }
  std::size_t height() const { return frames.at(0).dim(1); }
  std::size_t width() const { return frames.at(0).dim(2); }
};

struct GenConfig {
  std::size_t joints = 5;
  std::size_t frames = 5;
  std::size_t height = 64;
  std::size_t width = 64;
  double speed_min = 1.0;        // shared base speed, pixels/frame
  double speed_max = 2.2;
  double velocity_jitter = 0.3;  // per-joint velocity spread
  double walk_noise = 0.3;       // per-frame positional random walk stddev
  std::uint64_t seed = 1;
  // Test hooks: pin starting positions (size K) and/or velocities (size K, or
  // size 1 shared by all joints) instead of sampling them.
  std::vector<std::array<double, 2>> start_override;
  std::vector<std::array<double, 2>> velocity_override;
};

enum class OcclusionMode { none, temporal, spatial, count_sweep };

struct OcclusionSpec {
  OcclusionMode mode = OcclusionMode::none;
  std::size_t mask_size = 12;  // square side, pixels
  std::size_t count = 2;       // masks (temporal/spatial) or joints (count_sweep)
  std::uint64_t seed = 0;
};

inline const char* occlusion_mode_name(OcclusionMode m) {
  switch (m) {
    case OcclusionMode::none: return "none";
    case OcclusionMode::temporal: return "temporal";
    case OcclusionMode::spatial: return "spatial";
    default: return "count_sweep";
  }
}

inline OcclusionMode occlusion_mode_from_name(const std::string& name) {
  for (int code = 0; code <= 3; ++code) {
    const OcclusionMode m = static_cast<OcclusionMode>(code);
    if (name == occlusion_mode_name(m)) return m;
  }
  throw std::invalid_argument("unknown occlusion mode \"" + name +
                              "\" (want none, temporal, spatial, or count_sweep)");
}

inline std::array<std::size_t, 2> default_torso_pair(std::size_t joints) {
  if (joints < 2) return {0, 0};
  std::size_t a = 1;
  std::size_t b = joints >= 5 ? 4 : joints - 1;
  if (b == a) b = 0;
  return {a, b};
}

inline std::vector<std::array<std::size_t, 2>> default_lr_pairs(std::size_t joints) {
  std::vector<std::array<std::size_t, 2>> pairs;
  for (std::size_t k = 1; k + 1 < joints; k += 2) pairs.push_back({k, k + 1});
  return pairs;
}

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// Deterministic per-pixel noise in [-1, 1], independent of RNG stream state.
inline double pixel_noise(std::uint64_t seed, std::size_t x, std::size_t y) {
  std::uint64_t s = seed ^ (x * 0x9e3779b97f4a7c15ull) ^ (y * 0xbf58476d1ce4e5b9ull);
  return (static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53) * 2.0 - 1.0;
}

// Reflect a coordinate into [0, limit]; velocities stay well under limit so
// the loop runs at most a couple of times.
inline double reflect_coord(double p, double limit) {
  while (p < 0.0 || p > limit) {
    if (p < 0.0) p = -p;
    if (p > limit) p = 2.0 * limit - p;
  }
  return p;
}

inline std::array<double, 4> joints_bbox(const std::vector<std::array<double, 2>>& js) {
  double x0 = js[0][0], x1 = js[0][0], y0 = js[0][1], y1 = js[0][1];
  for (const auto& j : js) {
    x0 = std::min(x0, j[0]);
    x1 = std::max(x1, j[0]);
    y0 = std::min(y0, j[1]);
    y1 = std::max(y1, j[1]);
  }
  return {x0 - 4.0, y0 - 4.0, x1 + 4.0, y1 + 4.0};
}

// Loose body-like formation around a center point: joint 0 on top, then
// mirrored left/right pairs at increasing depth, one trailing joint if K is
// even. Coordinates are clamped a little inside the frame.
inline std::vector<std::array<double, 2>> formation(std::size_t joints, double w, double h,
                                                    Rng& rng) {
  const double cx = w * rng.uniform(0.40, 0.60);
  const double cy = h * rng.uniform(0.40, 0.60);
  std::vector<std::array<double, 2>> pos;
  pos.push_back({cx + rng.uniform(-2.0, 2.0), cy - rng.uniform(10.0, 13.0)});
  std::size_t pair = 0;
  while (pos.size() + 2 <= joints) {
    double dy;
    if (pair == 0) dy = rng.uniform(-6.0, -3.0);        // shoulder band
    else if (pair == 1) dy = rng.uniform(8.0, 12.0);    // hip band
    else dy = rng.uniform(2.0, 6.0);                    // extra limbs
    const double dx = rng.uniform(7.0, 12.0);
    pos.push_back({cx - dx + rng.uniform(-1.0, 1.0), cy + dy + rng.uniform(-1.0, 1.0)});
    pos.push_back({cx + dx + rng.uniform(-1.0, 1.0), cy + dy + rng.uniform(-1.0, 1.0)});
    ++pair;
  }
  if (pos.size() < joints) pos.push_back({cx + rng.uniform(-3.0, 3.0), cy + rng.uniform(13.0, 16.0)});
  pos.resize(joints);
  for (auto& p : pos) {
    p[0] = std::min(std::max(p[0], 2.0), w - 3.0);
    p[1] = std::min(std::max(p[1], 2.0), h - 3.0);
  }
  return pos;
}

}  // namespace detail

// GT heatmap per joint on the stride-decimated grid: a unit-peak Gaussian at
// the quantized joint cell, sigma in grid cells.
inline Tensor render_gt_heatmaps(const std::vector<std::array<double, 2>>& joints, std::size_t h,
                                 std::size_t w, double sigma, std::size_t stride = 4) {
  if (!(sigma > 0.0) || stride == 0 || h == 0 || w == 0) {
    throw std::invalid_argument("render_gt_heatmaps: bad sigma/stride/grid");
  }
  Tensor maps({joints.size(), h, w});
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t k = 0; k < joints.size(); ++k) {
    const double cu = std::min<double>(
        w - 1, std::max<long>(0, std::lround(joints[k][0] / static_cast<double>(stride))));
    const double cv = std::min<double>(
        h - 1, std::max<long>(0, std::lround(joints[k][1] / static_cast<double>(stride))));
    for (std::size_t v = 0; v < h; ++v) {
      for (std::size_t u = 0; u < w; ++u) {
        const double du = static_cast<double>(u) - cu;
        const double dv = static_cast<double>(v) - cv;
        maps(k, v, u) = std::exp(-(du * du + dv * dv) * inv);
      }
    }
  }
  return maps;
}

inline PoseSequence generate_sequence(const GenConfig& cfg) {
  if (cfg.joints < 1 || cfg.frames < 1) {
    throw std::invalid_argument("generate_sequence: need at least one joint and one frame");
  }
  if (cfg.height < 8 || cfg.width < 8 || cfg.height % 4 != 0 || cfg.width % 4 != 0) {
    throw std::invalid_argument("generate_sequence: H and W must be >= 8 and divisible by 4");
  }
  if (!cfg.start_override.empty() && cfg.start_override.size() != cfg.joints) {
    throw std::invalid_argument("generate_sequence: start_override must list every joint");
  }
  if (!cfg.velocity_override.empty() && cfg.velocity_override.size() != 1 &&
      cfg.velocity_override.size() != cfg.joints) {
    throw std::invalid_argument("generate_sequence: velocity_override must have size 1 or K");
  }
  const std::size_t K = cfg.joints, T = cfg.frames, H = cfg.height, W = cfg.width;
  const double w_lim = static_cast<double>(W - 1), h_lim = static_cast<double>(H - 1);

  Rng form_rng = Rng::stream(cfg.seed, "gen/formation");
  std::vector<std::array<double, 2>> pos = cfg.start_override.empty()
                                               ? detail::formation(K, W, H, form_rng)
                                               : cfg.start_override;
  for (const auto& p : pos) {
    if (p[0] < 0.0 || p[0] > w_lim || p[1] < 0.0 || p[1] > h_lim) {
      throw std::invalid_argument("generate_sequence: start position outside frame");
    }
  }

  Rng vel_rng = Rng::stream(cfg.seed, "gen/velocity");
  std::vector<std::array<double, 2>> vel(K);
  if (cfg.velocity_override.empty()) {
    const double angle = vel_rng.uniform(0.0, 6.283185307179586);
    const double speed = vel_rng.uniform(cfg.speed_min, cfg.speed_max);
    for (auto& v : vel) {
      v[0] = speed * std::cos(angle) + vel_rng.uniform(-cfg.velocity_jitter, cfg.velocity_jitter);
      v[1] = speed * std::sin(angle) + vel_rng.uniform(-cfg.velocity_jitter, cfg.velocity_jitter);
    }
  } else {
    for (std::size_t k = 0; k < K; ++k) {
      vel[k] = cfg.velocity_override[cfg.velocity_override.size() == 1 ? 0 : k];
    }
  }

  PoseSequence seq;
  seq.seed = cfg.seed;
  seq.torso_pair = default_torso_pair(K);
  seq.lr_pairs = default_lr_pairs(K);
  seq.joints.resize(T);
  seq.visible.assign(T, std::vector<std::uint8_t>(K, 1));

  Rng walk_rng = Rng::stream(cfg.seed, "gen/walk");
  seq.joints[0] = pos;
  for (std::size_t t = 1; t < T; ++t) {
    seq.joints[t].resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      double x = seq.joints[t - 1][k][0] + vel[k][0] + cfg.walk_noise * walk_rng.normal();
      double y = seq.joints[t - 1][k][1] + vel[k][1] + cfg.walk_noise * walk_rng.normal();
      seq.joints[t][k] = {detail::reflect_coord(x, w_lim), detail::reflect_coord(y, h_lim)};
    }
  }
  for (std::size_t t = 0; t < T; ++t) seq.bbox.push_back(detail::joints_bbox(seq.joints[t]));

  // Static textured background, shared by every frame of the sequence.
  Rng bg_rng = Rng::stream(cfg.seed, "gen/background");
  Tensor background({3, H, W});
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = bg_rng.uniform(0.15, 0.40);
    const double amp = bg_rng.uniform(0.05, 0.12);
    const double fx = bg_rng.uniform(0.05, 0.35);
    const double fy = bg_rng.uniform(0.05, 0.35);
    const double phase = bg_rng.uniform(0.0, 6.283185307179586);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double v = base + amp * std::sin(fx * x + fy * y + phase) +
                   0.04 * detail::pixel_noise(cfg.seed + c, x, y);
        background(c, y, x) = std::min(1.0, std::max(0.0, v));
      }
    }
  }

  // One distinct hue per joint, evenly spaced on the wheel.
  std::vector<std::array<double, 3>> colors(K);
  for (std::size_t k = 0; k < K; ++k) {
    colors[k] = detail::hsv_to_rgb((k + 0.5) / static_cast<double>(K), 0.85, 0.95);
  }

  const double blob_sigma = 2.8;
  const long radius = 9;  // ~3 sigma
  const double inv = 1.0 / (2.0 * blob_sigma * blob_sigma);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor frame = background;
    for (std::size_t k = 0; k < K; ++k) {
      const double jx = seq.joints[t][k][0], jy = seq.joints[t][k][1];
      const long x0 = std::max(0l, std::lround(jx) - radius);
      const long x1 = std::min<long>(W - 1, std::lround(jx) + radius);
      const long y0 = std::max(0l, std::lround(jy) - radius);
      const long y1 = std::min<long>(H - 1, std::lround(jy) + radius);
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          const double d2 = (x - jx) * (x - jx) + (y - jy) * (y - jy);
          const double a = 0.9 * std::exp(-d2 * inv);
          for (std::size_t c = 0; c < 3; ++c) {
            frame(c, y, x) += (colors[k][c] - frame(c, y, x)) * a;
          }
        }
      }
    }
    // Quantize to the 8-bit levels a PPM round trip would produce, so
    // in-memory and on-disk pipelines see bit-identical pixels.
    for (std::size_t i = 0; i < frame.size(); ++i) {
      frame[i] = static_cast<double>(std::lround(frame[i] * 255.0)) / 255.0;
    }
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

// A fresh dataset: sequence n gets an independent seed derived from the base.
inline std::vector<PoseSequence> generate_dataset(GenConfig cfg, std::size_t count) {
  std::vector<PoseSequence> out;
  const std::uint64_t base = cfg.seed;
  for (std::size_t n = 0; n < count; ++n) {
    cfg.seed = Rng::stream(base, "gen/seq/" + std::to_string(n)).next_u64();
    out.push_back(generate_sequence(cfg));
  }
  return out;
}

inline PoseSequence apply_occlusion(const PoseSequence& in, const OcclusionSpec& spec) {
  if (spec.mask_size < 1) throw std::invalid_argument("apply_occlusion: mask_size must be >= 1");
  PoseSequence seq = in;
  const std::size_t T = seq.frame_count(), K = seq.joint_count();
  if (spec.mode == OcclusionMode::none) return seq;
  if (spec.mode == OcclusionMode::count_sweep && spec.count > K) {
    throw std::invalid_argument("apply_occlusion: cannot occlude " + std::to_string(spec.count) +
                                " of " + std::to_string(K) + " joints");
  }
  if (T < 2 || spec.count == 0) return seq;  // frame 0 is never occluded

  Rng rng = Rng::stream(spec.seed, "occ/pick");
  auto choose_joints = [&](std::size_t n) {
    std::vector<std::size_t> ids(K);
    for (std::size_t i = 0; i < K; ++i) ids[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(K - i));
      std::swap(ids[i], ids[j]);
    }
    ids.resize(n);
    return ids;
  };

  const long size = static_cast<long>(spec.mask_size);
  const long W = static_cast<long>(seq.width()), H = static_cast<long>(seq.height());
  auto mask_frame = [&](std::size_t t, const std::vector<std::size_t>& picked) {
    std::vector<std::array<long, 4>> rects;  // x0,y0,x1,y1 half-open
    for (std::size_t k : picked) {
      const long cx = std::min(W - 1, std::max(0l, std::lround(seq.joints[t][k][0])));
      const long cy = std::min(H - 1, std::max(0l, std::lround(seq.joints[t][k][1])));
      const long x0 = std::max(0l, cx - size / 2), y0 = std::max(0l, cy - size / 2);
      const long x1 = std::min(W, x0 + size), y1 = std::min(H, y0 + size);
      rects.push_back({x0, y0, x1, y1});
      for (long y = y0; y < y1; ++y)
        for (long x = x0; x < x1; ++x)
          for (std::size_t c = 0; c < 3; ++c) seq.frames[t](c, y, x) = 0.0;
    }
    for (std::size_t k = 0; k < K; ++k) {
      bool covered = false;
      for (const auto& r : rects) {
        covered = covered || (seq.joints[t][k][0] >= r[0] && seq.joints[t][k][0] < r[2] &&
                              seq.joints[t][k][1] >= r[1] && seq.joints[t][k][1] < r[3]);
      }
      if (covered) seq.visible[t][k] = 0;
    }
  };

  switch (spec.mode) {
    case OcclusionMode::temporal: {
      const std::size_t t = 1 + static_cast<std::size_t>(rng.uniform_int(T - 1));
      mask_frame(t, choose_joints(std::min(spec.count, K)));
      break;
    }
    case OcclusionMode::spatial: {
      for (std::size_t t = 1; t < T; ++t) mask_frame(t, choose_joints(std::min(spec.count, K)));
      break;
    }
    case OcclusionMode::count_sweep: {
      const auto picked = choose_joints(spec.count);
      for (std::size_t t = 1; t < T; ++t) mask_frame(t, picked);
      break;
    }
    case OcclusionMode::none:
      break;
  }
  return seq;
}

// ---- dataset directory layout ----
// <root>/seq_<n>/frame_<t>.ppm   binary P6, t = 0..T-1
// <root>/seq_<n>/gt.csv          rows t,k,x,y,visible (header line included)
// <root>/seq_<n>/meta.txt        key=value: K,T,H,W,seed,torso_pair,lr_pairs

inline void write_sequence_dir(const std::filesystem::path& dir, const PoseSequence& seq) {
  std::filesystem::create_directories(dir);
  const std::size_t T = seq.frame_count(), K = seq.joint_count();
  for (std::size_t t = 0; t < T; ++t) {
    write_ppm(dir / ("frame_" + std::to_string(t) + ".ppm"), seq.frames[t]);
  }
  std::string csv = "t,k,x,y,visible\n";
  char buf[96];
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%d\n", t, k, seq.joints[t][k][0],
                    seq.joints[t][k][1], seq.visible[t][k] ? 1 : 0);
      csv += buf;
    }
  }
  detail::write_file_atomic(dir / "gt.csv", csv);

  std::string meta;
  meta += "K=" + std::to_string(K) + "\n";
  meta += "T=" + std::to_string(T) + "\n";
  meta += "H=" + std::to_string(seq.height()) + "\n";
  meta += "W=" + std::to_string(seq.width()) + "\n";
  meta += "seed=" + std::to_string(seq.seed) + "\n";
  meta += "torso_pair=" + std::to_string(seq.torso_pair[0]) + "," +
          std::to_string(seq.torso_pair[1]) + "\n";
  meta += "lr_pairs=";
  for (std::size_t i = 0; i < seq.lr_pairs.size(); ++i) {
    meta += std::to_string(seq.lr_pairs[i][0]) + "," + std::to_string(seq.lr_pairs[i][1]);
    if (i + 1 < seq.lr_pairs.size()) meta += ";";
  }
  meta += "\n";
  detail::write_file_atomic(dir / "meta.txt", meta);
}

inline void write_dataset(const std::filesystem::path& dir,
                          const std::vector<PoseSequence>& seqs) {
  std::filesystem::create_directories(dir);
  for (std::size_t n = 0; n < seqs.size(); ++n) {
    write_sequence_dir(dir / ("seq_" + std::to_string(n)), seqs[n]);
  }
}

inline PoseSequence load_sequence_dir(const std::filesystem::path& dir) {
  const std::string meta = detail::read_file_bytes(dir / "meta.txt");
  std::size_t K = 0, T = 0, H = 0, W = 0;
  PoseSequence seq;
  std::size_t pos = 0;
  while (pos < meta.size()) {
    std::size_t eol = meta.find('\n', pos);
    if (eol == std::string::npos) eol = meta.size();
    const std::string line = meta.substr(pos, eol - pos);
    pos = eol + 1;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "K") K = std::stoul(val);
    else if (key == "T") T = std::stoul(val);
    else if (key == "H") H = std::stoul(val);
    else if (key == "W") W = std::stoul(val);
    else if (key == "seed") seq.seed = std::stoull(val);
    else if (key == "torso_pair") {
      const std::size_t comma = val.find(',');
      seq.torso_pair = {std::stoul(val.substr(0, comma)), std::stoul(val.substr(comma + 1))};
    } else if (key == "lr_pairs") {
      std::size_t p = 0;
      while (p < val.size()) {
        std::size_t semi = val.find(';', p);
        if (semi == std::string::npos) semi = val.size();
        const std::string pair = val.substr(p, semi - p);
        const std::size_t comma = pair.find(',');
        if (comma != std::string::npos) {
          seq.lr_pairs.push_back(
              {std::stoul(pair.substr(0, comma)), std::stoul(pair.substr(comma + 1))});
        }
        p = semi + 1;
      }
    }
  }
  if (K == 0 || T == 0 || H == 0 || W == 0) {
    throw std::runtime_error(dir.string() + ": incomplete meta.txt");
  }

  seq.joints.assign(T, std::vector<std::array<double, 2>>(K, {0.0, 0.0}));
  seq.visible.assign(T, std::vector<std::uint8_t>(K, 1));
  const std::string csv = detail::read_file_bytes(dir / "gt.csv");
  pos = 0;
  while (pos < csv.size()) {
    std::size_t eol = csv.find('\n', pos);
    if (eol == std::string::npos) eol = csv.size();
    const std::string line = csv.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty() || line[0] == 't') continue;  // header or blank
    std::size_t t = 0, k = 0;
    double x = 0, y = 0;
    int vis = 1;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf,%d", &t, &k, &x, &y, &vis) != 5 || t >= T ||
        k >= K) {
      throw std::runtime_error(dir.string() + ": malformed gt.csv row: " + line);
    }
    seq.joints[t][k] = {x, y};
    seq.visible[t][k] = vis ? 1 : 0;
  }

  for (std::size_t t = 0; t < T; ++t) {
    Tensor f = read_ppm(dir / ("frame_" + std::to_string(t) + ".ppm"));
    if (f.dim(1) != H || f.dim(2) != W) {
      throw std::runtime_error(dir.string() + ": frame size disagrees with meta.txt");
    }
    seq.frames.push_back(std::move(f));
    seq.bbox.push_back(detail::joints_bbox(seq.joints[t]));
  }
  return seq;
}

inline std::vector<PoseSequence> load_dataset(const std::filesystem::path& dir) {
  std::vector<PoseSequence> out;
  for (std::size_t n = 0;; ++n) {
    const std::filesystem::path sub = dir / ("seq_" + std::to_string(n));
    if (!std::filesystem::exists(sub / "meta.txt")) break;
    out.push_back(load_sequence_dir(sub));
  }
  if (out.empty()) throw std::runtime_error(dir.string() + ": no seq_<n> directories found");
  return out;
}

}  // namespace kinepose
