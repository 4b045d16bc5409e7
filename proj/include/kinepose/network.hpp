#pragma once

// Full video pose network: a small convolutional encoder shared across
// frames, a linear pose initializer for the first frame, the attention-based
// joint mixer (kmm.hpp) to carry heatmaps forward in time, and a fuse/decode
// head that refines the carried heatmaps against the next frame's features.
//
// Weights live in ModelParams (plain tensors, checkpointable); a forward pass
// registers them on a Tape and returns the per-frame heatmap Vars so callers
// can attach a loss and backprop.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kinepose/autodiff.hpp"
#include "kinepose/kmm.hpp"
#include "kinepose/rng.hpp"
#include "kinepose/tensor.hpp"

namespace kinepose {

// Architecture variants used by the ablation experiments. `full` is the
// reference model; the others each disable or rewire one piece of it.
enum class Variant : std::uint8_t {
  full = 0,             // complete model
  share_qk = 1,         // query and key projections share one weight tensor
  no_sqrt_d = 2,        // correlation scores are not divided by sqrt(d)
  identity_attention = 3,  // joint mixing bypassed: carried heatmap is M_t
  heatmap_qk = 4,       // query/key computed from heatmaps, not features
  residual = 5,         // M_t is added onto the mixer output before fusing
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::share_qk: return "share_qk";
    case Variant::no_sqrt_d: return "no_sqrt_d";
    case Variant::identity_attention: return "identity_attention";
    case Variant::heatmap_qk: return "heatmap_qk";
    case Variant::residual: return "residual";
  }
  throw std::invalid_argument("variant_name: unknown variant");
}

inline Variant variant_from_name(const std::string& name) {
  for (int i = 0; i <= 5; ++i) {
    Variant v = static_cast<Variant>(i);
    if (name == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown variant name: " + name);
}

// All learnable weights. Every convolution is bias-free; nonlinearity comes
// from the ReLUs between layers. Shapes (K = joints, D = feature channels):
//   enc_conv1 [16,3,3,3]    stride-2 conv over the RGB frame
//   enc_conv2 [D,16,3,3]    stride-2 conv to the feature resolution (H/4)
//   init_conv [K,D,1,1]     linear per-pixel readout of first-frame heatmaps
//   kmm.w_query/w_key       [K,D,1,1] ([K,K,1,1] for heatmap_qk)
//   fuse_g    [D,K+D,3,3]   mixes carried heatmaps with next-frame features
//   fuse_d    [K,D,1,1]     projects fused features back to K heatmaps
//   dec_conv1 [K,K,3,3]     decoder body
//   dec_conv2 [K,K,1,1]     decoder head
struct ModelParams {
  std::size_t joints = 5;
  std::size_t channels = 32;
  Variant variant = Variant::full;
  Tensor enc_conv1;
  Tensor enc_conv2;
  Tensor init_conv;
  KmmParams kmm;
  Tensor fuse_g;
  Tensor fuse_d;
  Tensor dec_conv1;
  Tensor dec_conv2;
};

namespace detail {

inline Tensor he_init(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
  return t;
}

inline void require_shape(const Tensor& t, const std::vector<std::size_t>& want,
                          const std::string& name) {
  if (t.shape() != want) {
    Tensor probe(want);
    throw std::runtime_error("model weights: " + name + " has shape " + t.shape_str() +
                             ", expected " + probe.shape_str());
  }
}

}  // namespace detail

// Fresh He-initialized weights. Each tensor draws from its own named stream,
// so adding or reordering tensors never silently changes the others.
inline ModelParams init_params(std::size_t joints, std::size_t channels, Variant variant,
                               std::uint64_t seed) {
  if (joints == 0) throw std::invalid_argument("init_params: joints must be >= 1");
  if (channels == 0) throw std::invalid_argument("init_params: channels must be >= 1");
  ModelParams p;
  p.joints = joints;
  p.channels = channels;
  p.variant = variant;
  std::size_t K = joints;
  std::size_t D = channels;
  std::size_t qk_in = (variant == Variant::heatmap_qk) ? K : D;

  auto he = [&](const char* name, std::vector<std::size_t> shape, std::size_t fan_in) {
    Rng rng = Rng::stream(seed, std::string("init/") + name);
    return detail::he_init(std::move(shape), fan_in, rng);
  };
  p.enc_conv1 = he("enc_conv1", {16, 3, 3, 3}, 3 * 3 * 3);
  p.enc_conv2 = he("enc_conv2", {D, 16, 3, 3}, 16 * 3 * 3);
  p.init_conv = he("init_conv", {K, D, 1, 1}, D);
  p.kmm.w_query = he("kmm.w_query", {K, qk_in, 1, 1}, qk_in);
  p.kmm.share_qk = (variant == Variant::share_qk);
  p.kmm.w_key = p.kmm.share_qk ? p.kmm.w_query : he("kmm.w_key", {K, qk_in, 1, 1}, qk_in);
  p.fuse_g = he("fuse_g", {D, K + D, 3, 3}, (K + D) * 3 * 3);
  p.fuse_d = he("fuse_d", {K, D, 1, 1}, D);
  p.dec_conv1 = he("dec_conv1", {K, K, 3, 3}, K * 3 * 3);
  p.dec_conv2 = he("dec_conv2", {K, K, 1, 1}, K);
  // Damp the output head so the first predictions sit near the heatmap
  // background level instead of init-scale noise. Regression against
  // mostly-zero targets then grows peaks from weak signals, rather than
  // first crushing the whole stack toward zero — the push that tends to
  // trap hidden ReLUs in the dead regime.
  for (std::size_t i = 0; i < p.dec_conv2.size(); ++i) p.dec_conv2[i] *= 0.1;
  return p;
}

// Name -> tensor view in a fixed order, used by checkpoints and the
// optimizer. When query/key are shared only the query tensor appears (the
// key is the same storage by construction after load).
inline std::vector<std::pair<std::string, Tensor*>> named_tensors(ModelParams& p) {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("enc_conv1", &p.enc_conv1);
  out.emplace_back("enc_conv2", &p.enc_conv2);
  out.emplace_back("init_conv", &p.init_conv);
  out.emplace_back("kmm.w_query", &p.kmm.w_query);
  if (!p.kmm.share_qk) out.emplace_back("kmm.w_key", &p.kmm.w_key);
  out.emplace_back("fuse_g", &p.fuse_g);
  out.emplace_back("fuse_d", &p.fuse_d);
  out.emplace_back("dec_conv1", &p.dec_conv1);
  out.emplace_back("dec_conv2", &p.dec_conv2);
  return out;
}

inline std::vector<std::pair<std::string, const Tensor*>> named_tensors(const ModelParams& p) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : named_tensors(const_cast<ModelParams&>(p))) out.emplace_back(name, t);
  return out;
}

// Shape/consistency check shared by load_checkpoint and anyone assembling
// ModelParams by hand. Throws on the first mismatch.
inline void validate_params(const ModelParams& p) {
  std::size_t K = p.joints;
  std::size_t D = p.channels;
  if (K == 0 || D == 0) throw std::runtime_error("model weights: joints and channels must be >= 1");
  std::size_t qk_in = (p.variant == Variant::heatmap_qk) ? K : D;
  detail::require_shape(p.enc_conv1, {16, 3, 3, 3}, "enc_conv1");
  detail::require_shape(p.enc_conv2, {D, 16, 3, 3}, "enc_conv2");
  detail::require_shape(p.init_conv, {K, D, 1, 1}, "init_conv");
  detail::require_shape(p.kmm.w_query, {K, qk_in, 1, 1}, "kmm.w_query");
  detail::require_shape(p.kmm.w_key, {K, qk_in, 1, 1}, "kmm.w_key");
  detail::require_shape(p.fuse_g, {D, K + D, 3, 3}, "fuse_g");
  detail::require_shape(p.fuse_d, {K, D, 1, 1}, "fuse_d");
  detail::require_shape(p.dec_conv1, {K, K, 3, 3}, "dec_conv1");
  detail::require_shape(p.dec_conv2, {K, K, 1, 1}, "dec_conv2");
  for (auto& [name, t] : named_tensors(p)) {
    if (!t->all_finite()) throw std::runtime_error("model weights: " + name + " is not finite");
  }
  if (p.kmm.share_qk && !(p.kmm.w_key == p.kmm.w_query)) {
    throw std::runtime_error("model weights: share_qk set but key differs from query");
  }
}

// The weights registered on a tape for one forward/backward pass.
struct ModelVars {
  Var enc_conv1, enc_conv2, init_conv;
  KmmVars kmm;
  Var fuse_g, fuse_d, dec_conv1, dec_conv2;
};

inline ModelVars register_params(Tape& tape, const ModelParams& p) {
  ModelVars v;
  v.enc_conv1 = tape.input(p.enc_conv1);
  v.enc_conv2 = tape.input(p.enc_conv2);
  v.init_conv = tape.input(p.init_conv);
  v.kmm = register_kmm(tape, p.kmm);
  v.fuse_g = tape.input(p.fuse_g);
  v.fuse_d = tape.input(p.fuse_d);
  v.dec_conv1 = tape.input(p.dec_conv1);
  v.dec_conv2 = tape.input(p.dec_conv2);
  return v;
}

// Vars in the same order as named_tensors(), so grads can be zipped with the
// parameter list. The shared-key case contributes one Var, matching the one
// stored tensor, and its grad already accumulates both uses.
inline std::vector<Var> param_vars(const ModelParams& p, const ModelVars& v) {
  std::vector<Var> out{v.enc_conv1, v.enc_conv2, v.init_conv, v.kmm.w_query};
  if (!p.kmm.share_qk) out.push_back(v.kmm.w_key);
  out.push_back(v.fuse_g);
  out.push_back(v.fuse_d);
  out.push_back(v.dec_conv1);
  out.push_back(v.dec_conv2);
  return out;
}

// [3,H,W] frame -> [D,H/4,W/4] features: two stride-2 3x3 convs, ReLU after
// each. H and W must be multiples of 4 so every downsample is exact.
inline Var encode_frame(Tape& tape, const ModelVars& v, Var image) {
  const Tensor& img = tape.value(image);
  if (img.ndim() != 3 || img.dim(0) != 3) {
    throw std::invalid_argument("encode_frame: image must be [3,H,W], got " + img.shape_str());
  }
  if (img.dim(1) % 4 != 0 || img.dim(2) % 4 != 0) {
    throw std::invalid_argument("encode_frame: H and W must be divisible by 4, got " +
                                img.shape_str());
  }
  Var h1 = tape.relu(tape.conv2d(image, v.enc_conv1, 2));
  return tape.relu(tape.conv2d(h1, v.enc_conv2, 2));
}

// Linear per-pixel readout of features into K heatmap channels. No
// activation: the first frame's heatmaps must be free to go negative during
// early training, and the loss target already lives in [0,1].
inline Var init_pose(Tape& tape, const ModelVars& v, Var features) {
  return tape.conv2d(features, v.init_conv, 1);
}

// Refine carried heatmaps against the next frame's features. The carried
// heatmaps go first in the channel concat so their slot is stable regardless
// of D. The ReLU between the two convs keeps the fuse head nonlinear.
inline Var fuse(Tape& tape, const ModelVars& v, Var carried, Var features) {
  Var joined = tape.concat_channels(carried, features);
  return tape.conv2d(tape.relu(tape.conv2d(joined, v.fuse_g, 1)), v.fuse_d, 1);
}

// Two-layer decode head shared by the first frame and all fused frames.
inline Var decode(Tape& tape, const ModelVars& v, Var x) {
  return tape.conv2d(tape.relu(tape.conv2d(x, v.dec_conv1, 1)), v.dec_conv2, 1);
}

// Everything a sequence forward pass produces, all still on the tape:
//   heatmaps[t]          final prediction M_{t+1} for frame t (size T)
//   initial_heatmaps[i]  carried heatmap fed to fuse at step i (size T-1)
//   attentions[i]        joint-mixing weights at step i (size T-1)
struct SequenceOutput {
  std::vector<Var> heatmaps;
  std::vector<Var> initial_heatmaps;
  std::vector<Var> attentions;
};

// Run the recurrence over a full clip. Frame 1 gets its heatmaps from the
// initializer; every later frame carries the previous final heatmaps across
// via the joint mixer (or a variant's replacement) and refines them.
inline SequenceOutput forward_sequence(Tape& tape, const ModelParams& p, const ModelVars& v,
                                       const std::vector<Tensor>& frames) {
  if (frames.empty()) throw std::invalid_argument("forward_sequence: no frames");
  for (const Tensor& f : frames) {
    if (f.ndim() != 3 || f.dim(0) != 3 || !f.same_shape(frames[0])) {
      throw std::invalid_argument("forward_sequence: frames must all be [3,H,W]");
    }
  }
  bool unit_divisor = (p.variant == Variant::no_sqrt_d);

  SequenceOutput out;
  std::vector<Var> feats(frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    feats[t] = encode_frame(tape, v, tape.input(frames[t]));
  }

  Var current = decode(tape, v, init_pose(tape, v, feats[0]));
  out.heatmaps.push_back(current);

  for (std::size_t t = 0; t + 1 < frames.size(); ++t) {
    Var carried;
    if (p.variant == Variant::identity_attention) {
      // Mixing disabled: the previous heatmaps pass through untouched. The
      // recorded attention is the identity they're implicitly mixed by.
      carried = current;
      Tensor eye({p.joints, p.joints});
      for (std::size_t k = 0; k < p.joints; ++k) eye(k, k) = 1.0;
      out.attentions.push_back(tape.input(eye));
    } else if (p.variant == Variant::heatmap_qk) {
      // Correlate heatmaps instead of features: query from the current
      // prediction, key from the next frame's initializer output.
      Var next_guess = init_pose(tape, v, feats[t + 1]);
      KmmOutput mix = kmm_forward(tape, current, next_guess, current, v.kmm, unit_divisor);
      carried = mix.initial_heatmaps;
      out.attentions.push_back(mix.attention);
    } else {
      KmmOutput mix = kmm_forward(tape, feats[t], feats[t + 1], current, v.kmm, unit_divisor);
      carried = mix.initial_heatmaps;
      out.attentions.push_back(mix.attention);
      if (p.variant == Variant::residual) {
        // Keep the previous frame's answer in the carried signal alongside
        // the mixed one.
        carried = tape.add(carried, current);
      }
    }
    out.initial_heatmaps.push_back(carried);
    current = decode(tape, v, fuse(tape, v, carried, feats[t + 1]));
    out.heatmaps.push_back(current);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "KIMN", u32 version, u32 record count, then per record a
// u16 name length, the UTF-8 name, and the tensor serialized exactly as a
// .ten file. Metadata rides along as scalar tensors so the format stays
// single-typed.

inline std::string encode_checkpoint(const ModelParams& p) {
  validate_params(p);
  std::vector<std::pair<std::string, Tensor>> records;
  records.emplace_back("meta.joints", Tensor::scalar(static_cast<double>(p.joints)));
  records.emplace_back("meta.channels", Tensor::scalar(static_cast<double>(p.channels)));
  records.emplace_back("meta.variant",
                       Tensor::scalar(static_cast<double>(static_cast<int>(p.variant))));
  for (auto& [name, t] : named_tensors(p)) records.emplace_back(name, *t);

  std::string bytes = "KIMN";
  detail::put_u32_le(bytes, 1);
  detail::put_u32_le(bytes, static_cast<std::uint32_t>(records.size()));
  for (auto& [name, t] : records) {
    if (name.empty() || name.size() > 0xffff) {
      throw std::runtime_error("checkpoint: bad record name");
    }
    bytes.push_back(static_cast<char>(name.size() & 0xff));
    bytes.push_back(static_cast<char>((name.size() >> 8) & 0xff));
    bytes += name;
    bytes += encode_tensor(t);
  }
  return bytes;
}

namespace detail {

inline double checkpoint_scalar(const std::vector<std::pair<std::string, Tensor>>& records,
                                const std::string& name) {
  for (auto& [rname, t] : records) {
    if (rname != name) continue;
    if (t.size() != 1) throw std::runtime_error("checkpoint: " + name + " must be a scalar");
    return t[0];
  }
  throw std::runtime_error("checkpoint: missing record " + name);
}

inline std::size_t checkpoint_count(const std::vector<std::pair<std::string, Tensor>>& records,
                                    const std::string& name) {
  double v = checkpoint_scalar(records, name);
  if (!(v >= 1.0) || v != std::floor(v) || v > 65536.0) {
    throw std::runtime_error("checkpoint: " + name + " must be a small positive integer");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace detail

inline ModelParams decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "KIMN") != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (detail::get_u32_le(raw + 4) != 1) throw std::runtime_error("checkpoint: unsupported version");
  std::size_t count = detail::get_u32_le(raw + 8);

  std::vector<std::pair<std::string, Tensor>> records;
  std::size_t pos = 12;
  for (std::size_t i = 0; i < count; ++i) {
    if (bytes.size() < pos + 2) throw std::runtime_error("checkpoint: truncated record header");
    std::size_t len = raw[pos] | (static_cast<std::size_t>(raw[pos + 1]) << 8);
    pos += 2;
    if (len == 0 || bytes.size() < pos + len) {
      throw std::runtime_error("checkpoint: truncated record name");
    }
    std::string name = bytes.substr(pos, len);
    pos += len;
    records.emplace_back(std::move(name), decode_tensor_at(bytes, pos, "checkpoint record"));
  }
  if (pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");

  ModelParams p;
  p.joints = detail::checkpoint_count(records, "meta.joints");
  p.channels = detail::checkpoint_count(records, "meta.channels");
  double vraw = detail::checkpoint_scalar(records, "meta.variant");
  if (vraw != std::floor(vraw) || vraw < 0.0 || vraw > 5.0) {
    throw std::runtime_error("checkpoint: unknown variant code");
  }
  p.variant = static_cast<Variant>(static_cast<int>(vraw));
  p.kmm.share_qk = (p.variant == Variant::share_qk);

  auto take = [&](const std::string& name) {
    for (auto& [rname, t] : records) {
      if (rname == name) return t;
    }
    throw std::runtime_error("checkpoint: missing record " + name);
  };
  p.enc_conv1 = take("enc_conv1");
  p.enc_conv2 = take("enc_conv2");
  p.init_conv = take("init_conv");
  p.kmm.w_query = take("kmm.w_query");
  p.kmm.w_key = p.kmm.share_qk ? p.kmm.w_query : take("kmm.w_key");
  p.fuse_g = take("fuse_g");
  p.fuse_d = take("fuse_d");
  p.dec_conv1 = take("dec_conv1");
  p.dec_conv2 = take("dec_conv2");

  std::size_t expect = 3 + named_tensors(p).size();
  if (records.size() != expect) throw std::runtime_error("checkpoint: unexpected record count");
  validate_params(p);
  return p;
}

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(p));
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(detail::read_file_bytes(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace kinepose
