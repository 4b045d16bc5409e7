#pragma once

// Joint mixing: each joint's heatmap in the next frame is seeded by an
// attention-weighted mixture of all joints' heatmaps in the current frame.
// Rows of the K x K attention matrix index next-frame joints, columns index
// current-frame joints, and rows are softmax-normalized, so every inferred
// heatmap is a convex combination of the previous ones.

#include <cmath>
#include <cstdio>
#include <string>

#include "autodiff.hpp"
#include "tensor.hpp"

namespace kinepose {

struct KmmParams {
  Tensor w_query;  // [K, D, 1, 1]
  Tensor w_key;    // [K, D, 1, 1]; aliased to w_query when share_qk
  bool share_qk = false;
};

// Tape handles for the projection weights. With share_qk both fields hold the
// same leaf, so both uses feed one accumulated gradient.
struct KmmVars {
  Var w_query;
  Var w_key;
};

inline KmmVars register_kmm(Tape& tape, const KmmParams& p) {
  KmmVars v;
  v.w_query = tape.input(p.w_query);
  v.w_key = p.share_qk ? v.w_query : tape.input(p.w_key);
  return v;
}

struct QkFeatures {
  Var f_q;  // [(h*w) x K], joints as columns
  Var f_k;  // [K x (h*w)], joints as rows
};

// Bias-free 1x1 conv + ReLU per frame, flattened row-major over space.
inline QkFeatures project_qk(Tape& t, Var f_t, Var f_next, const KmmVars& w) {
  Var q = t.relu(t.conv2d(f_t, w.w_query));
  Var k = t.relu(t.conv2d(f_next, w.w_key));
  const Tensor& qv = t.value(q);
  const std::size_t joints = qv.dim(0), hw = qv.dim(1) * qv.dim(2);
  QkFeatures out;
  out.f_q = t.transpose(t.reshape(q, {joints, hw}));
  out.f_k = t.reshape(k, {joints, hw});
  return out;
}

// raw[j][i] = (f_k row j) . (f_q column i) / sqrt(d): similarity of
// next-frame joint j with current-frame joint i. d is the shared flattened
// spatial dimension; unit_divisor skips the sqrt(d) normalization.
inline Var temporal_correlation(Tape& t, Var f_q, Var f_k, std::size_t d,
                                bool unit_divisor = false) {
  const Tensor& kv = t.value(f_k);
  const Tensor& qv = t.value(f_q);
  if (d == 0 || kv.dim(1) != d || qv.dim(0) != d) {
    throw std::invalid_argument("temporal_correlation: inner dimension mismatch, d=" +
                                std::to_string(d) + " vs " + kv.shape_str() + " and " +
                                qv.shape_str());
  }
  Var prod = t.matmul(f_k, f_q);
  return unit_divisor ? prod : t.scale(prod, 1.0 / std::sqrt(static_cast<double>(d)));
}

// Row-wise stabilized softmax; sqrt(d) scaling already sits in the raw input.
inline Var attention_weights(Tape& t, Var raw) { return t.softmax_rows(raw, 1.0); }

inline Var infer_initial_heatmaps(Tape& t, Var attention, Var m_t) {
  const Tensor& a = t.value(attention);
  const Tensor& m = t.value(m_t);
  if (a.ndim() != 2 || m.ndim() != 3 || a.dim(0) != a.dim(1) || a.dim(0) != m.dim(0)) {
    throw std::invalid_argument("infer_initial_heatmaps: joint-count mismatch, attention " +
                                a.shape_str() + " vs heatmaps " + m.shape_str());
  }
  const std::size_t joints = m.dim(0), h = m.dim(1), w = m.dim(2);
  Var flat = t.matmul(attention, t.reshape(m_t, {joints, h * w}));
  return t.reshape(flat, {joints, h, w});
}

struct KmmOutput {
  Var initial_heatmaps;  // [K, h, w]
  Var attention;         // [K, K]
  Var raw;               // [K, K] scaled correlations
  std::size_t d = 0;     // h*w
};

inline KmmOutput kmm_forward(Tape& t, Var f_t, Var f_next, Var m_t, const KmmVars& w,
                             bool unit_divisor = false) {
  QkFeatures qk = project_qk(t, f_t, f_next, w);
  KmmOutput out;
  out.d = t.value(qk.f_q).dim(0);
  out.raw = temporal_correlation(t, qk.f_q, qk.f_k, out.d, unit_divisor);
  out.attention = attention_weights(t, out.raw);
  out.initial_heatmaps = infer_initial_heatmaps(t, out.attention, m_t);
  return out;
}

// Plain-text form for eyeballing attention: K rows of K comma-separated
// values, full round-trip precision.
inline std::string attention_to_csv(const Tensor& a) {
  std::string out;
  char buf[40];
  for (std::size_t r = 0; r < a.dim(0); ++r) {
    for (std::size_t c = 0; c < a.dim(1); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", a(r, c));
      out += buf;
      out += (c + 1 < a.dim(1)) ? "," : "\n";
    }
  }
  return out;
}

}  // namespace kinepose
