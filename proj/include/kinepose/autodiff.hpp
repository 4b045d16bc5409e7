#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Tape owns every value produced during a forward pass. Operations append
// nodes in topological order; backward() does one reverse sweep and
// accumulates (adds) gradients into shared inputs, so a value used twice
// receives both gradient paths. Tensors are immutable once recorded.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace kinepose {

struct Var {
  std::uint32_t id = 0xffffffffu;
  bool valid() const { return id != 0xffffffffu; }
  bool operator==(const Var&) const = default;
};

class Tape {
 public:
  // Registers a leaf value. Leaves participate in backward like any other
  // value; trainable parameters are leaves whose gradients get read out.
  Var input(Tensor t) {
    check_finite(t, "input");
    return push(std::move(t));
  }

  const Tensor& value(Var v) const { return values_.at(v.id); }

  // Valid after backward(); zero tensor for values the root does not reach.
  const Tensor& grad(Var v) const { return grads_.at(v.id); }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- operations ----

  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0)) {
      throw std::invalid_argument("matmul: dimension mismatch " + A.shape_str() + " vs " +
                                  B.shape_str());
    }
    Tensor C({A.dim(0), B.dim(1)});
    matmul_accumulate(A, B, C);
    return record(Op::matmul, a, b, std::move(C), 0.0, "matmul");
  }

  // Cross-correlation (no kernel flip), kernel 1x1 or 3x3, zero padding of 1
  // for 3x3 so stride-1 output keeps the spatial size. Stride 2 halves it.
  Var conv2d(Var x, Var w, std::size_t stride = 1) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    if (X.ndim() != 3 || W.ndim() != 4) {
      throw std::invalid_argument("conv2d: expected 3-D input and 4-D weights, got " +
                                  X.shape_str() + " and " + W.shape_str());
    }
    if (W.dim(1) != X.dim(0)) {
      throw std::invalid_argument("conv2d: channel mismatch, input " + X.shape_str() +
                                  " vs weights " + W.shape_str());
    }
    const std::size_t k = W.dim(2);
    if (k != W.dim(3) || (k != 1 && k != 3)) {
      throw std::invalid_argument("conv2d: kernel must be 1x1 or 3x3, got " + W.shape_str());
    }
    if (stride != 1 && stride != 2) {
      throw std::invalid_argument("conv2d: stride must be 1 or 2");
    }
    const std::size_t pad = (k - 1) / 2;
    const std::size_t h = X.dim(1), wd = X.dim(2);
    if (h + 2 * pad < k || wd + 2 * pad < k) {
      throw std::invalid_argument("conv2d: input " + X.shape_str() + " smaller than kernel");
    }
    Tensor out({W.dim(0), (h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1});
    conv_forward(X, W, out, stride);
    return record(Op::conv2d, x, w, std::move(out), static_cast<double>(stride), "conv2d");
  }

  Var relu(Var x) {
    const Tensor& X = value(x);
    Tensor out = Tensor::zeros_like(X);
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] > 0.0 ? X[i] : 0.0;
    return record(Op::relu, x, Var{}, std::move(out), 0.0, "relu");
  }

  // Row-wise softmax of x/scale, stabilized by subtracting the row maximum.
  Var softmax_rows(Var x, double scale) {
    const Tensor& X = value(x);
    if (X.ndim() != 2) {
      throw std::invalid_argument("softmax_rows: expected 2-D input, got " + X.shape_str());
    }
    if (!(scale > 0.0)) throw std::invalid_argument("softmax_rows: scale must be positive");
    if (!X.all_finite()) throw std::invalid_argument("softmax_rows: non-finite input");
    const std::size_t rows = X.dim(0), cols = X.dim(1);
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
      double mx = -1e300;
      for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, X(r, c) / scale);
      double sum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        double e = std::exp(X(r, c) / scale - mx);
        out(r, c) = e;
        sum += e;
      }
      // True softmax is strictly positive; keep that even where exp
      // underflows, so downstream convex-combination guarantees hold.
      for (std::size_t c = 0; c < cols; ++c) {
        out(r, c) = std::max(out(r, c) / sum, std::numeric_limits<double>::denorm_min());
      }
    }
    return record(Op::softmax_rows, x, Var{}, std::move(out), scale, "softmax_rows");
  }

  // Mean over all elements of the squared difference.
  Var mse_loss(Var pred, Var target) {
    const Tensor& P = value(pred);
    const Tensor& T = value(target);
    if (!P.same_shape(T)) {
      throw std::invalid_argument("mse_loss: shape mismatch " + P.shape_str() + " vs " +
                                  T.shape_str());
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < P.size(); ++i) {
      double d = P[i] - T[i];
      acc += d * d;
    }
    return record(Op::mse_loss, pred, target, Tensor::scalar(acc / static_cast<double>(P.size())),
                  0.0, "mse_loss");
  }

  Var add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) {
      throw std::invalid_argument("add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
    }
    Tensor out = Tensor::zeros_like(A);
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
    return record(Op::add, a, b, std::move(out), 0.0, "add");
  }

  Var scale(Var x, double factor) {
    const Tensor& X = value(x);
    Tensor out = Tensor::zeros_like(X);
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = factor * X[i];
    return record(Op::scale, x, Var{}, std::move(out), factor, "scale");
  }

  Var sum(Var x) {
    const Tensor& X = value(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) acc += X[i];
    return record(Op::sum, x, Var{}, Tensor::scalar(acc), 0.0, "sum");
  }

  Var reshape(Var x, std::vector<std::size_t> shape) {
    const Tensor& X = value(x);
    Tensor out(std::move(shape), std::vector<double>(X.data(), X.data() + X.size()));
    return record(Op::reshape, x, Var{}, std::move(out), 0.0, "reshape");
  }

  Var transpose(Var x) {
    const Tensor& X = value(x);
    if (X.ndim() != 2) {
      throw std::invalid_argument("transpose: expected 2-D input, got " + X.shape_str());
    }
    Tensor out({X.dim(1), X.dim(0)});
    for (std::size_t i = 0; i < X.dim(0); ++i)
      for (std::size_t j = 0; j < X.dim(1); ++j) out(j, i) = X(i, j);
    return record(Op::transpose, x, Var{}, std::move(out), 0.0, "transpose");
  }

  Var concat_channels(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() != 3 || B.ndim() != 3 || A.dim(1) != B.dim(1) || A.dim(2) != B.dim(2)) {
      throw std::invalid_argument("concat_channels: incompatible shapes " + A.shape_str() +
                                  " and " + B.shape_str());
    }
    Tensor out({A.dim(0) + B.dim(0), A.dim(1), A.dim(2)});
    std::copy(A.data(), A.data() + A.size(), out.data());
    std::copy(B.data(), B.data() + B.size(), out.data() + A.size());
    return record(Op::concat_channels, a, b, std::move(out), 0.0, "concat_channels");
  }

  // ---- backward ----

  void backward(Var root) {
    if (value(root).size() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got " +
                                  value(root).shape_str());
    }
    grads_.clear();
    grads_.resize(values_.size());
    grads_[root.id] = Tensor::scalar(1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const Node& n = *it;
      if (grads_[n.out.id].size() == 0) continue;  // root does not reach this node
      step_backward(n);
    }
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      if (grads_[i].size() == 0) grads_[i] = Tensor::zeros_like(values_[i]);
    }
  }

 private:
  enum class Op : std::uint8_t {
    matmul,
    conv2d,
    relu,
    softmax_rows,
    mse_loss,
    add,
    scale,
    sum,
    reshape,
    transpose,
    concat_channels,
  };

  struct Node {
    Op op;
    Var a, b;
    Var out;
    double aux;
  };

  Var push(Tensor t) {
    values_.push_back(std::move(t));
    return Var{static_cast<std::uint32_t>(values_.size() - 1)};
  }

  Var record(Op op, Var a, Var b, Tensor out, double aux, const char* name) {
    check_finite(out, name);
    Var v = push(std::move(out));
    nodes_.push_back(Node{op, a, b, v, aux});
    return v;
  }

  static void check_finite(const Tensor& t, const char* name) {
    if (!t.all_finite()) {
      throw std::runtime_error(std::string(name) + ": produced non-finite values");
    }
  }

  Tensor& grad_buf(Var v) {
    Tensor& g = grads_[v.id];
    if (g.size() == 0) g = Tensor::zeros_like(values_[v.id]);
    return g;
  }

  static void matmul_accumulate(const Tensor& A, const Tensor& B, Tensor& C) {
    const std::size_t M = A.dim(0), N = A.dim(1), P = B.dim(1);
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t kk = 0; kk < N; ++kk) {
        const double av = A(i, kk);
        const double* brow = B.data() + kk * P;
        double* crow = C.data() + i * P;
        for (std::size_t j = 0; j < P; ++j) crow[j] += av * brow[j];
      }
    }
  }

  static void conv_forward(const Tensor& X, const Tensor& W, Tensor& out, std::size_t stride) {
    const std::size_t cin = X.dim(0), h = X.dim(1), w = X.dim(2);
    const std::size_t cout = W.dim(0), k = W.dim(2);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
    const std::size_t oh = out.dim(1), ow = out.dim(2);
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = W.data()[((co * cin + ci) * k + ky) * k + kx];
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride) + dy;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              const double* xrow = X.data() + (ci * h + iy) * w;
              double* orow = out.data() + (co * oh + oy) * ow;
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride) + dx;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                orow[ox] += wv * xrow[ix];
              }
            }
          }
        }
      }
    }
  }

  void step_backward(const Node& n) {
    const Tensor& g = grads_[n.out.id];
    switch (n.op) {
      case Op::matmul: {
        const Tensor& A = values_[n.a.id];
        const Tensor& B = values_[n.b.id];
        Tensor& ga = grad_buf(n.a);
        Tensor& gb = grad_buf(n.b);
        const std::size_t M = A.dim(0), N = A.dim(1), P = B.dim(1);
        // ga += g . B^T ; gb += A^T . g
        for (std::size_t i = 0; i < M; ++i) {
          for (std::size_t j = 0; j < P; ++j) {
            const double gv = g(i, j);
            const double* brow = B.data() + j;
            for (std::size_t kk = 0; kk < N; ++kk) ga(i, kk) += gv * brow[kk * P];
          }
        }
        for (std::size_t kk = 0; kk < N; ++kk) {
          for (std::size_t i = 0; i < M; ++i) {
            const double av = A(i, kk);
            const double* grow = g.data() + i * P;
            double* gbrow = gb.data() + kk * P;
            for (std::size_t j = 0; j < P; ++j) gbrow[j] += av * grow[j];
          }
        }
        break;
      }
      case Op::conv2d: {
        const Tensor& X = values_[n.a.id];
        const Tensor& W = values_[n.b.id];
        Tensor& gx = grad_buf(n.a);
        Tensor& gw = grad_buf(n.b);
        const auto stride = static_cast<std::size_t>(n.aux);
        const std::size_t cin = X.dim(0), h = X.dim(1), w = X.dim(2);
        const std::size_t cout = W.dim(0), k = W.dim(2);
        const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
        const std::size_t oh = g.dim(1), ow = g.dim(2);
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                const double wv = W.data()[((co * cin + ci) * k + ky) * k + kx];
                double wacc = 0.0;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride) + dy;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  const double* xrow = X.data() + (ci * h + iy) * w;
                  double* gxrow = gx.data() + (ci * h + iy) * w;
                  const double* grow = g.data() + (co * oh + oy) * ow;
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride) + dx;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    wacc += grow[ox] * xrow[ix];
                    gxrow[ix] += grow[ox] * wv;
                  }
                }
                gw.data()[((co * cin + ci) * k + ky) * k + kx] += wacc;
              }
            }
          }
        }
        break;
      }
      case Op::relu: {
        const Tensor& X = values_[n.a.id];
        Tensor& gx = grad_buf(n.a);
        for (std::size_t i = 0; i < X.size(); ++i) {
          if (X[i] > 0.0) gx[i] += g[i];
        }
        break;
      }
      case Op::softmax_rows: {
        const Tensor& Y = values_[n.out.id];
        Tensor& gx = grad_buf(n.a);
        const std::size_t rows = Y.dim(0), cols = Y.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g(r, c) * Y(r, c);
          for (std::size_t c = 0; c < cols; ++c) {
            gx(r, c) += Y(r, c) * (g(r, c) - dot) / n.aux;
          }
        }
        break;
      }
      case Op::mse_loss: {
        const Tensor& P = values_[n.a.id];
        const Tensor& T = values_[n.b.id];
        Tensor& gp = grad_buf(n.a);
        Tensor& gt = grad_buf(n.b);
        const double gs = g[0] * 2.0 / static_cast<double>(P.size());
        for (std::size_t i = 0; i < P.size(); ++i) {
          const double d = gs * (P[i] - T[i]);
          gp[i] += d;
          gt[i] -= d;
        }
        break;
      }
      case Op::add: {
        Tensor& ga = grad_buf(n.a);
        Tensor& gb = grad_buf(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::scale: {
        Tensor& gx = grad_buf(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += n.aux * g[i];
        break;
      }
      case Op::sum: {
        Tensor& gx = grad_buf(n.a);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
        break;
      }
      case Op::reshape: {
        Tensor& gx = grad_buf(n.a);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        break;
      }
      case Op::transpose: {
        Tensor& gx = grad_buf(n.a);
        const std::size_t rows = gx.dim(0), cols = gx.dim(1);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) gx(i, j) += g(j, i);
        break;
      }
      case Op::concat_channels: {
        Tensor& ga = grad_buf(n.a);
        Tensor& gb = grad_buf(n.b);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[ga.size() + i];
        break;
      }
    }
  }

  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::vector<Node> nodes_;
};

}  // namespace kinepose
