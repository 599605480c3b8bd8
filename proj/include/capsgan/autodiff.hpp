#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "capsgan/errors.hpp"
#include "capsgan/tensor.hpp"

namespace capsgan {

enum class Op {
  kConstant,
  kParameter,
  kMatmul,
  kConv2d,
  kConv2dTranspose,
  kAdd,
  kMul,
  kBiasAdd,
  kRelu,
  kLeakyRelu,
  kSigmoid,
  kTanh,
  kSoftmax,
  kReshape,
  kConcat,
  kVectorNorm,
  kReduceSum,
  kReduceMean,
  kSquare,
  kMaxWithScalar,
  kSquash,
  kCapsGroup,
  kCapsPredict,
  kCapsWeightedSum,
  kCapsAgreement,
  kSigmoidBce,
};

namespace detail {

struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kNormEps = 1e-12;

}  // namespace detail

// One recorded operation. `value` is computed eagerly when the node is built.
struct Node {
  Op op = Op::kConstant;
  std::vector<int> inputs;
  Tensor value;
  int stride = 1;
  int pad = 0;
  int axis = 0;
  int dim = 0;        // capsule dimension for kCapsGroup
  double scalar = 0;  // leaky slope / max threshold
  bool flag = false;  // cosine agreement for kCapsAgreement
};

// Dynamic reverse-mode tape. Build ops forward, then call backward(loss) to
// populate per-node gradients. Forward evaluation is pure: rebuilding the same
// ops on the same inputs yields bit-identical values.
class Graph {
 public:
  int constant(Tensor t) {
    Node n;
    n.op = Op::kConstant;
    n.value = std::move(t);
    return push(std::move(n));
  }

  int parameter(Tensor t) {
    Node n;
    n.op = Op::kParameter;
    n.value = std::move(t);
    return push(std::move(n));
  }

  // c[i,j] = sum_k a[i,k] * b[k,j]
  int matmul(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
      throw ShapeError("matmul: incompatible shapes " + shape_str(ta.shape()) + " x " +
                       shape_str(tb.shape()));
    std::size_t m = ta.dim(0), k = ta.dim(1), nn = tb.dim(1);
    Node n;
    n.op = Op::kMatmul;
    n.inputs = {a, b};
    n.value = Tensor({m, nn});
    const double* pa = ta.data();
    const double* pb = tb.data();
    double* pc = n.value.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) {
        double aik = pa[i * k + kk];
        if (aik == 0.0) continue;
        const double* brow = pb + kk * nn;
        double* crow = pc + i * nn;
        for (std::size_t j = 0; j < nn; ++j) crow[j] += aik * brow[j];
      }
    return push(std::move(n));
  }

  // x [N,Cin,H,W], kernel [Cout,Cin,kh,kw] -> [N,Cout,Ho,Wo],
  // Ho = (H + 2*pad - kh)/stride + 1 (floor).
  int conv2d(int x, int kernel, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tk = val(kernel);
    if (tx.rank() != 4 || tk.rank() != 4)
      throw ShapeError("conv2d: expected rank-4 input and kernel, got " + shape_str(tx.shape()) +
                       " and " + shape_str(tk.shape()));
    if (tx.dim(1) != tk.dim(1))
      throw ShapeError("conv2d: input channels " + std::to_string(tx.dim(1)) +
                       " do not match kernel channels " + std::to_string(tk.dim(1)));
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
    long H = static_cast<long>(tx.dim(2)), W = static_cast<long>(tx.dim(3));
    long kh = static_cast<long>(tk.dim(2)), kw = static_cast<long>(tk.dim(3));
    if (H + 2 * pad < kh || W + 2 * pad < kw)
      throw ShapeError("conv2d: kernel " + shape_str(tk.shape()) + " larger than padded input " +
                       shape_str(tx.shape()) + " with pad " + std::to_string(pad));
    std::size_t N = tx.dim(0), Cin = tx.dim(1), Cout = tk.dim(0);
    std::size_t Ho = static_cast<std::size_t>((H + 2 * pad - kh) / stride + 1);
    std::size_t Wo = static_cast<std::size_t>((W + 2 * pad - kw) / stride + 1);
    Node n;
    n.op = Op::kConv2d;
    n.inputs = {x, kernel};
    n.stride = stride;
    n.pad = pad;
    n.value = Tensor({N, Cout, Ho, Wo});
    const double* px = tx.data();
    const double* pk = tk.data();
    double* py = n.value.data();
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ho = 0; ho < Ho; ++ho)
          for (std::size_t wo = 0; wo < Wo; ++wo) {
            double acc = 0.0;
            for (std::size_t ci = 0; ci < Cin; ++ci)
              for (long i = 0; i < kh; ++i) {
                long h = static_cast<long>(ho) * stride - pad + i;
                if (h < 0 || h >= H) continue;
                const double* xrow = px + ((b * Cin + ci) * H + h) * W;
                const double* krow = pk + ((co * Cin + ci) * kh + i) * kw;
                for (long j = 0; j < kw; ++j) {
                  long w = static_cast<long>(wo) * stride - pad + j;
                  if (w < 0 || w >= W) continue;
                  acc += xrow[w] * krow[j];
                }
              }
            py[((b * Cout + co) * Ho + ho) * Wo + wo] = acc;
          }
    return push(std::move(n));
  }

  // x [N,C1,H,W], kernel [C1,C2,kh,kw] -> [N,C2,Ho,Wo],
  // Ho = (H-1)*stride - 2*pad + kh. Adjoint of conv2d: for matching shapes,
  // <conv2d(x,k), y> == <x, conv2d_transpose(y,k)>.
  int conv2d_transpose(int x, int kernel, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tk = val(kernel);
    if (tx.rank() != 4 || tk.rank() != 4)
      throw ShapeError("conv2d_transpose: expected rank-4 input and kernel, got " +
                       shape_str(tx.shape()) + " and " + shape_str(tk.shape()));
    if (tx.dim(1) != tk.dim(0))
      throw ShapeError("conv2d_transpose: input channels " + std::to_string(tx.dim(1)) +
                       " do not match kernel leading dim " + std::to_string(tk.dim(0)));
    if (stride < 1 || pad < 0)
      throw ShapeError("conv2d_transpose: stride must be >= 1 and pad >= 0");
    long H = static_cast<long>(tx.dim(2)), W = static_cast<long>(tx.dim(3));
    long kh = static_cast<long>(tk.dim(2)), kw = static_cast<long>(tk.dim(3));
    long Ho = (H - 1) * stride - 2 * pad + kh;
    long Wo = (W - 1) * stride - 2 * pad + kw;
    if (Ho < 1 || Wo < 1)
      throw ShapeError("conv2d_transpose: output " + std::to_string(Ho) + "x" +
                       std::to_string(Wo) + " collapses for input " + shape_str(tx.shape()));
    std::size_t N = tx.dim(0), C1 = tx.dim(1), C2 = tk.dim(1);
    Node n;
    n.op = Op::kConv2dTranspose;
    n.inputs = {x, kernel};
    n.stride = stride;
    n.pad = pad;
    n.value = Tensor({N, C2, static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)});
    const double* px = tx.data();
    const double* pk = tk.data();
    double* py = n.value.data();
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t c1 = 0; c1 < C1; ++c1)
        for (long h = 0; h < H; ++h)
          for (long w = 0; w < W; ++w) {
            double v = px[((b * C1 + c1) * H + h) * W + w];
            if (v == 0.0) continue;
            for (std::size_t c2 = 0; c2 < C2; ++c2) {
              const double* kbase = pk + (c1 * C2 + c2) * kh * kw;
              double* ybase = py + (b * C2 + c2) * Ho * Wo;
              for (long i = 0; i < kh; ++i) {
                long ho = h * stride - pad + i;
                if (ho < 0 || ho >= Ho) continue;
                for (long j = 0; j < kw; ++j) {
                  long wo = w * stride - pad + j;
                  if (wo < 0 || wo >= Wo) continue;
                  ybase[ho * Wo + wo] += v * kbase[i * kw + j];
                }
              }
            }
          }
    return push(std::move(n));
  }

  int add(int a, int b) { return binary(Op::kAdd, a, b); }
  int mul(int a, int b) { return binary(Op::kMul, a, b); }

  // x [N,F] + bias [F], or x [N,C,H,W] + bias [C] (broadcast over batch and,
  // for images, spatial positions).
  int bias_add(int x, int bias) {
    const Tensor& tx = val(x);
    const Tensor& tb = val(bias);
    if (tb.rank() != 1) throw ShapeError("bias_add: bias must be rank 1, got " + shape_str(tb.shape()));
    if (tx.rank() == 2) {
      if (tx.dim(1) != tb.dim(0))
        throw ShapeError("bias_add: features " + std::to_string(tx.dim(1)) +
                         " do not match bias size " + std::to_string(tb.dim(0)));
    } else if (tx.rank() == 4) {
      if (tx.dim(1) != tb.dim(0))
        throw ShapeError("bias_add: channels " + std::to_string(tx.dim(1)) +
                         " do not match bias size " + std::to_string(tb.dim(0)));
    } else {
      throw ShapeError("bias_add: expected rank-2 or rank-4 input, got " + shape_str(tx.shape()));
    }
    Node n;
    n.op = Op::kBiasAdd;
    n.inputs = {x, bias};
    n.value = tx;
    double* py = n.value.data();
    const double* pb = tb.data();
    if (tx.rank() == 2) {
      std::size_t N = tx.dim(0), F = tx.dim(1);
      for (std::size_t b = 0; b < N; ++b)
        for (std::size_t f = 0; f < F; ++f) py[b * F + f] += pb[f];
    } else {
      std::size_t N = tx.dim(0), C = tx.dim(1), HW = tx.dim(2) * tx.dim(3);
      for (std::size_t b = 0; b < N; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          double bv = pb[c];
          double* row = py + (b * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) row[i] += bv;
        }
    }
    return push(std::move(n));
  }

  int relu(int x) {
    Node n = unary(Op::kRelu, x);
    for (std::size_t i = 0; i < n.value.size(); ++i)
      if (n.value[i] < 0.0) n.value[i] = 0.0;
    return push(std::move(n));
  }

  int leaky_relu(int x, double slope) {
    Node n = unary(Op::kLeakyRelu, x);
    n.scalar = slope;
    for (std::size_t i = 0; i < n.value.size(); ++i)
      if (n.value[i] < 0.0) n.value[i] *= slope;
    return push(std::move(n));
  }

  int sigmoid(int x) {
    Node n = unary(Op::kSigmoid, x);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = detail::stable_sigmoid(n.value[i]);
    return push(std::move(n));
  }

  int tanh(int x) {
    Node n = unary(Op::kTanh, x);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::tanh(n.value[i]);
    return push(std::move(n));
  }

  // Stable softmax along `axis`; each fiber sums to 1 within rounding.
  int softmax(int x, int axis) {
    const Tensor& tx = val(x);
    check_axis(tx, axis, "softmax");
    Node n = unary(Op::kSoftmax, x);
    n.axis = axis;
    auto v = detail::axis_view(tx.shape(), static_cast<std::size_t>(axis));
    double* p = n.value.data();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        double mx = p[o * v.extent * v.inner + i];
        for (std::size_t l = 1; l < v.extent; ++l)
          mx = std::max(mx, p[(o * v.extent + l) * v.inner + i]);
        double sum = 0.0;
        for (std::size_t l = 0; l < v.extent; ++l) {
          double& e = p[(o * v.extent + l) * v.inner + i];
          e = std::exp(e - mx);
          sum += e;
        }
        for (std::size_t l = 0; l < v.extent; ++l) p[(o * v.extent + l) * v.inner + i] /= sum;
      }
    return push(std::move(n));
  }

  int reshape(int x, Shape shape) {
    const Tensor& tx = val(x);
    Node n;
    n.op = Op::kReshape;
    n.inputs = {x};
    n.value = tx.reshaped(std::move(shape));
    return push(std::move(n));
  }

  int concat(const std::vector<int>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: needs at least one input");
    const Tensor& t0 = val(xs[0]);
    check_axis(t0, axis, "concat");
    Shape out = t0.shape();
    std::size_t ax = static_cast<std::size_t>(axis);
    for (std::size_t i = 1; i < xs.size(); ++i) {
      const Tensor& ti = val(xs[i]);
      if (ti.rank() != t0.rank())
        throw ShapeError("concat: rank mismatch " + shape_str(t0.shape()) + " vs " +
                         shape_str(ti.shape()));
      for (std::size_t d = 0; d < t0.rank(); ++d)
        if (d != ax && ti.dim(d) != out[d])
          throw ShapeError("concat: shapes " + shape_str(t0.shape()) + " and " +
                           shape_str(ti.shape()) + " differ off axis " + std::to_string(axis));
      out[ax] += ti.dim(ax);
    }
    Node n;
    n.op = Op::kConcat;
    n.inputs = xs;
    n.axis = axis;
    n.value = Tensor(out);
    auto v = detail::axis_view(out, ax);
    double* p = n.value.data();
    std::size_t offset = 0;
    for (int id : xs) {
      const Tensor& ti = val(id);
      std::size_t ext = ti.dim(ax);
      const double* q = ti.data();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t l = 0; l < ext; ++l)
          for (std::size_t i = 0; i < v.inner; ++i)
            p[(o * v.extent + offset + l) * v.inner + i] = q[(o * ext + l) * v.inner + i];
      offset += ext;
    }
    return push(std::move(n));
  }

  // Euclidean norm along `axis`; the axis is squeezed out of the result.
  int vector_norm(int x, int axis) {
    const Tensor& tx = val(x);
    check_axis(tx, axis, "vector_norm");
    Node n;
    n.op = Op::kVectorNorm;
    n.inputs = {x};
    n.axis = axis;
    n.value = Tensor(detail::drop_axis(tx.shape(), static_cast<std::size_t>(axis)));
    auto v = detail::axis_view(tx.shape(), static_cast<std::size_t>(axis));
    const double* p = tx.data();
    double* q = n.value.data();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        double ss = 0.0;
        for (std::size_t l = 0; l < v.extent; ++l) {
          double e = p[(o * v.extent + l) * v.inner + i];
          ss += e * e;
        }
        q[o * v.inner + i] = std::sqrt(ss);
      }
    return push(std::move(n));
  }

  static constexpr int kAllAxes = -1;

  int reduce_sum(int x, int axis = kAllAxes) { return reduction(Op::kReduceSum, x, axis); }
  int reduce_mean(int x, int axis = kAllAxes) { return reduction(Op::kReduceMean, x, axis); }

  int square(int x) {
    Node n = unary(Op::kSquare, x);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= n.value[i];
    return push(std::move(n));
  }

  int max_with_scalar(int x, double threshold) {
    Node n = unary(Op::kMaxWithScalar, x);
    n.scalar = threshold;
    for (std::size_t i = 0; i < n.value.size(); ++i)
      if (!(n.value[i] > threshold)) n.value[i] = threshold;
    return push(std::move(n));
  }

  // Capsule nonlinearity along the last axis:
  //   v = s * |s|^2 / ((1 + |s|^2) * sqrt(|s|^2 + 1e-12))
  // Shrinks short vectors toward 0 and caps long ones below unit length.
  int squash(int x) {
    const Tensor& tx = val(x);
    if (tx.rank() < 1) throw ShapeError("squash: input must have at least one axis");
    Node n = unary(Op::kSquash, x);
    std::size_t d = tx.dim(tx.rank() - 1);
    std::size_t fibers = tx.size() / d;
    double* p = n.value.data();
    for (std::size_t f = 0; f < fibers; ++f) {
      double* s = p + f * d;
      double nsq = 0.0;
      for (std::size_t a = 0; a < d; ++a) nsq += s[a] * s[a];
      double scale = nsq / ((1.0 + nsq) * std::sqrt(nsq + detail::kNormEps));
      for (std::size_t a = 0; a < d; ++a) s[a] *= scale;
    }
    return push(std::move(n));
  }

  // [N, G*d, H, W] -> [N, G*H*W, d]: conv channels regrouped into capsules of
  // dimension d, one capsule per (channel group, spatial position).
  int caps_group(int x, int capsule_dim) {
    const Tensor& tx = val(x);
    if (tx.rank() != 4)
      throw ShapeError("caps_group: expected rank-4 input, got " + shape_str(tx.shape()));
    std::size_t C = tx.dim(1);
    std::size_t d = static_cast<std::size_t>(capsule_dim);
    if (capsule_dim < 1 || C % d != 0)
      throw ShapeError("caps_group: channels " + std::to_string(C) +
                       " not divisible by capsule dim " + std::to_string(capsule_dim));
    std::size_t N = tx.dim(0), G = C / d, H = tx.dim(2), W = tx.dim(3);
    Node n;
    n.op = Op::kCapsGroup;
    n.inputs = {x};
    n.dim = capsule_dim;
    n.value = Tensor({N, G * H * W, d});
    const double* p = tx.data();
    double* q = n.value.data();
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t g = 0; g < G; ++g)
        for (std::size_t a = 0; a < d; ++a)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
              q[(b * G * H * W + (g * H + h) * W + w) * d + a] =
                  p[((b * C + g * d + a) * H + h) * W + w];
    return push(std::move(n));
  }

  // u [B,I,din], W [I,J,dout,din] -> uhat [B,I,J,dout], uhat = W_ij u_i.
  int caps_predict(int u, int w) {
    const Tensor& tu = val(u);
    const Tensor& tw = val(w);
    if (tu.rank() != 3 || tw.rank() != 4 || tu.dim(1) != tw.dim(0) || tu.dim(2) != tw.dim(3))
      throw ShapeError("caps_predict: incompatible shapes " + shape_str(tu.shape()) + " and " +
                       shape_str(tw.shape()));
    std::size_t B = tu.dim(0), I = tu.dim(1), din = tu.dim(2), J = tw.dim(1), dout = tw.dim(2);
    Node n;
    n.op = Op::kCapsPredict;
    n.inputs = {u, w};
    n.value = Tensor({B, I, J, dout});
    const double* pu = tu.data();
    const double* pw = tw.data();
    double* q = n.value.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < I; ++i) {
        const double* uvec = pu + (b * I + i) * din;
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t o = 0; o < dout; ++o) {
            const double* wrow = pw + (((i * J + j) * dout) + o) * din;
            double acc = 0.0;
            for (std::size_t a = 0; a < din; ++a) acc += wrow[a] * uvec[a];
            q[((b * I + i) * J + j) * dout + o] = acc;
          }
      }
    return push(std::move(n));
  }

  // c [B,I,J], uhat [B,I,J,dout] -> s [B,J,dout], s_j = sum_i c_ij uhat_ij.
  int caps_weighted_sum(int c, int uhat) {
    const Tensor& tc = val(c);
    const Tensor& tu = val(uhat);
    if (tc.rank() != 3 || tu.rank() != 4 || tc.dim(0) != tu.dim(0) || tc.dim(1) != tu.dim(1) ||
        tc.dim(2) != tu.dim(2))
      throw ShapeError("caps_weighted_sum: incompatible shapes " + shape_str(tc.shape()) +
                       " and " + shape_str(tu.shape()));
    std::size_t B = tc.dim(0), I = tc.dim(1), J = tc.dim(2), dout = tu.dim(3);
    Node n;
    n.op = Op::kCapsWeightedSum;
    n.inputs = {c, uhat};
    n.value = Tensor({B, J, dout});
    const double* pc = tc.data();
    const double* pu = tu.data();
    double* q = n.value.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) {
          double cij = pc[(b * I + i) * J + j];
          const double* uvec = pu + ((b * I + i) * J + j) * dout;
          double* svec = q + (b * J + j) * dout;
          for (std::size_t o = 0; o < dout; ++o) svec[o] += cij * uvec[o];
        }
    return push(std::move(n));
  }

  // uhat [B,I,J,dout], v [B,J,dout] -> a [B,I,J]. Dot-product agreement by
  // default; cosine variant normalizes by both lengths (epsilon-guarded).
  int caps_agreement(int uhat, int v, bool cosine) {
    const Tensor& tu = val(uhat);
    const Tensor& tv = val(v);
    if (tu.rank() != 4 || tv.rank() != 3 || tu.dim(0) != tv.dim(0) || tu.dim(2) != tv.dim(1) ||
        tu.dim(3) != tv.dim(2))
      throw ShapeError("caps_agreement: incompatible shapes " + shape_str(tu.shape()) + " and " +
                       shape_str(tv.shape()));
    std::size_t B = tu.dim(0), I = tu.dim(1), J = tu.dim(2), dout = tu.dim(3);
    Node n;
    n.op = Op::kCapsAgreement;
    n.inputs = {uhat, v};
    n.flag = cosine;
    n.value = Tensor({B, I, J});
    const double* pu = tu.data();
    const double* pv = tv.data();
    double* q = n.value.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) {
          const double* uvec = pu + ((b * I + i) * J + j) * dout;
          const double* vvec = pv + (b * J + j) * dout;
          double dot = 0.0;
          for (std::size_t o = 0; o < dout; ++o) dot += uvec[o] * vvec[o];
          if (cosine) {
            double nu = 0.0, nv = 0.0;
            for (std::size_t o = 0; o < dout; ++o) {
              nu += uvec[o] * uvec[o];
              nv += vvec[o] * vvec[o];
            }
            dot /= std::sqrt(nu) * std::sqrt(nv) + detail::kNormEps;
          }
          q[(b * I + i) * J + j] = dot;
        }
    return push(std::move(n));
  }

  // Mean binary cross-entropy on logits, computed in softplus form so large
  // magnitudes cannot overflow: mean(max(x,0) + log1p(exp(-|x|)) - t*x).
  int sigmoid_bce(int logits, int targets) {
    const Tensor& tx = val(logits);
    const Tensor& tt = val(targets);
    if (!tx.same_shape(tt))
      throw ShapeError("sigmoid_bce: logits " + shape_str(tx.shape()) + " vs targets " +
                       shape_str(tt.shape()));
    Node n;
    n.op = Op::kSigmoidBce;
    n.inputs = {logits, targets};
    double acc = 0.0;
    for (std::size_t i = 0; i < tx.size(); ++i) {
      double x = tx[i];
      acc += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - tt[i] * x;
    }
    n.value = Tensor::scalar(acc / static_cast<double>(tx.size()));
    return push(std::move(n));
  }

  // Convenience wrappers built from constants; no implicit broadcasting.
  int scale(int x, double c) { return mul(x, constant(Tensor::full(val(x).shape(), c))); }
  int add_scalar(int x, double c) { return add(x, constant(Tensor::full(val(x).shape(), c))); }
  int sub(int a, int b) { return add(a, scale(b, -1.0)); }

  std::size_t node_count() const { return nodes_.size(); }
  const Tensor& value(int id) const { return val(id); }
  Op op(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }

  // Reverse sweep from a scalar loss. Gradients for every parameter node are
  // defined afterwards (zero when the loss does not depend on it).
  void backward(int loss) {
    const Tensor& lv = val(loss);
    if (lv.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(lv.shape()));
    grads_.assign(nodes_.size(), Tensor());
    has_grads_ = true;
    grads_[static_cast<std::size_t>(loss)] = Tensor::full(lv.shape(), 1.0);
    for (int id = loss; id >= 0; --id) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      const Tensor& g = grads_[static_cast<std::size_t>(id)];
      if (g.empty() || n.op == Op::kConstant || n.op == Op::kParameter) continue;
      backward_node(id, n, g);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id)
      if (nodes_[id].op == Op::kParameter && grads_[id].empty())
        grads_[id] = Tensor(nodes_[id].value.shape());
  }

  const Tensor& grad(int id) const {
    if (!has_grads_) throw std::logic_error("grad: backward has not run");
    const Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) {
      static const Tensor empty;
      return empty;
    }
    return g;
  }

  // Gradient tensor for `id`, materializing zeros if the loss never reached it.
  Tensor grad_or_zero(int id) const {
    const Tensor& g = grad(id);
    if (!g.empty()) return g;
    return Tensor(val(id).shape());
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool has_grads_ = false;

  const Tensor& val(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw std::out_of_range("graph: bad node id " + std::to_string(id));
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  int push(Node n) {
    nodes_.push_back(std::move(n));
    has_grads_ = false;
    return static_cast<int>(nodes_.size() - 1);
  }

  Node unary(Op op, int x) {
    Node n;
    n.op = op;
    n.inputs = {x};
    n.value = val(x);
    return n;
  }

  int binary(Op op, int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb))
      throw ShapeError(std::string(op == Op::kAdd ? "add" : "mul") + ": shape mismatch " +
                       shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    Node n;
    n.op = op;
    n.inputs = {a, b};
    n.value = ta;
    if (op == Op::kAdd)
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] += tb[i];
    else
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= tb[i];
    return push(std::move(n));
  }

  static void check_axis(const Tensor& t, int axis, const char* op) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= t.rank())
      throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                       " out of range for shape " + shape_str(t.shape()));
  }

  int reduction(Op op, int x, int axis) {
    const Tensor& tx = val(x);
    Node n;
    n.op = op;
    n.inputs = {x};
    n.axis = axis;
    const char* name = op == Op::kReduceSum ? "reduce_sum" : "reduce_mean";
    if (axis == kAllAxes) {
      double acc = 0.0;
      for (std::size_t i = 0; i < tx.size(); ++i) acc += tx[i];
      if (op == Op::kReduceMean) acc /= static_cast<double>(tx.size());
      n.value = Tensor::scalar(acc);
    } else {
      check_axis(tx, axis, name);
      auto v = detail::axis_view(tx.shape(), static_cast<std::size_t>(axis));
      n.value = Tensor(detail::drop_axis(tx.shape(), static_cast<std::size_t>(axis)));
      const double* p = tx.data();
      double* q = n.value.data();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
          double acc = 0.0;
          for (std::size_t l = 0; l < v.extent; ++l) acc += p[(o * v.extent + l) * v.inner + i];
          if (op == Op::kReduceMean) acc /= static_cast<double>(v.extent);
          q[o * v.inner + i] = acc;
        }
    }
    return push(std::move(n));
  }

  Tensor& gbuf(int id) {
    Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g = Tensor(val(id).shape());
    return g;
  }

  void backward_node(int id, const Node& n, const Tensor& g) {
    switch (n.op) {
      case Op::kMatmul: {
        const Tensor& ta = val(n.inputs[0]);
        const Tensor& tb = val(n.inputs[1]);
        std::size_t m = ta.dim(0), k = ta.dim(1), nn = tb.dim(1);
        Tensor& da = gbuf(n.inputs[0]);
        Tensor& db = gbuf(n.inputs[1]);
        const double* pg = g.data();
        const double* pa = ta.data();
        const double* pb = tb.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double* grow = pg + i * nn;
            const double* brow = pb + kk * nn;
            double acc = 0.0;
            for (std::size_t j = 0; j < nn; ++j) acc += grow[j] * brow[j];
            da[i * k + kk] += acc;
          }
        for (std::size_t kk = 0; kk < k; ++kk)
          for (std::size_t i = 0; i < m; ++i) {
            double aik = pa[i * k + kk];
            if (aik == 0.0) continue;
            const double* grow = pg + i * nn;
            double* brow = db.data() + kk * nn;
            for (std::size_t j = 0; j < nn; ++j) brow[j] += aik * grow[j];
          }
        break;
      }
      case Op::kConv2d: {
        const Tensor& tx = val(n.inputs[0]);
        const Tensor& tk = val(n.inputs[1]);
        Tensor& dx = gbuf(n.inputs[0]);
        Tensor& dk = gbuf(n.inputs[1]);
        long H = static_cast<long>(tx.dim(2)), W = static_cast<long>(tx.dim(3));
        long kh = static_cast<long>(tk.dim(2)), kw = static_cast<long>(tk.dim(3));
        std::size_t N = tx.dim(0), Cin = tx.dim(1), Cout = tk.dim(0);
        std::size_t Ho = n.value.dim(2), Wo = n.value.dim(3);
        int s = n.stride, p = n.pad;
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t ho = 0; ho < Ho; ++ho)
              for (std::size_t wo = 0; wo < Wo; ++wo) {
                double go = g[((b * Cout + co) * Ho + ho) * Wo + wo];
                if (go == 0.0) continue;
                for (std::size_t ci = 0; ci < Cin; ++ci)
                  for (long i = 0; i < kh; ++i) {
                    long h = static_cast<long>(ho) * s - p + i;
                    if (h < 0 || h >= H) continue;
                    for (long j = 0; j < kw; ++j) {
                      long w = static_cast<long>(wo) * s - p + j;
                      if (w < 0 || w >= W) continue;
                      std::size_t xi = ((b * Cin + ci) * H + h) * W + w;
                      std::size_t ki = ((co * Cin + ci) * kh + i) * kw + j;
                      dx[xi] += go * tk[ki];
                      dk[ki] += go * tx[xi];
                    }
                  }
              }
        break;
      }
      case Op::kConv2dTranspose: {
        const Tensor& tx = val(n.inputs[0]);
        const Tensor& tk = val(n.inputs[1]);
        Tensor& dx = gbuf(n.inputs[0]);
        Tensor& dk = gbuf(n.inputs[1]);
        long H = static_cast<long>(tx.dim(2)), W = static_cast<long>(tx.dim(3));
        long kh = static_cast<long>(tk.dim(2)), kw = static_cast<long>(tk.dim(3));
        long Ho = static_cast<long>(n.value.dim(2)), Wo = static_cast<long>(n.value.dim(3));
        std::size_t N = tx.dim(0), C1 = tx.dim(1), C2 = tk.dim(1);
        int s = n.stride, p = n.pad;
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t c1 = 0; c1 < C1; ++c1)
            for (long h = 0; h < H; ++h)
              for (long w = 0; w < W; ++w) {
                std::size_t xi = ((b * C1 + c1) * H + h) * W + w;
                double xv = tx[xi];
                double acc = 0.0;
                for (std::size_t c2 = 0; c2 < C2; ++c2) {
                  const double* kbase = tk.data() + (c1 * C2 + c2) * kh * kw;
                  const double* gbase = g.data() + (b * C2 + c2) * Ho * Wo;
                  for (long i = 0; i < kh; ++i) {
                    long ho = h * s - p + i;
                    if (ho < 0 || ho >= Ho) continue;
                    for (long j = 0; j < kw; ++j) {
                      long wo = w * s - p + j;
                      if (wo < 0 || wo >= Wo) continue;
                      double go = gbase[ho * Wo + wo];
                      acc += go * kbase[i * kw + j];
                      dk[(c1 * C2 + c2) * kh * kw + i * kw + j] += xv * go;
                    }
                  }
                }
                dx[xi] += acc;
              }
        break;
      }
      case Op::kAdd: {
        Tensor& da = gbuf(n.inputs[0]);
        Tensor& db = gbuf(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i];
          db[i] += g[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& ta = val(n.inputs[0]);
        const Tensor& tb = val(n.inputs[1]);
        Tensor& da = gbuf(n.inputs[0]);
        Tensor& db = gbuf(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i] * tb[i];
          db[i] += g[i] * ta[i];
        }
        break;
      }
      case Op::kBiasAdd: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        Tensor& db = gbuf(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        if (tx.rank() == 2) {
          std::size_t N = tx.dim(0), F = tx.dim(1);
          for (std::size_t b = 0; b < N; ++b)
            for (std::size_t f = 0; f < F; ++f) db[f] += g[b * F + f];
        } else {
          std::size_t N = tx.dim(0), C = tx.dim(1), HW = tx.dim(2) * tx.dim(3);
          for (std::size_t b = 0; b < N; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double* row = g.data() + (b * C + c) * HW;
              double acc = 0.0;
              for (std::size_t i = 0; i < HW; ++i) acc += row[i];
              db[c] += acc;
            }
        }
        break;
      }
      case Op::kRelu: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (tx[i] > 0.0) dx[i] += g[i];
        break;
      }
      case Op::kLeakyRelu: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (tx[i] > 0.0 ? 1.0 : n.scalar);
        break;
      }
      case Op::kSigmoid: {
        Tensor& dx = gbuf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = n.value[i];
          dx[i] += g[i] * y * (1.0 - y);
        }
        break;
      }
      case Op::kTanh: {
        Tensor& dx = gbuf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = n.value[i];
          dx[i] += g[i] * (1.0 - y * y);
        }
        break;
      }
      case Op::kSoftmax: {
        Tensor& dx = gbuf(n.inputs[0]);
        auto v = detail::axis_view(n.value.shape(), static_cast<std::size_t>(n.axis));
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t i = 0; i < v.inner; ++i) {
            double dot = 0.0;
            for (std::size_t l = 0; l < v.extent; ++l) {
              std::size_t idx = (o * v.extent + l) * v.inner + i;
              dot += g[idx] * n.value[idx];
            }
            for (std::size_t l = 0; l < v.extent; ++l) {
              std::size_t idx = (o * v.extent + l) * v.inner + i;
              dx[idx] += n.value[idx] * (g[idx] - dot);
            }
          }
        break;
      }
      case Op::kReshape: {
        Tensor& dx = gbuf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        break;
      }
      case Op::kConcat: {
        auto v = detail::axis_view(n.value.shape(), static_cast<std::size_t>(n.axis));
        std::size_t offset = 0;
        for (int in : n.inputs) {
          const Tensor& ti = val(in);
          Tensor& di = gbuf(in);
          std::size_t ext = ti.dim(static_cast<std::size_t>(n.axis));
          for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t l = 0; l < ext; ++l)
              for (std::size_t i = 0; i < v.inner; ++i)
                di[(o * ext + l) * v.inner + i] +=
                    g[(o * v.extent + offset + l) * v.inner + i];
          offset += ext;
        }
        break;
      }
      case Op::kVectorNorm: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        auto v = detail::axis_view(tx.shape(), static_cast<std::size_t>(n.axis));
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t i = 0; i < v.inner; ++i) {
            double norm = n.value[o * v.inner + i];
            double go = g[o * v.inner + i];
            double inv = go / std::max(norm, detail::kNormEps);
            for (std::size_t l = 0; l < v.extent; ++l) {
              std::size_t idx = (o * v.extent + l) * v.inner + i;
              dx[idx] += tx[idx] * inv;
            }
          }
        break;
      }
      case Op::kReduceSum:
      case Op::kReduceMean: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        if (n.axis == kAllAxes) {
          double go = g[0];
          if (n.op == Op::kReduceMean) go /= static_cast<double>(tx.size());
          for (std::size_t i = 0; i < tx.size(); ++i) dx[i] += go;
        } else {
          auto v = detail::axis_view(tx.shape(), static_cast<std::size_t>(n.axis));
          for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t i = 0; i < v.inner; ++i) {
              double go = g[o * v.inner + i];
              if (n.op == Op::kReduceMean) go /= static_cast<double>(v.extent);
              for (std::size_t l = 0; l < v.extent; ++l)
                dx[(o * v.extent + l) * v.inner + i] += go;
            }
        }
        break;
      }
      case Op::kSquare: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * 2.0 * tx[i];
        break;
      }
      case Op::kMaxWithScalar: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (tx[i] > n.scalar) dx[i] += g[i];
        break;
      }
      case Op::kSquash: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        std::size_t d = tx.dim(tx.rank() - 1);
        std::size_t fibers = tx.size() / d;
        for (std::size_t f = 0; f < fibers; ++f) {
          const double* s = tx.data() + f * d;
          const double* go = g.data() + f * d;
          double* ds = dx.data() + f * d;
          double q = 0.0, gdots = 0.0;
          for (std::size_t a = 0; a < d; ++a) {
            q += s[a] * s[a];
            gdots += go[a] * s[a];
          }
          double root = std::sqrt(q + detail::kNormEps);
          double scale = q / ((1.0 + q) * root);
          // d scale / d q, from scale = q / ((1+q) sqrt(q+eps))
          double dscale = (2.0 * (q + detail::kNormEps) - q * (1.0 + q)) /
                          (2.0 * (1.0 + q) * (1.0 + q) * (q + detail::kNormEps) * root);
          for (std::size_t a = 0; a < d; ++a)
            ds[a] += scale * go[a] + gdots * dscale * 2.0 * s[a];
        }
        break;
      }
      case Op::kCapsGroup: {
        const Tensor& tx = val(n.inputs[0]);
        Tensor& dx = gbuf(n.inputs[0]);
        std::size_t C = tx.dim(1);
        std::size_t d = static_cast<std::size_t>(n.dim);
        std::size_t N = tx.dim(0), G = C / d, H = tx.dim(2), W = tx.dim(3);
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t gg = 0; gg < G; ++gg)
            for (std::size_t a = 0; a < d; ++a)
              for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                  dx[((b * C + gg * d + a) * H + h) * W + w] +=
                      g[(b * G * H * W + (gg * H + h) * W + w) * d + a];
        break;
      }
      case Op::kCapsPredict: {
        const Tensor& tu = val(n.inputs[0]);
        const Tensor& tw = val(n.inputs[1]);
        Tensor& du = gbuf(n.inputs[0]);
        Tensor& dw = gbuf(n.inputs[1]);
        std::size_t B = tu.dim(0), I = tu.dim(1), din = tu.dim(2);
        std::size_t J = tw.dim(1), dout = tw.dim(2);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < I; ++i) {
            const double* uvec = tu.data() + (b * I + i) * din;
            double* duvec = du.data() + (b * I + i) * din;
            for (std::size_t j = 0; j < J; ++j)
              for (std::size_t o = 0; o < dout; ++o) {
                double go = g[((b * I + i) * J + j) * dout + o];
                if (go == 0.0) continue;
                const double* wrow = tw.data() + ((i * J + j) * dout + o) * din;
                double* dwrow = dw.data() + ((i * J + j) * dout + o) * din;
                for (std::size_t a = 0; a < din; ++a) {
                  dwrow[a] += go * uvec[a];
                  duvec[a] += go * wrow[a];
                }
              }
          }
        break;
      }
      case Op::kCapsWeightedSum: {
        const Tensor& tc = val(n.inputs[0]);
        const Tensor& tu = val(n.inputs[1]);
        Tensor& dc = gbuf(n.inputs[0]);
        Tensor& du = gbuf(n.inputs[1]);
        std::size_t B = tc.dim(0), I = tc.dim(1), J = tc.dim(2), dout = tu.dim(3);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j) {
              const double* uvec = tu.data() + ((b * I + i) * J + j) * dout;
              double* duvec = du.data() + ((b * I + i) * J + j) * dout;
              const double* gvec = g.data() + (b * J + j) * dout;
              double cij = tc[(b * I + i) * J + j];
              double acc = 0.0;
              for (std::size_t o = 0; o < dout; ++o) {
                acc += gvec[o] * uvec[o];
                duvec[o] += gvec[o] * cij;
              }
              dc[(b * I + i) * J + j] += acc;
            }
        break;
      }
      case Op::kCapsAgreement: {
        const Tensor& tu = val(n.inputs[0]);
        const Tensor& tv = val(n.inputs[1]);
        Tensor& du = gbuf(n.inputs[0]);
        Tensor& dv = gbuf(n.inputs[1]);
        std::size_t B = tu.dim(0), I = tu.dim(1), J = tu.dim(2), dout = tu.dim(3);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j) {
              double go = g[(b * I + i) * J + j];
              if (go == 0.0) continue;
              const double* uvec = tu.data() + ((b * I + i) * J + j) * dout;
              const double* vvec = tv.data() + (b * J + j) * dout;
              double* duvec = du.data() + ((b * I + i) * J + j) * dout;
              double* dvvec = dv.data() + (b * J + j) * dout;
              if (!n.flag) {
                for (std::size_t o = 0; o < dout; ++o) {
                  duvec[o] += go * vvec[o];
                  dvvec[o] += go * uvec[o];
                }
              } else {
                double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
                for (std::size_t o = 0; o < dout; ++o) {
                  dot += uvec[o] * vvec[o];
                  nu2 += uvec[o] * uvec[o];
                  nv2 += vvec[o] * vvec[o];
                }
                double nu = std::max(std::sqrt(nu2), detail::kNormEps);
                double nv = std::max(std::sqrt(nv2), detail::kNormEps);
                double den = nu * nv + detail::kNormEps;
                double den2 = den * den;
                for (std::size_t o = 0; o < dout; ++o) {
                  duvec[o] += go * (vvec[o] / den - dot * (uvec[o] / nu) * nv / den2);
                  dvvec[o] += go * (uvec[o] / den - dot * (vvec[o] / nv) * nu / den2);
                }
              }
            }
        break;
      }
      case Op::kSigmoidBce: {
        const Tensor& tx = val(n.inputs[0]);
        const Tensor& tt = val(n.inputs[1]);
        Tensor& dx = gbuf(n.inputs[0]);
        Tensor& dt = gbuf(n.inputs[1]);
        double go = g[0] / static_cast<double>(tx.size());
        for (std::size_t i = 0; i < tx.size(); ++i) {
          dx[i] += go * (detail::stable_sigmoid(tx[i]) - tt[i]);
          dt[i] += go * -tx[i];
        }
        break;
      }
      case Op::kConstant:
      case Op::kParameter:
        break;
    }
  }
};

}  // namespace capsgan
