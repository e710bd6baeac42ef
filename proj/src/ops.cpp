#include "dpbnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dpbn {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstRowMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Upper bound on im2col block size in scalars (256 KB in double, L2-resident).
constexpr std::size_t kColBlockScalars = std::size_t{1} << 15;

struct ConvGeometry {
  int cin = 0, cout = 0, k = 0, pad = 0, stride = 1;
  Dims3 in, out;
  std::size_t rows() const { return static_cast<std::size_t>(cin) * k * k * k; }
  std::size_t out_numel() const { return out.numel(); }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, int stride) {
  if (input.rank() != 4) throw std::invalid_argument("conv3d input must be [C,H,W,D], got " + shape_str(input.shape()));
  if (kernel.rank() != 5) {
    throw std::invalid_argument("conv3d kernel must be [C_out,C_in,k,k,k], got " + shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != input.dim(0)) {
    throw std::invalid_argument("conv3d channel mismatch: kernel " + shape_str(kernel.shape()) + " vs input " +
                                shape_str(input.shape()));
  }
  const int k = kernel.dim(2);
  if (kernel.dim(3) != k || kernel.dim(4) != k || k % 2 == 0) {
    throw std::invalid_argument("conv3d kernel must be cubic with odd size, got " + shape_str(kernel.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv3d stride must be positive");
  ConvGeometry g;
  g.cin = input.dim(0);
  g.cout = kernel.dim(0);
  g.k = k;
  g.pad = (k - 1) / 2;
  g.stride = stride;
  g.in = input.spatial();
  g.out = {(g.in.h - 1) / stride + 1, (g.in.w - 1) / stride + 1, (g.in.d - 1) / stride + 1};
  return g;
}

// Visits every (row r, block column j) of the im2col matrix for output
// positions [n0, n0 + nb), passing the source flat index or -1 for zero
// padding. Blocks hold whole output lines along D.
template <typename Visit>
void for_each_tap(const ConvGeometry& g, std::size_t n0, std::size_t nb, Padding padding, Visit&& visit) {
  const int k = g.k, s = g.stride, od_n = g.out.d;
  const std::size_t line0 = n0 / static_cast<std::size_t>(od_n);
  const std::size_t lines = nb / static_cast<std::size_t>(od_n);
  const bool replicate = padding == Padding::replicate;
  std::size_t r = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const std::ptrdiff_t cbase = static_cast<std::ptrdiff_t>(ci) * static_cast<std::ptrdiff_t>(g.in.numel());
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        for (int kd = 0; kd < k; ++kd, ++r) {
          for (std::size_t l = 0; l < lines; ++l) {
            const std::size_t line = line0 + l;
            const int oh = static_cast<int>(line / static_cast<std::size_t>(g.out.w));
            const int ow = static_cast<int>(line % static_cast<std::size_t>(g.out.w));
            int ih = oh * s - g.pad + kh;
            int iw = ow * s - g.pad + kw;
            const std::size_t j0 = l * static_cast<std::size_t>(od_n);
            if (replicate) {
              ih = std::clamp(ih, 0, g.in.h - 1);
              iw = std::clamp(iw, 0, g.in.w - 1);
            } else if (ih < 0 || ih >= g.in.h || iw < 0 || iw >= g.in.w) {
              for (int od = 0; od < od_n; ++od) visit(r, j0 + static_cast<std::size_t>(od), std::ptrdiff_t{-1});
              continue;
            }
            const std::ptrdiff_t base = cbase + (static_cast<std::ptrdiff_t>(ih) * g.in.w + iw) * g.in.d;
            for (int od = 0; od < od_n; ++od) {
              int id = od * s - g.pad + kd;
              if (replicate) {
                id = std::clamp(id, 0, g.in.d - 1);
              } else if (id < 0 || id >= g.in.d) {
                visit(r, j0 + static_cast<std::size_t>(od), std::ptrdiff_t{-1});
                continue;
              }
              visit(r, j0 + static_cast<std::size_t>(od), base + id);
            }
          }
        }
      }
    }
  }
}

// Zero-padding traversal by output line: for row r and the line starting at
// block column j0, output positions od in [lo, hi) read source start + od * stride
// and the rest are padding.
template <typename SpanFn>
void for_each_tap_span(const ConvGeometry& g, std::size_t n0, std::size_t nb, SpanFn&& fn) {
  const int k = g.k, s = g.stride, od_n = g.out.d;
  const std::size_t line0 = n0 / static_cast<std::size_t>(od_n);
  const std::size_t lines = nb / static_cast<std::size_t>(od_n);
  std::size_t r = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const std::ptrdiff_t cbase = static_cast<std::ptrdiff_t>(ci) * static_cast<std::ptrdiff_t>(g.in.numel());
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        for (int kd = 0; kd < k; ++kd, ++r) {
          const int dd = kd - g.pad;
          const int lo = dd >= 0 ? 0 : (-dd + s - 1) / s;
          const int hi = std::max(lo, g.in.d - 1 - dd < 0 ? 0 : std::min(od_n, (g.in.d - 1 - dd) / s + 1));
          for (std::size_t l = 0; l < lines; ++l) {
            const std::size_t line = line0 + l;
            const int ih = static_cast<int>(line / static_cast<std::size_t>(g.out.w)) * s - g.pad + kh;
            const int iw = static_cast<int>(line % static_cast<std::size_t>(g.out.w)) * s - g.pad + kw;
            const std::size_t j0 = l * static_cast<std::size_t>(od_n);
            if (ih < 0 || ih >= g.in.h || iw < 0 || iw >= g.in.w) {
              fn(r, j0, 0, 0, std::ptrdiff_t{0});
              continue;
            }
            fn(r, j0, lo, hi, cbase + (static_cast<std::ptrdiff_t>(ih) * g.in.w + iw) * g.in.d + dd);
          }
        }
      }
    }
  }
}

void im2col(const ConvGeometry& g, const Real* src, std::size_t n0, std::size_t nb, Padding padding, Real* cp) {
  if (padding == Padding::replicate) {
    for_each_tap(g, n0, nb, padding, [&](std::size_t r, std::size_t j, std::ptrdiff_t s) {
      cp[r * nb + j] = s < 0 ? Real(0) : src[s];
    });
    return;
  }
  const int od_n = g.out.d, st = g.stride;
  for_each_tap_span(g, n0, nb, [&](std::size_t r, std::size_t j0, int lo, int hi, std::ptrdiff_t start) {
    Real* row = cp + r * nb + j0;
    for (int od = 0; od < lo; ++od) row[od] = 0;
    for (int od = lo; od < hi; ++od) row[od] = src[start + static_cast<std::ptrdiff_t>(od) * st];
    for (int od = hi; od < od_n; ++od) row[od] = 0;
  });
}

void col2im(const ConvGeometry& g, const Real* dp, std::size_t n0, std::size_t nb, Padding padding, Real* dsrc) {
  if (padding == Padding::replicate) {
    for_each_tap(g, n0, nb, padding, [&](std::size_t r, std::size_t j, std::ptrdiff_t s) {
      if (s >= 0) dsrc[s] += dp[r * nb + j];
    });
    return;
  }
  const int st = g.stride;
  for_each_tap_span(g, n0, nb, [&](std::size_t r, std::size_t j0, int lo, int hi, std::ptrdiff_t start) {
    const Real* row = dp + r * nb + j0;
    for (int od = lo; od < hi; ++od) dsrc[start + static_cast<std::ptrdiff_t>(od) * st] += row[od];
  });
}

std::size_t block_width(const ConvGeometry& g) {
  const std::size_t line = static_cast<std::size_t>(g.out.d);
  const std::size_t fit = kColBlockScalars / std::max<std::size_t>(1, g.rows()) / line * line;
  return std::max(line, fit);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_shape(a, b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

// Thin convolutions (one or two output channels) spend most of their time
// building the im2col matrix; these walk kernel taps directly instead.
bool use_direct(const ConvGeometry& g, Padding padding) {
  return padding == Padding::zero && g.stride == 1 && g.cout <= 2;
}

// Valid output range [lo, hi) along an axis of extent n for tap offset off.
inline void tap_range(int n, int off, int& lo, int& hi) {
  lo = std::max(0, -off);
  hi = std::min(n, n - off);
}

template <typename LineFn>
void for_each_tap_line(const ConvGeometry& g, LineFn&& fn) {
  const int k = g.k;
  for (int kh = 0; kh < k; ++kh) {
    int h0, h1;
    tap_range(g.in.h, kh - g.pad, h0, h1);
    for (int kw = 0; kw < k; ++kw) {
      int w0, w1;
      tap_range(g.in.w, kw - g.pad, w0, w1);
      for (int kd = 0; kd < k; ++kd) {
        int d0, d1;
        tap_range(g.in.d, kd - g.pad, d0, d1);
        if (h0 >= h1 || w0 >= w1 || d0 >= d1) continue;
        const std::size_t tap = (static_cast<std::size_t>(kh) * k + kw) * k + kd;
        const std::ptrdiff_t shift =
            (static_cast<std::ptrdiff_t>(kh - g.pad) * g.in.w + (kw - g.pad)) * g.in.d + (kd - g.pad);
        for (int oh = h0; oh < h1; ++oh)
          for (int ow = w0; ow < w1; ++ow) {
            const std::size_t o = (static_cast<std::size_t>(oh) * g.in.w + ow) * g.in.d;
            fn(tap, o + static_cast<std::size_t>(d0), static_cast<std::ptrdiff_t>(o + d0) + shift,
               static_cast<std::size_t>(d1 - d0));
          }
      }
    }
  }
}

void conv3d_direct(const ConvGeometry& g, const Real* in, const Real* kernel, Real* out) {
  const std::size_t n = g.in.numel(), taps = static_cast<std::size_t>(g.k) * g.k * g.k;
  for (int co = 0; co < g.cout; ++co)
    for (int ci = 0; ci < g.cin; ++ci) {
      const Real* kc = kernel + (static_cast<std::size_t>(co) * g.cin + ci) * taps;
      const Real* src = in + static_cast<std::size_t>(ci) * n;
      Real* dst = out + static_cast<std::size_t>(co) * n;
      for_each_tap_line(g, [&](std::size_t tap, std::size_t o, std::ptrdiff_t i, std::size_t len) {
        const Real w = kc[tap];
        for (std::size_t t = 0; t < len; ++t) dst[o + t] += w * src[i + static_cast<std::ptrdiff_t>(t)];
      });
    }
}

void conv3d_direct_backward(const ConvGeometry& g, const Real* in, const Real* kernel, const Real* grad_out,
                            Real* dkernel, Real* din) {
  const std::size_t n = g.in.numel(), taps = static_cast<std::size_t>(g.k) * g.k * g.k;
  for (int co = 0; co < g.cout; ++co)
    for (int ci = 0; ci < g.cin; ++ci) {
      const std::size_t kofs = (static_cast<std::size_t>(co) * g.cin + ci) * taps;
      const Real* src = in + static_cast<std::size_t>(ci) * n;
      const Real* go = grad_out + static_cast<std::size_t>(co) * n;
      Real* dsrc = din ? din + static_cast<std::size_t>(ci) * n : nullptr;
      for_each_tap_line(g, [&](std::size_t tap, std::size_t o, std::ptrdiff_t i, std::size_t len) {
        Real acc = 0;
        for (std::size_t t = 0; t < len; ++t) acc += go[o + t] * src[i + static_cast<std::ptrdiff_t>(t)];
        dkernel[kofs + tap] += acc;
        if (dsrc) {
          const Real w = kernel[kofs + tap];
          for (std::size_t t = 0; t < len; ++t) dsrc[i + static_cast<std::ptrdiff_t>(t)] += w * go[o + t];
        }
      });
    }
}

void add_bias(Tensor& out, const Tensor& bias, int cout, std::size_t total) {
  if (bias.empty()) return;
  for (int co = 0; co < cout; ++co) {
    Real* o = out.data().data() + static_cast<std::size_t>(co) * total;
    const Real b = bias[static_cast<std::size_t>(co)];
    for (std::size_t n = 0; n < total; ++n) o[n] += b;
  }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, Padding padding) {
  const ConvGeometry g = conv_geometry(input, kernel, stride);
  if (!bias.empty()) {
    require(bias.size() == static_cast<std::size_t>(g.cout),
            "conv3d bias " + shape_str(bias.shape()) + " does not match kernel " + shape_str(kernel.shape()));
  }
  const std::size_t rows = g.rows();
  const std::size_t total = g.out_numel();
  Tensor out(Shape{g.cout, g.out.h, g.out.w, g.out.d});
  if (use_direct(g, padding)) {
    conv3d_direct(g, input.data().data(), kernel.data().data(), out.data().data());
    add_bias(out, bias, g.cout, total);
    return out;
  }
  ConstRowMap kmat(kernel.data().data(), g.cout, static_cast<Eigen::Index>(rows), Eigen::OuterStride<>(rows));
  const Real* src = input.data().data();
  const std::size_t bw = block_width(g);
  RowMat col;
  for (std::size_t n0 = 0; n0 < total; n0 += bw) {
    const std::size_t n1 = std::min(total, n0 + bw);
    const std::size_t nb = n1 - n0;
    col.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(nb));
    im2col(g, src, n0, nb, padding, col.data());
    RowMap oblk(out.data().data() + n0, g.cout, static_cast<Eigen::Index>(nb),
                Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    oblk.noalias() = kmat * col;
  }
  add_bias(out, bias, g.cout, total);
  return out;
}

Conv3dGrads conv3d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int stride,
                            Padding padding, bool need_input_grad) {
  const ConvGeometry g = conv_geometry(input, kernel, stride);
  const std::size_t rows = g.rows();
  const std::size_t total = g.out_numel();
  require(grad_out.size() == static_cast<std::size_t>(g.cout) * total, "conv3d backward: grad shape mismatch");

  Conv3dGrads grads;
  grads.kernel = Tensor(kernel.shape());
  grads.bias = Tensor(Shape{g.cout});
  if (need_input_grad) grads.input = Tensor(input.shape());

  RowMap dk(grads.kernel.data().data(), g.cout, static_cast<Eigen::Index>(rows), Eigen::OuterStride<>(rows));
  ConstRowMap kmat(kernel.data().data(), g.cout, static_cast<Eigen::Index>(rows), Eigen::OuterStride<>(rows));
  const Real* src = input.data().data();
  Real* dsrc = need_input_grad ? grads.input.data().data() : nullptr;
  const std::size_t bw = use_direct(g, padding) ? total : block_width(g);
  if (use_direct(g, padding))
    conv3d_direct_backward(g, src, kernel.data().data(), grad_out.data().data(), grads.kernel.data().data(), dsrc);
  RowMat col, dcol;
  for (std::size_t n0 = use_direct(g, padding) ? total : 0; n0 < total; n0 += bw) {
    const std::size_t n1 = std::min(total, n0 + bw);
    const std::size_t nb = n1 - n0;
    col.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(nb));
    im2col(g, src, n0, nb, padding, col.data());
    ConstRowMap gblk(grad_out.data().data() + n0, g.cout, static_cast<Eigen::Index>(nb),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    dk.noalias() += gblk * col.transpose();
    if (need_input_grad) {
      dcol.noalias() = kmat.transpose() * gblk;
      col2im(g, dcol.data(), n0, nb, padding, dsrc);
    }
  }
  for (int co = 0; co < g.cout; ++co) {
    const Real* gp = grad_out.data().data() + static_cast<std::size_t>(co) * total;
    Real acc = 0;
    for (std::size_t n = 0; n < total; ++n) acc += gp[n];
    grads.bias[static_cast<std::size_t>(co)] = acc;
  }
  return grads;
}

Var conv3d(Var input, Var kernel, Var bias, int stride, Padding padding) {
  Tensor out = conv3d(input.value(), kernel.value(), bias.value(), stride, padding);
  Tape& t = *input.tape;
  const bool need_input = t.requires_grad(input.id);
  return t.record("conv3d", std::move(out), {input, kernel, bias},
                  [input, kernel, bias, stride, padding, need_input](Tape& tape, const Tensor& g) {
                    Conv3dGrads cg = conv3d_backward(tape.value(input.id), tape.value(kernel.id), g, stride,
                                                     padding, need_input);
                    if (need_input) tape.accumulate(input.id, cg.input);
                    tape.accumulate(kernel.id, cg.kernel);
                    tape.accumulate(bias.id, cg.bias);
                  });
}

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0 ? xv[i] : Real(0);
  return x.tape->record("relu", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x.id);
    Tensor dx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = xv[i] > 0 ? g[i] : Real(0);
    t.accumulate(x.id, dx);
  });
}

namespace {

// Kept strictly inside (0, 1) so downstream logs stay finite.
Real sigmoid_scalar(Real v) {
  const Real s = Real(1) / (Real(1) + std::exp(-v));
  return std::clamp(s, std::numeric_limits<Real>::min(), std::nextafter(Real(1), Real(0)));
}

}  // namespace

Var sigmoid(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
  return x.tape->record("sigmoid", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x.id);
    Tensor dx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const Real s = sigmoid_scalar(xv[i]);
      dx[i] = g[i] * s * (Real(1) - s);
    }
    t.accumulate(x.id, dx);
  });
}

Var add(Var a, Var b) {
  check_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

Var mul(Var a, Var b) {
  check_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a.id);
    const Tensor& bv = t.value(b.id);
    Tensor da(av.shape()), db(bv.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      da[i] = g[i] * bv[i];
      db[i] = g[i] * av[i];
    }
    t.accumulate(a.id, da);
    t.accumulate(b.id, db);
  });
}

Var scale(Var x, Real factor) {
  Tensor out = x.value();
  for (Real& v : out.data()) v *= factor;
  return x.tape->record("scale", std::move(out), {x}, [x, factor](Tape& t, const Tensor& g) {
    Tensor dx = g;
    for (Real& v : dx.data()) v *= factor;
    t.accumulate(x.id, dx);
  });
}

Var sum(Var x) {
  Real acc = 0;
  for (Real v : x.value().data()) acc += v;
  return x.tape->record("sum", Tensor::scalar(acc), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x.id, Tensor(t.value(x.id).shape(), g.item()));
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor& g) { t.accumulate(x.id, g); });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  out_shape[0] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw std::invalid_argument("concat_channels: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    }
    out_shape[0] += s[0];
  }
  std::vector<Real> data;
  data.reserve(shape_numel(out_shape));
  for (const Var& p : parts) {
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  return parts.front().tape->record("concat", Tensor(out_shape, std::move(data)), parts,
                                    [parts](Tape& t, const Tensor& g) {
                                      std::size_t offset = 0;
                                      for (const Var& p : parts) {
                                        const Shape& s = t.value(p.id).shape();
                                        const std::size_t n = shape_numel(s);
                                        std::vector<Real> slice(g.data().begin() + static_cast<std::ptrdiff_t>(offset),
                                                                g.data().begin() + static_cast<std::ptrdiff_t>(offset + n));
                                        t.accumulate(p.id, Tensor(s, std::move(slice)));
                                        offset += n;
                                      }
                                    });
}

Var upsample_nearest2x(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw std::invalid_argument("upsample_nearest2x needs [C,H,W,D], got " + shape_str(xv.shape()));
  const int c = xv.dim(0);
  const Dims3 in = xv.spatial();
  const Dims3 o{in.h * 2, in.w * 2, in.d * 2};
  Tensor out(Shape{c, o.h, o.w, o.d});
  std::size_t n = 0;
  for (int ci = 0; ci < c; ++ci)
    for (int h = 0; h < o.h; ++h)
      for (int w = 0; w < o.w; ++w)
        for (int d = 0; d < o.d; ++d, ++n)
          out[n] = xv[((static_cast<std::size_t>(ci) * in.h + h / 2) * in.w + w / 2) * in.d + d / 2];
  return x.tape->record("upsample", std::move(out), {x}, [x, c, in, o](Tape& t, const Tensor& g) {
    Tensor dx(t.value(x.id).shape());
    std::size_t n = 0;
    for (int ci = 0; ci < c; ++ci)
      for (int h = 0; h < o.h; ++h)
        for (int w = 0; w < o.w; ++w)
          for (int d = 0; d < o.d; ++d, ++n)
            dx[((static_cast<std::size_t>(ci) * in.h + h / 2) * in.w + w / 2) * in.d + d / 2] += g[n];
    t.accumulate(x.id, dx);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() != 1 || weight.dim(1) != x.dim(0)) {
    throw std::invalid_argument("linear: weight " + shape_str(weight.shape()) + " does not match input " +
                                shape_str(x.shape()));
  }
  const int m = weight.dim(0), n = weight.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != m) {
    throw std::invalid_argument("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                                shape_str(weight.shape()));
  }
  Tensor out(Shape{m});
  for (int i = 0; i < m; ++i) {
    Real acc = bias[static_cast<std::size_t>(i)];
    for (int j = 0; j < n; ++j) acc += weight[static_cast<std::size_t>(i) * n + j] * x[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

Var linear(Var x, Var weight, Var bias) {
  Tensor out = linear(x.value(), weight.value(), bias.value());
  return x.tape->record("linear", std::move(out), {x, weight, bias}, [x, weight, bias](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x.id);
    const Tensor& wv = t.value(weight.id);
    const int m = wv.dim(0), n = wv.dim(1);
    Tensor dx(xv.shape()), dw(wv.shape());
    for (int i = 0; i < m; ++i) {
      const Real gi = g[static_cast<std::size_t>(i)];
      for (int j = 0; j < n; ++j) {
        dw[static_cast<std::size_t>(i) * n + j] = gi * xv[static_cast<std::size_t>(j)];
        dx[static_cast<std::size_t>(j)] += gi * wv[static_cast<std::size_t>(i) * n + j];
      }
    }
    t.accumulate(x.id, dx);
    t.accumulate(weight.id, dw);
    t.accumulate(bias.id, g);
  });
}

namespace {

void require_volume(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw std::invalid_argument(std::string(op) + " needs [C,H,W,D], got " + shape_str(x.shape()));
}

// Index of the first maximum in each reduction group; shared by forward and backward.
std::vector<std::size_t> spatial_argmax(const Tensor& x) {
  const int c = x.dim(0);
  const std::size_t n = x.spatial().numel();
  std::vector<std::size_t> idx(static_cast<std::size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    const std::size_t base = static_cast<std::size_t>(ci) * n;
    std::size_t best = base;
    for (std::size_t i = base + 1; i < base + n; ++i)
      if (x[i] > x[best]) best = i;
    idx[static_cast<std::size_t>(ci)] = best;
  }
  return idx;
}

std::vector<std::size_t> channel_argmax(const Tensor& x) {
  const int c = x.dim(0);
  const std::size_t n = x.spatial().numel();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i;
    for (int ci = 1; ci < c; ++ci) {
      const std::size_t j = static_cast<std::size_t>(ci) * n + i;
      if (x[j] > x[best]) best = j;
    }
    idx[i] = best;
  }
  return idx;
}

}  // namespace

Tensor pool_spatial(const Tensor& x, PoolMode mode) {
  require_volume(x, "pool_spatial");
  const int c = x.dim(0);
  const std::size_t n = x.spatial().numel();
  Tensor out(Shape{c});
  if (mode == PoolMode::max) {
    const auto idx = spatial_argmax(x);
    for (int ci = 0; ci < c; ++ci) out[static_cast<std::size_t>(ci)] = x[idx[static_cast<std::size_t>(ci)]];
  } else {
    for (int ci = 0; ci < c; ++ci) {
      Real acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += x[static_cast<std::size_t>(ci) * n + i];
      out[static_cast<std::size_t>(ci)] = acc / static_cast<Real>(n);
    }
  }
  return out;
}

Tensor pool_channel(const Tensor& x, PoolMode mode) {
  require_volume(x, "pool_channel");
  const int c = x.dim(0);
  const Dims3 sp = x.spatial();
  const std::size_t n = sp.numel();
  Tensor out(Shape{1, sp.h, sp.w, sp.d});
  if (mode == PoolMode::max) {
    const auto idx = channel_argmax(x);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[idx[i]];
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      Real acc = 0;
      for (int ci = 0; ci < c; ++ci) acc += x[static_cast<std::size_t>(ci) * n + i];
      out[i] = acc / static_cast<Real>(c);
    }
  }
  return out;
}

Var pool_spatial(Var x, PoolMode mode) {
  Tensor out = pool_spatial(x.value(), mode);
  return x.tape->record(mode == PoolMode::max ? "pool_spatial_max" : "pool_spatial_avg", std::move(out), {x},
                        [x, mode](Tape& t, const Tensor& g) {
                          const Tensor& xv = t.value(x.id);
                          const int c = xv.dim(0);
                          const std::size_t n = xv.spatial().numel();
                          Tensor dx(xv.shape());
                          if (mode == PoolMode::max) {
                            const auto idx = spatial_argmax(xv);
                            for (int ci = 0; ci < c; ++ci) dx[idx[static_cast<std::size_t>(ci)]] += g[static_cast<std::size_t>(ci)];
                          } else {
                            for (int ci = 0; ci < c; ++ci) {
                              const Real v = g[static_cast<std::size_t>(ci)] / static_cast<Real>(n);
                              for (std::size_t i = 0; i < n; ++i) dx[static_cast<std::size_t>(ci) * n + i] = v;
                            }
                          }
                          t.accumulate(x.id, dx);
                        });
}

Var pool_channel(Var x, PoolMode mode) {
  Tensor out = pool_channel(x.value(), mode);
  return x.tape->record(mode == PoolMode::max ? "pool_channel_max" : "pool_channel_avg", std::move(out), {x},
                        [x, mode](Tape& t, const Tensor& g) {
                          const Tensor& xv = t.value(x.id);
                          const int c = xv.dim(0);
                          const std::size_t n = xv.spatial().numel();
                          Tensor dx(xv.shape());
                          if (mode == PoolMode::max) {
                            const auto idx = channel_argmax(xv);
                            for (std::size_t i = 0; i < n; ++i) dx[idx[i]] += g[i];
                          } else {
                            for (int ci = 0; ci < c; ++ci)
                              for (std::size_t i = 0; i < n; ++i)
                                dx[static_cast<std::size_t>(ci) * n + i] = g[i] / static_cast<Real>(c);
                          }
                          t.accumulate(x.id, dx);
                        });
}

Var residual_gate(Var attn, Var features) {
  const Tensor& av = attn.value();
  const Tensor& fv = features.value();
  require_volume(fv, "residual_gate");
  if (av.rank() != 4 || av.dim(0) != 1 || av.spatial() != fv.spatial()) {
    throw std::invalid_argument("residual_gate: attention " + shape_str(av.shape()) + " does not match features " +
                                shape_str(fv.shape()));
  }
  const int c = fv.dim(0);
  const std::size_t n = fv.spatial().numel();
  Tensor out(fv.shape());
  for (int ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = static_cast<std::size_t>(ci) * n + i;
      out[j] = (av[i] + Real(1)) * fv[j];
    }
  return attn.tape->record("residual_gate", std::move(out), {attn, features}, [attn, features](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(attn.id);
    const Tensor& fv = t.value(features.id);
    const int c = fv.dim(0);
    const std::size_t n = fv.spatial().numel();
    Tensor da(av.shape()), df(fv.shape());
    for (int ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = static_cast<std::size_t>(ci) * n + i;
        da[i] += g[j] * fv[j];
        df[j] = g[j] * (av[i] + Real(1));
      }
    t.accumulate(attn.id, da);
    t.accumulate(features.id, df);
  });
}

namespace {

void check_permutation(std::span<const int> idx, int size, const char* axis) {
  if (static_cast<int>(idx.size()) != size) {
    throw std::invalid_argument(std::string("permute_spatial: index length ") + std::to_string(idx.size()) +
                                " does not match " + axis + " extent " + std::to_string(size));
  }
  std::vector<char> seen(static_cast<std::size_t>(size), 0);
  for (int v : idx) {
    if (v < 0 || v >= size || seen[static_cast<std::size_t>(v)]) {
      throw std::invalid_argument(std::string("permute_spatial: ") + axis + " indices are not a permutation");
    }
    seen[static_cast<std::size_t>(v)] = 1;
  }
}

// out[c,h,w,d] = in[c, sh[h], sw[w], sd[d]]; with scatter=true the mapping is reversed.
void gather_spatial(const Tensor& in, Tensor& out, std::span<const int> sh, std::span<const int> sw,
                    std::span<const int> sd, bool scatter) {
  const int c = in.dim(0);
  const Dims3 sp = in.spatial();
  std::size_t n = 0;
  for (int ci = 0; ci < c; ++ci) {
    const std::size_t cbase = static_cast<std::size_t>(ci) * sp.numel();
    for (int h = 0; h < sp.h; ++h)
      for (int w = 0; w < sp.w; ++w) {
        const std::size_t row = cbase + (static_cast<std::size_t>(sh[static_cast<std::size_t>(h)]) * sp.w +
                                         static_cast<std::size_t>(sw[static_cast<std::size_t>(w)])) *
                                            sp.d;
        for (int d = 0; d < sp.d; ++d, ++n) {
          const std::size_t src = row + static_cast<std::size_t>(sd[static_cast<std::size_t>(d)]);
          if (scatter)
            out[src] += in[n];
          else
            out[n] = in[src];
        }
      }
  }
}

}  // namespace

Tensor permute_spatial(const Tensor& x, std::span<const int> src_h, std::span<const int> src_w,
                       std::span<const int> src_d) {
  require_volume(x, "permute_spatial");
  const Dims3 sp = x.spatial();
  check_permutation(src_h, sp.h, "H");
  check_permutation(src_w, sp.w, "W");
  check_permutation(src_d, sp.d, "D");
  Tensor out(x.shape());
  gather_spatial(x, out, src_h, src_w, src_d, false);
  return out;
}

Var permute_spatial(Var x, std::span<const int> src_h, std::span<const int> src_w, std::span<const int> src_d) {
  Tensor out = permute_spatial(x.value(), src_h, src_w, src_d);
  std::vector<int> h(src_h.begin(), src_h.end()), w(src_w.begin(), src_w.end()), d(src_d.begin(), src_d.end());
  return x.tape->record("permute", std::move(out), {x}, [x, h, w, d](Tape& t, const Tensor& g) {
    // Adjoint of a gather is the scatter through the same indices.
    Tensor dx(t.value(x.id).shape());
    gather_spatial(g, dx, h, w, d, true);
    t.accumulate(x.id, dx);
  });
}

}  // namespace dpbn
