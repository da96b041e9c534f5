#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "stuffnet/autograd.hpp"

namespace stuffnet {

constexpr int kIgnoreLabel = -1;

struct ConvOptions {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
};

struct PoolParams {
  int window = 2;
  int stride = 2;
  int pad = 0;
};

// Region on a feature map in continuous feature-map coordinates.
struct RoiRect {
  double x0, y0, x1, y1;
};

inline int conv_output_size(int in, int kernel, const ConvOptions& o) {
  const int extent = kernel + (kernel - 1) * (o.dilation - 1);
  return (in + 2 * o.pad - extent) / o.stride + 1;
}

namespace detail {

inline void add_into(std::vector<double>& dst, std::span<const double> src) {
  for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// Range [lo, hi) of output indices x for which x*stride + offset lies in [0, limit).
inline void valid_range(int out_size, int stride, int offset, int limit, int& lo, int& hi) {
  lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  const int last = limit - 1 - offset;  // x*stride <= last
  hi = last < 0 ? 0 : std::min(out_size, last / stride + 1);
  if (hi < lo) hi = lo;
}

inline uint64_t hash_bits(const std::vector<uint8_t>& bits) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (uint8_t b : bits) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

inline Var relu(Graph& g, Var x) {
  const Tensor& in = g.value(x);
  Tensor out(in.dims());
  for (size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 ? in[i] : 0.0;
  if (g.tracking_decisions()) {
    std::vector<uint8_t> bits(in.size());
    for (size_t i = 0; i < in.size(); ++i) bits[i] = in[i] > 0;
    g.note_decision(detail::hash_bits(bits));
  }
  return g.record(std::move(out), {x}, [x](Graph& gr, int self) {
    const Tensor& in = gr.value(x);
    auto go = gr.grad(Var{self});
    auto& gi = gr.grad_buffer(x.id);
    for (size_t i = 0; i < go.size(); ++i)
      if (in[i] > 0) gi[i] += go[i];
  });
}

inline Var add(Graph& g, Var a, Var b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  if (ta.dims() != tb.dims())
    throw InvalidArgument("add: shape mismatch " + shape_str(ta.dims()) + " vs " + shape_str(tb.dims()));
  Tensor out(ta.dims());
  for (size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] + tb[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, int self) {
    auto go = gr.grad(Var{self});
    if (gr.requires_grad(a)) detail::add_into(gr.grad_buffer(a.id), go);
    if (gr.requires_grad(b)) detail::add_into(gr.grad_buffer(b.id), go);
  });
}

inline Var scale(Graph& g, Var x, double s) {
  const Tensor& in = g.value(x);
  Tensor out(in.dims());
  for (size_t i = 0; i < in.size(); ++i) out[i] = in[i] * s;
  return g.record(std::move(out), {x}, [x, s](Graph& gr, int self) {
    auto go = gr.grad(Var{self});
    auto& gi = gr.grad_buffer(x.id);
    for (size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * s;
  });
}

inline Var sum(Graph& g, Var x) {
  const Tensor& in = g.value(x);
  double s = 0.0;
  for (double v : in.data()) s += v;
  return g.record(Tensor::scalar(s), {x}, [x](Graph& gr, int self) {
    const double go = gr.grad(Var{self})[0];
    for (double& v : gr.grad_buffer(x.id)) v += go;
  });
}

// sum_i w_i x_i with constant weights.
inline Var weighted_sum(Graph& g, Var x, Tensor weights) {
  const Tensor& in = g.value(x);
  if (weights.size() != in.size()) throw InvalidArgument("weighted_sum: weight count mismatch");
  double s = 0.0;
  for (size_t i = 0; i < in.size(); ++i) s += weights[i] * in[i];
  return g.record(Tensor::scalar(s), {x}, [x, w = std::move(weights)](Graph& gr, int self) {
    const double go = gr.grad(Var{self})[0];
    auto& gi = gr.grad_buffer(x.id);
    for (size_t i = 0; i < gi.size(); ++i) gi[i] += go * w[i];
  });
}

inline Var sub_const(Graph& g, Var x, const Tensor& c) {
  const Tensor& in = g.value(x);
  if (c.size() != in.size()) throw InvalidArgument("sub_const: size mismatch");
  Tensor out(in.dims());
  for (size_t i = 0; i < in.size(); ++i) out[i] = in[i] - c[i];
  return g.record(std::move(out), {x}, [x](Graph& gr, int self) {
    detail::add_into(gr.grad_buffer(x.id), gr.grad(Var{self}));
  });
}

inline Var reshape(Graph& g, Var x, Shape dims) {
  Tensor out = g.value(x);
  out.drop_grad();
  out.reshape(std::move(dims));
  return g.record(std::move(out), {x}, [x](Graph& gr, int self) {
    detail::add_into(gr.grad_buffer(x.id), gr.grad(Var{self}));
  });
}

// [1, C, H, W] -> [H*W, C]
inline Var channels_last(Graph& g, Var x) {
  const Tensor& in = g.value(x);
  if (in.rank() != 4 || in.dim(0) != 1) throw InvalidArgument("channels_last expects [1,C,H,W]");
  const int c = in.dim(1), hw = in.dim(2) * in.dim(3);
  Tensor out({hw, c});
  for (int k = 0; k < c; ++k)
    for (int p = 0; p < hw; ++p) out[static_cast<size_t>(p) * c + k] = in[static_cast<size_t>(k) * hw + p];
  return g.record(std::move(out), {x}, [x, c, hw](Graph& gr, int self) {
    auto go = gr.grad(Var{self});
    auto& gi = gr.grad_buffer(x.id);
    for (int k = 0; k < c; ++k)
      for (int p = 0; p < hw; ++p) gi[static_cast<size_t>(k) * hw + p] += go[static_cast<size_t>(p) * c + k];
  });
}

/// 2-D convolution with zero padding and dilated ("holes") taps.
/// kernel [O, C, kh, kw], bias [O]; input [N, C, H, W].
inline Var conv2d(Graph& g, Var x, Var kernel, Var bias, const ConvOptions& o) {
  const Tensor& in = g.value(x);
  const Tensor& k = g.value(kernel);
  const Tensor& b = g.value(bias);
  if (in.rank() != 4 || k.rank() != 4) throw InvalidArgument("conv2d expects rank-4 input and kernel");
  if (o.stride < 1 || o.dilation < 1 || o.pad < 0) throw InvalidArgument("conv2d: invalid stride/pad/dilation");
  const int n_batch = in.dim(0), ch = in.dim(1), h = in.dim(2), w = in.dim(3);
  const int oc = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != ch)
    throw InvalidArgument("conv2d: channel mismatch, input has " + std::to_string(ch) + ", kernel expects " +
                          std::to_string(k.dim(1)));
  if (static_cast<int>(b.size()) != oc) throw InvalidArgument("conv2d: bias length mismatch");
  const int ho = conv_output_size(h, kh, o), wo = conv_output_size(w, kw, o);
  if (ho < 1 || wo < 1) throw InvalidArgument("conv2d: non-positive output size");

  const int kk_n = ch * kh * kw;
  const size_t in_plane = static_cast<size_t>(h) * w, out_plane = static_cast<size_t>(ho) * wo;
  // Column matrix per batch item: row (c, i, j), column output pixel.
  auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(n_batch) * kk_n * out_plane, 0.0);
  for (int n = 0; n < n_batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const double* src = &in[(static_cast<size_t>(n) * ch + c) * in_plane];
      for (int i = 0; i < kh; ++i) {
        for (int j = 0; j < kw; ++j) {
          double* col = cols->data() + ((static_cast<size_t>(n) * kk_n) + (c * kh + i) * kw + j) * out_plane;
          const int xoff = j * o.dilation - o.pad;
          int xlo, xhi;
          detail::valid_range(wo, o.stride, xoff, w, xlo, xhi);
          for (int y = 0; y < ho; ++y) {
            const int iy = y * o.stride - o.pad + i * o.dilation;
            if (iy < 0 || iy >= h) continue;
            double* crow = col + static_cast<size_t>(y) * wo;
            const double* srow = src + static_cast<size_t>(iy) * w + xoff;
            for (int xx = xlo; xx < xhi; ++xx) crow[xx] = srow[xx * o.stride];
          }
        }
      }
    }
  }

  Tensor out({n_batch, oc, ho, wo});
  for (int n = 0; n < n_batch; ++n) {
    const double* colb = cols->data() + static_cast<size_t>(n) * kk_n * out_plane;
    for (int oo = 0; oo < oc; ++oo) {
      double* dst = &out[(static_cast<size_t>(n) * oc + oo) * out_plane];
      std::fill(dst, dst + out_plane, b[oo]);
      const double* krow = &k[static_cast<size_t>(oo) * kk_n];
      for (int kk = 0; kk < kk_n; ++kk) {
        const double wt = krow[kk];
        const double* col = colb + static_cast<size_t>(kk) * out_plane;
        for (size_t p = 0; p < out_plane; ++p) dst[p] += wt * col[p];
      }
    }
  }

  return g.record(std::move(out), {x, kernel, bias}, [=](Graph& gr, int self) {
    const Tensor& k = gr.value(kernel);
    auto go = gr.grad(Var{self});
    const bool need_in = gr.requires_grad(x), need_k = gr.requires_grad(kernel), need_b = gr.requires_grad(bias);
    double* gin = need_in ? gr.grad_buffer(x.id).data() : nullptr;
    double* gk = need_k ? gr.grad_buffer(kernel.id).data() : nullptr;
    double* gb = need_b ? gr.grad_buffer(bias.id).data() : nullptr;
    std::vector<double> gcol(gin ? static_cast<size_t>(kk_n) * out_plane : 0);
    for (int n = 0; n < n_batch; ++n) {
      const double* colb = cols->data() + static_cast<size_t>(n) * kk_n * out_plane;
      const double* gout = go.data() + static_cast<size_t>(n) * oc * out_plane;
      for (int oo = 0; oo < oc; ++oo) {
        const double* grow = gout + static_cast<size_t>(oo) * out_plane;
        if (gb) {
          double acc = 0.0;
#pragma omp simd reduction(+ : acc)
          for (size_t p = 0; p < out_plane; ++p) acc += grow[p];
          gb[oo] += acc;
        }
        if (gk) {
          for (int kk = 0; kk < kk_n; ++kk) {
            const double* col = colb + static_cast<size_t>(kk) * out_plane;
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (size_t p = 0; p < out_plane; ++p) acc += grow[p] * col[p];
            gk[static_cast<size_t>(oo) * kk_n + kk] += acc;
          }
        }
      }
      if (!gin) continue;
      std::fill(gcol.begin(), gcol.end(), 0.0);
      for (int oo = 0; oo < oc; ++oo) {
        const double* grow = gout + static_cast<size_t>(oo) * out_plane;
        const double* krow = &k[static_cast<size_t>(oo) * kk_n];
        for (int kk = 0; kk < kk_n; ++kk) {
          const double wt = krow[kk];
          double* gc = gcol.data() + static_cast<size_t>(kk) * out_plane;
          for (size_t p = 0; p < out_plane; ++p) gc[p] += wt * grow[p];
        }
      }
      for (int c = 0; c < ch; ++c) {
        double* gsrc = gin + (static_cast<size_t>(n) * ch + c) * in_plane;
        for (int i = 0; i < kh; ++i) {
          for (int j = 0; j < kw; ++j) {
            const double* gc = gcol.data() + static_cast<size_t>((c * kh + i) * kw + j) * out_plane;
            const int xoff = j * o.dilation - o.pad;
            int xlo, xhi;
            detail::valid_range(wo, o.stride, xoff, w, xlo, xhi);
            for (int y = 0; y < ho; ++y) {
              const int iy = y * o.stride - o.pad + i * o.dilation;
              if (iy < 0 || iy >= h) continue;
              const double* grow = gc + static_cast<size_t>(y) * wo;
              double* girow = gsrc + static_cast<size_t>(iy) * w + xoff;
              for (int xx = xlo; xx < xhi; ++xx) girow[xx * o.stride] += grow[xx];
            }
          }
        }
      }
    }
  });
}

inline int pool_output_size(int in, const PoolParams& p) { return (in + 2 * p.pad - p.window) / p.stride + 1; }

/// Max pooling; padded cells act as -inf. Gradient goes to the first maximal
/// cell in row-major scan order.
inline Var maxpool2d(Graph& g, Var x, const PoolParams& p) {
  const Tensor& in = g.value(x);
  if (in.rank() != 4) throw InvalidArgument("maxpool2d expects [N,C,H,W]");
  if (p.window < 1 || p.stride < 1 || p.pad < 0 || p.pad >= p.window)
    throw InvalidArgument("maxpool2d: invalid window/stride/pad");
  const int nb = in.dim(0), ch = in.dim(1), h = in.dim(2), w = in.dim(3);
  if (p.window > h + 2 * p.pad || p.window > w + 2 * p.pad)
    throw InvalidArgument("maxpool2d: window larger than padded input");
  const int ho = pool_output_size(h, p), wo = pool_output_size(w, p);
  Tensor out({nb, ch, ho, wo});
  std::vector<int> arg(out.size());
  size_t oi = 0;
  for (int n = 0; n < nb; ++n)
    for (int c = 0; c < ch; ++c) {
      const size_t base = (static_cast<size_t>(n) * ch + c) * h * w;
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int best_idx = -1;
          const int y0 = y * p.stride - p.pad, x0 = xx * p.stride - p.pad;
          for (int i = std::max(0, y0); i < std::min(h, y0 + p.window); ++i)
            for (int j = std::max(0, x0); j < std::min(w, x0 + p.window); ++j) {
              const double v = in[base + static_cast<size_t>(i) * w + j];
              if (best_idx < 0 || v > best) {
                best = v;
                best_idx = static_cast<int>(base + static_cast<size_t>(i) * w + j);
              }
            }
          out[oi] = best;
          arg[oi] = best_idx;
        }
    }
  if (g.tracking_decisions()) {
    std::vector<uint8_t> bytes(arg.size() * 4);
    std::memcpy(bytes.data(), arg.data(), bytes.size());
    g.note_decision(detail::hash_bits(bytes));
  }
  return g.record(std::move(out), {x}, [x, arg = std::move(arg)](Graph& gr, int self) {
    auto go = gr.grad(Var{self});
    auto& gi = gr.grad_buffer(x.id);
    for (size_t i = 0; i < go.size(); ++i) gi[static_cast<size_t>(arg[i])] += go[i];
  });
}

struct RoiBin {
  int start, end;
};

// Bin edges along one axis: floor(lo + i*len/G) .. ceil(lo + (i+1)*len/G),
// at least one cell, kept inside [0, limit).
inline std::vector<RoiBin> roi_bins(double lo, double hi, int grid, int limit) {
  std::vector<RoiBin> bins(static_cast<size_t>(grid));
  const double len = hi - lo;
  for (int i = 0; i < grid; ++i) {
    int s = static_cast<int>(std::floor(lo + i * len / grid));
    int e = static_cast<int>(std::ceil(lo + (i + 1) * len / grid));
    s = std::clamp(s, 0, limit - 1);
    e = std::clamp(e, s + 1, limit);
    bins[static_cast<size_t>(i)] = {s, e};
  }
  return bins;
}

inline RoiRect clip_roi(const RoiRect& r, int w, int h) {
  RoiRect c{std::clamp(r.x0, 0.0, double(w)), std::clamp(r.y0, 0.0, double(h)), std::clamp(r.x1, 0.0, double(w)),
            std::clamp(r.y1, 0.0, double(h))};
  if (!(c.x1 > c.x0) || !(c.y1 > c.y0))
    throw InvalidArgument("roi_maxpool: degenerate proposal (zero area after clipping)");
  return c;
}

/// Adaptive max pooling of each roi into a G x G grid.
/// feat [1, C, H, W] -> [R, C, G, G].
inline Var roi_maxpool(Graph& g, Var feat, std::span<const RoiRect> rois, int grid) {
  const Tensor& in = g.value(feat);
  if (in.rank() != 4 || in.dim(0) != 1) throw InvalidArgument("roi_maxpool expects [1,C,H,W]");
  if (rois.empty()) throw InvalidArgument("roi_maxpool: empty roi list");
  if (grid < 1) throw InvalidArgument("roi_maxpool: grid must be >= 1");
  const int ch = in.dim(1), h = in.dim(2), w = in.dim(3);
  const int nr = static_cast<int>(rois.size());
  Tensor out({nr, ch, grid, grid});
  std::vector<int> arg(out.size());
  size_t oi = 0;
  for (int r = 0; r < nr; ++r) {
    const RoiRect c = clip_roi(rois[static_cast<size_t>(r)], w, h);
    const auto ybins = roi_bins(c.y0, c.y1, grid, h);
    const auto xbins = roi_bins(c.x0, c.x1, grid, w);
    for (int k = 0; k < ch; ++k) {
      const size_t base = static_cast<size_t>(k) * h * w;
      for (const RoiBin& yb : ybins)
        for (const RoiBin& xb : xbins) {
          int best = -1;
          double bv = 0.0;
          for (int yy = yb.start; yy < yb.end; ++yy)
            for (int xx = xb.start; xx < xb.end; ++xx) {
              const size_t idx = base + static_cast<size_t>(yy) * w + xx;
              if (best < 0 || in[idx] > bv) {
                bv = in[idx];
                best = static_cast<int>(idx);
              }
            }
          out[oi] = bv;
          arg[oi++] = best;
        }
    }
  }
  if (g.tracking_decisions()) {
    std::vector<uint8_t> bytes(arg.size() * 4);
    std::memcpy(bytes.data(), arg.data(), bytes.size());
    g.note_decision(detail::hash_bits(bytes));
  }
  return g.record(std::move(out), {feat}, [feat, arg = std::move(arg)](Graph& gr, int self) {
    auto go = gr.grad(Var{self});
    auto& gi = gr.grad_buffer(feat.id);
    for (size_t i = 0; i < go.size(); ++i) gi[static_cast<size_t>(arg[i])] += go[i];
  });
}

/// Single-roi form: [1, C, H, W] -> [C, G, G].
inline Var roi_maxpool(Graph& g, Var feat, const RoiRect& roi, int grid) {
  Var pooled = roi_maxpool(g, feat, std::span<const RoiRect>(&roi, 1), grid);
  const Tensor& t = g.value(pooled);
  return reshape(g, pooled, {t.dim(1), grid, grid});
}

struct AxisSample {
  int lo, hi;
  double frac;
};

// Align-corners sample positions for upsampling n -> n*factor.
inline std::vector<AxisSample> align_corners_axis(int n, int factor) {
  const int m = n * factor;
  std::vector<AxisSample> s(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const double pos = (m > 1 && n > 1) ? static_cast<double>(i) * (n - 1) / (m - 1) : 0.0;
    int lo = static_cast<int>(std::floor(pos));
    lo = std::min(lo, n - 1);
    const int hi = std::min(lo + 1, n - 1);
    s[static_cast<size_t>(i)] = {lo, hi, pos - lo};
  }
  return s;
}

/// Bilinear upsampling by an integer factor with the align-corners convention.
inline Var bilinear_upsample(Graph& g, Var x, int factor, int max_size = 4096) {
  const Tensor& in = g.value(x);
  if (in.rank() != 4) throw InvalidArgument("bilinear_upsample expects [N,C,h,w]");
  if (factor < 1) throw InvalidArgument("bilinear_upsample: factor must be >= 1");
  const int nb = in.dim(0), ch = in.dim(1), h = in.dim(2), w = in.dim(3);
  if (static_cast<long long>(h) * factor > max_size || static_cast<long long>(w) * factor > max_size)
    throw InvalidArgument("bilinear_upsample: output exceeds max size " + std::to_string(max_size));
  if (factor == 1) {
    Tensor out = in;
    out.drop_grad();
    return g.record(std::move(out), {x}, [x](Graph& gr, int self) {
      detail::add_into(gr.grad_buffer(x.id), gr.grad(Var{self}));
    });
  }
  const int ho = h * factor, wo = w * factor;
  auto ys = align_corners_axis(h, factor);
  auto xs = align_corners_axis(w, factor);
  Tensor out({nb, ch, ho, wo});
  for (int p = 0; p < nb * ch; ++p) {
    const double* src = &in[static_cast<size_t>(p) * h * w];
    double* dst = &out[static_cast<size_t>(p) * ho * wo];
    for (int y = 0; y < ho; ++y) {
      const AxisSample& sy = ys[static_cast<size_t>(y)];
      const double* r0 = src + static_cast<size_t>(sy.lo) * w;
      const double* r1 = src + static_cast<size_t>(sy.hi) * w;
      for (int xx = 0; xx < wo; ++xx) {
        const AxisSample& sx = xs[static_cast<size_t>(xx)];
        const double top = r0[sx.lo] * (1 - sx.frac) + r0[sx.hi] * sx.frac;
        const double bot = r1[sx.lo] * (1 - sx.frac) + r1[sx.hi] * sx.frac;
        dst[static_cast<size_t>(y) * wo + xx] = top * (1 - sy.frac) + bot * sy.frac;
      }
    }
  }
  return g.record(std::move(out), {x}, [=](Graph& gr, int self) {
    auto go = gr.grad(Var{self});
    auto& gi = gr.grad_buffer(x.id);
    for (int p = 0; p < nb * ch; ++p) {
      double* src = &gi[static_cast<size_t>(p) * h * w];
      const double* dst = go.data() + static_cast<size_t>(p) * ho * wo;
      for (int y = 0; y < ho; ++y) {
        const AxisSample& sy = ys[static_cast<size_t>(y)];
        double* r0 = src + static_cast<size_t>(sy.lo) * w;
        double* r1 = src + static_cast<size_t>(sy.hi) * w;
        for (int xx = 0; xx < wo; ++xx) {
          const AxisSample& sx = xs[static_cast<size_t>(xx)];
          const double gv = dst[static_cast<size_t>(y) * wo + xx];
          const double gt = gv * (1 - sy.frac), gbt = gv * sy.frac;
          r0[sx.lo] += gt * (1 - sx.frac);
          r0[sx.hi] += gt * sx.frac;
          r1[sx.lo] += gbt * (1 - sx.frac);
          r1[sx.hi] += gbt * sx.frac;
        }
      }
    }
  });
}

/// [M, D] x [D, K] + [K]. No activation.
inline Var fully_connected(Graph& g, Var x, Var weight, Var bias) {
  const Tensor& in = g.value(x);
  const Tensor& wt = g.value(weight);
  const Tensor& b = g.value(bias);
  if (in.rank() != 2 || wt.rank() != 2) throw InvalidArgument("fully_connected expects [M,D] and [D,K]");
  const int m = in.dim(0), d = in.dim(1), k = wt.dim(1);
  if (wt.dim(0) != d)
    throw InvalidArgument("fully_connected: inner dim mismatch " + shape_str(in.dims()) + " x " +
                          shape_str(wt.dims()));
  if (static_cast<int>(b.size()) != k) throw InvalidArgument("fully_connected: bias length mismatch");
  Tensor out({m, k});
  for (int r = 0; r < m; ++r) {
    double* o = &out[static_cast<size_t>(r) * k];
    for (int j = 0; j < k; ++j) o[j] = b[j];
    const double* a = &in[static_cast<size_t>(r) * d];
    for (int i = 0; i < d; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      const double* wr = &wt[static_cast<size_t>(i) * k];
      for (int j = 0; j < k; ++j) o[j] += av * wr[j];
    }
  }
  return g.record(std::move(out), {x, weight, bias}, [=](Graph& gr, int self) {
    const Tensor& in = gr.value(x);
    const Tensor& wt = gr.value(weight);
    auto go = gr.grad(Var{self});
    if (gr.requires_grad(bias)) {
      auto& gb = gr.grad_buffer(bias.id);
      for (int r = 0; r < m; ++r)
        for (int j = 0; j < k; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(r) * k + j];
    }
    if (gr.requires_grad(weight)) {
      auto& gw = gr.grad_buffer(weight.id);
      for (int r = 0; r < m; ++r) {
        const double* gor = go.data() + static_cast<size_t>(r) * k;
        const double* a = &in[static_cast<size_t>(r) * d];
        for (int i = 0; i < d; ++i) {
          const double av = a[i];
          if (av == 0.0) continue;
          double* gwr = &gw[static_cast<size_t>(i) * k];
          for (int j = 0; j < k; ++j) gwr[j] += av * gor[j];
        }
      }
    }
    if (gr.requires_grad(x)) {
      auto& gi = gr.grad_buffer(x.id);
      std::vector<double> wtt(static_cast<size_t>(d) * k);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < k; ++j) wtt[static_cast<size_t>(j) * d + i] = wt[static_cast<size_t>(i) * k + j];
      for (int r = 0; r < m; ++r) {
        const double* gor = go.data() + static_cast<size_t>(r) * k;
        double* gir = &gi[static_cast<size_t>(r) * d];
        for (int j = 0; j < k; ++j) {
          const double gv = gor[j];
          if (gv == 0.0) continue;
          const double* wc = &wtt[static_cast<size_t>(j) * d];
          for (int i = 0; i < d; ++i) gir[i] += gv * wc[i];
        }
      }
    }
  });
}

inline double smooth_l1(double v) {
  const double a = std::abs(v);
  return a < 1.0 ? 0.5 * v * v : a - 0.5;
}

/// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
inline Var smooth_l1(Graph& g, Var x) {
  const Tensor& in = g.value(x);
  Tensor out(in.dims());
  for (size_t i = 0; i < in.size(); ++i) out[i] = smooth_l1(in[i]);
  return g.record(std::move(out), {x}, [x](Graph& gr, int self) {
    const Tensor& in = gr.value(x);
    auto go = gr.grad(Var{self});
    auto& gi = gr.grad_buffer(x.id);
    for (size_t i = 0; i < go.size(); ++i) {
      const double v = in[i];
      const double d = std::abs(v) < 1.0 ? v : (v > 0 ? 1.0 : -1.0);
      gi[i] += go[i] * d;
    }
  });
}

inline Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw InvalidArgument("softmax_rows expects [M,K]");
  const int m = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.dims());
  for (int r = 0; r < m; ++r) {
    const double* z = &logits[static_cast<size_t>(r) * k];
    double* o = &p[static_cast<size_t>(r) * k];
    const double mx = *std::max_element(z, z + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += (o[j] = std::exp(z[j] - mx));
    for (int j = 0; j < k; ++j) o[j] /= s;
  }
  return p;
}

/// Mean over non-ignored rows of -log softmax(logits)[label]. Returns 0 when
/// every row is ignored.
inline Var softmax_cross_entropy(Graph& g, Var logits, std::span<const int> labels) {
  const Tensor& z = g.value(logits);
  if (z.rank() != 2) throw InvalidArgument("softmax_cross_entropy expects [M,K] logits");
  const int m = z.dim(0), k = z.dim(1);
  if (static_cast<int>(labels.size()) != m) throw InvalidArgument("softmax_cross_entropy: label count mismatch");
  int count = 0;
  for (int l : labels) {
    if (l == kIgnoreLabel) continue;
    if (l < 0 || l >= k)
      throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(l) + " out of range [0," +
                            std::to_string(k) + ")");
    ++count;
  }
  Tensor prob = softmax_rows(z);
  double loss = 0.0;
  for (int r = 0; r < m; ++r) {
    const int l = labels[static_cast<size_t>(r)];
    if (l == kIgnoreLabel) continue;
    const double* zr = &z[static_cast<size_t>(r) * k];
    const double mx = *std::max_element(zr, zr + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(zr[j] - mx);
    loss += (mx + std::log(s)) - zr[l];
  }
  if (count > 0) loss /= count;
  std::vector<int> lab(labels.begin(), labels.end());
  return g.record(Tensor::scalar(loss), {logits},
                  [logits, m, k, count, prob = std::move(prob), lab = std::move(lab)](Graph& gr, int self) {
                    if (count == 0) return;
                    const double go = gr.grad(Var{self})[0] / count;
                    auto& gi = gr.grad_buffer(logits.id);
                    for (int r = 0; r < m; ++r) {
                      const int l = lab[static_cast<size_t>(r)];
                      if (l == kIgnoreLabel) continue;
                      const size_t base = static_cast<size_t>(r) * k;
                      for (int j = 0; j < k; ++j) gi[base + j] += go * (prob[base + j] - (j == l ? 1.0 : 0.0));
                    }
                  });
}

}  // namespace stuffnet
