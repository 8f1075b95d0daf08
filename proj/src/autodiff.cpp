#include "contseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "contseg/errors.hpp"
#include "contseg/rng.hpp"

namespace contseg {

namespace {

void require_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw StateError(std::string(what) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// Convolution kernels (stride 1, zero padding k/2). The staging below keeps
// the innermost loop contiguous in both operands so the compiler vectorizes.

struct ConvDims {
  std::int64_t n, c_in, c_out;
  std::int64_t spatial_in;  // voxels per channel
};

void conv2d_forward(const double* in, const double* ker, const double* bias,
                    double* out, std::int64_t N, std::int64_t C,
                    std::int64_t F, std::int64_t H, std::int64_t W,
                    std::int64_t KH, std::int64_t KW) {
  const std::int64_t ph = KH / 2, pw = KW / 2;
  const std::int64_t plane = H * W;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t f = 0; f < F; ++f) {
      double* out_nf = out + (n * F + f) * plane;
      std::fill(out_nf, out_nf + plane, bias[f]);
      for (std::int64_t c = 0; c < C; ++c) {
        const double* in_nc = in + (n * C + c) * plane;
        const double* ker_fc = ker + (f * C + c) * KH * KW;
        for (std::int64_t ky = 0; ky < KH; ++ky) {
          const std::int64_t oy = ky - ph;
          const std::int64_t ylo = std::max<std::int64_t>(0, -oy);
          const std::int64_t yhi = std::min<std::int64_t>(H, H - oy);
          for (std::int64_t kx = 0; kx < KW; ++kx) {
            const std::int64_t ox = kx - pw;
            const std::int64_t xlo = std::max<std::int64_t>(0, -ox);
            const std::int64_t xhi = std::min<std::int64_t>(W, W - ox);
            const double w = ker_fc[ky * KW + kx];
            if (w == 0.0) continue;
            for (std::int64_t y = ylo; y < yhi; ++y) {
              const double* irow = in_nc + (y + oy) * W + ox;
              double* orow = out_nf + y * W;
              for (std::int64_t x = xlo; x < xhi; ++x) orow[x] += w * irow[x];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward(const double* in, const double* ker, const double* gout,
                     double* gin, double* gker, double* gbias, std::int64_t N,
                     std::int64_t C, std::int64_t F, std::int64_t H,
                     std::int64_t W, std::int64_t KH, std::int64_t KW) {
  const std::int64_t ph = KH / 2, pw = KW / 2;
  const std::int64_t plane = H * W;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t f = 0; f < F; ++f) {
      const double* g_nf = gout + (n * F + f) * plane;
      if (gbias) {
        double s = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) s += g_nf[i];
        gbias[f] += s;
      }
      if (!gin && !gker) continue;
      for (std::int64_t c = 0; c < C; ++c) {
        const double* in_nc = in + (n * C + c) * plane;
        double* gin_nc = gin ? gin + (n * C + c) * plane : nullptr;
        const double* ker_fc = ker + (f * C + c) * KH * KW;
        double* gker_fc = gker ? gker + (f * C + c) * KH * KW : nullptr;
        for (std::int64_t ky = 0; ky < KH; ++ky) {
          const std::int64_t oy = ky - ph;
          const std::int64_t ylo = std::max<std::int64_t>(0, -oy);
          const std::int64_t yhi = std::min<std::int64_t>(H, H - oy);
          for (std::int64_t kx = 0; kx < KW; ++kx) {
            const std::int64_t ox = kx - pw;
            const std::int64_t xlo = std::max<std::int64_t>(0, -ox);
            const std::int64_t xhi = std::min<std::int64_t>(W, W - ox);
            const double w = ker_fc[ky * KW + kx];
            double s = 0.0;
            for (std::int64_t y = ylo; y < yhi; ++y) {
              const double* grow = g_nf + y * W;
              const std::int64_t ibase = (y + oy) * W + ox;
              if (gin_nc && gker_fc) {
                const double* irow = in_nc + ibase;
                double* drow = gin_nc + ibase;
                for (std::int64_t x = xlo; x < xhi; ++x) {
                  s += grow[x] * irow[x];
                  drow[x] += w * grow[x];
                }
              } else if (gker_fc) {
                const double* irow = in_nc + ibase;
                for (std::int64_t x = xlo; x < xhi; ++x) s += grow[x] * irow[x];
              } else {
                double* drow = gin_nc + ibase;
                for (std::int64_t x = xlo; x < xhi; ++x) drow[x] += w * grow[x];
              }
            }
            if (gker_fc) gker_fc[ky * KW + kx] += s;
          }
        }
      }
    }
  }
}

void conv3d_forward(const double* in, const double* ker, const double* bias,
                    double* out, std::int64_t N, std::int64_t C,
                    std::int64_t F, std::int64_t D, std::int64_t H,
                    std::int64_t W, std::int64_t KD, std::int64_t KH,
                    std::int64_t KW) {
  const std::int64_t pd = KD / 2, ph = KH / 2, pw = KW / 2;
  const std::int64_t vol = D * H * W;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t f = 0; f < F; ++f) {
      double* out_nf = out + (n * F + f) * vol;
      std::fill(out_nf, out_nf + vol, bias[f]);
      for (std::int64_t c = 0; c < C; ++c) {
        const double* in_nc = in + (n * C + c) * vol;
        const double* ker_fc = ker + (f * C + c) * KD * KH * KW;
        for (std::int64_t kz = 0; kz < KD; ++kz) {
          const std::int64_t oz = kz - pd;
          const std::int64_t zlo = std::max<std::int64_t>(0, -oz);
          const std::int64_t zhi = std::min<std::int64_t>(D, D - oz);
          for (std::int64_t ky = 0; ky < KH; ++ky) {
            const std::int64_t oy = ky - ph;
            const std::int64_t ylo = std::max<std::int64_t>(0, -oy);
            const std::int64_t yhi = std::min<std::int64_t>(H, H - oy);
            for (std::int64_t kx = 0; kx < KW; ++kx) {
              const std::int64_t ox = kx - pw;
              const std::int64_t xlo = std::max<std::int64_t>(0, -ox);
              const std::int64_t xhi = std::min<std::int64_t>(W, W - ox);
              const double w = ker_fc[(kz * KH + ky) * KW + kx];
              if (w == 0.0) continue;
              for (std::int64_t z = zlo; z < zhi; ++z) {
                for (std::int64_t y = ylo; y < yhi; ++y) {
                  const double* irow =
                      in_nc + ((z + oz) * H + (y + oy)) * W + ox;
                  double* orow = out_nf + (z * H + y) * W;
                  for (std::int64_t x = xlo; x < xhi; ++x)
                    orow[x] += w * irow[x];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv3d_backward(const double* in, const double* ker, const double* gout,
                     double* gin, double* gker, double* gbias, std::int64_t N,
                     std::int64_t C, std::int64_t F, std::int64_t D,
                     std::int64_t H, std::int64_t W, std::int64_t KD,
                     std::int64_t KH, std::int64_t KW) {
  const std::int64_t pd = KD / 2, ph = KH / 2, pw = KW / 2;
  const std::int64_t vol = D * H * W;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t f = 0; f < F; ++f) {
      const double* g_nf = gout + (n * F + f) * vol;
      if (gbias) {
        double s = 0.0;
        for (std::int64_t i = 0; i < vol; ++i) s += g_nf[i];
        gbias[f] += s;
      }
      if (!gin && !gker) continue;
      for (std::int64_t c = 0; c < C; ++c) {
        const double* in_nc = in + (n * C + c) * vol;
        double* gin_nc = gin ? gin + (n * C + c) * vol : nullptr;
        const double* ker_fc = ker + (f * C + c) * KD * KH * KW;
        double* gker_fc = gker ? gker + (f * C + c) * KD * KH * KW : nullptr;
        for (std::int64_t kz = 0; kz < KD; ++kz) {
          const std::int64_t oz = kz - pd;
          const std::int64_t zlo = std::max<std::int64_t>(0, -oz);
          const std::int64_t zhi = std::min<std::int64_t>(D, D - oz);
          for (std::int64_t ky = 0; ky < KH; ++ky) {
            const std::int64_t oy = ky - ph;
            const std::int64_t ylo = std::max<std::int64_t>(0, -oy);
            const std::int64_t yhi = std::min<std::int64_t>(H, H - oy);
            for (std::int64_t kx = 0; kx < KW; ++kx) {
              const std::int64_t ox = kx - pw;
              const std::int64_t xlo = std::max<std::int64_t>(0, -ox);
              const std::int64_t xhi = std::min<std::int64_t>(W, W - ox);
              const double w = ker_fc[(kz * KH + ky) * KW + kx];
              double s = 0.0;
              for (std::int64_t z = zlo; z < zhi; ++z) {
                for (std::int64_t y = ylo; y < yhi; ++y) {
                  const double* grow = g_nf + (z * H + y) * W;
                  const std::int64_t ibase =
                      ((z + oz) * H + (y + oy)) * W + ox;
                  if (gin_nc && gker_fc) {
                    const double* irow = in_nc + ibase;
                    double* drow = gin_nc + ibase;
                    for (std::int64_t x = xlo; x < xhi; ++x) {
                      s += grow[x] * irow[x];
                      drow[x] += w * grow[x];
                    }
                  } else if (gker_fc) {
                    const double* irow = in_nc + ibase;
                    for (std::int64_t x = xlo; x < xhi; ++x)
                      s += grow[x] * irow[x];
                  } else {
                    double* drow = gin_nc + ibase;
                    for (std::int64_t x = xlo; x < xhi; ++x)
                      drow[x] += w * grow[x];
                  }
                }
              }
              if (gker_fc) gker_fc[(kz * KH + ky) * KW + kx] += s;
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Graph::record(const std::vector<Tensor>& inputs, Tensor output,
                     std::function<void()> backprop) {
  bool path = false;
  for (const auto& in : inputs) path = path || in.on_grad_path();
  output.impl_->grad_path = path;
  producer_[output.key()] = nodes_.size();
  nodes_.push_back(Node{output, std::move(backprop)});
  return output;
}

Tensor Graph::conv(const Tensor& input, const Tensor& kernel,
                   const Tensor& bias) {
  require_defined(input, "conv");
  require_defined(kernel, "conv");
  require_defined(bias, "conv");
  const int rank = input.rank();
  const int spatial = rank - 2;
  if (spatial != 2 && spatial != 3) {
    throw ShapeError("conv: spatial rank must be 2 or 3, input is " +
                     shape_str(input.shape()));
  }
  if (kernel.rank() != rank) {
    throw ShapeError("conv: kernel rank " + shape_str(kernel.shape()) +
                     " does not match input " + shape_str(input.shape()));
  }
  if (input.shape()[1] != kernel.shape()[1]) {
    throw ShapeError("conv: channel mismatch, input has " +
                     std::to_string(input.shape()[1]) + ", kernel expects " +
                     std::to_string(kernel.shape()[1]));
  }
  for (int d = 2; d < rank; ++d) {
    if (kernel.shape()[d] % 2 == 0) {
      throw ConfigError("conv: kernel extents must be odd, got " +
                        shape_str(kernel.shape()));
    }
  }
  const std::int64_t F = kernel.shape()[0];
  if (bias.rank() != 1 || bias.shape()[0] != F) {
    throw ShapeError("conv: bias must be [" + std::to_string(F) + "], got " +
                     shape_str(bias.shape()));
  }

  Shape out_shape = input.shape();
  out_shape[1] = F;
  Tensor out = Tensor::zeros(out_shape);

  const std::int64_t N = input.shape()[0];
  const std::int64_t C = input.shape()[1];
  if (spatial == 2) {
    conv2d_forward(input.values().data(), kernel.values().data(),
                   bias.values().data(), out.values_mut().data(), N, C, F,
                   input.shape()[2], input.shape()[3], kernel.shape()[2],
                   kernel.shape()[3]);
  } else {
    conv3d_forward(input.values().data(), kernel.values().data(),
                   bias.values().data(), out.values_mut().data(), N, C, F,
                   input.shape()[2], input.shape()[3], input.shape()[4],
                   kernel.shape()[2], kernel.shape()[3], kernel.shape()[4]);
  }

  Tensor in_t = input, ker_t = kernel, bias_t = bias;
  return record({input, kernel, bias}, out, [in_t, ker_t, bias_t, out,
                                             spatial]() mutable {
    if (!out.has_grad()) return;
    double* gin = in_t.on_grad_path() ? in_t.grad_mut().data() : nullptr;
    double* gker = ker_t.on_grad_path() ? ker_t.grad_mut().data() : nullptr;
    double* gbias = bias_t.on_grad_path() ? bias_t.grad_mut().data() : nullptr;
    if (!gin && !gker && !gbias) return;
    const auto& is = in_t.shape();
    const auto& ks = ker_t.shape();
    if (spatial == 2) {
      conv2d_backward(in_t.values().data(), ker_t.values().data(),
                      out.grad().data(), gin, gker, gbias, is[0], is[1], ks[0],
                      is[2], is[3], ks[2], ks[3]);
    } else {
      conv3d_backward(in_t.values().data(), ker_t.values().data(),
                      out.grad().data(), gin, gker, gbias, is[0], is[1], ks[0],
                      is[2], is[3], is[4], ks[2], ks[3], ks[4]);
    }
  });
}

Tensor Graph::relu(const Tensor& x) {
  require_defined(x, "relu");
  Tensor y = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor xt = x;
  return record({x}, y, [xt, y]() mutable {
    if (!y.has_grad() || !xt.on_grad_path()) return;
    const auto g = y.grad();
    const auto xv = xt.values();
    auto xg = xt.grad_mut();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) xg[i] += g[i];
    }
  });
}

Tensor Graph::normalized_relu(const Tensor& x) {
  require_defined(x, "normalized_relu");
  if (x.rank() < 1) throw ShapeError("normalized_relu: rank >= 1 required");
  const std::int64_t n_samples = x.shape()[0];
  const std::int64_t per = x.numel() / n_samples;

  Tensor y = Tensor::zeros(x.shape());
  auto maxima = std::make_shared<std::vector<double>>(n_samples, 0.0);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(n_samples, -1);
  const auto xv = x.values();
  auto yv = y.values_mut();
  for (std::int64_t s = 0; s < n_samples; ++s) {
    const std::int64_t base = s * per;
    double m = 0.0;
    std::int64_t arg = -1;
    for (std::int64_t i = 0; i < per; ++i) {
      const double r = xv[base + i] > 0.0 ? xv[base + i] : 0.0;
      if (r > m) {
        m = r;
        arg = i;
      }
    }
    (*maxima)[s] = m;
    (*argmax)[s] = arg;
    if (arg >= 0) {
      for (std::int64_t i = 0; i < per; ++i) {
        const double r = xv[base + i] > 0.0 ? xv[base + i] : 0.0;
        yv[base + i] = r / m;
      }
    }
  }

  Tensor xt = x;
  return record({x}, y, [xt, y, maxima, argmax, n_samples, per]() mutable {
    if (!y.has_grad() || !xt.on_grad_path()) return;
    const auto g = y.grad();
    const auto xv = xt.values();
    const auto yv = y.values();
    auto xg = xt.grad_mut();
    for (std::int64_t s = 0; s < n_samples; ++s) {
      const std::int64_t arg = (*argmax)[s];
      if (arg < 0) continue;  // all-zero sample: flat region, zero gradient
      const double m = (*maxima)[s];
      const std::int64_t base = s * per;
      double sum_gy = 0.0;
      for (std::int64_t i = 0; i < per; ++i) sum_gy += g[base + i] * yv[base + i];
      for (std::int64_t i = 0; i < per; ++i) {
        if (xv[base + i] > 0.0) xg[base + i] += g[base + i] / m;
      }
      xg[base + arg] -= sum_gy / m;
    }
  });
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  Tensor y = Tensor::zeros(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + bv[i];
  Tensor at = a, bt = b;
  return record({a, b}, y, [at, bt, y]() mutable {
    if (!y.has_grad()) return;
    const auto g = y.grad();
    if (at.on_grad_path()) {
      auto ag = at.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
    }
    if (bt.on_grad_path()) {
      auto bg = bt.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i];
    }
  });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  Tensor y = Tensor::zeros(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] * bv[i];
  Tensor at = a, bt = b;
  return record({a, b}, y, [at, bt, y]() mutable {
    if (!y.has_grad()) return;
    const auto g = y.grad();
    const auto av = at.values();
    const auto bv = bt.values();
    if (at.on_grad_path()) {
      auto ag = at.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bv[i];
    }
    if (bt.on_grad_path()) {
      auto bg = bt.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * av[i];
    }
  });
}

Tensor Graph::div(const Tensor& num, const Tensor& den) {
  require_defined(num, "div");
  require_defined(den, "div");
  require_same_shape(num, den, "div");
  Tensor y = Tensor::zeros(num.shape());
  const auto nv = num.values();
  const auto dv = den.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < nv.size(); ++i) yv[i] = nv[i] / dv[i];
  Tensor nt = num, dt = den;
  return record({num, den}, y, [nt, dt, y]() mutable {
    if (!y.has_grad()) return;
    const auto g = y.grad();
    const auto dv = dt.values();
    const auto yv = y.values();
    if (nt.on_grad_path()) {
      auto ng = nt.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ng[i] += g[i] / dv[i];
    }
    if (dt.on_grad_path()) {
      auto dg = dt.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) dg[i] -= g[i] * yv[i] / dv[i];
    }
  });
}

Tensor Graph::concat_channels(const Tensor& a, const Tensor& b) {
  require_defined(a, "concat_channels");
  require_defined(b, "concat_channels");
  if (a.rank() != b.rank() || a.rank() < 3) {
    throw ShapeError("concat_channels: need matching [N,C,spatial...] ranks, got " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  for (int d = 0; d < a.rank(); ++d) {
    if (d != 1 && a.shape()[d] != b.shape()[d]) {
      throw ShapeError("concat_channels: non-channel extents differ, " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  const std::int64_t N = a.shape()[0];
  const std::int64_t ca = a.shape()[1], cb = b.shape()[1];
  std::int64_t sp = 1;
  for (int d = 2; d < a.rank(); ++d) sp *= a.shape()[d];

  Shape out_shape = a.shape();
  out_shape[1] = ca + cb;
  Tensor y = Tensor::zeros(out_shape);
  const auto av = a.values();
  const auto bv = b.values();
  auto yv = y.values_mut();
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy_n(av.data() + n * ca * sp, ca * sp,
                yv.data() + n * (ca + cb) * sp);
    std::copy_n(bv.data() + n * cb * sp, cb * sp,
                yv.data() + n * (ca + cb) * sp + ca * sp);
  }
  Tensor at = a, bt = b;
  return record({a, b}, y, [at, bt, y, N, ca, cb, sp]() mutable {
    if (!y.has_grad()) return;
    const auto g = y.grad();
    for (std::int64_t n = 0; n < N; ++n) {
      const double* gn = g.data() + n * (ca + cb) * sp;
      if (at.on_grad_path()) {
        auto ag = at.grad_mut();
        double* dst = ag.data() + n * ca * sp;
        for (std::int64_t i = 0; i < ca * sp; ++i) dst[i] += gn[i];
      }
      if (bt.on_grad_path()) {
        auto bg = bt.grad_mut();
        double* dst = bg.data() + n * cb * sp;
        for (std::int64_t i = 0; i < cb * sp; ++i) dst[i] += gn[ca * sp + i];
      }
    }
  });
}

Tensor Graph::max_pool(const Tensor& x) {
  require_defined(x, "max_pool");
  const int rank = x.rank();
  const int spatial = rank - 2;
  if (spatial != 2 && spatial != 3) {
    throw ShapeError("max_pool: spatial rank must be 2 or 3, input is " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  for (int d = 2; d < rank; ++d) {
    if (x.shape()[d] % 2 != 0 || x.shape()[d] < 2) {
      throw ShapeError("max_pool: spatial extents must be even and >= 2, got " +
                       shape_str(x.shape()));
    }
    out_shape[d] = x.shape()[d] / 2;
  }
  Tensor y = Tensor::zeros(out_shape);
  auto arg = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(y.numel()));
  const auto xv = x.values();
  auto yv = y.values_mut();
  const std::int64_t nc = x.shape()[0] * x.shape()[1];

  if (spatial == 2) {
    const std::int64_t H = x.shape()[2], W = x.shape()[3];
    const std::int64_t h2 = H / 2, w2 = W / 2;
    for (std::int64_t p = 0; p < nc; ++p) {
      const double* in = xv.data() + p * H * W;
      double* out = yv.data() + p * h2 * w2;
      std::int64_t* ap = arg->data() + p * h2 * w2;
      for (std::int64_t oy = 0; oy < h2; ++oy) {
        for (std::int64_t ox = 0; ox < w2; ++ox) {
          const std::int64_t base = 2 * oy * W + 2 * ox;
          // row-major window order; strict > keeps the first maximum
          std::int64_t bi = base;
          double best = in[base];
          if (in[base + 1] > best) { best = in[base + 1]; bi = base + 1; }
          if (in[base + W] > best) { best = in[base + W]; bi = base + W; }
          if (in[base + W + 1] > best) { best = in[base + W + 1]; bi = base + W + 1; }
          out[oy * w2 + ox] = best;
          ap[oy * w2 + ox] = p * H * W + bi;
        }
      }
    }
  } else {
    const std::int64_t D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    const std::int64_t d2 = D / 2, h2 = H / 2, w2 = W / 2;
    for (std::int64_t p = 0; p < nc; ++p) {
      const double* in = xv.data() + p * D * H * W;
      double* out = yv.data() + p * d2 * h2 * w2;
      std::int64_t* ap = arg->data() + p * d2 * h2 * w2;
      for (std::int64_t oz = 0; oz < d2; ++oz) {
        for (std::int64_t oy = 0; oy < h2; ++oy) {
          for (std::int64_t ox = 0; ox < w2; ++ox) {
            std::int64_t bi = -1;
            double best = -std::numeric_limits<double>::infinity();
            for (std::int64_t dz = 0; dz < 2; ++dz) {
              for (std::int64_t dy = 0; dy < 2; ++dy) {
                for (std::int64_t dx = 0; dx < 2; ++dx) {
                  const std::int64_t i =
                      ((2 * oz + dz) * H + (2 * oy + dy)) * W + 2 * ox + dx;
                  if (in[i] > best) {
                    best = in[i];
                    bi = i;
                  }
                }
              }
            }
            out[(oz * h2 + oy) * w2 + ox] = best;
            ap[(oz * h2 + oy) * w2 + ox] = p * D * H * W + bi;
          }
        }
      }
    }
  }

  Tensor xt = x;
  return record({x}, y, [xt, y, arg]() mutable {
    if (!y.has_grad() || !xt.on_grad_path()) return;
    const auto g = y.grad();
    auto xg = xt.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) xg[(*arg)[i]] += g[i];
  });
}

Tensor Graph::upsample_nearest(const Tensor& x) {
  require_defined(x, "upsample_nearest");
  const int rank = x.rank();
  const int spatial = rank - 2;
  if (spatial != 2 && spatial != 3) {
    throw ShapeError("upsample_nearest: spatial rank must be 2 or 3, input is " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  for (int d = 2; d < rank; ++d) out_shape[d] = x.shape()[d] * 2;
  Tensor y = Tensor::zeros(out_shape);
  const auto xv = x.values();
  auto yv = y.values_mut();
  const std::int64_t nc = x.shape()[0] * x.shape()[1];

  if (spatial == 2) {
    const std::int64_t H = x.shape()[2], W = x.shape()[3];
    for (std::int64_t p = 0; p < nc; ++p) {
      const double* in = xv.data() + p * H * W;
      double* out = yv.data() + p * 4 * H * W;
      for (std::int64_t y2 = 0; y2 < 2 * H; ++y2) {
        const double* irow = in + (y2 / 2) * W;
        double* orow = out + y2 * 2 * W;
        for (std::int64_t x2 = 0; x2 < 2 * W; ++x2) orow[x2] = irow[x2 / 2];
      }
    }
  } else {
    const std::int64_t D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    for (std::int64_t p = 0; p < nc; ++p) {
      const double* in = xv.data() + p * D * H * W;
      double* out = yv.data() + p * 8 * D * H * W;
      for (std::int64_t z2 = 0; z2 < 2 * D; ++z2) {
        for (std::int64_t y2 = 0; y2 < 2 * H; ++y2) {
          const double* irow = in + ((z2 / 2) * H + y2 / 2) * W;
          double* orow = out + (z2 * 2 * H + y2) * 2 * W;
          for (std::int64_t x2 = 0; x2 < 2 * W; ++x2) orow[x2] = irow[x2 / 2];
        }
      }
    }
  }

  Tensor xt = x;
  const int sp = spatial;
  return record({x}, y, [xt, y, sp]() mutable {
    if (!y.has_grad() || !xt.on_grad_path()) return;
    const auto g = y.grad();
    auto xg = xt.grad_mut();
    const auto& is = xt.shape();
    const std::int64_t nc = is[0] * is[1];
    if (sp == 2) {
      const std::int64_t H = is[2], W = is[3];
      for (std::int64_t p = 0; p < nc; ++p) {
        const double* gp = g.data() + p * 4 * H * W;
        double* xp = xg.data() + p * H * W;
        for (std::int64_t y2 = 0; y2 < 2 * H; ++y2) {
          double* xrow = xp + (y2 / 2) * W;
          const double* grow = gp + y2 * 2 * W;
          for (std::int64_t x2 = 0; x2 < 2 * W; ++x2) xrow[x2 / 2] += grow[x2];
        }
      }
    } else {
      const std::int64_t D = is[2], H = is[3], W = is[4];
      for (std::int64_t p = 0; p < nc; ++p) {
        const double* gp = g.data() + p * 8 * D * H * W;
        double* xp = xg.data() + p * D * H * W;
        for (std::int64_t z2 = 0; z2 < 2 * D; ++z2) {
          for (std::int64_t y2 = 0; y2 < 2 * H; ++y2) {
            double* xrow = xp + ((z2 / 2) * H + y2 / 2) * W;
            const double* grow = gp + (z2 * 2 * H + y2) * 2 * W;
            for (std::int64_t x2 = 0; x2 < 2 * W; ++x2)
              xrow[x2 / 2] += grow[x2];
          }
        }
      }
    }
  });
}

Tensor Graph::sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (const double v : x.values()) s += v;
  Tensor y = Tensor::scalar(s);
  Tensor xt = x;
  return record({x}, y, [xt, y]() mutable {
    if (!y.has_grad() || !xt.on_grad_path()) return;
    const double g = y.grad()[0];
    auto xg = xt.grad_mut();
    for (auto& v : xg) v += g;
  });
}

Tensor Graph::affine(const Tensor& x, double scale, double shift) {
  require_defined(x, "affine");
  Tensor y = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto yv = y.values_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = scale * xv[i] + shift;
  Tensor xt = x;
  return record({x}, y, [xt, y, scale]() mutable {
    if (!y.has_grad() || !xt.on_grad_path()) return;
    const auto g = y.grad();
    auto xg = xt.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += scale * g[i];
  });
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        shape_str(loss.shape()));
  }
  const auto it = producer_.find(loss.key());
  if (it == producer_.end()) {
    throw StateError("backward: loss was not produced by this graph; run the forward pass first");
  }
  Tensor seed = loss;
  seed.grad_mut()[0] += 1.0;
  for (std::size_t i = it->second + 1; i-- > 0;) {
    if (nodes_[i].output.has_grad()) nodes_[i].backprop();
  }
}

// ---------------------------------------------------------------------------

double gradcheck_relative_error(double analytic, double numeric) {
  const double diff = std::fabs(analytic - numeric);
  const double scale =
      std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
  return diff / scale;
}

GradCheckReport check_gradients(
    const std::function<Tensor(Graph&)>& forward,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double tolerance, int samples_per_param, double step, std::uint64_t seed) {
  if (samples_per_param < 1) {
    throw ContractError("check_gradients: samples_per_param must be >= 1");
  }

  for (const auto& [name, tensor] : params) {
    Tensor t = tensor;
    t.drop_grad();
  }
  Graph graph;
  Tensor loss = forward(graph);
  if (loss.numel() != 1) {
    throw ContractError("check_gradients: forward must return a scalar loss");
  }
  graph.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, tensor] : params) {
    if (tensor.has_grad()) {
      analytic.emplace_back(tensor.grad().begin(), tensor.grad().end());
    } else {
      analytic.emplace_back(static_cast<std::size_t>(tensor.numel()), 0.0);
    }
  }

  const auto eval = [&forward]() {
    Graph g;
    return forward(g).item();
  };

  GradCheckReport report;
  report.tolerance = tolerance;
  Rng rng(mix_seed(seed, 0x6772616463686bULL));  // "gradchk"
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor tensor = params[pi].second;
    GradCheckEntry entry;
    entry.name = params[pi].first;

    std::vector<std::int64_t> coords;
    const std::int64_t n = tensor.numel();
    if (n <= samples_per_param) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      std::unordered_set<std::int64_t> seen;
      while (static_cast<int>(coords.size()) < samples_per_param) {
        const std::int64_t c = rng.uniform_int(0, n - 1);
        if (seen.insert(c).second) coords.push_back(c);
      }
    }

    auto vals = tensor.values_mut();
    for (const std::int64_t c : coords) {
      const double orig = vals[static_cast<std::size_t>(c)];
      vals[static_cast<std::size_t>(c)] = orig + step;
      const double fp = eval();
      vals[static_cast<std::size_t>(c)] = orig - step;
      const double fm = eval();
      vals[static_cast<std::size_t>(c)] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double rel = gradcheck_relative_error(
          analytic[pi][static_cast<std::size_t>(c)], numeric);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    entry.pass = entry.max_rel_error <= tolerance;
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace contseg
