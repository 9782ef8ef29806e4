#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "saep/error.hpp"
#include "saep/parallel.hpp"
#include "saep/tensor.hpp"

namespace saep {

/// Patch features on an H×W grid; values has shape [H, W, C].
struct FeatureGrid {
  Tensor values;

  explicit FeatureGrid(Tensor v) : values(std::move(v)) {
    require(values.rank() == 3, Errc::shape, "FeatureGrid expects a rank-3 tensor");
  }
  std::int64_t h() const { return values.shape()[0]; }
  std::int64_t w() const { return values.shape()[1]; }
  std::int64_t c() const { return values.shape()[2]; }
};

/// seq [N, C] in raster order -> grid [H, W, C]; pure reshape.
inline FeatureGrid reorganize(const Tensor& seq, std::int64_t h, std::int64_t w) {
  require(seq.rank() == 2, Errc::shape, "reorganize expects a [N, C] tensor");
  require(h >= 1 && w >= 1, Errc::shape, "grid extents must be positive");
  require(seq.shape()[0] == h * w, Errc::shape,
          "sequence length " + std::to_string(seq.shape()[0]) +
              " does not tile a " + std::to_string(h) + "x" + std::to_string(w) +
              " grid");
  return FeatureGrid(Tensor({h, w, seq.shape()[1]},
                            {seq.data().begin(), seq.data().end()}));
}

/// grid [H, W, C] -> seq [H*W, C]; inverse of reorganize.
inline Tensor flatten(const FeatureGrid& g) {
  return Tensor({g.h() * g.w(), g.c()},
                {g.values.data().begin(), g.values.data().end()});
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution: channel mixing at each spatial position.

struct PointwiseWorkspace {
  Tensor input;   // [H, W, Cin]
  Tensor weight;  // [Cin, Cout]
};

struct PointwiseGrads {
  FeatureGrid input;
  Tensor weight;
  Tensor bias;
};

inline FeatureGrid pointwise_conv_fwd(const FeatureGrid& g, const Tensor& weight,
                                      const Tensor& bias,
                                      PointwiseWorkspace* ws = nullptr) {
  require(weight.rank() == 2 && weight.shape()[0] == g.c(), Errc::shape,
          "pointwise weight must be [Cin, Cout] with Cin matching the grid");
  const std::int64_t cin = weight.shape()[0];
  const std::int64_t cout = weight.shape()[1];
  require(bias.rank() == 1 && bias.shape()[0] == cout, Errc::shape,
          "pointwise bias must be [Cout]");

  const std::int64_t hw = g.h() * g.w();
  Tensor out({g.h(), g.w(), cout});
  const float* in = g.values.data().data();
  const float* wp = weight.data().data();
  const float* bp = bias.data().data();
  float* op = out.data().data();
  parallel_for(hw, [&](std::int64_t p) {
    std::vector<double> acc(static_cast<std::size_t>(cout));
    for (std::int64_t o = 0; o < cout; ++o)
      acc[static_cast<std::size_t>(o)] = static_cast<double>(bp[o]);
    const float* row = in + p * cin;
    for (std::int64_t i = 0; i < cin; ++i) {
      const double x = static_cast<double>(row[i]);
      const float* wrow = wp + i * cout;
      for (std::int64_t o = 0; o < cout; ++o)
        acc[static_cast<std::size_t>(o)] += x * static_cast<double>(wrow[o]);
    }
    for (std::int64_t o = 0; o < cout; ++o)
      op[p * cout + o] = static_cast<float>(acc[static_cast<std::size_t>(o)]);
  });
  if (ws) *ws = PointwiseWorkspace{g.values, weight};
  return FeatureGrid(std::move(out));
}

inline PointwiseGrads pointwise_conv_bwd(const PointwiseWorkspace& ws,
                                         const FeatureGrid& upstream) {
  const std::int64_t h = ws.input.shape()[0];
  const std::int64_t w = ws.input.shape()[1];
  const std::int64_t cin = ws.weight.shape()[0];
  const std::int64_t cout = ws.weight.shape()[1];
  require(upstream.h() == h && upstream.w() == w && upstream.c() == cout,
          Errc::shape, "upstream shape does not match the pointwise forward");

  const std::int64_t hw = h * w;
  const float* in = ws.input.data().data();
  const float* wp = ws.weight.data().data();
  const float* up = upstream.values.data().data();

  Tensor gin({h, w, cin});
  float* gip = gin.data().data();
  parallel_for(hw, [&](std::int64_t p) {
    const float* urow = up + p * cout;
    for (std::int64_t i = 0; i < cin; ++i) {
      double acc = 0.0;
      const float* wrow = wp + i * cout;
      for (std::int64_t o = 0; o < cout; ++o)
        acc += static_cast<double>(urow[o]) * static_cast<double>(wrow[o]);
      gip[p * cin + i] = static_cast<float>(acc);
    }
  });

  Tensor gw({cin, cout});
  float* gwp = gw.data().data();
  parallel_for(cin, [&](std::int64_t i) {
    std::vector<double> acc(static_cast<std::size_t>(cout), 0.0);
    for (std::int64_t p = 0; p < hw; ++p) {
      const double x = static_cast<double>(in[p * cin + i]);
      const float* urow = up + p * cout;
      for (std::int64_t o = 0; o < cout; ++o)
        acc[static_cast<std::size_t>(o)] += x * static_cast<double>(urow[o]);
    }
    for (std::int64_t o = 0; o < cout; ++o)
      gwp[i * cout + o] = static_cast<float>(acc[static_cast<std::size_t>(o)]);
  });

  Tensor gb({cout});
  for (std::int64_t o = 0; o < cout; ++o) {
    double acc = 0.0;
    for (std::int64_t p = 0; p < hw; ++p)
      acc += static_cast<double>(up[p * cout + o]);
    gb.data()[static_cast<std::size_t>(o)] = static_cast<float>(acc);
  }

  return PointwiseGrads{FeatureGrid(std::move(gin)), std::move(gw), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Depthwise convolution, stride = kernel size: non-overlapping tiles, no
// padding, no cross-channel mixing.

struct DepthwiseWorkspace {
  Tensor input;    // [H, W, C]
  Tensor kernels;  // [C, s, s]
};

struct DepthwiseGrads {
  FeatureGrid input;
  Tensor kernels;
  Tensor bias;
};

inline FeatureGrid depthwise_conv_fwd(const FeatureGrid& g, const Tensor& kernels,
                                      const Tensor& bias, std::int64_t s,
                                      DepthwiseWorkspace* ws = nullptr) {
  require(s >= 1, Errc::shape, "depthwise stride must be >= 1");
  require(g.h() % s == 0 && g.w() % s == 0, Errc::shape,
          "grid extents must be divisible by the stride (no padding)");
  const std::int64_t c = g.c();
  require(kernels.rank() == 3 && kernels.shape()[0] == c &&
              kernels.shape()[1] == s && kernels.shape()[2] == s,
          Errc::shape, "depthwise kernels must be [C, s, s]");
  require(bias.rank() == 1 && bias.shape()[0] == c, Errc::shape,
          "depthwise bias must be [C]");

  const std::int64_t oh = g.h() / s;
  const std::int64_t ow = g.w() / s;
  Tensor out({oh, ow, c});
  const float* in = g.values.data().data();
  const float* kp = kernels.data().data();
  const float* bp = bias.data().data();
  float* op = out.data().data();
  const std::int64_t iw = g.w();
  parallel_for(oh * ow, [&](std::int64_t p) {
    const std::int64_t r = p / ow;
    const std::int64_t cc = p % ow;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double acc = static_cast<double>(bp[ch]);
      // Window accumulation is u-major then v so results are reproducible.
      for (std::int64_t u = 0; u < s; ++u)
        for (std::int64_t v = 0; v < s; ++v)
          acc += static_cast<double>(in[((r * s + u) * iw + cc * s + v) * c + ch]) *
                 static_cast<double>(kp[(ch * s + u) * s + v]);
      op[p * c + ch] = static_cast<float>(acc);
    }
  });
  if (ws) *ws = DepthwiseWorkspace{g.values, kernels};
  return FeatureGrid(std::move(out));
}

inline DepthwiseGrads depthwise_conv_bwd(const DepthwiseWorkspace& ws,
                                         const FeatureGrid& upstream) {
  const std::int64_t h = ws.input.shape()[0];
  const std::int64_t w = ws.input.shape()[1];
  const std::int64_t c = ws.input.shape()[2];
  const std::int64_t s = ws.kernels.shape()[1];
  const std::int64_t oh = h / s;
  const std::int64_t ow = w / s;
  require(upstream.h() == oh && upstream.w() == ow && upstream.c() == c,
          Errc::shape, "upstream shape does not match the depthwise forward");

  const float* in = ws.input.data().data();
  const float* kp = ws.kernels.data().data();
  const float* up = upstream.values.data().data();

  // Each input cell belongs to exactly one tile, so this is a scatter with no
  // accumulation.
  Tensor gin({h, w, c});
  float* gip = gin.data().data();
  parallel_for(oh * ow, [&](std::int64_t p) {
    const std::int64_t r = p / ow;
    const std::int64_t cc = p % ow;
    for (std::int64_t u = 0; u < s; ++u)
      for (std::int64_t v = 0; v < s; ++v)
        for (std::int64_t ch = 0; ch < c; ++ch)
          gip[((r * s + u) * w + cc * s + v) * c + ch] = static_cast<float>(
              static_cast<double>(up[p * c + ch]) *
              static_cast<double>(kp[(ch * s + u) * s + v]));
  });

  Tensor gk({c, s, s});
  float* gkp = gk.data().data();
  parallel_for(c, [&](std::int64_t ch) {
    std::vector<double> acc(static_cast<std::size_t>(s * s), 0.0);
    for (std::int64_t p = 0; p < oh * ow; ++p) {
      const std::int64_t r = p / ow;
      const std::int64_t cc = p % ow;
      const double u0 = static_cast<double>(up[p * c + ch]);
      for (std::int64_t u = 0; u < s; ++u)
        for (std::int64_t v = 0; v < s; ++v)
          acc[static_cast<std::size_t>(u * s + v)] +=
              static_cast<double>(in[((r * s + u) * w + cc * s + v) * c + ch]) * u0;
    }
    for (std::int64_t uv = 0; uv < s * s; ++uv)
      gkp[ch * s * s + uv] = static_cast<float>(acc[static_cast<std::size_t>(uv)]);
  });

  Tensor gb({c});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::int64_t p = 0; p < oh * ow; ++p)
      acc += static_cast<double>(up[p * c + ch]);
    gb.data()[static_cast<std::size_t>(ch)] = static_cast<float>(acc);
  }

  return DepthwiseGrads{FeatureGrid(std::move(gin)), std::move(gk), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Average pooling, window = stride = s. The window weight is the f32 value of
// 1/s² so a depthwise conv loaded with uniform 1/s² kernels is bit-identical.

struct AvgPoolWorkspace {
  std::int64_t h = 0, w = 0, c = 0, s = 0;
};

inline float avg_pool_weight(std::int64_t s) {
  return 1.0f / static_cast<float>(s * s);
}

inline FeatureGrid avg_pool_fwd(const FeatureGrid& g, std::int64_t s,
                                AvgPoolWorkspace* ws = nullptr) {
  require(s >= 1, Errc::shape, "pool window must be >= 1");
  require(g.h() % s == 0 && g.w() % s == 0, Errc::shape,
          "grid extents must be divisible by the pool window");
  const std::int64_t c = g.c();
  const std::int64_t oh = g.h() / s;
  const std::int64_t ow = g.w() / s;
  const std::int64_t iw = g.w();
  const double inv = static_cast<double>(avg_pool_weight(s));

  Tensor out({oh, ow, c});
  const float* in = g.values.data().data();
  float* op = out.data().data();
  parallel_for(oh * ow, [&](std::int64_t p) {
    const std::int64_t r = p / ow;
    const std::int64_t cc = p % ow;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::int64_t u = 0; u < s; ++u)
        for (std::int64_t v = 0; v < s; ++v)
          acc += static_cast<double>(in[((r * s + u) * iw + cc * s + v) * c + ch]) * inv;
      op[p * c + ch] = static_cast<float>(acc);
    }
  });
  if (ws) *ws = AvgPoolWorkspace{g.h(), g.w(), c, s};
  return FeatureGrid(std::move(out));
}

inline FeatureGrid avg_pool_bwd(const AvgPoolWorkspace& ws, const FeatureGrid& upstream) {
  const std::int64_t oh = ws.h / ws.s;
  const std::int64_t ow = ws.w / ws.s;
  require(upstream.h() == oh && upstream.w() == ow && upstream.c() == ws.c,
          Errc::shape, "upstream shape does not match the pool forward");
  const double inv = static_cast<double>(avg_pool_weight(ws.s));

  Tensor gin({ws.h, ws.w, ws.c});
  const float* up = upstream.values.data().data();
  float* gip = gin.data().data();
  parallel_for(oh * ow, [&](std::int64_t p) {
    const std::int64_t r = p / ow;
    const std::int64_t cc = p % ow;
    for (std::int64_t u = 0; u < ws.s; ++u)
      for (std::int64_t v = 0; v < ws.s; ++v)
        for (std::int64_t ch = 0; ch < ws.c; ++ch)
          gip[((r * ws.s + u) * ws.w + cc * ws.s + v) * ws.c + ch] =
              static_cast<float>(static_cast<double>(up[p * ws.c + ch]) * inv);
  });
  return FeatureGrid(std::move(gin));
}

// ---------------------------------------------------------------------------
// Affine map y = x·W + b, row-wise.

struct LinearWorkspace {
  Tensor input;   // [M, Din]
  Tensor weight;  // [Din, Dout]
};

struct LinearGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

inline Tensor linear_fwd(const Tensor& x, const Tensor& weight, const Tensor& bias,
                         LinearWorkspace* ws = nullptr) {
  require(x.rank() == 2, Errc::shape, "linear input must be [M, Din]");
  require(weight.rank() == 2 && weight.shape()[0] == x.shape()[1], Errc::shape,
          "linear weight must be [Din, Dout] with Din matching the input");
  const std::int64_t m = x.shape()[0];
  const std::int64_t din = weight.shape()[0];
  const std::int64_t dout = weight.shape()[1];
  require(bias.rank() == 1 && bias.shape()[0] == dout, Errc::shape,
          "linear bias must be [Dout]");

  Tensor out({m, dout});
  const float* xp = x.data().data();
  const float* wp = weight.data().data();
  const float* bp = bias.data().data();
  float* op = out.data().data();
  parallel_for(m, [&](std::int64_t row) {
    std::vector<double> acc(static_cast<std::size_t>(dout));
    for (std::int64_t o = 0; o < dout; ++o)
      acc[static_cast<std::size_t>(o)] = static_cast<double>(bp[o]);
    for (std::int64_t i = 0; i < din; ++i) {
      const double v = static_cast<double>(xp[row * din + i]);
      const float* wrow = wp + i * dout;
      for (std::int64_t o = 0; o < dout; ++o)
        acc[static_cast<std::size_t>(o)] += v * static_cast<double>(wrow[o]);
    }
    for (std::int64_t o = 0; o < dout; ++o)
      op[row * dout + o] = static_cast<float>(acc[static_cast<std::size_t>(o)]);
  });
  if (ws) *ws = LinearWorkspace{x, weight};
  return out;
}

inline LinearGrads linear_bwd(const LinearWorkspace& ws, const Tensor& upstream) {
  const std::int64_t m = ws.input.shape()[0];
  const std::int64_t din = ws.weight.shape()[0];
  const std::int64_t dout = ws.weight.shape()[1];
  require(upstream.rank() == 2 && upstream.shape()[0] == m &&
              upstream.shape()[1] == dout,
          Errc::shape, "upstream shape does not match the linear forward");

  const float* xp = ws.input.data().data();
  const float* wp = ws.weight.data().data();
  const float* up = upstream.data().data();

  Tensor gx({m, din});
  float* gxp = gx.data().data();
  parallel_for(m, [&](std::int64_t row) {
    for (std::int64_t i = 0; i < din; ++i) {
      double acc = 0.0;
      const float* wrow = wp + i * dout;
      for (std::int64_t o = 0; o < dout; ++o)
        acc += static_cast<double>(up[row * dout + o]) * static_cast<double>(wrow[o]);
      gxp[row * din + i] = static_cast<float>(acc);
    }
  });

  Tensor gw({din, dout});
  float* gwp = gw.data().data();
  parallel_for(din, [&](std::int64_t i) {
    std::vector<double> acc(static_cast<std::size_t>(dout), 0.0);
    for (std::int64_t row = 0; row < m; ++row) {
      const double v = static_cast<double>(xp[row * din + i]);
      for (std::int64_t o = 0; o < dout; ++o)
        acc[static_cast<std::size_t>(o)] += v * static_cast<double>(up[row * dout + o]);
    }
    for (std::int64_t o = 0; o < dout; ++o)
      gwp[i * dout + o] = static_cast<float>(acc[static_cast<std::size_t>(o)]);
  });

  Tensor gb({dout});
  for (std::int64_t o = 0; o < dout; ++o) {
    double acc = 0.0;
    for (std::int64_t row = 0; row < m; ++row)
      acc += static_cast<double>(up[row * dout + o]);
    gb.data()[static_cast<std::size_t>(o)] = static_cast<float>(acc);
  }

  return LinearGrads{std::move(gx), std::move(gw), std::move(gb)};
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).

struct GeluWorkspace {
  Tensor input;
};

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // √(2/π)
inline constexpr double kGeluA = 0.044715;

inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad_scalar(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}
}  // namespace detail

inline Tensor gelu_fwd(const Tensor& x, GeluWorkspace* ws = nullptr) {
  Tensor out(x.shape());
  const float* xp = x.data().data();
  float* op = out.data().data();
  parallel_for(x.size(), [&](std::int64_t i) {
    op[i] = static_cast<float>(detail::gelu_scalar(static_cast<double>(xp[i])));
  });
  if (ws) *ws = GeluWorkspace{x};
  return out;
}

inline Tensor gelu_bwd(const GeluWorkspace& ws, const Tensor& upstream) {
  require(ws.input.same_shape(upstream), Errc::shape,
          "upstream shape does not match the GELU forward");
  Tensor gin(ws.input.shape());
  const float* xp = ws.input.data().data();
  const float* up = upstream.data().data();
  float* gp = gin.data().data();
  parallel_for(gin.size(), [&](std::int64_t i) {
    gp[i] = static_cast<float>(static_cast<double>(up[i]) *
                               detail::gelu_grad_scalar(static_cast<double>(xp[i])));
  });
  return gin;
}

}  // namespace saep
