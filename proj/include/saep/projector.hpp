#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "saep/error.hpp"
#include "saep/grid_ops.hpp"
#include "saep/tensor.hpp"

namespace saep {

struct SaepConfig {
  std::int64_t h = 24;
  std::int64_t w = 24;
  std::int64_t c = 1024;   // encoder feature dim per level
  std::int64_t k = 5;      // number of encoder levels
  std::int64_t c_hid = 0;  // pointwise output channels; 0 means "same as c"
  std::int64_t stride = 2;
  std::int64_t d = 4096;   // output embedding dim
  bool use_multi_level = true;
  bool use_depthwise = true;
  bool use_pooling = true;
  std::uint64_t seed = 0;

  std::int64_t hidden() const { return c_hid > 0 ? c_hid : c; }
  std::int64_t k_eff() const { return use_multi_level ? k : 1; }
  std::int64_t tokens_out() const { return (h / stride) * (w / stride); }
};

/// Structural validation shared by init/forward/reporting. `code` lets each
/// entry point surface the error class its contract names.
inline void validate_config(const SaepConfig& cfg, Errc code = Errc::config) {
  require(cfg.h >= 1 && cfg.w >= 1 && cfg.c >= 1 && cfg.k >= 1 && cfg.d >= 1,
          code, "config extents must be positive");
  require(cfg.c_hid >= 0, code, "c_hid must be positive (or 0 for default)");
  require(cfg.stride >= 1, code, "stride must be >= 1");
  require(cfg.h % cfg.stride == 0 && cfg.w % cfg.stride == 0, code,
          "grid extents must be divisible by the stride");
  require(cfg.use_depthwise || cfg.use_pooling, code,
          "at least one of the depthwise/pooling branches must be enabled");
}

/// Per-level patch grids, shallowest encoder layer first.
struct MultiLevelFeatures {
  std::vector<std::int64_t> layer_ids;
  std::vector<FeatureGrid> grids;

  MultiLevelFeatures(std::vector<std::int64_t> ids, std::vector<FeatureGrid> gs)
      : layer_ids(std::move(ids)), grids(std::move(gs)) {
    require(!grids.empty(), Errc::arg, "at least one feature level is required");
    require(layer_ids.size() == grids.size(), Errc::arg,
            "layer_ids and grids must have equal length");
    for (std::size_t i = 1; i < layer_ids.size(); ++i)
      require(layer_ids[i - 1] < layer_ids[i], Errc::arg,
              "layer_ids must be strictly increasing");
    for (std::size_t i = 1; i < grids.size(); ++i)
      require(grids[i].values.same_shape(grids[0].values), Errc::shape,
              "all feature levels must share one grid shape");
  }
};

/// Ingestion rule for raw encoder dumps: a leading CLS row is stripped when
/// the sequence is one longer than the patch grid; exact length passes as-is.
inline FeatureGrid grid_from_sequence(const Tensor& seq, std::int64_t h,
                                      std::int64_t w) {
  require(seq.rank() == 2, Errc::shape, "feature sequence must be [N, C]");
  const std::int64_t rows = seq.shape()[0];
  const std::int64_t cols = seq.shape()[1];
  if (rows == h * w) return reorganize(seq, h, w);
  if (rows == h * w + 1) {
    Tensor body({rows - 1, cols});
    std::copy(seq.data().begin() + cols, seq.data().end(), body.data().begin());
    return reorganize(body, h, w);
  }
  fail(Errc::shape, "sequence of " + std::to_string(rows) +
                        " rows fits neither HW nor HW+1 for a " +
                        std::to_string(h) + "x" + std::to_string(w) + " grid");
}

struct SaepParams {
  Tensor pw_weight;    // [Cc*K_eff, Chid]
  Tensor pw_bias;      // [Chid]
  Tensor dw_kernels;   // [Chid, s, s]
  Tensor dw_bias;      // [Chid]
  Tensor mlp_w1;       // [Chid, D]
  Tensor mlp_b1;       // [D]
  Tensor mlp_w2;       // [D, D]
  Tensor mlp_b2;       // [D]
  // Gradient mirror, same shapes; backward accumulates into these.
  Tensor pw_weight_g, pw_bias_g, dw_kernels_g, dw_bias_g;
  Tensor mlp_w1_g, mlp_b1_g, mlp_w2_g, mlp_b2_g;

  static constexpr std::array<const char*, 8> field_names = {
      "pw_weight", "pw_bias", "dw_kernels", "dw_bias",
      "mlp_w1",    "mlp_b1",  "mlp_w2",     "mlp_b2"};

  std::array<Tensor*, 8> fields() {
    return {&pw_weight, &pw_bias, &dw_kernels, &dw_bias,
            &mlp_w1,    &mlp_b1,  &mlp_w2,     &mlp_b2};
  }
  std::array<const Tensor*, 8> fields() const {
    return {&pw_weight, &pw_bias, &dw_kernels, &dw_bias,
            &mlp_w1,    &mlp_b1,  &mlp_w2,     &mlp_b2};
  }
  std::array<Tensor*, 8> grads() {
    return {&pw_weight_g, &pw_bias_g, &dw_kernels_g, &dw_bias_g,
            &mlp_w1_g,    &mlp_b1_g,  &mlp_w2_g,     &mlp_b2_g};
  }

  void zero_grads() {
    for (Tensor* g : grads())
      for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] = 0.0f;
  }
};

inline std::array<Tensor::Shape, 8> saep_param_shapes(const SaepConfig& cfg) {
  const std::int64_t chid = cfg.hidden();
  return {Tensor::Shape{cfg.c * cfg.k_eff(), chid},
          Tensor::Shape{chid},
          Tensor::Shape{chid, cfg.stride, cfg.stride},
          Tensor::Shape{chid},
          Tensor::Shape{chid, cfg.d},
          Tensor::Shape{cfg.d},
          Tensor::Shape{cfg.d, cfg.d},
          Tensor::Shape{cfg.d}};
}

namespace detail {
inline Tensor kaiming_uniform(Rng& rng, Tensor::Shape shape, std::int64_t fan_in) {
  const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
  return rand_uniform(rng, std::move(shape), -bound, bound);
}

/// g += delta, elementwise in f64.
inline void accumulate(Tensor& g, const Tensor& delta) {
  require(g.same_shape(delta), Errc::shape, "gradient accumulation shape mismatch");
  for (std::int64_t i = 0; i < g.size(); ++i)
    g[i] = static_cast<float>(static_cast<double>(g[i]) +
                              static_cast<double>(delta[i]));
}
}  // namespace detail

/// Kaiming-uniform weights (bound √(6/fan_in)), zero biases, zero gradients.
/// Weight draw order is pw_weight, dw_kernels, mlp_w1, mlp_w2.
inline SaepParams saep_init(const SaepConfig& cfg, Rng& rng) {
  validate_config(cfg, Errc::arg);
  const auto shapes = saep_param_shapes(cfg);
  const std::int64_t chid = cfg.hidden();

  SaepParams p;
  p.pw_weight = detail::kaiming_uniform(rng, shapes[0], cfg.c * cfg.k_eff());
  p.pw_bias = Tensor::zeros(shapes[1]);
  p.dw_kernels = detail::kaiming_uniform(rng, shapes[2], cfg.stride * cfg.stride);
  p.dw_bias = Tensor::zeros(shapes[3]);
  p.mlp_w1 = detail::kaiming_uniform(rng, shapes[4], chid);
  p.mlp_b1 = Tensor::zeros(shapes[5]);
  p.mlp_w2 = detail::kaiming_uniform(rng, shapes[6], cfg.d);
  p.mlp_b2 = Tensor::zeros(shapes[7]);

  p.pw_weight_g = Tensor::zeros(shapes[0]);
  p.pw_bias_g = Tensor::zeros(shapes[1]);
  p.dw_kernels_g = Tensor::zeros(shapes[2]);
  p.dw_bias_g = Tensor::zeros(shapes[3]);
  p.mlp_w1_g = Tensor::zeros(shapes[4]);
  p.mlp_b1_g = Tensor::zeros(shapes[5]);
  p.mlp_w2_g = Tensor::zeros(shapes[6]);
  p.mlp_b2_g = Tensor::zeros(shapes[7]);
  return p;
}

inline void require_param_shapes(const SaepParams& p, const SaepConfig& cfg) {
  const auto shapes = saep_param_shapes(cfg);
  const auto fields = p.fields();
  for (std::size_t i = 0; i < fields.size(); ++i)
    require(fields[i]->shape() == shapes[i], Errc::shape,
            std::string("parameter ") + SaepParams::field_names[i] +
                " has a shape inconsistent with the config");
}

struct SaepWorkspace {
  SaepConfig config;
  PointwiseWorkspace pw;
  GeluWorkspace act1;
  bool has_dw = false;
  bool has_pool = false;
  DepthwiseWorkspace dw;
  AvgPoolWorkspace pool;
  LinearWorkspace l1;
  GeluWorkspace act2;
  LinearWorkspace l2;
};

namespace detail {
/// Channel-concatenates the consumed levels, shallowest first.
inline FeatureGrid stack_levels(const MultiLevelFeatures& feats,
                                const SaepConfig& cfg) {
  std::vector<const FeatureGrid*> used;
  if (cfg.use_multi_level) {
    require(static_cast<std::int64_t>(feats.grids.size()) == cfg.k, Errc::shape,
            "expected " + std::to_string(cfg.k) + " feature levels, got " +
                std::to_string(feats.grids.size()));
    for (const FeatureGrid& g : feats.grids) used.push_back(&g);
  } else {
    used.push_back(&feats.grids.back());
  }
  for (const FeatureGrid* g : used)
    require(g->h() == cfg.h && g->w() == cfg.w && g->c() == cfg.c, Errc::shape,
            "feature grid shape does not match the config");

  const std::int64_t k = static_cast<std::int64_t>(used.size());
  if (k == 1) return FeatureGrid(used[0]->values);
  Tensor out({cfg.h, cfg.w, cfg.c * k});
  float* op = out.data().data();
  for (std::int64_t p = 0; p < cfg.h * cfg.w; ++p)
    for (std::int64_t lv = 0; lv < k; ++lv) {
      const float* src = used[static_cast<std::size_t>(lv)]->values.data().data();
      std::copy(src + p * cfg.c, src + (p + 1) * cfg.c,
                op + p * cfg.c * k + lv * cfg.c);
    }
  return FeatureGrid(std::move(out));
}

/// Splits a stacked-channel gradient back into per-level grids.
inline std::vector<FeatureGrid> split_levels(const FeatureGrid& stacked,
                                             std::int64_t k) {
  const std::int64_t c = stacked.c() / k;
  std::vector<FeatureGrid> out;
  out.reserve(static_cast<std::size_t>(k));
  for (std::int64_t lv = 0; lv < k; ++lv) {
    Tensor t({stacked.h(), stacked.w(), c});
    float* dst = t.data().data();
    const float* src = stacked.values.data().data();
    for (std::int64_t p = 0; p < stacked.h() * stacked.w(); ++p)
      std::copy(src + p * stacked.c() + lv * c, src + p * stacked.c() + (lv + 1) * c,
                dst + p * c);
    out.emplace_back(std::move(t));
  }
  return out;
}
}  // namespace detail

/// Full pipeline: stack levels -> pointwise conv -> GELU -> depthwise and/or
/// pooling branch (added when both) -> flatten -> two-layer MLP. Returns
/// [M, D] tokens with M = (H/s)(W/s).
inline Tensor saep_forward(const MultiLevelFeatures& feats, const SaepParams& params,
                           const SaepConfig& cfg, SaepWorkspace* ws = nullptr) {
  require(cfg.use_depthwise || cfg.use_pooling, Errc::config,
          "at least one of the depthwise/pooling branches must be enabled");
  validate_config(cfg, Errc::config);
  require_param_shapes(params, cfg);

  SaepWorkspace local;
  SaepWorkspace& wk = ws ? *ws : local;
  wk.config = cfg;
  wk.has_dw = cfg.use_depthwise;
  wk.has_pool = cfg.use_pooling;

  FeatureGrid stacked = detail::stack_levels(feats, cfg);
  FeatureGrid mixed = pointwise_conv_fwd(stacked, params.pw_weight, params.pw_bias,
                                         &wk.pw);
  FeatureGrid active(gelu_fwd(mixed.values, &wk.act1));

  FeatureGrid reduced(Tensor({1, 1, 1}));
  if (cfg.use_depthwise && cfg.use_pooling) {
    FeatureGrid conv = depthwise_conv_fwd(active, params.dw_kernels, params.dw_bias,
                                          cfg.stride, &wk.dw);
    FeatureGrid pooled = avg_pool_fwd(active, cfg.stride, &wk.pool);
    reduced = FeatureGrid(add(conv.values, pooled.values));
  } else if (cfg.use_depthwise) {
    reduced = depthwise_conv_fwd(active, params.dw_kernels, params.dw_bias,
                                 cfg.stride, &wk.dw);
  } else {
    reduced = avg_pool_fwd(active, cfg.stride, &wk.pool);
  }

  Tensor tokens = flatten(reduced);
  Tensor h1 = linear_fwd(tokens, params.mlp_w1, params.mlp_b1, &wk.l1);
  Tensor h2 = gelu_fwd(h1, &wk.act2);
  return linear_fwd(h2, params.mlp_w2, params.mlp_b2, &wk.l2);
}

/// Chain-rule composition of the op backwards. Parameter gradients are
/// accumulated (+=) into the mirrors; the return value is the gradient with
/// respect to each consumed input level, shallowest first.
inline std::vector<FeatureGrid> saep_backward(const SaepWorkspace& ws,
                                              const Tensor& upstream,
                                              SaepParams& params) {
  const SaepConfig& cfg = ws.config;
  const std::int64_t m = cfg.tokens_out();
  require(upstream.rank() == 2 && upstream.shape()[0] == m &&
              upstream.shape()[1] == cfg.d,
          Errc::shape, "upstream must be [M, D] for the matching forward");

  LinearGrads l2g = linear_bwd(ws.l2, upstream);
  detail::accumulate(params.mlp_w2_g, l2g.weight);
  detail::accumulate(params.mlp_b2_g, l2g.bias);
  Tensor dh1 = gelu_bwd(ws.act2, l2g.input);
  LinearGrads l1g = linear_bwd(ws.l1, dh1);
  detail::accumulate(params.mlp_w1_g, l1g.weight);
  detail::accumulate(params.mlp_b1_g, l1g.bias);

  FeatureGrid dreduced =
      reorganize(l1g.input, cfg.h / cfg.stride, cfg.w / cfg.stride);

  Tensor dactive_vals({cfg.h, cfg.w, cfg.hidden()});
  if (ws.has_dw) {
    DepthwiseGrads dwg = depthwise_conv_bwd(ws.dw, dreduced);
    detail::accumulate(params.dw_kernels_g, dwg.kernels);
    detail::accumulate(params.dw_bias_g, dwg.bias);
    dactive_vals = std::move(dwg.input.values);
  }
  if (ws.has_pool) {
    FeatureGrid poolg = avg_pool_bwd(ws.pool, dreduced);
    dactive_vals = ws.has_dw ? add(dactive_vals, poolg.values)
                             : std::move(poolg.values);
  }

  Tensor dmixed = gelu_bwd(ws.act1, dactive_vals);
  PointwiseGrads pwg = pointwise_conv_bwd(ws.pw, FeatureGrid(std::move(dmixed)));
  detail::accumulate(params.pw_weight_g, pwg.weight);
  detail::accumulate(params.pw_bias_g, pwg.bias);

  return detail::split_levels(pwg.input, cfg.k_eff());
}

// ---------------------------------------------------------------------------
// Two-layer MLP baseline: one output token per input patch.

struct MlpParams {
  Tensor w1, b1;  // [Cc, D], [D]
  Tensor w2, b2;  // [D, D], [D]
};

inline MlpParams mlp_baseline_init(std::int64_t c, std::int64_t d, Rng& rng) {
  require(c >= 1 && d >= 1, Errc::arg, "baseline dims must be positive");
  MlpParams p;
  p.w1 = detail::kaiming_uniform(rng, {c, d}, c);
  p.b1 = Tensor::zeros({d});
  p.w2 = detail::kaiming_uniform(rng, {d, d}, d);
  p.b2 = Tensor::zeros({d});
  return p;
}

inline Tensor mlp_baseline_forward(const FeatureGrid& g, const MlpParams& p) {
  Tensor x = flatten(g);
  Tensor h = gelu_fwd(linear_fwd(x, p.w1, p.b1));
  return linear_fwd(h, p.w2, p.b2);
}

// ---------------------------------------------------------------------------
// Efficiency accounting.

struct CostReport {
  std::int64_t tokens_in = 0;
  std::int64_t tokens_out = 0;
  double reduction_pct = 0.0;
  double downstream_attention_ratio = 0.0;
  std::int64_t projector_flops = 0;
};

/// Multiply-add counts ×2 for the enabled stages only; disabled branches cost
/// nothing.
inline CostReport cost_report(const SaepConfig& cfg) {
  validate_config(cfg, Errc::arg);
  CostReport r;
  r.tokens_in = cfg.h * cfg.w;
  r.tokens_out = cfg.tokens_out();
  const double frac =
      static_cast<double>(r.tokens_out) / static_cast<double>(r.tokens_in);
  r.reduction_pct = 100.0 * (1.0 - frac);
  r.downstream_attention_ratio = frac * frac;

  const std::int64_t chid = cfg.hidden();
  const std::int64_t m = r.tokens_out;
  const std::int64_t s2 = cfg.stride * cfg.stride;
  std::int64_t macs = cfg.h * cfg.w * (cfg.c * cfg.k_eff()) * chid;
  if (cfg.use_depthwise) macs += m * chid * s2;
  if (cfg.use_pooling) macs += m * chid * s2;
  macs += m * chid * cfg.d + m * cfg.d * cfg.d;
  r.projector_flops = 2 * macs;
  return r;
}

}  // namespace saep
