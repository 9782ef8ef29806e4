#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "saep/error.hpp"
#include "saep/grid_ops.hpp"
#include "saep/projector.hpp"
#include "saep/tensor.hpp"

namespace saep {

struct GradCheckEntry {
  std::string op;
  std::int64_t checked = 0;
  std::int64_t violations = 0;
  double max_abs_err = 0.0;  // worst |g − fd| seen
};

struct GradCheckReport {
  std::uint64_t seed = 0;
  double eps = 0.0;
  std::vector<GradCheckEntry> entries;

  bool all_pass() const {
    for (const auto& e : entries)
      if (e.violations > 0) return false;
    return true;
  }
};

namespace detail {
/// Σ out ⊙ r in f64; turns any op output into a scalar loss whose upstream
/// gradient is exactly r.
inline double weighted_sum(const Tensor& out, const Tensor& r) {
  require(out.same_shape(r), Errc::shape, "loss weights must match the output");
  double acc = 0.0;
  for (std::int64_t i = 0; i < out.size(); ++i)
    acc += static_cast<double>(out[i]) * static_cast<double>(r[i]);
  return acc;
}

/// Central differences against every element of `target`, which the loss
/// closure must read through. Gradients divide by the realized f32 step, not
/// the nominal eps, so quantization of x ± eps cannot bias the estimate.
template <typename LossFn>
void check_against_fd(Tensor& target, const Tensor& analytic, double eps,
                      const LossFn& loss, GradCheckEntry& entry) {
  require(target.same_shape(analytic), Errc::shape,
          "analytic gradient shape mismatch");
  for (std::int64_t i = 0; i < target.size(); ++i) {
    const float orig = target[i];
    const float xp = static_cast<float>(static_cast<double>(orig) + eps);
    const float xm = static_cast<float>(static_cast<double>(orig) - eps);
    target[i] = xp;
    const double lp = loss();
    target[i] = xm;
    const double lm = loss();
    target[i] = orig;
    const double fd = (lp - lm) / (static_cast<double>(xp) - static_cast<double>(xm));
    const double err = std::fabs(static_cast<double>(analytic[i]) - fd);
    ++entry.checked;
    entry.max_abs_err = std::max(entry.max_abs_err, err);
    if (err > 1e-4 + 1e-2 * std::fabs(fd)) ++entry.violations;
  }
}
}  // namespace detail

/// Finite-difference verification of every backward: each primitive on a few
/// randomized tiny shapes, then the full pipeline under every valid flag
/// combination. Failures are report entries, not exceptions.
inline GradCheckReport gradcheck_suite(std::uint64_t seed, double eps = 1e-3) {
  require(eps > 0.0, Errc::arg, "finite-difference eps must be positive");
  Rng rng(seed);
  GradCheckReport report;
  report.seed = seed;
  report.eps = eps;

  constexpr int kReps = 3;

  {
    GradCheckEntry e{"pointwise_conv"};
    for (int rep = 0; rep < kReps; ++rep) {
      const std::int64_t h = 1 + rng.next_index(4);
      const std::int64_t w = 1 + rng.next_index(4);
      const std::int64_t cin = 1 + rng.next_index(4);
      const std::int64_t cout = 1 + rng.next_index(4);
      Tensor grid = rand_uniform(rng, {h, w, cin}, -1.0f, 1.0f);
      Tensor weight = rand_uniform(rng, {cin, cout}, -1.0f, 1.0f);
      Tensor bias = rand_uniform(rng, {cout}, -1.0f, 1.0f);
      Tensor r = rand_uniform(rng, {h, w, cout}, -1.0f, 1.0f);
      auto loss = [&] {
        return detail::weighted_sum(
            pointwise_conv_fwd(FeatureGrid(grid), weight, bias).values, r);
      };
      PointwiseWorkspace ws;
      pointwise_conv_fwd(FeatureGrid(grid), weight, bias, &ws);
      PointwiseGrads g = pointwise_conv_bwd(ws, FeatureGrid(r));
      detail::check_against_fd(grid, g.input.values, eps, loss, e);
      detail::check_against_fd(weight, g.weight, eps, loss, e);
      detail::check_against_fd(bias, g.bias, eps, loss, e);
    }
    report.entries.push_back(e);
  }

  {
    GradCheckEntry e{"depthwise_conv"};
    for (int rep = 0; rep < kReps; ++rep) {
      const std::int64_t s = 1 + rng.next_index(3);
      const std::int64_t h = s * (1 + rng.next_index(2));
      const std::int64_t w = s * (1 + rng.next_index(2));
      const std::int64_t c = 1 + rng.next_index(4);
      Tensor grid = rand_uniform(rng, {h, w, c}, -1.0f, 1.0f);
      Tensor kernels = rand_uniform(rng, {c, s, s}, -1.0f, 1.0f);
      Tensor bias = rand_uniform(rng, {c}, -1.0f, 1.0f);
      Tensor r = rand_uniform(rng, {h / s, w / s, c}, -1.0f, 1.0f);
      auto loss = [&] {
        return detail::weighted_sum(
            depthwise_conv_fwd(FeatureGrid(grid), kernels, bias, s).values, r);
      };
      DepthwiseWorkspace ws;
      depthwise_conv_fwd(FeatureGrid(grid), kernels, bias, s, &ws);
      DepthwiseGrads g = depthwise_conv_bwd(ws, FeatureGrid(r));
      detail::check_against_fd(grid, g.input.values, eps, loss, e);
      detail::check_against_fd(kernels, g.kernels, eps, loss, e);
      detail::check_against_fd(bias, g.bias, eps, loss, e);
    }
    report.entries.push_back(e);
  }

  {
    GradCheckEntry e{"avg_pool"};
    for (int rep = 0; rep < kReps; ++rep) {
      const std::int64_t s = 1 + rng.next_index(3);
      const std::int64_t h = s * (1 + rng.next_index(2));
      const std::int64_t w = s * (1 + rng.next_index(2));
      const std::int64_t c = 1 + rng.next_index(4);
      Tensor grid = rand_uniform(rng, {h, w, c}, -1.0f, 1.0f);
      Tensor r = rand_uniform(rng, {h / s, w / s, c}, -1.0f, 1.0f);
      auto loss = [&] {
        return detail::weighted_sum(avg_pool_fwd(FeatureGrid(grid), s).values, r);
      };
      AvgPoolWorkspace ws;
      avg_pool_fwd(FeatureGrid(grid), s, &ws);
      FeatureGrid g = avg_pool_bwd(ws, FeatureGrid(r));
      detail::check_against_fd(grid, g.values, eps, loss, e);
    }
    report.entries.push_back(e);
  }

  {
    GradCheckEntry e{"linear"};
    for (int rep = 0; rep < kReps; ++rep) {
      const std::int64_t m = 1 + rng.next_index(5);
      const std::int64_t din = 1 + rng.next_index(4);
      const std::int64_t dout = 1 + rng.next_index(4);
      Tensor x = rand_uniform(rng, {m, din}, -1.0f, 1.0f);
      Tensor weight = rand_uniform(rng, {din, dout}, -1.0f, 1.0f);
      Tensor bias = rand_uniform(rng, {dout}, -1.0f, 1.0f);
      Tensor r = rand_uniform(rng, {m, dout}, -1.0f, 1.0f);
      auto loss = [&] { return detail::weighted_sum(linear_fwd(x, weight, bias), r); };
      LinearWorkspace ws;
      linear_fwd(x, weight, bias, &ws);
      LinearGrads g = linear_bwd(ws, r);
      detail::check_against_fd(x, g.input, eps, loss, e);
      detail::check_against_fd(weight, g.weight, eps, loss, e);
      detail::check_against_fd(bias, g.bias, eps, loss, e);
    }
    report.entries.push_back(e);
  }

  {
    GradCheckEntry e{"gelu"};
    for (int rep = 0; rep < kReps; ++rep) {
      const std::int64_t m = 1 + rng.next_index(6);
      const std::int64_t d = 1 + rng.next_index(6);
      Tensor x = rand_uniform(rng, {m, d}, -1.0f, 1.0f);
      Tensor r = rand_uniform(rng, {m, d}, -1.0f, 1.0f);
      auto loss = [&] { return detail::weighted_sum(gelu_fwd(x), r); };
      GeluWorkspace ws;
      gelu_fwd(x, &ws);
      Tensor g = gelu_bwd(ws, r);
      detail::check_against_fd(x, g, eps, loss, e);
    }
    report.entries.push_back(e);
  }

  {
    // flatten/reorganize backward is the inverse reshape; its adjoint must be
    // the identity on the flat data.
    GradCheckEntry e{"reshape"};
    for (int rep = 0; rep < kReps; ++rep) {
      const std::int64_t h = 1 + rng.next_index(4);
      const std::int64_t w = 1 + rng.next_index(4);
      const std::int64_t c = 1 + rng.next_index(4);
      Tensor x = rand_uniform(rng, {h * w, c}, -1.0f, 1.0f);
      Tensor r = rand_uniform(rng, {h * w, c}, -1.0f, 1.0f);
      auto loss = [&] { return detail::weighted_sum(flatten(reorganize(x, h, w)), r); };
      // d(flatten∘reorganize)/dx = I, so the analytic gradient is r itself.
      detail::check_against_fd(x, r, eps, loss, e);
    }
    report.entries.push_back(e);
  }

  for (const bool ml : {false, true}) {
    for (const auto& [use_dw, use_pool] :
         {std::pair{true, false}, std::pair{false, true}, std::pair{true, true}}) {
      SaepConfig cfg;
      cfg.h = 4;
      cfg.w = 4;
      cfg.c = 3;
      cfg.k = 2;
      cfg.c_hid = 5;
      cfg.stride = 2;
      cfg.d = 6;
      cfg.use_multi_level = ml;
      cfg.use_depthwise = use_dw;
      cfg.use_pooling = use_pool;

      GradCheckEntry e{"saep[ml=" + std::to_string(ml) +
                       ",dw=" + std::to_string(use_dw) +
                       ",pool=" + std::to_string(use_pool) + "]"};
      Rng init_rng = rng.split();
      SaepParams params = saep_init(cfg, init_rng);
      std::vector<FeatureGrid> grids;
      std::vector<std::int64_t> ids;
      for (std::int64_t lv = 0; lv < cfg.k; ++lv) {
        grids.emplace_back(rand_uniform(rng, {cfg.h, cfg.w, cfg.c}, -1.0f, 1.0f));
        ids.push_back(lv + 1);
      }
      MultiLevelFeatures feats(std::move(ids), std::move(grids));
      Tensor r = rand_uniform(rng, {cfg.tokens_out(), cfg.d}, -0.5f, 0.5f);

      auto loss = [&] {
        return detail::weighted_sum(saep_forward(feats, params, cfg), r);
      };
      SaepWorkspace ws;
      saep_forward(feats, params, cfg, &ws);
      params.zero_grads();
      std::vector<FeatureGrid> input_grads = saep_backward(ws, r, params);

      auto fields = params.fields();
      auto grads = params.grads();
      for (std::size_t i = 0; i < fields.size(); ++i) {
        const bool dw_param = i == 2 || i == 3;
        if (dw_param && !cfg.use_depthwise) continue;  // no gradient flows there
        detail::check_against_fd(*fields[i], *grads[i], eps, loss, e);
      }
      const std::size_t first_consumed =
          cfg.use_multi_level ? 0 : feats.grids.size() - 1;
      for (std::size_t lv = first_consumed; lv < feats.grids.size(); ++lv)
        detail::check_against_fd(feats.grids[lv].values,
                                 input_grads[lv - first_consumed].values, eps, loss,
                                 e);
      report.entries.push_back(e);
    }
  }

  return report;
}

inline nlohmann::json gradcheck_report_to_json(const GradCheckReport& rep) {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& e : rep.entries)
    ops.push_back({{"op", e.op},
                   {"checked", e.checked},
                   {"violations", e.violations},
                   {"max_abs_err", e.max_abs_err}});
  return nlohmann::json{{"seed", rep.seed},
                        {"eps", rep.eps},
                        {"all_pass", rep.all_pass()},
                        {"ops", ops}};
}

}  // namespace saep
