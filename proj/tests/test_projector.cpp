#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "oracles.hpp"
#include "saep/checkpoint.hpp"
#include "saep/projector.hpp"
#include "test_util.hpp"

using saep::Errc;
using saep::FeatureGrid;
using saep::MultiLevelFeatures;
using saep::Rng;
using saep::SaepConfig;
using saep::SaepParams;
using saep::Tensor;
using testutil::TempDir;
using testutil::throws_code;

namespace {

SaepConfig tiny_config() {
  SaepConfig cfg;
  cfg.h = 4;
  cfg.w = 4;
  cfg.c = 3;
  cfg.k = 2;
  cfg.c_hid = 5;
  cfg.stride = 2;
  cfg.d = 6;
  return cfg;
}

MultiLevelFeatures random_features(Rng& rng, const SaepConfig& cfg) {
  std::vector<FeatureGrid> grids;
  std::vector<std::int64_t> ids;
  for (std::int64_t lv = 0; lv < cfg.k; ++lv) {
    grids.emplace_back(saep::rand_uniform(rng, {cfg.h, cfg.w, cfg.c}, -1.0f, 1.0f));
    ids.push_back(lv + 1);
  }
  return MultiLevelFeatures(std::move(ids), std::move(grids));
}

/// Straight-line recomposition of the pipeline from the reference kernels.
Tensor oracle_forward(const MultiLevelFeatures& feats, const SaepParams& p,
                      const SaepConfig& cfg) {
  const std::int64_t k = cfg.k_eff();
  Tensor stacked({cfg.h, cfg.w, cfg.c * k});
  for (std::int64_t r = 0; r < cfg.h; ++r)
    for (std::int64_t c = 0; c < cfg.w; ++c)
      for (std::int64_t lv = 0; lv < k; ++lv) {
        const FeatureGrid& g = cfg.use_multi_level
                                   ? feats.grids[static_cast<std::size_t>(lv)]
                                   : feats.grids.back();
        for (std::int64_t ch = 0; ch < cfg.c; ++ch)
          stacked.at(r, c, lv * cfg.c + ch) = g.values.at(r, c, ch);
      }

  Tensor mixed = oracle::pointwise(stacked, p.pw_weight, p.pw_bias);
  Tensor active = oracle::gelu(mixed);

  const std::int64_t oh = cfg.h / cfg.stride;
  const std::int64_t ow = cfg.w / cfg.stride;
  Tensor combined({oh, ow, cfg.hidden()});
  if (cfg.use_depthwise && cfg.use_pooling) {
    Tensor a = oracle::depthwise(active, p.dw_kernels, p.dw_bias, cfg.stride);
    Tensor b = oracle::avgpool(active, cfg.stride);
    for (std::int64_t i = 0; i < combined.size(); ++i)
      combined[i] = static_cast<float>(static_cast<double>(a[i]) +
                                       static_cast<double>(b[i]));
  } else if (cfg.use_depthwise) {
    combined = oracle::depthwise(active, p.dw_kernels, p.dw_bias, cfg.stride);
  } else {
    combined = oracle::avgpool(active, cfg.stride);
  }

  Tensor tokens({oh * ow, cfg.hidden()}, {combined.data().begin(), combined.data().end()});
  Tensor h1 = oracle::linear(tokens, p.mlp_w1, p.mlp_b1);
  Tensor h2 = oracle::gelu(h1);
  return oracle::linear(h2, p.mlp_w2, p.mlp_b2);
}

}  // namespace

TEST_CASE("token counts follow (H/s)(W/s) exactly") {
  Rng rng(0);
  SaepConfig cfg;
  cfg.h = cfg.w = 24;
  cfg.c = 4;
  cfg.k = 2;
  cfg.c_hid = 4;
  cfg.d = 8;

  for (const std::int64_t stride : {2L, 3L}) {
    cfg.stride = stride;
    Rng prng(1);
    SaepParams params = saep::saep_init(cfg, prng);
    MultiLevelFeatures feats = random_features(rng, cfg);
    Tensor tokens = saep::saep_forward(feats, params, cfg);
    const std::int64_t expect = stride == 2 ? 144 : 64;
    CHECK(tokens.shape() == Tensor::Shape{expect, cfg.d});
    CHECK(cfg.tokens_out() == expect);
  }
}

TEST_CASE("forward matches the composed oracle on random tiny instances") {
  Rng rng(101);
  for (int rep = 0; rep < 10; ++rep) {
    SaepConfig cfg = tiny_config();
    cfg.use_multi_level = rng.next_index(2) == 0;
    cfg.use_depthwise = rng.next_index(2) == 0;
    cfg.use_pooling = cfg.use_depthwise ? rng.next_index(2) == 0 : true;
    Rng prng(rng.next_u64());
    SaepParams params = saep::saep_init(cfg, prng);
    MultiLevelFeatures feats = random_features(rng, cfg);
    Tensor got = saep::saep_forward(feats, params, cfg);
    CHECK(saep::max_abs_diff(got, oracle_forward(feats, params, cfg)) <= 1e-5);
  }
}

TEST_CASE("zero depthwise branch degenerates to the pooling-only path") {
  SaepConfig both = tiny_config();
  SaepConfig pool_only = both;
  pool_only.use_depthwise = false;

  Rng prng(5);
  SaepParams params = saep::saep_init(both, prng);
  for (std::int64_t i = 0; i < params.dw_kernels.size(); ++i)
    params.dw_kernels[i] = 0.0f;
  for (std::int64_t i = 0; i < params.dw_bias.size(); ++i) params.dw_bias[i] = 0.0f;

  Rng frng(6);
  MultiLevelFeatures feats = random_features(frng, both);
  Tensor a = saep::saep_forward(feats, params, both);
  Tensor b = saep::saep_forward(feats, params, pool_only);
  CHECK(saep::bitwise_equal(a, b));
}

TEST_CASE("multi-level off consumes exactly the deepest grid") {
  SaepConfig cfg = tiny_config();
  cfg.use_multi_level = false;
  Rng prng(7);
  SaepParams params = saep::saep_init(cfg, prng);
  CHECK(params.pw_weight.shape() == Tensor::Shape{cfg.c, cfg.hidden()});

  Rng frng(8);
  MultiLevelFeatures feats = random_features(frng, cfg);
  Tensor with_all = saep::saep_forward(feats, params, cfg);

  MultiLevelFeatures last_only({1}, {feats.grids.back()});
  Tensor with_last = saep::saep_forward(last_only, params, cfg);
  CHECK(saep::bitwise_equal(with_all, with_last));

  // Changing a shallow level must not influence the output.
  MultiLevelFeatures altered = feats;
  altered.grids[0].values[0] += 10.0f;
  CHECK(saep::bitwise_equal(saep::saep_forward(altered, params, cfg), with_all));
}

TEST_CASE("forward contract failures") {
  SaepConfig cfg = tiny_config();
  Rng prng(9);
  SaepParams params = saep::saep_init(cfg, prng);
  Rng frng(10);

  SECTION("wrong level count") {
    MultiLevelFeatures feats({1}, {FeatureGrid(Tensor({4, 4, 3}))});
    CHECK(throws_code([&] { saep::saep_forward(feats, params, cfg); }, Errc::shape));
  }
  SECTION("wrong channel dim") {
    std::vector<FeatureGrid> grids{FeatureGrid(Tensor({4, 4, 2})),
                                   FeatureGrid(Tensor({4, 4, 2}))};
    MultiLevelFeatures feats({1, 2}, std::move(grids));
    CHECK(throws_code([&] { saep::saep_forward(feats, params, cfg); }, Errc::shape));
  }
  SECTION("both branches disabled") {
    SaepConfig off = cfg;
    off.use_depthwise = off.use_pooling = false;
    MultiLevelFeatures feats = random_features(frng, cfg);
    CHECK(throws_code([&] { saep::saep_forward(feats, params, off); }, Errc::config));
    CHECK(throws_code([&] { Rng r(1); saep::saep_init(off, r); }, Errc::arg));
  }
  SECTION("layer ids must strictly increase") {
    std::vector<FeatureGrid> grids{FeatureGrid(Tensor({4, 4, 3})),
                                   FeatureGrid(Tensor({4, 4, 3}))};
    CHECK(throws_code(
        [&] { MultiLevelFeatures feats({2, 2}, std::move(grids)); }, Errc::arg));
  }
}

TEST_CASE("initialization is seeded, zero-biased, and fan-in bounded") {
  SaepConfig cfg;
  cfg.h = cfg.w = 8;
  cfg.c = 64;
  cfg.k = 5;
  cfg.c_hid = 16;
  cfg.d = 8;

  Rng a(42), b(42);
  SaepParams p1 = saep::saep_init(cfg, a);
  SaepParams p2 = saep::saep_init(cfg, b);
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(saep::bitwise_equal(*p1.fields()[i], *p2.fields()[i]));

  CHECK(p1.pw_bias.max_abs() == 0.0f);
  CHECK(p1.dw_bias.max_abs() == 0.0f);
  CHECK(p1.mlp_b1.max_abs() == 0.0f);
  CHECK(p1.mlp_b2.max_abs() == 0.0f);
  for (auto* g : p1.grads()) CHECK(g->max_abs() == 0.0f);

  const double bound = std::sqrt(6.0 / (64.0 * 5.0));
  CHECK(p1.pw_weight.max_abs() <= bound);
  CHECK(p1.dw_kernels.max_abs() <= std::sqrt(6.0 / 4.0));
  CHECK(p1.mlp_w1.max_abs() <= std::sqrt(6.0 / 16.0));
  CHECK(p1.mlp_w2.max_abs() <= std::sqrt(6.0 / 8.0));
}

TEST_CASE("cls ingestion policy") {
  Rng rng(11);
  Tensor exact = saep::rand_uniform(rng, {16, 3}, -1.0f, 1.0f);
  FeatureGrid g = saep::grid_from_sequence(exact, 4, 4);
  CHECK(saep::bitwise_equal(saep::flatten(g), exact));

  Tensor with_cls = saep::rand_uniform(rng, {17, 3}, -1.0f, 1.0f);
  FeatureGrid g2 = saep::grid_from_sequence(with_cls, 4, 4);
  Tensor body = saep::flatten(g2);
  for (std::int64_t r = 0; r < 16; ++r)
    for (std::int64_t c = 0; c < 3; ++c)
      CHECK(body.at(r, c) == with_cls.at(r + 1, c));

  CHECK(throws_code([&] { saep::grid_from_sequence(Tensor({15, 3}), 4, 4); },
                    Errc::shape));
  CHECK(throws_code([&] { saep::grid_from_sequence(Tensor({18, 3}), 4, 4); },
                    Errc::shape));
}

TEST_CASE("trunk is spatially equivariant to stride-sized translations") {
  SaepConfig cfg = tiny_config();
  cfg.h = cfg.w = 6;
  cfg.stride = 2;
  Rng prng(13);
  SaepParams params = saep::saep_init(cfg, prng);

  Rng frng(14);
  Tensor base = saep::rand_uniform(frng, {6, 6, 3 * 2}, -1.0f, 1.0f);
  Tensor shifted({6, 6, 6});
  for (std::int64_t r = 0; r < 6; ++r)
    for (std::int64_t c = 0; c < 6; ++c)
      for (std::int64_t ch = 0; ch < 6; ++ch)
        shifted.at(r, c, ch) =
            (r >= 2 && c >= 2) ? base.at(r - 2, c - 2, ch) : 0.0f;

  auto trunk = [&](const Tensor& grid_vals) {
    FeatureGrid mixed = saep::pointwise_conv_fwd(FeatureGrid(grid_vals),
                                                 params.pw_weight, params.pw_bias);
    FeatureGrid active(saep::gelu_fwd(mixed.values));
    FeatureGrid conv = saep::depthwise_conv_fwd(active, params.dw_kernels,
                                                params.dw_bias, cfg.stride);
    FeatureGrid pool = saep::avg_pool_fwd(active, cfg.stride);
    return saep::add(conv.values, pool.values);
  };

  Tensor out_base = trunk(base);
  Tensor out_shift = trunk(shifted);
  for (std::int64_t r = 1; r < 3; ++r)
    for (std::int64_t c = 1; c < 3; ++c)
      for (std::int64_t ch = 0; ch < cfg.hidden(); ++ch)
        CHECK(out_shift.at(r, c, ch) == out_base.at(r - 1, c - 1, ch));
}

TEST_CASE("backward: zero upstream, and branch adjoints decompose") {
  SaepConfig cfg = tiny_config();
  Rng prng(15);
  SaepParams params = saep::saep_init(cfg, prng);
  Rng frng(16);
  MultiLevelFeatures feats = random_features(frng, cfg);

  saep::SaepWorkspace ws;
  saep::saep_forward(feats, params, cfg, &ws);

  SECTION("zero upstream gives zero gradients") {
    params.zero_grads();
    auto gin = saep::saep_backward(ws, Tensor::zeros({cfg.tokens_out(), cfg.d}),
                                   params);
    for (const auto& g : gin) CHECK(g.values.max_abs() == 0.0f);
    for (auto* g : params.grads()) CHECK(g->max_abs() == 0.0f);
  }

  SECTION("input gradient is the sum of the two branch adjoints") {
    Rng urng(17);
    Tensor up = saep::rand_uniform(urng, {cfg.tokens_out(), cfg.d}, -1.0f, 1.0f);

    params.zero_grads();
    auto gin_both = saep::saep_backward(ws, up, params);

    saep::SaepWorkspace dw_only = ws;
    dw_only.has_pool = false;
    params.zero_grads();
    auto gin_dw = saep::saep_backward(dw_only, up, params);

    saep::SaepWorkspace pool_only = ws;
    pool_only.has_dw = false;
    params.zero_grads();
    auto gin_pool = saep::saep_backward(pool_only, up, params);

    for (std::size_t lv = 0; lv < gin_both.size(); ++lv) {
      Tensor sum = saep::add(gin_dw[lv].values, gin_pool[lv].values);
      CHECK(saep::max_abs_diff(gin_both[lv].values, sum) <= 1e-6);
    }
  }
}

TEST_CASE("gradient accumulation adds across backward calls") {
  SaepConfig cfg = tiny_config();
  Rng prng(18);
  SaepParams params = saep::saep_init(cfg, prng);
  Rng frng(19);
  MultiLevelFeatures feats = random_features(frng, cfg);
  Rng urng(20);
  Tensor up = saep::rand_uniform(urng, {cfg.tokens_out(), cfg.d}, -1.0f, 1.0f);

  saep::SaepWorkspace ws;
  saep::saep_forward(feats, params, cfg, &ws);

  params.zero_grads();
  saep::saep_backward(ws, up, params);
  Tensor once = params.pw_weight_g;
  saep::saep_backward(ws, up, params);
  CHECK(saep::max_abs_diff(params.pw_weight_g, saep::scale(once, 2.0)) <= 1e-6);
}

TEST_CASE("mlp baseline") {
  Rng rng(23);
  SECTION("24x24 grid yields 576 tokens") {
    saep::MlpParams p = saep::mlp_baseline_init(4, 8, rng);
    FeatureGrid g(saep::rand_uniform(rng, {24, 24, 4}, -1.0f, 1.0f));
    Tensor tokens = saep::mlp_baseline_forward(g, p);
    CHECK(tokens.shape() == Tensor::Shape{576, 8});
  }
  SECTION("identity weights reduce to one GELU") {
    saep::MlpParams p;
    p.w1 = Tensor({3, 3});
    p.w2 = Tensor({3, 3});
    for (int i = 0; i < 3; ++i) {
      p.w1.at(i, i) = 1.0f;
      p.w2.at(i, i) = 1.0f;
    }
    p.b1 = Tensor::zeros({3});
    p.b2 = Tensor::zeros({3});
    FeatureGrid g(saep::rand_uniform(rng, {2, 2, 3}, -1.0f, 1.0f));
    Tensor tokens = saep::mlp_baseline_forward(g, p);
    CHECK(saep::max_abs_diff(tokens, saep::gelu_fwd(saep::flatten(g))) <= 1e-7);
  }
  SECTION("matches the composed linear oracle") {
    saep::MlpParams p = saep::mlp_baseline_init(3, 5, rng);
    FeatureGrid g(saep::rand_uniform(rng, {3, 4, 3}, -1.0f, 1.0f));
    Tensor got = saep::mlp_baseline_forward(g, p);
    Tensor x = saep::flatten(g);
    Tensor want = oracle::linear(oracle::gelu(oracle::linear(x, p.w1, p.b1)),
                                 p.w2, p.b2);
    CHECK(saep::max_abs_diff(got, want) <= 1e-6);
  }
}

TEST_CASE("cost report") {
  SaepConfig cfg;
  cfg.h = cfg.w = 24;
  cfg.c = 1024;
  cfg.k = 5;
  cfg.c_hid = 1024;
  cfg.d = 4096;

  SECTION("s=2: 576 -> 144, 75% reduction") {
    cfg.stride = 2;
    saep::CostReport r = saep::cost_report(cfg);
    CHECK(r.tokens_in == 576);
    CHECK(r.tokens_out == 144);
    CHECK(r.reduction_pct == 75.0);
    CHECK(r.downstream_attention_ratio == 0.0625);
  }
  SECTION("s=3: 576 -> 64, 88.9% reduction") {
    cfg.stride = 3;
    saep::CostReport r = saep::cost_report(cfg);
    CHECK(r.tokens_out == 64);
    CHECK(std::abs(r.reduction_pct - 88.8888888888888889) < 1e-9);
  }
  SECTION("s=1 is the no-compression identity") {
    cfg.stride = 1;
    saep::CostReport r = saep::cost_report(cfg);
    CHECK(r.tokens_out == r.tokens_in);
    CHECK(r.reduction_pct == 0.0);
    CHECK(r.downstream_attention_ratio == 1.0);
  }
  SECTION("flops follow the enabled stages") {
    SaepConfig small = tiny_config();
    saep::CostReport both = saep::cost_report(small);
    const std::int64_t m = small.tokens_out();
    const std::int64_t branch = 2 * m * small.hidden() * small.stride * small.stride;
    std::int64_t expect = 2 * (small.h * small.w * small.c * small.k * small.hidden() +
                               m * small.hidden() * small.d + m * small.d * small.d) +
                          2 * branch;
    CHECK(both.projector_flops == expect);

    SaepConfig no_dw = small;
    no_dw.use_depthwise = false;
    CHECK(saep::cost_report(no_dw).projector_flops == expect - branch);

    SaepConfig single = small;
    single.use_multi_level = false;
    saep::CostReport r = saep::cost_report(single);
    const std::int64_t pw_full = 2 * small.h * small.w * small.c * small.k * small.hidden();
    const std::int64_t pw_single = 2 * small.h * small.w * small.c * small.hidden();
    CHECK(r.projector_flops == expect - pw_full + pw_single);
  }
}

TEST_CASE("checkpoint round trip and config JSON contracts") {
  TempDir dir("ckpt");
  SaepConfig cfg = tiny_config();
  cfg.seed = 77;
  Rng prng(77);
  SaepParams params = saep::saep_init(cfg, prng);

  const auto ckpt = dir.path / "model";
  saep::save_checkpoint(ckpt, params, cfg);
  auto [cfg2, params2] = saep::load_checkpoint(ckpt);
  CHECK(saep::config_to_json(cfg2) == saep::config_to_json(cfg));
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(saep::bitwise_equal(*params2.fields()[i], *params.fields()[i]));

  SECTION("config defaults") {
    nlohmann::json j = {{"h", 4}, {"w", 4}, {"c", 3}, {"k", 2}, {"stride", 2}, {"d", 6}};
    SaepConfig c = saep::config_from_json(j);
    CHECK(c.hidden() == 3);
    CHECK(c.use_multi_level);
    CHECK(c.use_depthwise);
    CHECK(c.use_pooling);
    CHECK(c.seed == 0);
  }
  SECTION("unknown keys are E_FORMAT") {
    nlohmann::json j = {{"h", 4}, {"w", 4}, {"c", 3}, {"k", 2},
                        {"stride", 2}, {"d", 6}, {"extra", 1}};
    CHECK(throws_code([&] { saep::config_from_json(j); }, Errc::format));
  }
  SECTION("wrong types are E_FORMAT") {
    nlohmann::json j = {{"h", 4.5}, {"w", 4}, {"c", 3}, {"k", 2},
                        {"stride", 2}, {"d", 6}};
    CHECK(throws_code([&] { saep::config_from_json(j); }, Errc::format));
    nlohmann::json j2 = {{"h", 4}, {"w", 4}, {"c", 3}, {"k", 2},
                         {"stride", 2}, {"d", 6}, {"use_pooling", 1}};
    CHECK(throws_code([&] { saep::config_from_json(j2); }, Errc::format));
  }
  SECTION("missing required key is E_FORMAT") {
    nlohmann::json j = {{"h", 4}, {"w", 4}, {"c", 3}, {"k", 2}, {"stride", 2}};
    CHECK(throws_code([&] { saep::config_from_json(j); }, Errc::format));
  }
  SECTION("tampered parameter file is E_SHAPE") {
    saep::tensor_to_npy(Tensor({2, 2}), ckpt / "pw_bias.npy");
    CHECK(throws_code([&] { saep::load_checkpoint(ckpt); }, Errc::shape));
  }
  SECTION("missing checkpoint dir is E_IO") {
    CHECK(throws_code([&] { saep::load_checkpoint(dir.path / "nope"); }, Errc::io));
  }
}
