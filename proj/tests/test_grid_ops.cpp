#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>

#include "oracles.hpp"
#include "saep/grid_ops.hpp"
#include "test_util.hpp"

using saep::Errc;
using saep::FeatureGrid;
using saep::Rng;
using saep::Tensor;
using testutil::throws_code;

TEST_CASE("reorganize lays the sequence out in raster order") {
  Tensor seq({4, 1}, {1, 2, 3, 4});
  FeatureGrid g = saep::reorganize(seq, 2, 2);
  CHECK(g.values.at(0, 0, 0) == 1.0f);
  CHECK(g.values.at(0, 1, 0) == 2.0f);
  CHECK(g.values.at(1, 0, 0) == 3.0f);
  CHECK(g.values.at(1, 1, 0) == 4.0f);

  CHECK(throws_code([&] { saep::reorganize(seq, 2, 3); }, Errc::shape));
}

TEST_CASE("flatten and reorganize invert each other") {
  Rng rng(21);
  for (const auto& [h, w, c] : {std::tuple{1L, 1L, 1L}, {2L, 3L, 4L}, {8L, 8L, 5L}}) {
    Tensor seq = saep::rand_uniform(rng, {h * w, c}, -2.0f, 2.0f);
    CHECK(saep::bitwise_equal(saep::flatten(saep::reorganize(seq, h, w)), seq));

    FeatureGrid g(saep::rand_uniform(rng, {h, w, c}, -2.0f, 2.0f));
    FeatureGrid back = saep::reorganize(saep::flatten(g), h, w);
    CHECK(saep::bitwise_equal(back.values, g.values));
  }

  FeatureGrid grid(Tensor({12, 12, 16}));
  CHECK(saep::flatten(grid).shape() == Tensor::Shape{144, 16});
  CHECK(saep::reorganize(Tensor({576, 8}), 24, 24).values.shape() ==
        Tensor::Shape{24, 24, 8});
}

TEST_CASE("pointwise conv basics") {
  SECTION("identity kernel") {
    Rng rng(1);
    Tensor g = saep::rand_uniform(rng, {3, 4, 5}, -1.0f, 1.0f);
    Tensor eye({5, 5});
    for (int i = 0; i < 5; ++i) eye.at(i, i) = 1.0f;
    FeatureGrid out =
        saep::pointwise_conv_fwd(FeatureGrid(g), eye, Tensor::zeros({5}));
    CHECK(saep::bitwise_equal(out.values, g));
  }
  SECTION("all-ones column sums channels") {
    Tensor g({1, 1, 2}, {3.0f, 4.0f});
    Tensor w({2, 1}, {1.0f, 1.0f});
    FeatureGrid out =
        saep::pointwise_conv_fwd(FeatureGrid(g), w, Tensor::zeros({1}));
    CHECK(out.values.at(0, 0, 0) == 7.0f);
  }
  SECTION("shape contracts") {
    Tensor g({2, 2, 3});
    CHECK(throws_code(
        [&] {
          saep::pointwise_conv_fwd(FeatureGrid(g), Tensor({4, 2}), Tensor({2}));
        },
        Errc::shape));
    CHECK(throws_code(
        [&] {
          saep::pointwise_conv_fwd(FeatureGrid(g), Tensor({3, 2}), Tensor({3}));
        },
        Errc::shape));
  }
}

TEST_CASE("pointwise conv matches the per-position oracle") {
  Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    const std::int64_t h = 1 + rng.next_index(6);
    const std::int64_t w = 1 + rng.next_index(6);
    const std::int64_t cin = 1 + rng.next_index(6);
    const std::int64_t cout = 1 + rng.next_index(6);
    Tensor g = saep::rand_uniform(rng, {h, w, cin}, -1.0f, 1.0f);
    Tensor wt = saep::rand_uniform(rng, {cin, cout}, -1.0f, 1.0f);
    Tensor b = saep::rand_uniform(rng, {cout}, -1.0f, 1.0f);
    FeatureGrid out = saep::pointwise_conv_fwd(FeatureGrid(g), wt, b);
    CHECK(saep::max_abs_diff(out.values, oracle::pointwise(g, wt, b)) <= 1e-6);
  }
}

TEST_CASE("depthwise conv basics") {
  SECTION("selector kernel picks one cell per tile") {
    Tensor g({2, 2, 1}, {1, 2, 3, 4});
    Tensor k({1, 2, 2}, {1, 0, 0, 0});
    FeatureGrid out =
        saep::depthwise_conv_fwd(FeatureGrid(g), k, Tensor::zeros({1}), 2);
    CHECK(out.values.shape() == Tensor::Shape{1, 1, 1});
    CHECK(out.values.at(0, 0, 0) == 1.0f);
  }
  SECTION("uniform 1/s^2 kernel equals avg pool bitwise") {
    Rng rng(31);
    for (const std::int64_t s : {1L, 2L, 3L}) {
      const std::int64_t h = s * (1 + rng.next_index(3));
      const std::int64_t w = s * (1 + rng.next_index(3));
      const std::int64_t c = 1 + rng.next_index(5);
      Tensor g = saep::rand_uniform(rng, {h, w, c}, -5.0f, 5.0f);
      Tensor k = Tensor::full({c, s, s}, saep::avg_pool_weight(s));
      FeatureGrid conv =
          saep::depthwise_conv_fwd(FeatureGrid(g), k, Tensor::zeros({c}), s);
      FeatureGrid pool = saep::avg_pool_fwd(FeatureGrid(g), s);
      CHECK(saep::bitwise_equal(conv.values, pool.values));
    }
  }
  SECTION("indivisible extents are E_SHAPE, never padded") {
    Tensor g({3, 4, 1});
    CHECK(throws_code(
        [&] {
          saep::depthwise_conv_fwd(FeatureGrid(g), Tensor({1, 2, 2}),
                                   Tensor({1}), 2);
        },
        Errc::shape));
  }
}

TEST_CASE("depthwise conv matches the nested-loop oracle") {
  Rng rng(47);
  for (int rep = 0; rep < 20; ++rep) {
    const std::int64_t s = 1 + rng.next_index(3);
    const std::int64_t h = s * (1 + rng.next_index(2));
    const std::int64_t w = s * (1 + rng.next_index(2));
    const std::int64_t c = 1 + rng.next_index(4);
    Tensor g = saep::rand_uniform(rng, {h, w, c}, -1.0f, 1.0f);
    Tensor k = saep::rand_uniform(rng, {c, s, s}, -1.0f, 1.0f);
    Tensor b = saep::rand_uniform(rng, {c}, -1.0f, 1.0f);
    FeatureGrid out = saep::depthwise_conv_fwd(FeatureGrid(g), k, b, s);
    CHECK(saep::max_abs_diff(out.values, oracle::depthwise(g, k, b, s)) <= 1e-6);
  }

  // The spec's worked case: 6x6x3 at s=3.
  Tensor g = saep::rand_uniform(rng, {6, 6, 3}, -1.0f, 1.0f);
  Tensor k = saep::rand_uniform(rng, {3, 3, 3}, -1.0f, 1.0f);
  Tensor b = saep::rand_uniform(rng, {3}, -1.0f, 1.0f);
  FeatureGrid out = saep::depthwise_conv_fwd(FeatureGrid(g), k, b, 3);
  CHECK(saep::max_abs_diff(out.values, oracle::depthwise(g, k, b, 3)) <= 1e-6);
}

TEST_CASE("avg pool basics") {
  Tensor g({2, 2, 1}, {1, 2, 3, 4});
  FeatureGrid out = saep::avg_pool_fwd(FeatureGrid(g), 2);
  CHECK(out.values.at(0, 0, 0) == 2.5f);

  FeatureGrid konst(Tensor::full({6, 6, 2}, 3.25f));
  FeatureGrid pooled = saep::avg_pool_fwd(konst, 3);
  for (std::int64_t i = 0; i < pooled.values.size(); ++i)
    CHECK(pooled.values[i] == 3.25f);

  CHECK(throws_code([&] { saep::avg_pool_fwd(FeatureGrid(Tensor({3, 4, 1})), 2); },
                    Errc::shape));
}

TEST_CASE("avg pool matches the nested-loop oracle and preserves the mean") {
  Rng rng(53);
  Tensor g = saep::rand_uniform(rng, {24, 24, 8}, -1.0f, 1.0f);
  FeatureGrid out = saep::avg_pool_fwd(FeatureGrid(g), 2);
  CHECK(saep::max_abs_diff(out.values, oracle::avgpool(g, 2)) <= 1e-6);
  CHECK(std::abs(out.values.mean() - g.mean()) <= 1e-6);

  FeatureGrid out3 = saep::avg_pool_fwd(FeatureGrid(g), 3);
  CHECK(saep::max_abs_diff(out3.values, oracle::avgpool(g, 3)) <= 1e-6);
  CHECK(std::abs(out3.values.mean() - g.mean()) <= 1e-6);
}

TEST_CASE("linear basics and oracle") {
  SECTION("identity weight") {
    Rng rng(3);
    Tensor x = saep::rand_uniform(rng, {4, 3}, -1.0f, 1.0f);
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
    CHECK(saep::bitwise_equal(saep::linear_fwd(x, eye, Tensor::zeros({3})), x));
  }
  SECTION("zero input broadcasts the bias") {
    Tensor x = Tensor::zeros({3, 2});
    Tensor w({2, 4});
    Tensor b({4}, {1, 2, 3, 4});
    Tensor y = saep::linear_fwd(x, w, b);
    for (std::int64_t r = 0; r < 3; ++r)
      for (std::int64_t o = 0; o < 4; ++o)
        CHECK(y.at(r, o) == b[o]);
  }
  SECTION("random instances match the dot-product oracle") {
    Rng rng(59);
    for (int rep = 0; rep < 20; ++rep) {
      const std::int64_t m = 1 + rng.next_index(5);
      const std::int64_t din = 1 + rng.next_index(7);
      const std::int64_t dout = 1 + rng.next_index(7);
      Tensor x = saep::rand_uniform(rng, {m, din}, -1.0f, 1.0f);
      Tensor w = saep::rand_uniform(rng, {din, dout}, -1.0f, 1.0f);
      Tensor b = saep::rand_uniform(rng, {dout}, -1.0f, 1.0f);
      CHECK(saep::max_abs_diff(saep::linear_fwd(x, w, b), oracle::linear(x, w, b)) <=
            1e-6);
    }
  }
}

TEST_CASE("gelu matches its defining formula") {
  Tensor zero({1}, {0.0f});
  CHECK(saep::gelu_fwd(zero)[0] == 0.0f);

  Tensor ten({1}, {10.0f});
  CHECK(std::abs(saep::gelu_fwd(ten)[0] - 10.0f) < 1e-4);

  Rng rng(61);
  Tensor x = saep::rand_uniform(rng, {64}, -4.0f, 4.0f);
  CHECK(saep::max_abs_diff(saep::gelu_fwd(x), oracle::gelu(x)) <= 1e-6);
}

TEST_CASE("conv, pool, and linear are homogeneous with zero bias") {
  Rng rng(67);
  Tensor g = saep::rand_uniform(rng, {4, 4, 3}, -1.0f, 1.0f);
  Tensor g2 = saep::scale(g, 2.0);
  Tensor pw = saep::rand_uniform(rng, {3, 5}, -1.0f, 1.0f);
  Tensor dk = saep::rand_uniform(rng, {3, 2, 2}, -1.0f, 1.0f);

  CHECK(saep::max_abs_diff(
            saep::pointwise_conv_fwd(FeatureGrid(g2), pw, Tensor::zeros({5})).values,
            saep::scale(saep::pointwise_conv_fwd(FeatureGrid(g), pw, Tensor::zeros({5}))
                            .values,
                        2.0)) <= 1e-6);
  CHECK(saep::max_abs_diff(
            saep::depthwise_conv_fwd(FeatureGrid(g2), dk, Tensor::zeros({3}), 2).values,
            saep::scale(
                saep::depthwise_conv_fwd(FeatureGrid(g), dk, Tensor::zeros({3}), 2)
                    .values,
                2.0)) <= 1e-6);
  CHECK(saep::max_abs_diff(
            saep::avg_pool_fwd(FeatureGrid(g2), 2).values,
            saep::scale(saep::avg_pool_fwd(FeatureGrid(g), 2).values, 2.0)) <= 1e-6);

  Tensor x = saep::rand_uniform(rng, {5, 3}, -1.0f, 1.0f);
  Tensor lw = saep::rand_uniform(rng, {3, 4}, -1.0f, 1.0f);
  CHECK(saep::max_abs_diff(
            saep::linear_fwd(saep::scale(x, 2.0), lw, Tensor::zeros({4})),
            saep::scale(saep::linear_fwd(x, lw, Tensor::zeros({4})), 2.0)) <= 1e-6);
}

TEST_CASE("backwards: zero upstream gives zero gradients") {
  Rng rng(71);
  Tensor g = saep::rand_uniform(rng, {4, 4, 3}, -1.0f, 1.0f);
  Tensor pw = saep::rand_uniform(rng, {3, 5}, -1.0f, 1.0f);
  Tensor pb = saep::rand_uniform(rng, {5}, -1.0f, 1.0f);

  saep::PointwiseWorkspace ws;
  saep::pointwise_conv_fwd(FeatureGrid(g), pw, pb, &ws);
  saep::PointwiseGrads grads =
      saep::pointwise_conv_bwd(ws, FeatureGrid(Tensor::zeros({4, 4, 5})));
  CHECK(grads.input.values.max_abs() == 0.0f);
  CHECK(grads.weight.max_abs() == 0.0f);
  CHECK(grads.bias.max_abs() == 0.0f);

  saep::LinearWorkspace lws;
  Tensor x = saep::rand_uniform(rng, {3, 4}, -1.0f, 1.0f);
  Tensor lw = saep::rand_uniform(rng, {4, 2}, -1.0f, 1.0f);
  saep::linear_fwd(x, lw, Tensor::zeros({2}), &lws);
  saep::LinearGrads lg = saep::linear_bwd(lws, Tensor::zeros({3, 2}));
  CHECK(lg.input.max_abs() == 0.0f);
  CHECK(lg.weight.max_abs() == 0.0f);
  CHECK(lg.bias.max_abs() == 0.0f);
}

TEST_CASE("avg pool backward distributes upstream/s^2 over each tile") {
  saep::AvgPoolWorkspace ws;
  Tensor g({4, 4, 1});
  saep::avg_pool_fwd(FeatureGrid(g), 2, &ws);
  Tensor up({2, 2, 1}, {4.0f, 8.0f, -4.0f, 0.0f});
  FeatureGrid gin = saep::avg_pool_bwd(ws, FeatureGrid(up));
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t c = 0; c < 4; ++c)
      CHECK(gin.values.at(r, c, 0) == up.at(r / 2, c / 2, 0) / 4.0f);
}

TEST_CASE("backward shape contracts") {
  Rng rng(73);
  Tensor g = saep::rand_uniform(rng, {4, 4, 3}, -1.0f, 1.0f);
  saep::PointwiseWorkspace pws;
  saep::pointwise_conv_fwd(FeatureGrid(g), Tensor({3, 5}), Tensor({5}), &pws);
  CHECK(throws_code(
      [&] { saep::pointwise_conv_bwd(pws, FeatureGrid(Tensor({4, 4, 6}))); },
      Errc::shape));

  saep::DepthwiseWorkspace dws;
  saep::depthwise_conv_fwd(FeatureGrid(g), Tensor({3, 2, 2}), Tensor({3}), 2, &dws);
  CHECK(throws_code(
      [&] { saep::depthwise_conv_bwd(dws, FeatureGrid(Tensor({4, 4, 3}))); },
      Errc::shape));
}
