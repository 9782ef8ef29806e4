#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "saep/error.hpp"
#include "saep/optim.hpp"
#include "saep/projector.hpp"
#include "saep/tensor.hpp"

namespace saep {

struct SpatialTaskSample {
  MultiLevelFeatures features;
  int label;  // quadrant of the marked patch: 2*(r >= H/2) + (c >= W/2)
};

namespace detail {
inline constexpr float kMarkerAmplitude = 3.0f;

/// One sample: uniform noise on every level, then a fixed ±amplitude channel
/// pattern added at one random patch on all levels. Draw order is grids
/// (shallow to deep), then row, then column.
inline SpatialTaskSample make_quadrant_sample(Rng& rng, const SaepConfig& cfg) {
  std::vector<FeatureGrid> grids;
  std::vector<std::int64_t> ids;
  grids.reserve(static_cast<std::size_t>(cfg.k));
  for (std::int64_t lv = 0; lv < cfg.k; ++lv) {
    grids.emplace_back(rand_uniform(rng, {cfg.h, cfg.w, cfg.c}, -1.0f, 1.0f));
    ids.push_back(lv + 1);
  }
  const std::int64_t r = rng.next_index(cfg.h);
  const std::int64_t c = rng.next_index(cfg.w);
  for (FeatureGrid& g : grids)
    for (std::int64_t ch = 0; ch < cfg.c; ++ch)
      g.values.at(r, c, ch) += (ch % 2 == 0) ? kMarkerAmplitude : -kMarkerAmplitude;
  const int label = static_cast<int>(2 * (r >= cfg.h / 2) + (c >= cfg.w / 2));
  return SpatialTaskSample{MultiLevelFeatures(std::move(ids), std::move(grids)), label};
}
}  // namespace detail

inline std::vector<SpatialTaskSample> make_quadrant_task(Rng& rng,
                                                         const SaepConfig& cfg,
                                                         std::int64_t n) {
  validate_config(cfg, Errc::arg);
  require(cfg.h % 2 == 0 && cfg.w % 2 == 0, Errc::arg,
          "quadrant task needs even grid extents");
  require(n >= 1, Errc::arg, "sample count must be positive");
  std::vector<SpatialTaskSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    out.push_back(detail::make_quadrant_sample(rng, cfg));
  return out;
}

struct TrainOptions {
  std::int64_t steps = 2000;
  std::int64_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::int64_t eval_samples = 1000;
  bool shuffle_tokens = false;  // fresh per-sample permutation before the probe
  std::uint64_t seed = 0;
};

struct StepStat {
  std::int64_t step;
  double lr;
  double loss;
  double batch_accuracy;
};

struct TrainResult {
  double accuracy = 0.0;  // held-out
  std::vector<StepStat> trace;
};

namespace detail {
/// Probe: linear map from the flattened token block [M*D] to 4 quadrant
/// logits. Token order reaches the probe, which is exactly what the shuffle
/// ablation needs to destroy.
struct Probe {
  Tensor w;  // [M*D, 4]
  Tensor b;  // [4]
  Tensor w_g, b_g;
};

inline Probe make_probe(std::int64_t in_dim, Rng& rng) {
  Probe p;
  p.w = kaiming_uniform(rng, {in_dim, 4}, in_dim);
  p.b = Tensor::zeros({4});
  p.w_g = Tensor::zeros({in_dim, 4});
  p.b_g = Tensor::zeros({4});
  return p;
}

inline std::vector<std::int64_t> random_permutation(Rng& rng, std::int64_t n) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.next_index(i + 1))]);
  return perm;
}

inline Tensor permute_rows(const Tensor& t, const std::vector<std::int64_t>& perm) {
  Tensor out(t.shape());
  const std::int64_t cols = t.shape()[1];
  for (std::int64_t m = 0; m < t.shape()[0]; ++m)
    std::copy(t.data().begin() + perm[static_cast<std::size_t>(m)] * cols,
              t.data().begin() + (perm[static_cast<std::size_t>(m)] + 1) * cols,
              out.data().begin() + m * cols);
  return out;
}

struct ProbeEval {
  std::array<double, 4> probs;
  int predicted;
  double loss;
};

/// Softmax cross-entropy on the 4 logits, all in f64.
inline ProbeEval eval_logits(const Tensor& logits, int label) {
  double mx = -1e300;
  for (int j = 0; j < 4; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
  std::array<double, 4> ex{};
  double z = 0.0;
  for (int j = 0; j < 4; ++j) {
    ex[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(logits[j]) - mx);
    z += ex[static_cast<std::size_t>(j)];
  }
  ProbeEval ev{};
  ev.predicted = 0;
  for (int j = 0; j < 4; ++j) {
    ev.probs[static_cast<std::size_t>(j)] = ex[static_cast<std::size_t>(j)] / z;
    if (logits[j] > logits[ev.predicted]) ev.predicted = j;
  }
  ev.loss = -std::log(std::max(ev.probs[static_cast<std::size_t>(label)], 1e-300));
  return ev;
}
}  // namespace detail

/// Trains SAEP + probe on the quadrant task with AdamW/cosine and reports
/// held-out accuracy. All randomness derives from opt.seed via fixed splits,
/// so runs are bit-reproducible; enabling shuffle_tokens leaves the parameter
/// init and data streams untouched.
inline TrainResult train_probe(const SaepConfig& cfg, const TrainOptions& opt) {
  validate_config(cfg, Errc::arg);
  require(opt.steps >= 0 && opt.batch >= 1 && opt.eval_samples >= 1, Errc::arg,
          "steps must be >= 0, batch and eval_samples >= 1");

  Rng master(opt.seed);
  Rng init_rng = master.split();
  Rng data_rng = master.split();
  Rng eval_rng = master.split();
  Rng shuffle_rng = master.split();

  SaepParams params = saep_init(cfg, init_rng);
  const std::int64_t m = cfg.tokens_out();
  const std::int64_t probe_in = m * cfg.d;
  detail::Probe probe = detail::make_probe(probe_in, init_rng);

  std::vector<Tensor*> opt_params;
  std::vector<const Tensor*> opt_grads;
  for (Tensor* t : params.fields()) opt_params.push_back(t);
  for (Tensor* t : params.grads()) opt_grads.push_back(t);
  opt_params.push_back(&probe.w);
  opt_params.push_back(&probe.b);
  opt_grads.push_back(&probe.w_g);
  opt_grads.push_back(&probe.b_g);

  AdamWConfig ocfg;
  ocfg.lr = opt.lr;
  ocfg.weight_decay = opt.weight_decay;
  ocfg.horizon = std::max<std::int64_t>(opt.steps, 1);
  AdamW optim(ocfg, {opt_params.begin(), opt_params.end()});

  TrainResult result;
  result.trace.reserve(static_cast<std::size_t>(opt.steps));

  for (std::int64_t step = 0; step < opt.steps; ++step) {
    params.zero_grads();
    for (std::int64_t i = 0; i < probe.w_g.size(); ++i) probe.w_g[i] = 0.0f;
    for (std::int64_t i = 0; i < probe.b_g.size(); ++i) probe.b_g[i] = 0.0f;

    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::int64_t bi = 0; bi < opt.batch; ++bi) {
      SpatialTaskSample sample = detail::make_quadrant_sample(data_rng, cfg);
      SaepWorkspace ws;
      Tensor tokens = saep_forward(sample.features, params, cfg, &ws);

      std::vector<std::int64_t> perm;
      if (opt.shuffle_tokens) {
        perm = detail::random_permutation(shuffle_rng, m);
        tokens = detail::permute_rows(tokens, perm);
      }

      Tensor x({1, probe_in}, {tokens.data().begin(), tokens.data().end()});
      LinearWorkspace probe_ws;
      Tensor logits_t = linear_fwd(x, probe.w, probe.b, &probe_ws);
      detail::ProbeEval ev = detail::eval_logits(logits_t, sample.label);
      loss_sum += ev.loss;
      if (ev.predicted == sample.label) ++correct;

      Tensor dlogits({1, 4});
      for (int j = 0; j < 4; ++j)
        dlogits[j] = static_cast<float>(
            (ev.probs[static_cast<std::size_t>(j)] - (j == sample.label ? 1.0 : 0.0)) /
            static_cast<double>(opt.batch));
      LinearGrads pg = linear_bwd(probe_ws, dlogits);
      detail::accumulate(probe.w_g, pg.weight);
      detail::accumulate(probe.b_g, pg.bias);

      Tensor dtokens({m, cfg.d});
      for (std::int64_t row = 0; row < m; ++row) {
        const std::int64_t dest = opt.shuffle_tokens ? perm[static_cast<std::size_t>(row)] : row;
        std::copy(pg.input.data().begin() + row * cfg.d,
                  pg.input.data().begin() + (row + 1) * cfg.d,
                  dtokens.data().begin() + dest * cfg.d);
      }
      saep_backward(ws, dtokens, params);
    }

    const double lr_used = optim.current_lr();
    optim.step(opt_params, opt_grads);
    result.trace.push_back(StepStat{step, lr_used,
                                    loss_sum / static_cast<double>(opt.batch),
                                    static_cast<double>(correct) /
                                        static_cast<double>(opt.batch)});
  }

  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < opt.eval_samples; ++i) {
    SpatialTaskSample sample = detail::make_quadrant_sample(eval_rng, cfg);
    Tensor tokens = saep_forward(sample.features, params, cfg);
    if (opt.shuffle_tokens)
      tokens = detail::permute_rows(tokens,
                                    detail::random_permutation(shuffle_rng, m));
    Tensor x({1, probe_in}, {tokens.data().begin(), tokens.data().end()});
    Tensor logits_t = linear_fwd(x, probe.w, probe.b);
    int pred = 0;
    for (int j = 1; j < 4; ++j)
      if (logits_t[j] > logits_t[pred]) pred = j;
    if (pred == sample.label) ++correct;
  }
  result.accuracy =
      static_cast<double>(correct) / static_cast<double>(opt.eval_samples);
  return result;
}

/// CSV form of the loss trace: header + one row per step, written atomically.
inline void write_trace_csv(const std::filesystem::path& path,
                            const std::vector<StepStat>& trace) {
  std::ostringstream os;
  os << "step,lr,loss,accuracy\n";
  os.precision(17);
  for (const StepStat& s : trace)
    os << s.step << ',' << s.lr << ',' << s.loss << ',' << s.batch_accuracy << '\n';

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), Errc::io, "cannot create " + tmp.string());
    out << os.str();
    out.flush();
    require(out.good(), Errc::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(Errc::io, "cannot move " + tmp.string() + " to " + path.string());
  }
}

}  // namespace saep
