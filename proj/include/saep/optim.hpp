#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "saep/error.hpp"
#include "saep/tensor.hpp"

namespace saep {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::int64_t horizon = 1;  // cosine decay reaches ~0 after this many steps
};

/// Decoupled-weight-decay Adam with a cosine learning-rate schedule. Moments
/// are stored f32 like everything else; per-element arithmetic runs in f64
/// against the stored state, so a scalar re-implementation with the same
/// storage policy reproduces it exactly.
class AdamW {
 public:
  AdamW(AdamWConfig cfg, const std::vector<const Tensor*>& params) : cfg_(cfg) {
    require(cfg_.horizon >= 1, Errc::arg, "schedule horizon must be >= 1");
    require(cfg_.lr >= 0.0, Errc::arg, "learning rate must be non-negative");
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor* p : params) {
      m_.push_back(Tensor::zeros(p->shape()));
      v_.push_back(Tensor::zeros(p->shape()));
    }
  }

  /// lr for the upcoming step (0-based position on the cosine).
  double current_lr() const {
    const double t = static_cast<double>(std::min(step_, cfg_.horizon));
    const double frac = t / static_cast<double>(cfg_.horizon);
    return cfg_.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
  }

  std::int64_t step_count() const { return step_; }

  void step(const std::vector<Tensor*>& params,
            const std::vector<const Tensor*>& grads) {
    require(params.size() == m_.size() && grads.size() == m_.size(), Errc::shape,
            "optimizer was built for a different parameter list");
    const double lr = current_lr();
    const double t1 = static_cast<double>(step_ + 1);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t1);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t1);

    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      require(p.same_shape(m) && g.same_shape(m), Errc::shape,
              "parameter/gradient shape drifted from the optimizer state");
      for (std::int64_t e = 0; e < p.size(); ++e) {
        const double ge = static_cast<double>(g[e]);
        m[e] = static_cast<float>(cfg_.beta1 * static_cast<double>(m[e]) +
                                  (1.0 - cfg_.beta1) * ge);
        v[e] = static_cast<float>(cfg_.beta2 * static_cast<double>(v[e]) +
                                  (1.0 - cfg_.beta2) * ge * ge);
        const double mhat = static_cast<double>(m[e]) / bc1;
        const double vhat = static_cast<double>(v[e]) / bc2;
        const double w = static_cast<double>(p[e]);
        p[e] = static_cast<float>(
            w - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w));
      }
    }
    ++step_;
  }

  const Tensor& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor& second_moment(std::size_t i) const { return v_[i]; }

 private:
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace saep
