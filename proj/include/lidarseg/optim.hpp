#pragma once

#include "lidarseg/core.hpp"

namespace lidarseg {

// Linear warmup to 1, then cosine decay to 0 at total_steps.
template <class Scalar>
Scalar schedule_fraction(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps) {
  require(step >= 0 && step <= total_steps, "schedule step out of range");
  if (warmup_steps > 0 && step < warmup_steps) {
    return static_cast<Scalar>(step) / static_cast<Scalar>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return Scalar(1);
  const Scalar t = static_cast<Scalar>(step - warmup_steps) /
                   static_cast<Scalar>(total_steps - warmup_steps);
  return Scalar(0.5) * (Scalar(1) + std::cos(Scalar(M_PI) * t));
}

template <class Scalar>
Scalar lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, Scalar base_lr) {
  return base_lr * schedule_fraction<Scalar>(step, total_steps, warmup_steps);
}

// Per-depth learning-rate multiplier for layerwise decay (depth 0 = top).
template <class Scalar>
Scalar layerwise_scale(Scalar decay, int depth_from_top) {
  Scalar s = Scalar(1);
  for (int i = 0; i < depth_from_top; ++i) s *= decay;
  return s;
}

// AdamW over flat tensors. Weight decay is decoupled from the gradient
// term and scaled by the schedule fraction, not by the base learning
// rate: with lr = 0 the parameters still see the decay term.
class AdamW {
 public:
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;

  void begin_step() { ++t_; }

  std::int64_t step_count() const { return t_; }

  // idx identifies the tensor slot (stable across steps).
  void update(std::size_t idx, Eigen::Ref<VecX> w, const Eigen::Ref<const VecX>& grad, Real lr,
              Real weight_decay) {
    require(t_ >= 1, "AdamW::begin_step must be called before update");
    if (m_.size() <= idx) {
      m_.resize(idx + 1);
      v_.resize(idx + 1);
    }
    if (m_[idx].size() != w.size()) {
      m_[idx] = VecX::Zero(w.size());
      v_[idx] = VecX::Zero(w.size());
    }
    VecX& m = m_[idx];
    VecX& v = v_[idx];
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v.array() + (1.0 - beta2) * grad.array().square();
    const Real bc1 = 1.0 - std::pow(beta1, static_cast<Real>(t_));
    const Real bc2 = 1.0 - std::pow(beta2, static_cast<Real>(t_));
    const VecX mhat = m / bc1;
    const VecX vhat = v / bc2;
    w.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
    if (weight_decay != 0.0) {
      w.array() -= weight_decay * w.array();
    }
  }

 private:
  std::int64_t t_ = 0;
  std::vector<VecX> m_;
  std::vector<VecX> v_;
};

}  // namespace lidarseg
