#pragma once
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "latok/tensor.hpp"

namespace latok {

// AdamW with decoupled weight decay and bias-corrected moments. The update
// is p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p); zero gradient with
// zero decay leaves parameters bit-identical.
template <typename S>
struct AdamWT {
  S lr = S(3e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0.01);
  long long step_count = 0;
  std::vector<std::vector<S>> m, v;

  void attach(const std::vector<TensorT<S>*>& params) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i]->size(), S(0));
      v[i].assign(params[i]->size(), S(0));
    }
  }

  // One update from the gradients currently stored on the parameters.
  // lr_scale carries warmup/schedule multipliers.
  void step(const std::vector<TensorT<S>*>& params, S lr_scale = S(1)) {
    if (m.size() != params.size()) throw std::runtime_error("AdamW::step: attach() first");
    ++step_count;
    S bc1 = S(1) - std::pow(beta1, S(step_count));
    S bc2 = S(1) - std::pow(beta2, S(step_count));
    S alpha = lr * lr_scale;
    for (size_t i = 0; i < params.size(); ++i) {
      TensorT<S>& p = *params[i];
      if (p.size() != m[i].size()) throw std::runtime_error("AdamW::step: parameter shape changed");
      p.ensure_grad();
      S* pv = p.data();
      const S* g = p.grad();
      S* mi = m[i].data();
      S* vi = v[i].data();
      for (size_t j = 0; j < p.size(); ++j) {
        mi[j] = beta1 * mi[j] + (S(1) - beta1) * g[j];
        vi[j] = beta2 * vi[j] + (S(1) - beta2) * g[j] * g[j];
        S mh = mi[j] / bc1;
        S vh = vi[j] / bc2;
        pv[j] -= alpha * (mh / (std::sqrt(vh) + eps) + weight_decay * pv[j]);
      }
    }
  }
};

using AdamW = AdamWT<float>;

// Linear warmup to 1, then constant. fraction is the warmup share of the
// total step budget.
inline double warmup_scale(long long step, long long total_steps, double fraction = 0.01) {
  long long w = (long long)(fraction * (double)total_steps);
  if (w < 1) w = 1;
  if (step >= w) return 1.0;
  return (double)(step + 1) / (double)w;
}

// Linear warmup to 1, then cosine decay to zero at total_steps. Depends on
// the step budget: extending a run under this schedule re-plans the decay.
inline double cosine_scale(long long step, long long total_steps, double fraction = 0.01) {
  long long w = (long long)(fraction * (double)total_steps);
  if (w < 1) w = 1;
  if (step < w) return (double)(step + 1) / (double)w;
  if (total_steps <= w) return 1.0;
  double progress = (double)(step - w) / (double)(total_steps - w);
  return 0.5 * (1.0 + std::cos(progress * std::numbers::pi));
}

}  // namespace latok
