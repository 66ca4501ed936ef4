// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfer/error.hpp"
#include "cfer/ndiff/tensor.hpp"
#include "cfer/rng.hpp"

namespace cfer {

struct TrainConfig {
  double peak_lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 300;
  double warmup_frac = 0.10;
  double ema_decay = 0.9999;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  std::string checkpoint;

  bool operator==(const TrainConfig &) const = default;

  void validate() const {
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must lie in (0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (peak_lr < 0.0 || weight_decay < 0.0) throw ConfigError("peak_lr and weight_decay must be non-negative");
    if (workers < 1) throw ConfigError("workers must be >= 1");
  }
};

inline std::size_t warmup_steps(std::size_t total_steps, double warmup_frac) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(total_steps))));
}

/// Slanted triangular schedule: 0 -> peak linearly over [0, warmup], then
/// peak -> 0 linearly over [warmup, total].
inline double lr_at(std::size_t step, std::size_t total_steps, double warmup_frac, double peak) {
  const std::size_t warm = warmup_steps(total_steps, warmup_frac);
  if (step <= warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  if (step >= total_steps) return 0.0;
  return peak * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warm);
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 1e-4;

  static AdamHyper from(const TrainConfig &c) { return {c.beta1, c.beta2, c.eps, c.weight_decay}; }
};

struct OptimState {
  std::vector<nd::Tensor> m;
  std::vector<nd::Tensor> v;
  std::uint64_t step = 0;

  static OptimState zeros_like(std::span<const nd::Tensor> params) {
    OptimState s;
    for (const auto &p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

/// One AdamW update with decoupled weight decay:
///   theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
inline void adamw_step(std::span<nd::Tensor> params, std::span<const nd::Tensor> grads, OptimState &st, double lr,
                       const AdamHyper &hp) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw ShapeError("adamw_step: parameter, gradient and moment counts differ");
  ++st.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    nd::Tensor &theta = params[k];
    const nd::Tensor &g = grads[k];
    if (g.shape() != theta.shape()) throw ShapeError("adamw_step: gradient shape mismatch at parameter " + std::to_string(k));
    nd::Tensor &m = st.m[k], &v = st.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + hp.eps) + hp.weight_decay * theta[i]);
    }
  }
}

struct EmaState {
  std::vector<nd::Tensor> shadow;
  double decay = 0.9999;

  /// Shadow starts as a copy of the parameters.
  static EmaState init(std::span<const nd::Tensor> params, double decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("ema decay must lie in [0, 1)");
    return {std::vector<nd::Tensor>(params.begin(), params.end()), decay};
  }
};

/// shadow <- decay * shadow + (1 - decay) * param
inline void ema_update(EmaState &ema, std::span<const nd::Tensor> params) {
  if (params.size() != ema.shadow.size()) throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    nd::Tensor &s = ema.shadow[k];
    const nd::Tensor &p = params[k];
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = ema.decay * s[i] + (1.0 - ema.decay) * p[i];
  }
}

/// Seeded Fisher-Yates shuffle of [0, n) cut into consecutive batches; the
/// last batch may be short.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          std::uint64_t epoch_seed) {
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(epoch_seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return out;
}

} // namespace cfer
