#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "params.hpp"

namespace nr {

/// Rescales all gradients together so their joint L2 norm is at most max_norm.
/// Returns the factor that was applied (1.0 when already within bounds).
inline double clip_global_norm(ParamSet& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& e : params.entries())
    for (double g : e.grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm <= max_norm) return 1.0;
  const double factor = max_norm / norm;
  for (auto& e : params.entries())
    for (auto& g : e.grad.data()) g *= factor;
  return factor;
}

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// First/second moments per parameter (zero-initialized) and the step count.
struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  static AdamWState for_params(const ParamSet& params) {
    AdamWState s;
    for (const auto& e : params.entries()) {
      s.m.push_back(zeros_like(e.value));
      s.v.push_back(zeros_like(e.value));
    }
    return s;
  }
};

/// One AdamW update with decoupled weight decay:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
inline void adamw_step(ParamSet& params, AdamWState& state, const AdamWConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("adamw: learning rate must be positive");
  if (state.m.size() != params.size()) state = AdamWState::for_params(params);
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  auto& entries = params.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto p = entries[k].value.data();
    auto g = entries[k].grad.data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p[i]);
    }
  }
}

/// Scalar objective built from a parameter set (must bind parameters via ParamSet::leaf).
using Objective = std::function<Var(ParamSet&)>;

/// Central-difference stencils: three points (error O(h^2)) or five (O(h^4)).
enum class Stencil { central3, central5 };

/// Largest elementwise relative error between backward() and central differences,
/// |a - b| / max(|a|, |b|, 1e-6). The floor sits above central-difference roundoff
/// (~1e-16 * |f| / h), so gradients that are exactly zero, such as attention key
/// biases, do not turn roundoff into a large ratio. The five-point stencil tolerates
/// a larger h, which shrinks roundoff on deep objectives. Parameter values are restored.
inline double grad_check(const Objective& f, ParamSet& params, double h = 1e-5, Stencil stencil = Stencil::central3) {
  Var loss = f(params);
  backward(loss, params);
  std::vector<Tensor> analytic;
  for (const auto& e : params.entries()) analytic.push_back(e.grad);

  double worst = 0.0;
  auto& entries = params.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    for (std::size_t i = 0; i < entries[k].value.size(); ++i) {
      double& x = entries[k].value[i];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        return f(params).value().item();
      };
      const double numeric = stencil == Stencil::central3
                                 ? (at(h) - at(-h)) / (2.0 * h)
                                 : (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
      x = saved;
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace nr
