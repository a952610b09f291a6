#pragma once

#include <functional>
#include <set>
#include <stdexcept>

#include "sflow/ops.hpp"
#include "sflow/policy.hpp"
#include "sflow/rng.hpp"
#include "sflow/tensor.hpp"

namespace sflow {

/// Rng stream shared by every training loop, so a distillation run with
/// the teacher-dependent losses switched off consumes randomness exactly
/// like plain flow-matching training and lands on identical weights.
inline constexpr std::uint64_t kTrainStream = 0xD15711;

/// One training draw for flow matching: actions interpolated toward noise
/// at time tau, plus the constant velocity that moves noise back onto the
/// data, u = a - eps.
template <typename T>
struct FlowSample {
  T tau;
  Tensor<T> noisy;   // tau * a + (1 - tau) * eps
  Tensor<T> target;  // a - eps
};

/// Draws tau for one flow sample; the default is uniform on [0, 1).
template <typename T>
using TauDist = std::function<T(Rng&)>;

template <typename T>
FlowSample<T> make_flow_sample(const Tensor<T>& actions, Rng& rng,
                               const TauDist<T>& tau_dist = {}) {
  FlowSample<T> s;
  s.tau = tau_dist ? tau_dist(rng) : static_cast<T>(rng.uniform());
  Tensor<T> eps = Tensor<T>::gaussian(actions.shape(), rng);
  s.noisy = Tensor<T>::zeros(actions.shape());
  s.target = Tensor<T>::zeros(actions.shape());
  for (std::size_t i = 0; i < actions.values().size(); ++i) {
    const T a = actions.values()[i];
    const T e = eps.values()[i];
    s.noisy.values()[i] = s.tau * a + (T(1) - s.tau) * e;
    s.target.values()[i] = a - e;
  }
  return s;
}

/// Mean squared error between the predicted and the conditional target
/// velocity. This is the flow-matching objective and also the "task" part
/// of the distillation loss.
template <typename T>
Tensor<T> task_loss(const Tensor<T>& velocity, const Tensor<T>& target) {
  return mean_squared_error(velocity, target);
}

/// Euler integration of da/dtau = v(a, tau) from tau = 0 to 1 in n equal
/// steps, starting from a0. The velocity callback gets plain data tensors
/// and must return one of the same shape.
template <typename T>
Tensor<T> integrate_velocity_field(
    const std::function<Tensor<T>(const Tensor<T>&, T)>& velocity,
    const Tensor<T>& a0, int n_steps) {
  if (n_steps < 1)
    throw std::invalid_argument("integrate_velocity_field: n_steps must be >= 1");
  const T dt = T(1) / static_cast<T>(n_steps);
  Tensor<T> a = a0.detach();
  for (int k = 0; k < n_steps; ++k) {
    const T tau = static_cast<T>(k) * dt;
    Tensor<T> v = velocity(a, tau);
    if (v.shape() != a.shape())
      throw std::invalid_argument(
          "integrate_velocity_field: velocity shape " + shape_str(v.shape()) +
          " does not match state " + shape_str(a.shape()));
    for (std::size_t i = 0; i < a.values().size(); ++i)
      a.values()[i] += dt * v.values()[i];
  }
  return a;
}

/// Draws an action chunk from the policy: Gaussian noise denoised by the
/// learned velocity field. The vision-language pass runs once; every
/// integration step reuses its cached keys/values.
template <typename T>
Tensor<T> sample_action_chunk(const PolicyParams<T>& p,
                              const Observation<T>& obs, Rng& rng,
                              int n_steps = 10,
                              const std::set<int>* skip_layers = nullptr) {
  NoGradGuard ng;
  Tensor<T> a0 =
      Tensor<T>::gaussian({p.cfg.chunk_len, p.cfg.action_dim}, rng);
  PrefixCache<T> cache = build_prefix_cache(p, obs, skip_layers);
  ForwardOptions opts;
  opts.skip_layers = skip_layers;
  return integrate_velocity_field<T>(
      [&](const Tensor<T>& a, T tau) {
        return policy_forward_cached(p, cache, obs.state, a, tau, opts).velocity;
      },
      a0, n_steps);
}

}  // namespace sflow
