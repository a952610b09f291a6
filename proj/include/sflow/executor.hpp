#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sflow/csv.hpp"
#include "sflow/flow.hpp"
#include "sflow/policy.hpp"
#include "sflow/rng.hpp"
#include "sflow/sim.hpp"

namespace sflow {

struct ExecutorConfig {
  int chunk_len = 8;          // horizon H of each predicted chunk
  int actions_per_replan = 4; // k: control steps between policy queries
  int staleness_frames = 0;   // observation age at each query, in steps
  double ensemble_decay = 0.1;  // m in exp(-m * chunk age)

  void validate() const {
    if (chunk_len < 1 || actions_per_replan < 1 ||
        actions_per_replan > chunk_len)
      throw std::invalid_argument(
          "executor config: need 1 <= actions_per_replan <= chunk_len");
    if (staleness_frames < 0)
      throw std::invalid_argument("executor config: staleness_frames < 0");
    if (ensemble_decay < 0)
      throw std::invalid_argument("executor config: ensemble_decay < 0");
  }
};

inline void to_json(nlohmann::json& j, const ExecutorConfig& c) {
  j = nlohmann::json{{"chunk_len", c.chunk_len},
                     {"actions_per_replan", c.actions_per_replan},
                     {"staleness_frames", c.staleness_frames},
                     {"ensemble_decay", c.ensemble_decay}};
}

inline void from_json(const nlohmann::json& j, ExecutorConfig& c) {
  ExecutorConfig d;
  c.chunk_len = j.value("chunk_len", d.chunk_len);
  c.actions_per_replan = j.value("actions_per_replan", d.actions_per_replan);
  c.staleness_frames = j.value("staleness_frames", d.staleness_frames);
  c.ensemble_decay = j.value("ensemble_decay", d.ensemble_decay);
}

/// Observation staleness implied by inference latency: how many control
/// frames pass while the policy is thinking.
inline int staleness_model(double latency_ms, double period_ms) {
  if (period_ms <= 0)
    throw std::invalid_argument("staleness_model: control period must be > 0");
  if (latency_ms < 0)
    throw std::invalid_argument("staleness_model: negative latency");
  return static_cast<int>(std::ceil(latency_ms / period_ms));
}

/// Hardware-independent stand-in for measured latency: staleness grows
/// linearly with depth. The defaults place an 8-layer policy at 11 frames
/// and a 4-layer one at 4, matching the measured end-to-end latencies of
/// the full and the compressed model on a 30 Hz loop.
inline int synthetic_staleness(int n_layers, double c0 = -3.0,
                               double c1 = 1.75) {
  const long f = std::lround(c0 + c1 * static_cast<double>(n_layers));
  return static_cast<int>(std::max(0L, f));
}

/// Normalized temporal-ensemble weights for chunks of the given ages
/// (age = control steps since the chunk's observation). Ages are shifted
/// by the minimum before exponentiating so the weights stay finite for
/// any decay; the shift cancels under normalization.
inline std::vector<double> ensemble_weights(const std::vector<int>& ages,
                                            double decay) {
  if (ages.empty()) throw std::invalid_argument("ensemble_weights: empty set");
  const int min_age = *std::min_element(ages.begin(), ages.end());
  std::vector<double> w(ages.size());
  double total = 0;
  for (std::size_t i = 0; i < ages.size(); ++i) {
    w[i] = std::exp(-decay * static_cast<double>(ages[i] - min_age));
    total += w[i];
  }
  for (auto& x : w) x /= total;
  return w;
}

template <typename T>
struct Episode {
  WorldState<T> initial;
  std::vector<WorldState<T>> states;   // world after each executed action
  std::vector<Vec2<T>> actions;        // clipped executed actions
  bool success = false;
  int steps_to_success = 0;  // steps taken (== horizon when failed)
  T final_dist = T(0);
  std::uint64_t seed = 0;
};

/// A chunk source maps a (possibly stale) world snapshot to an action
/// chunk. Trained policies, scripted experts, and test doubles all fit.
template <typename T>
using ChunkSource = std::function<Tensor<T>(const WorldState<T>&, Rng&)>;

template <typename T>
ChunkSource<T> expert_source(const SimParams& sim, int chunk_len) {
  return [sim, chunk_len](const WorldState<T>& w, Rng& rng) {
    return expert_chunk(w, sim, chunk_len, rng);
  };
}

/// Wraps a trained policy as a chunk source: tokenize the snapshot, then
/// denoise an action chunk with the given number of integration steps.
template <typename T>
ChunkSource<T> policy_source(const PolicyParams<T>& p, const Codebook<T>& cb,
                             int n_diffusion_steps,
                             const std::set<int>* skip_layers = nullptr) {
  return [&p, &cb, n_diffusion_steps, skip_layers](const WorldState<T>& w,
                                                   Rng& rng) {
    Observation<T> obs = tokenize(cb, w);
    return sample_action_chunk(p, obs, rng, n_diffusion_steps, skip_layers);
  };
}

namespace detail {

inline constexpr std::uint64_t kWorldStream = 0x77;
inline constexpr std::uint64_t kPolicyStream = 0x70;

}  // namespace detail

/// Receding-horizon rollout. Every `actions_per_replan` steps the source
/// is queried on the snapshot from `staleness_frames` steps in the past;
/// the returned chunk is anchored at that past step. Each executed action
/// is the exponential temporal ensemble over all live chunks, and when no
/// chunk reaches the present (staleness >= chunk length) the newest
/// chunk's last action is replayed — pure open-loop execution.
template <typename T>
Episode<T> run_episode(const ChunkSource<T>& source, const SimParams& sim,
                       const ExecutorConfig& exec, std::uint64_t world_seed) {
  sim.validate();
  exec.validate();
  Rng world_rng(world_seed, detail::kWorldStream);
  Rng policy_rng(world_seed, detail::kPolicyStream);
  WorldState<T> w = sample_world<T>(sim, world_rng);
  // A dynamic episode always chases the moving object; tracking a static
  // distractor would never exercise observation staleness.
  if (sim.moving_target) w.task_id = 0;

  Episode<T> ep;
  ep.initial = w;
  ep.seed = world_seed;

  struct LiveChunk {
    int t0;  // step of the observation the chunk was planned from
    Tensor<T> chunk;
  };
  std::vector<WorldState<T>> history{w};
  std::vector<LiveChunk> chunks;

  int t = 0;
  for (; t < sim.horizon; ++t) {
    if (at_goal(w, sim)) break;
    if (t % exec.actions_per_replan == 0) {
      const int t_obs = std::max(0, t - exec.staleness_frames);
      Tensor<T> c = source(history[static_cast<std::size_t>(t_obs)], policy_rng);
      if (c.rank() != 2 || c.rows() != exec.chunk_len || c.cols() != 2)
        throw std::invalid_argument("run_episode: chunk has shape " +
                                    shape_str(c.shape()) + ", expected [" +
                                    std::to_string(exec.chunk_len) + ",2]");
      chunks.push_back({t_obs, std::move(c)});
    }
    // Drop chunks that can never cover the present again.
    while (chunks.size() > 1 && chunks.front().t0 + exec.chunk_len <= t)
      chunks.erase(chunks.begin());

    std::vector<const LiveChunk*> live;
    std::vector<int> ages;
    for (const auto& c : chunks)
      if (c.t0 <= t && t < c.t0 + exec.chunk_len) {
        live.push_back(&c);
        ages.push_back(t - c.t0);
      }
    Vec2<T> a{T(0), T(0)};
    if (!live.empty()) {
      const std::vector<double> wts = ensemble_weights(ages, exec.ensemble_decay);
      for (std::size_t i = 0; i < live.size(); ++i) {
        const int idx = t - live[i]->t0;
        a[0] += static_cast<T>(wts[i]) * live[i]->chunk.at(idx, 0);
        a[1] += static_cast<T>(wts[i]) * live[i]->chunk.at(idx, 1);
      }
    } else {
      const auto& newest = chunks.back();
      const int idx = std::clamp(t - newest.t0, 0, exec.chunk_len - 1);
      a = {newest.chunk.at(idx, 0), newest.chunk.at(idx, 1)};
    }
    w = step_world(w, a, sim);
    history.push_back(w);
    ep.actions.push_back(clip_action(a, sim));
    ep.states.push_back(w);
  }
  ep.success = at_goal(w, sim);
  ep.steps_to_success = t;
  ep.final_dist = goal_distance(w);
  return ep;
}

template <typename T>
struct EvalResult {
  double success_rate = 0;
  double mean_steps = 0;  // over successful episodes
  std::vector<Episode<T>> episodes;
};

/// Seeded evaluation over n episodes; episode i always gets world seed
/// base_seed + i, so different policies face identical worlds.
template <typename T>
EvalResult<T> evaluate(const ChunkSource<T>& source, const SimParams& sim,
                       const ExecutorConfig& exec, int n_episodes,
                       std::uint64_t base_seed) {
  if (n_episodes < 1)
    throw std::invalid_argument("evaluate: n_episodes must be >= 1");
  EvalResult<T> res;
  res.episodes.reserve(n_episodes);
  int successes = 0;
  long step_sum = 0;
  for (int i = 0; i < n_episodes; ++i) {
    res.episodes.push_back(
        run_episode(source, sim, exec, base_seed + static_cast<std::uint64_t>(i)));
    if (res.episodes.back().success) {
      ++successes;
      step_sum += res.episodes.back().steps_to_success;
    }
  }
  res.success_rate = static_cast<double>(successes) / n_episodes;
  res.mean_steps = successes > 0 ? static_cast<double>(step_sum) / successes : 0.0;
  return res;
}

template <typename T>
void write_episode_csv(const std::string& path,
                       const std::vector<Episode<T>>& episodes) {
  CsvWriter csv(path);
  csv.raw_line("episode,seed,success,steps,final_dist");
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    csv.row(static_cast<long long>(i), static_cast<unsigned long long>(e.seed),
            e.success, e.steps_to_success, static_cast<double>(e.final_dist));
  }
  csv.close();
}

}  // namespace sflow
