#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sflow/policy.hpp"
#include "sflow/rng.hpp"
#include "sflow/serialize.hpp"
#include "sflow/tensor.hpp"

namespace sflow {

struct SimParams {
  double success_radius = 0.05;  // arena units; arena is the unit square
  int horizon = 200;             // control steps before an episode fails
  double max_action = 0.1;       // per-step displacement ceiling
  double expert_kp = 0.5;        // proportional gain of the scripted expert
  double expert_noise = 0.01;    // exploration noise on expert actions
  double target_v_max = 0.01;    // target speed ceiling (dynamic variant)
  bool moving_target = false;    // static vs dynamic task variant
  int n_tasks = 2;               // task 0 chases the target, 1 the distractor

  void validate() const {
    if (success_radius <= 0 || horizon < 1 || max_action <= 0 ||
        target_v_max < 0 || n_tasks < 1)
      throw std::invalid_argument("sim config: non-positive geometry or horizon");
  }
};

inline void to_json(nlohmann::json& j, const SimParams& p) {
  j = nlohmann::json{{"success_radius", p.success_radius},
                     {"horizon", p.horizon},
                     {"max_action", p.max_action},
                     {"expert_kp", p.expert_kp},
                     {"expert_noise", p.expert_noise},
                     {"target_v_max", p.target_v_max},
                     {"moving_target", p.moving_target},
                     {"n_tasks", p.n_tasks}};
}

inline void from_json(const nlohmann::json& j, SimParams& p) {
  SimParams d;
  p.success_radius = j.value("success_radius", d.success_radius);
  p.horizon = j.value("horizon", d.horizon);
  p.max_action = j.value("max_action", d.max_action);
  p.expert_kp = j.value("expert_kp", d.expert_kp);
  p.expert_noise = j.value("expert_noise", d.expert_noise);
  p.target_v_max = j.value("target_v_max", d.target_v_max);
  p.moving_target = j.value("moving_target", d.moving_target);
  p.n_tasks = j.value("n_tasks", d.n_tasks);
}

template <typename T>
using Vec2 = std::array<T, 2>;

template <typename T>
T vec_dist(const Vec2<T>& a, const Vec2<T>& b) {
  const T dx = a[0] - b[0], dy = a[1] - b[1];
  return std::sqrt(dx * dx + dy * dy);
}

template <typename T>
struct WorldState {
  Vec2<T> agent{};
  Vec2<T> target{};
  Vec2<T> target_vel{};
  Vec2<T> distractor{};
  int task_id = 0;
  int time_step = 0;

  const Vec2<T>& goal() const { return task_id == 0 ? target : distractor; }
};

template <typename T>
T goal_distance(const WorldState<T>& w) {
  return vec_dist(w.agent, w.goal());
}

template <typename T>
bool at_goal(const WorldState<T>& w, const SimParams& p) {
  return goal_distance(w) < static_cast<T>(p.success_radius);
}

/// Draws a fresh world: positions keep clear of the walls, the two
/// objects keep clear of each other (no ambiguous goals), and the agent
/// never starts already inside the success radius. In the dynamic
/// variant the target velocity is uniform over the disk |v| <= v_max.
template <typename T>
WorldState<T> sample_world(const SimParams& p, Rng& rng) {
  auto draw = [&rng]() -> Vec2<T> {
    return {static_cast<T>(rng.uniform(0.1, 0.9)),
            static_cast<T>(rng.uniform(0.1, 0.9))};
  };
  WorldState<T> w;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    w.agent = draw();
    w.target = draw();
    w.distractor = draw();
    const T min_sep = static_cast<T>(4 * p.success_radius);
    if (vec_dist(w.target, w.distractor) < min_sep) continue;
    if (vec_dist(w.agent, w.target) < min_sep) continue;
    if (vec_dist(w.agent, w.distractor) < min_sep) continue;
    w.task_id = static_cast<int>(rng.below(static_cast<std::uint32_t>(p.n_tasks)));
    w.target_vel = {T(0), T(0)};
    if (p.moving_target) {
      const T angle = static_cast<T>(rng.uniform(0.0, 6.283185307179586));
      const T speed = static_cast<T>(p.target_v_max * std::sqrt(rng.uniform()));
      w.target_vel = {speed * std::cos(angle), speed * std::sin(angle)};
    }
    w.time_step = 0;
    return w;
  }
  throw std::runtime_error("sample_world: could not place objects");
}

template <typename T>
Vec2<T> clip_action(const Vec2<T>& a, const SimParams& p) {
  const T norm = std::sqrt(a[0] * a[0] + a[1] * a[1]);
  const T lim = static_cast<T>(p.max_action);
  if (norm <= lim) return a;
  const T s = lim / norm;
  return {a[0] * s, a[1] * s};
}

/// Advances the world one control step: the agent moves by the clipped
/// action and stays inside the arena; the target drifts and reflects off
/// the walls.
template <typename T>
WorldState<T> step_world(const WorldState<T>& w, const Vec2<T>& action,
                         const SimParams& p) {
  WorldState<T> n = w;
  const Vec2<T> a = clip_action(action, p);
  n.agent[0] = std::clamp(w.agent[0] + a[0], T(0), T(1));
  n.agent[1] = std::clamp(w.agent[1] + a[1], T(0), T(1));
  for (int c = 0; c < 2; ++c) {
    T x = n.target[c] + n.target_vel[c];
    if (x < T(0)) {
      x = -x;
      n.target_vel[c] = -n.target_vel[c];
    } else if (x > T(1)) {
      x = T(2) - x;
      n.target_vel[c] = -n.target_vel[c];
    }
    n.target[c] = x;
  }
  ++n.time_step;
  return n;
}

/// Scripted demonstrator: a proportional controller toward the selected
/// goal with exploration noise, rolled forward so later chunk entries
/// anticipate both its own motion and the target's.
template <typename T>
Tensor<T> expert_chunk(const WorldState<T>& world, const SimParams& p,
                       int chunk_len, Rng& rng) {
  Tensor<T> chunk = Tensor<T>::zeros({chunk_len, 2});
  WorldState<T> w = world;
  for (int i = 0; i < chunk_len; ++i) {
    const Vec2<T>& g = w.goal();
    Vec2<T> a = {static_cast<T>(p.expert_kp) * (g[0] - w.agent[0]) +
                     static_cast<T>(p.expert_noise) * static_cast<T>(rng.gaussian()),
                 static_cast<T>(p.expert_kp) * (g[1] - w.agent[1]) +
                     static_cast<T>(p.expert_noise) * static_cast<T>(rng.gaussian())};
    a = clip_action(a, p);
    chunk.at(i, 0) = a[0];
    chunk.at(i, 1) = a[1];
    w = step_world(w, a, p);
  }
  return chunk;
}

/// Fixed random codebook that plays the role of a vision encoder: each
/// grid cell's relative geometry is mapped linearly into model space and
/// tagged with a positional code; task ids index a language embedding.
template <typename T>
struct Codebook {
  int grid = 0;             // vis tokens form a grid x grid layout
  Tensor<T> proj;           // [7 x d_model]
  Tensor<T> pos;            // [n_vis_tokens x d_model]
  Tensor<T> lang;           // [n_tasks x d_model]
};

inline constexpr std::uint64_t kCodebookStream = 0xC0DEB00C;

template <typename T>
Codebook<T> make_codebook(int d_model, int n_vis_tokens, int n_tasks,
                          std::uint64_t seed) {
  const int grid = static_cast<int>(std::lround(std::sqrt(
      static_cast<double>(n_vis_tokens))));
  if (grid * grid != n_vis_tokens)
    throw std::invalid_argument("tokenizer: n_vis_tokens must be a square, got " +
                                std::to_string(n_vis_tokens));
  Rng rng(seed, kCodebookStream);
  Codebook<T> c;
  c.grid = grid;
  c.proj = Tensor<T>::gaussian({7, d_model}, rng,
                               T(1) / std::sqrt(T(7)));
  c.pos = Tensor<T>::gaussian({n_vis_tokens, d_model}, rng);
  c.lang = Tensor<T>::gaussian({n_tasks, d_model}, rng);
  return c;
}

/// World -> observation tokens. Cell features are the offsets of agent,
/// target, and distractor from the cell center plus a constant channel;
/// the same world always produces the same tokens.
template <typename T>
Observation<T> tokenize(const Codebook<T>& cb, const WorldState<T>& world) {
  const int v = cb.grid * cb.grid;
  if (world.task_id < 0 || world.task_id >= cb.lang.rows())
    throw std::invalid_argument("tokenize: task_id " +
                                std::to_string(world.task_id) +
                                " outside the language table");
  Tensor<T> feats = Tensor<T>::zeros({v, 7});
  for (int i = 0; i < v; ++i) {
    const T cx = (static_cast<T>(i % cb.grid) + T(0.5)) / static_cast<T>(cb.grid);
    const T cy = (static_cast<T>(i / cb.grid) + T(0.5)) / static_cast<T>(cb.grid);
    T* row = feats.ptr() + i * 7;
    row[0] = world.agent[0] - cx;
    row[1] = world.agent[1] - cy;
    row[2] = world.target[0] - cx;
    row[3] = world.target[1] - cy;
    row[4] = world.distractor[0] - cx;
    row[5] = world.distractor[1] - cy;
    row[6] = T(1);
  }
  Observation<T> obs;
  obs.vis = add(matmul(feats, cb.proj), cb.pos);
  obs.lang = slice_rows(cb.lang, world.task_id, world.task_id + 1);
  obs.state = Tensor<T>::from_data({2}, {world.agent[0], world.agent[1]});
  return obs;
}

// ---------------------------------------------------------------------------
// Demonstration datasets

struct DatasetMeta {
  SimParams sim;
  std::uint64_t seed = 0;
  std::uint64_t codebook_seed = 0;
  int n_episodes = 0;
  std::int64_t n_records = 0;
  int d_model = 0;
  int n_vis_tokens = 0;
  int n_lang_tokens = 1;
  int chunk_len = 0;
  int action_dim = 2;
  int state_dim = 2;
};

inline void to_json(nlohmann::json& j, const DatasetMeta& m) {
  j = nlohmann::json{{"sim", m.sim},
                     {"seed", m.seed},
                     {"codebook_seed", m.codebook_seed},
                     {"n_episodes", m.n_episodes},
                     {"n_records", m.n_records},
                     {"d_model", m.d_model},
                     {"n_vis_tokens", m.n_vis_tokens},
                     {"n_lang_tokens", m.n_lang_tokens},
                     {"chunk_len", m.chunk_len},
                     {"action_dim", m.action_dim},
                     {"state_dim", m.state_dim}};
}

inline void from_json(const nlohmann::json& j, DatasetMeta& m) {
  j.at("sim").get_to(m.sim);
  j.at("seed").get_to(m.seed);
  j.at("codebook_seed").get_to(m.codebook_seed);
  j.at("n_episodes").get_to(m.n_episodes);
  j.at("n_records").get_to(m.n_records);
  j.at("d_model").get_to(m.d_model);
  j.at("n_vis_tokens").get_to(m.n_vis_tokens);
  m.n_lang_tokens = j.value("n_lang_tokens", 1);
  j.at("chunk_len").get_to(m.chunk_len);
  m.action_dim = j.value("action_dim", 2);
  m.state_dim = j.value("state_dim", 2);
}

template <typename T>
struct DatasetRecord {
  std::vector<T> world;  // [episode, step, agent, target, target_vel,
                         //  distractor, task_id] = 11 numbers
  Observation<T> obs;
  Tensor<T> chunk;
};

template <typename T>
struct Dataset {
  DatasetMeta meta;
  std::vector<DatasetRecord<T>> records;
};

template <typename T>
std::vector<T> pack_world(const WorldState<T>& w, int episode) {
  return {static_cast<T>(episode), static_cast<T>(w.time_step),
          w.agent[0],      w.agent[1],      w.target[0],    w.target[1],
          w.target_vel[0], w.target_vel[1], w.distractor[0], w.distractor[1],
          static_cast<T>(w.task_id)};
}

/// Rolls the expert closed-loop (replanning every step) and records one
/// (world, tokens, chunk) triple per control step. Per-episode Rng
/// streams make the file a pure function of (params, n_episodes, seed).
template <typename T>
Dataset<T> gen_dataset(const SimParams& sim, int d_model, int n_vis_tokens,
                       int chunk_len, int n_episodes, std::uint64_t seed) {
  sim.validate();
  Dataset<T> ds;
  ds.meta.sim = sim;
  ds.meta.seed = seed;
  ds.meta.codebook_seed = seed;
  ds.meta.n_episodes = n_episodes;
  ds.meta.d_model = d_model;
  ds.meta.n_vis_tokens = n_vis_tokens;
  ds.meta.chunk_len = chunk_len;
  Codebook<T> cb = make_codebook<T>(d_model, n_vis_tokens, sim.n_tasks, seed);
  for (int ep = 0; ep < n_episodes; ++ep) {
    Rng rng(seed, 1 + static_cast<std::uint64_t>(ep));
    WorldState<T> w = sample_world<T>(sim, rng);
    for (int t = 0; t < sim.horizon && !at_goal(w, sim); ++t) {
      DatasetRecord<T> rec;
      rec.world = pack_world(w, ep);
      rec.obs = tokenize(cb, w);
      rec.chunk = expert_chunk(w, sim, chunk_len, rng);
      ds.records.push_back(std::move(rec));
      const auto& c = ds.records.back().chunk;
      w = step_world(w, {c.at(0, 0), c.at(0, 1)}, sim);
    }
  }
  ds.meta.n_records = static_cast<std::int64_t>(ds.records.size());
  return ds;
}

template <typename T>
void save_dataset(const std::string& path, const Dataset<T>& ds) {
  nlohmann::json header = ds.meta;
  std::vector<NamedTensorData> tensors;
  tensors.reserve(ds.records.size() * 5);
  for (const auto& r : ds.records) {
    NamedTensorData world;
    world.name = "world";
    world.shape = {static_cast<std::int64_t>(r.world.size())};
    world.data.assign(r.world.begin(), r.world.end());
    tensors.push_back(std::move(world));
    tensors.push_back(to_record("vis", r.obs.vis));
    tensors.push_back(to_record("lang", r.obs.lang));
    tensors.push_back(to_record("state", r.obs.state));
    tensors.push_back(to_record("chunk", r.chunk));
  }
  save_tensor_file(path, kDatasetMagic, header.dump(), tensors);
}

template <typename T>
Dataset<T> load_dataset(const std::string& path) {
  TensorFile f = load_tensor_file(path, kDatasetMagic);
  Dataset<T> ds;
  try {
    ds.meta = nlohmann::json::parse(f.config_json).get<DatasetMeta>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("'" + path + "': bad dataset header: " + e.what());
  }
  if (f.tensors.size() % 5 != 0 ||
      static_cast<std::int64_t>(f.tensors.size() / 5) != ds.meta.n_records)
    throw std::runtime_error("'" + path + "': tensor count does not match header");
  ds.records.reserve(f.tensors.size() / 5);
  for (std::size_t i = 0; i < f.tensors.size(); i += 5) {
    const auto expect = [&](std::size_t off, const char* name) -> const NamedTensorData& {
      const auto& t = f.tensors[i + off];
      if (t.name != name)
        throw std::runtime_error("'" + path + "': expected tensor '" +
                                 std::string(name) + "', found '" + t.name + "'");
      return t;
    };
    DatasetRecord<T> r;
    const auto& world = expect(0, "world");
    r.world.assign(world.data.begin(), world.data.end());
    const auto load = [](const NamedTensorData& t) {
      Tensor<T> out = Tensor<T>::zeros(t.shape);
      from_record(t, out);
      return out;
    };
    r.obs.vis = load(expect(1, "vis"));
    r.obs.lang = load(expect(2, "lang"));
    r.obs.state = load(expect(3, "state"));
    r.chunk = load(expect(4, "chunk"));
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace sflow
