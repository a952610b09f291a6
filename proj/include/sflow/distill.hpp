#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sflow/adam.hpp"
#include "sflow/csv.hpp"
#include "sflow/flow.hpp"
#include "sflow/ops.hpp"
#include "sflow/policy.hpp"
#include "sflow/rng.hpp"
#include "sflow/sim.hpp"

namespace sflow {

/// Teacher-layer index assigned to each student layer.
struct LayerMap {
  std::vector<int> indices;
};

/// Uniform end-aligned subsampling: student layer i maps to teacher layer
/// ceil((i+1) * L_T / L_S) - 1. The last student layer always maps to the
/// last teacher layer.
inline LayerMap uniform_subsample(int teacher_depth, int student_depth) {
  if (student_depth < 1 || student_depth > teacher_depth)
    throw std::invalid_argument(
        "uniform_subsample: need 1 <= student depth <= teacher depth, got " +
        std::to_string(student_depth) + " of " + std::to_string(teacher_depth));
  LayerMap map;
  map.indices.resize(student_depth);
  for (int i = 0; i < student_depth; ++i)
    map.indices[i] =
        static_cast<int>(((static_cast<std::int64_t>(i) + 1) * teacher_depth +
                          student_depth - 1) /
                         student_depth) -
        1;
  return map;
}

enum class AttnPlacement { kInitial, kMiddle, kLater };

inline int placement_rule(AttnPlacement p, int student_depth) {
  if (student_depth < 1)
    throw std::invalid_argument("placement_rule: empty student");
  switch (p) {
    case AttnPlacement::kInitial: return 0;
    case AttnPlacement::kMiddle: return student_depth / 2;
    case AttnPlacement::kLater: return student_depth - 1;
  }
  throw std::invalid_argument("placement_rule: bad placement");
}

inline AttnPlacement parse_placement(const std::string& s) {
  if (s == "initial") return AttnPlacement::kInitial;
  if (s == "middle") return AttnPlacement::kMiddle;
  if (s == "later") return AttnPlacement::kLater;
  throw std::invalid_argument("attn_placement must be initial|middle|later, got '" +
                              s + "'");
}

inline std::string placement_name(AttnPlacement p) {
  switch (p) {
    case AttnPlacement::kInitial: return "initial";
    case AttnPlacement::kMiddle: return "middle";
    case AttnPlacement::kLater: return "later";
  }
  return "?";
}

inline AttnScope parse_scope(const std::string& s) {
  if (s == "action_only") return AttnScope::kActionToVL;
  if (s == "all_tokens") return AttnScope::kAllTokens;
  throw std::invalid_argument("attn_scope must be action_only|all_tokens, got '" +
                              s + "'");
}

inline std::string scope_name(AttnScope s) {
  return s == AttnScope::kActionToVL ? "action_only" : "all_tokens";
}

struct DistillConfig {
  int student_layers = 4;
  double lambda_task = 1.0;
  double lambda_kd = 1.0;
  double lambda_attn = 0.1;
  AttnPlacement attn_placement = AttnPlacement::kMiddle;
  AttnScope attn_scope = AttnScope::kActionToVL;
  int steps = 2000;
  int batch_size = 16;
  double lr = 3e-4;
  double lr_final = -1;  // >= 0 enables cosine decay from lr to this value
  std::uint64_t seed = 0;

  void validate() const {
    if (student_layers < 1)
      throw std::invalid_argument("distill config: student_layers must be >= 1");
    if (lambda_task < 0 || lambda_kd < 0 || lambda_attn < 0)
      throw std::invalid_argument("distill config: negative loss weight");
    if (lambda_task == 0 && lambda_kd == 0 && lambda_attn == 0)
      throw std::invalid_argument("distill config: all loss weights are zero");
    if (steps < 1 || batch_size < 1)
      throw std::invalid_argument("distill config: steps and batch_size must be >= 1");
    if (lr <= 0) throw std::invalid_argument("distill config: lr must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"student_layers", c.student_layers},
                     {"lambda_task", c.lambda_task},
                     {"lambda_kd", c.lambda_kd},
                     {"lambda_attn", c.lambda_attn},
                     {"attn_placement", placement_name(c.attn_placement)},
                     {"attn_scope", scope_name(c.attn_scope)},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"lr_final", c.lr_final},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  DistillConfig d;
  c.student_layers = j.value("student_layers", d.student_layers);
  c.lambda_task = j.value("lambda_task", d.lambda_task);
  c.lambda_kd = j.value("lambda_kd", d.lambda_kd);
  c.lambda_attn = j.value("lambda_attn", d.lambda_attn);
  c.attn_placement =
      parse_placement(j.value("attn_placement", placement_name(d.attn_placement)));
  c.attn_scope = parse_scope(j.value("attn_scope", scope_name(d.attn_scope)));
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
}

/// Builds the shallow student: embeddings and head copied verbatim, layer
/// i copied bitwise from teacher layer map.indices[i] (both expert
/// stacks). The copies are fresh leaves, so training the student never
/// touches the teacher.
template <typename T>
PolicyParams<T> init_student(const PolicyParams<T>& teacher,
                             const LayerMap& map) {
  if (map.indices.empty() ||
      static_cast<int>(map.indices.size()) > teacher.cfg.n_layers)
    throw std::invalid_argument("init_student: layer map has " +
                                std::to_string(map.indices.size()) +
                                " entries for a depth-" +
                                std::to_string(teacher.cfg.n_layers) + " teacher");
  for (int idx : map.indices)
    if (idx < 0 || idx >= teacher.cfg.n_layers)
      throw std::invalid_argument("init_student: teacher layer " +
                                  std::to_string(idx) + " out of range");
  PolicyParams<T> s;
  s.cfg = teacher.cfg;
  s.cfg.n_layers = static_cast<int>(map.indices.size());
  s.prefix_in_w = teacher.prefix_in_w.detach();
  s.prefix_in_b = teacher.prefix_in_b.detach();
  s.state_w = teacher.state_w.detach();
  s.state_b = teacher.state_b.detach();
  s.action_in_w = teacher.action_in_w.detach();
  s.action_in_b = teacher.action_in_b.detach();
  s.tau_w = teacher.tau_w.detach();
  s.tau_b = teacher.tau_b.detach();
  auto copy_block = [](const BlockWeights<T>& b) {
    BlockWeights<T> out;
    out.norm_attn = b.norm_attn.detach();
    out.attn.wq = b.attn.wq.detach();
    out.attn.bq = b.attn.bq.detach();
    out.attn.wk = b.attn.wk.detach();
    out.attn.bk = b.attn.bk.detach();
    out.attn.wv = b.attn.wv.detach();
    out.attn.bv = b.attn.bv.detach();
    out.attn.wo = b.attn.wo.detach();
    out.attn.bo = b.attn.bo.detach();
    out.norm_mlp = b.norm_mlp.detach();
    out.mlp.w1 = b.mlp.w1.detach();
    out.mlp.b1 = b.mlp.b1.detach();
    out.mlp.w2 = b.mlp.w2.detach();
    out.mlp.b2 = b.mlp.b2.detach();
    return out;
  };
  for (int idx : map.indices) {
    const auto& src = teacher.layers[static_cast<std::size_t>(idx)];
    s.layers.push_back({copy_block(src.prefix), copy_block(src.suffix)});
  }
  s.final_norm = teacher.final_norm.detach();
  s.action_out_w = teacher.action_out_w.detach();
  s.action_out_b = teacher.action_out_b.detach();
  return s;
}

/// Velocity matching against a frozen teacher on the SAME noisy input and
/// tau. The teacher tensor carries no graph, so gradients reach only the
/// student.
template <typename T>
Tensor<T> kd_loss(const PolicyParams<T>& student,
                  const PolicyParams<T>& teacher, const Observation<T>& obs,
                  const FlowSample<T>& sample) {
  Tensor<T> vs = policy_forward(student, obs, sample.noisy, sample.tau).velocity;
  Tensor<T> vt;
  {
    NoGradGuard ng;
    vt = policy_forward(teacher, obs, sample.noisy, sample.tau).velocity;
  }
  return mean_squared_error(vs, vt.detach());
}

namespace detail {

template <typename T>
Tensor<T> attn_record_kl(const AttentionRecord<T>& teacher,
                         const AttentionRecord<T>& student, AttnScope scope) {
  if (scope == AttnScope::kActionToVL)
    return mean_all(kl_divergence(teacher.action_rows, student.action_rows));
  const Tensor<T> kp = kl_divergence(teacher.prefix_rows, student.prefix_rows);
  const Tensor<T> ks = kl_divergence(teacher.suffix_rows, student.suffix_rows);
  const T rows = static_cast<T>(kp.numel() + ks.numel());
  return mul_scalar(add(sum_all(kp), sum_all(ks)), T(1) / rows);
}

}  // namespace detail

/// KL(teacher attention || student attention) at corresponding layers:
/// the student captures at its placement-rule layer, the teacher at the
/// layer the student was initialized from. Averaged over heads, rows, and
/// (by the caller) the batch.
template <typename T>
Tensor<T> attn_loss(const PolicyParams<T>& student,
                    const PolicyParams<T>& teacher, const LayerMap& map,
                    const Observation<T>& obs, const FlowSample<T>& sample,
                    AttnPlacement placement, AttnScope scope) {
  if (student.cfg.n_heads != teacher.cfg.n_heads)
    throw std::invalid_argument("attn_loss: teacher has " +
                                std::to_string(teacher.cfg.n_heads) +
                                " heads, student " +
                                std::to_string(student.cfg.n_heads));
  const int s_layer = placement_rule(placement, student.cfg.n_layers);
  if (s_layer >= static_cast<int>(map.indices.size()))
    throw std::invalid_argument("attn_loss: layer map shorter than student");
  const int t_layer = map.indices[static_cast<std::size_t>(s_layer)];
  ForwardOptions s_opts;
  s_opts.capture_attn_layer = s_layer;
  s_opts.attn_scope = scope;
  ForwardOptions t_opts;
  t_opts.capture_attn_layer = t_layer;
  t_opts.attn_scope = scope;
  AttentionRecord<T> s_attn =
      policy_forward(student, obs, sample.noisy, sample.tau, s_opts).attn;
  AttentionRecord<T> t_attn;
  {
    NoGradGuard ng;
    t_attn = policy_forward(teacher, obs, sample.noisy, sample.tau, t_opts).attn;
  }
  return detail::attn_record_kl(t_attn, s_attn, scope);
}

struct DistillStepLog {
  int step = 0;
  double task = 0, kd = 0, attn = 0, total = 0;
};

/// Full distillation run: subsample, copy, then optimize the weighted sum
/// of task, velocity-matching, and attention-matching losses. One tau and
/// one noise draw are shared by all three losses for each item. Writes a
/// per-step loss CSV when a path is given.
template <typename T>
PolicyParams<T> distill_train(
    PolicyParams<T>& teacher, const Dataset<T>& ds, const DistillConfig& cfg,
    const std::string& loss_csv_path = "",
    const std::function<void(const DistillStepLog&)>& on_step = nullptr) {
  cfg.validate();
  if (ds.records.empty())
    throw std::invalid_argument("distill_train: empty dataset");
  if (ds.meta.d_model != teacher.cfg.d_model ||
      ds.meta.n_vis_tokens != teacher.cfg.n_vis_tokens ||
      ds.meta.chunk_len != teacher.cfg.chunk_len)
    throw std::invalid_argument(
        "distill_train: dataset was generated for a different model geometry");

  set_trainable(teacher, false);
  const LayerMap map = uniform_subsample(teacher.cfg.n_layers, cfg.student_layers);
  PolicyParams<T> student = init_student(teacher, map);
  set_trainable(student, true);
  ParamList<T> params = param_list(student);

  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam<T> opt(acfg);

  const int s_layer = placement_rule(cfg.attn_placement, cfg.student_layers);
  const int t_layer = map.indices[static_cast<std::size_t>(s_layer)];
  const bool need_teacher = cfg.lambda_kd > 0 || cfg.lambda_attn > 0;
  const bool need_attn = cfg.lambda_attn > 0;

  std::unique_ptr<CsvWriter> csv;
  if (!loss_csv_path.empty()) {
    csv = std::make_unique<CsvWriter>(loss_csv_path);
    csv->raw_line("step,task_loss,kd_loss,attn_loss,total");
  }

  Rng rng(cfg.seed, kTrainStream);
  const T item_w = T(1) / static_cast<T>(cfg.batch_size);
  for (int step = 0; step < cfg.steps; ++step) {
    zero_grads(params);
    DistillStepLog log;
    log.step = step;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& rec = ds.records[rng.below(
          static_cast<std::uint32_t>(ds.records.size()))];
      FlowSample<T> fs = make_flow_sample(rec.chunk, rng);

      ForwardOptions s_opts;
      ForwardOptions t_opts;
      if (need_attn) {
        s_opts.capture_attn_layer = s_layer;
        s_opts.attn_scope = cfg.attn_scope;
        t_opts.capture_attn_layer = t_layer;
        t_opts.attn_scope = cfg.attn_scope;
      }
      ForwardResult<T> sr =
          policy_forward(student, rec.obs, fs.noisy, fs.tau, s_opts);
      ForwardResult<T> tr;
      if (need_teacher) {
        NoGradGuard ng;
        tr = policy_forward(teacher, rec.obs, fs.noisy, fs.tau, t_opts);
      }

      Tensor<T> total = Tensor<T>::scalar(T(0));
      const Tensor<T> l_task = task_loss(sr.velocity, fs.target);
      log.task += static_cast<double>(l_task.item()) / cfg.batch_size;
      if (cfg.lambda_task > 0)
        total = add(total, mul_scalar(l_task, static_cast<T>(cfg.lambda_task)));
      if (need_teacher) {
        const Tensor<T> l_kd =
            mean_squared_error(sr.velocity, tr.velocity.detach());
        log.kd += static_cast<double>(l_kd.item()) / cfg.batch_size;
        if (cfg.lambda_kd > 0)
          total = add(total, mul_scalar(l_kd, static_cast<T>(cfg.lambda_kd)));
        if (need_attn) {
          const Tensor<T> l_attn =
              detail::attn_record_kl(tr.attn, sr.attn, cfg.attn_scope);
          log.attn += static_cast<double>(l_attn.item()) / cfg.batch_size;
          total =
              add(total, mul_scalar(l_attn, static_cast<T>(cfg.lambda_attn)));
        }
      }
      log.total += static_cast<double>(total.item()) / cfg.batch_size;
      backward(total, item_w);
    }
    if (std::isnan(log.task) || std::isnan(log.kd) || std::isnan(log.attn)) {
      const char* which = std::isnan(log.task)  ? "task"
                          : std::isnan(log.kd) ? "kd"
                                                : "attn";
      throw std::runtime_error("distillation diverged: " + std::string(which) +
                               " loss is NaN at step " + std::to_string(step));
    }
    opt.step(params);
    if (csv) csv->row(step, log.task, log.kd, log.attn, log.total);
    if (on_step) on_step(log);
  }
  if (csv) csv->close();
  return student;
}

}  // namespace sflow
