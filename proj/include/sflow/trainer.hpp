#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "sflow/adam.hpp"
#include "sflow/csv.hpp"
#include "sflow/flow.hpp"
#include "sflow/policy.hpp"
#include "sflow/sim.hpp"

namespace sflow {

struct TrainConfig {
  int steps = 5000;
  int batch_size = 16;
  double lr = 3e-4;
  double lr_final = -1;  // >= 0 enables cosine decay from lr to this value
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1 || batch_size < 1)
      throw std::invalid_argument("train config: steps and batch_size must be >= 1");
    if (lr <= 0) throw std::invalid_argument("train config: lr must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"lr_final", c.lr_final},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.lr_final = j.value("lr_final", d.lr_final);
  c.seed = j.value("seed", d.seed);
}

/// Flow-matching training in place, starting from whatever weights the
/// policy holds. Batches, noise draws, and update order follow the same
/// recipe as distillation with the teacher terms disabled, so the two
/// paths produce identical weights given identical inits.
template <typename T>
void train_flow_matching(
    PolicyParams<T>& policy, const Dataset<T>& ds, const TrainConfig& cfg,
    const std::string& loss_csv_path = "",
    const std::function<void(int step, double loss)>& on_step = nullptr) {
  cfg.validate();
  if (ds.records.empty())
    throw std::invalid_argument("train: empty dataset");
  if (ds.meta.d_model != policy.cfg.d_model ||
      ds.meta.n_vis_tokens != policy.cfg.n_vis_tokens ||
      ds.meta.chunk_len != policy.cfg.chunk_len)
    throw std::invalid_argument(
        "train: dataset was generated for a different model geometry");

  set_trainable(policy, true);
  ParamList<T> params = param_list(policy);
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam<T> opt(acfg);

  std::unique_ptr<CsvWriter> csv;
  if (!loss_csv_path.empty()) {
    csv = std::make_unique<CsvWriter>(loss_csv_path);
    csv->raw_line("step,task_loss");
  }

  Rng rng(cfg.seed, kTrainStream);
  const T item_w = T(1) / static_cast<T>(cfg.batch_size);
  for (int step = 0; step < cfg.steps; ++step) {
    zero_grads(params);
    double loss_sum = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& rec = ds.records[rng.below(
          static_cast<std::uint32_t>(ds.records.size()))];
      FlowSample<T> fs = make_flow_sample(rec.chunk, rng);
      Tensor<T> v = policy_forward(policy, rec.obs, fs.noisy, fs.tau).velocity;
      Tensor<T> loss = task_loss(v, fs.target);
      loss_sum += static_cast<double>(loss.item()) / cfg.batch_size;
      backward(loss, item_w);
    }
    if (std::isnan(loss_sum))
      throw std::runtime_error("training diverged: task loss is NaN at step " +
                               std::to_string(step));
    if (cfg.lr_final >= 0)
      opt.set_lr(cosine_lr(cfg.lr, cfg.lr_final, step, cfg.steps));
    opt.step(params);
    if (csv) csv->row(step, loss_sum);
    if (on_step) on_step(step, loss_sum);
  }
  if (csv) csv->close();
}

/// Stream used when drawing fresh policy weights for a training run.
inline constexpr std::uint64_t kInitStream = 0x1217;

}  // namespace sflow
