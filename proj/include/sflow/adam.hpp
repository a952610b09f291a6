#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "sflow/tensor.hpp"

namespace sflow {

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm ceiling; <= 0 disables
};

/// Cosine interpolation from lr_start (step 0) to lr_end (last step).
inline double cosine_lr(double lr_start, double lr_end, int step,
                        int total_steps) {
  if (total_steps <= 1) return lr_start;
  const double u = static_cast<double>(step) / (total_steps - 1);
  return lr_end +
         0.5 * (lr_start - lr_end) * (1.0 + std::cos(u * std::numbers::pi));
}

/// Adam with bias correction and global-norm gradient clipping. Moment
/// buffers are indexed by position in the param list, so the list must
/// keep a stable order across steps (ours is fixed by construction).
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return t_; }

  /// For schedules; takes effect from the next step() call.
  void set_lr(double lr) {
    if (lr < 0) throw std::invalid_argument("Adam::set_lr: negative lr");
    cfg_.lr = lr;
  }

  /// Returns the pre-clip global gradient norm (useful for logging).
  double step(ParamList<T>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].tensor.values().size(), 0.0);
        v_[i].assign(params[i].tensor.values().size(), 0.0);
      }
    }
    if (m_.size() != params.size())
      throw std::invalid_argument("Adam::step: param list changed size");

    double sq = 0.0;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm)
      scale = cfg_.clip_norm / norm;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& tensor = params[i].tensor;
      if (!tensor.has_grad()) continue;
      auto& data = tensor.values();
      const auto& grad = tensor.grad();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = static_cast<double>(grad[j]) * scale;
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m_[i][j] / bc1;
        const double vh = v_[i][j] / bc2;
        data[j] -= static_cast<T>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    return norm;
  }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  // Moments stay in double so float training keeps a stable optimizer state.
  std::vector<std::vector<double>> m_, v_;
};

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace sflow
