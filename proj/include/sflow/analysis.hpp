#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sflow/csv.hpp"
#include "sflow/executor.hpp"
#include "sflow/flow.hpp"
#include "sflow/policy.hpp"
#include "sflow/sim.hpp"

namespace sflow {

struct SimilarityRow {
  int layer = 0;      // transition out of this layer (layer -> layer+1 state)
  double tau = 0;
  double cosine = 0;
};

namespace detail {

template <typename T>
double mean_row_cosine(const Tensor<T>& a, const Tensor<T>& b) {
  const std::int64_t m = a.rows(), n = a.cols();
  double acc = 0;
  for (std::int64_t i = 0; i < m; ++i) {
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double x = a.values()[i * n + j];
      const double y = b.values()[i * n + j];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    if (na == 0 && nb == 0)
      acc += 1.0;  // both states vanish: nothing changed
    else if (na == 0 || nb == 0)
      acc += 0.0;
    else
      acc += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return acc / static_cast<double>(m);
}

}  // namespace detail

/// Mean cosine similarity between the action-token hidden states entering
/// and leaving each layer, per noise level. Noisy actions are built from
/// the recorded expert chunks: a_tau = tau * a + (1 - tau) * eps with one
/// eps per record.
template <typename T>
std::vector<SimilarityRow> cosine_similarity_profile(
    const PolicyParams<T>& policy, const std::vector<DatasetRecord<T>>& eval_set,
    const std::vector<double>& tau_grid, std::uint64_t seed) {
  if (eval_set.empty())
    throw std::invalid_argument("cosine_similarity_profile: empty eval set");
  if (tau_grid.empty())
    throw std::invalid_argument("cosine_similarity_profile: empty tau grid");
  for (double t : tau_grid)
    if (t < 0 || t > 1)
      throw std::invalid_argument("cosine_similarity_profile: tau outside [0,1]");
  NoGradGuard ng;
  const int n_layers = policy.cfg.n_layers;
  std::vector<std::vector<double>> acc(
      tau_grid.size(), std::vector<double>(static_cast<std::size_t>(n_layers), 0));
  ForwardOptions opts;
  opts.record_hiddens = true;
  for (std::size_t r = 0; r < eval_set.size(); ++r) {
    const auto& rec = eval_set[r];
    Rng rng(seed, r);
    Tensor<T> eps = Tensor<T>::gaussian(rec.chunk.shape(), rng);
    for (std::size_t ti = 0; ti < tau_grid.size(); ++ti) {
      const T tau = static_cast<T>(tau_grid[ti]);
      Tensor<T> noisy = Tensor<T>::zeros(rec.chunk.shape());
      for (std::size_t i = 0; i < noisy.values().size(); ++i)
        noisy.values()[i] =
            tau * rec.chunk.values()[i] + (T(1) - tau) * eps.values()[i];
      ForwardResult<T> out =
          policy_forward(policy, rec.obs, noisy, tau, opts);
      // action_hiddens[0] is the embedded input, [l+1] follows layer l.
      for (int l = 0; l < n_layers; ++l)
        acc[ti][static_cast<std::size_t>(l)] += detail::mean_row_cosine(
            out.action_hiddens[static_cast<std::size_t>(l)],
            out.action_hiddens[static_cast<std::size_t>(l) + 1]);
    }
  }
  std::vector<SimilarityRow> rows;
  rows.reserve(tau_grid.size() * static_cast<std::size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l)
    for (std::size_t ti = 0; ti < tau_grid.size(); ++ti)
      rows.push_back({l, tau_grid[ti],
                      acc[ti][static_cast<std::size_t>(l)] /
                          static_cast<double>(eval_set.size())});
  return rows;
}

inline void write_similarity_csv(const std::string& path,
                                 const std::vector<SimilarityRow>& rows) {
  CsvWriter csv(path);
  csv.raw_line("layer,tau,cosine");
  for (const auto& r : rows) csv.row(r.layer, r.tau, r.cosine);
  csv.close();
}

/// Everything needed to score a policy variant in the simulator.
struct EvalSetup {
  SimParams sim;
  ExecutorConfig exec;
  int n_episodes = 100;
  std::uint64_t base_seed = 0;
  int n_diffusion_steps = 10;
};

struct SensitivityTable {
  double baseline = 0;           // success rate with nothing skipped
  std::vector<double> skipped;   // success rate with layer i skipped
  std::vector<double> drop;      // baseline - skipped[i]
};

/// Success-rate drop from skipping each single layer at inference time.
/// All sweeps share episode seeds with the baseline, so differences come
/// from the policy alone.
template <typename T>
SensitivityTable sensitivity_sweep(const PolicyParams<T>& policy,
                                   const Codebook<T>& cb,
                                   const EvalSetup& setup) {
  SensitivityTable table;
  table.baseline =
      evaluate(policy_source(policy, cb, setup.n_diffusion_steps), setup.sim,
               setup.exec, setup.n_episodes, setup.base_seed)
          .success_rate;
  for (int l = 0; l < policy.cfg.n_layers; ++l) {
    const std::set<int> skip{l};
    const double rate =
        evaluate(policy_source(policy, cb, setup.n_diffusion_steps, &skip),
                 setup.sim, setup.exec, setup.n_episodes, setup.base_seed)
            .success_rate;
    table.skipped.push_back(rate);
    table.drop.push_back(table.baseline - rate);
  }
  return table;
}

inline void write_sensitivity_csv(const std::string& path,
                                  const SensitivityTable& t) {
  CsvWriter csv(path);
  csv.raw_line("layer,baseline,skipped,drop");
  for (std::size_t i = 0; i < t.skipped.size(); ++i)
    csv.row(static_cast<long long>(i), t.baseline, t.skipped[i], t.drop[i]);
  csv.close();
}

/// Layers ordered least-sensitive first (ties broken by index).
inline std::vector<int> ascending_sensitivity_order(const SensitivityTable& t) {
  std::vector<int> order(t.drop.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&t](int a, int b) { return t.drop[a] < t.drop[b]; });
  return order;
}

/// Success rate as progressively more layers are skipped, least sensitive
/// first: entry r uses the first r layers of the given order.
template <typename T>
std::vector<double> progressive_skip_eval(const PolicyParams<T>& policy,
                                          const Codebook<T>& cb,
                                          const EvalSetup& setup,
                                          const std::vector<int>& order,
                                          int max_removed) {
  if (max_removed < 0 || max_removed >= policy.cfg.n_layers)
    throw std::invalid_argument(
        "progressive_skip_eval: max_removed must be in [0, n_layers)");
  if (static_cast<int>(order.size()) < max_removed)
    throw std::invalid_argument("progressive_skip_eval: order too short");
  std::vector<double> rates;
  std::set<int> skip;
  for (int r = 0; r <= max_removed; ++r) {
    if (r > 0) skip.insert(order[static_cast<std::size_t>(r - 1)]);
    const std::set<int>* skip_ptr = skip.empty() ? nullptr : &skip;
    rates.push_back(
        evaluate(policy_source(policy, cb, setup.n_diffusion_steps, skip_ptr),
                 setup.sim, setup.exec, setup.n_episodes, setup.base_seed)
            .success_rate);
  }
  return rates;
}

inline void write_progressive_csv(const std::string& path,
                                  const std::vector<double>& rates) {
  CsvWriter csv(path);
  csv.raw_line("n_removed,success_rate");
  for (std::size_t i = 0; i < rates.size(); ++i)
    csv.row(static_cast<long long>(i), rates[i]);
  csv.close();
}

}  // namespace sflow
