#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sflow/csv.hpp"
#include "sflow/flow.hpp"
#include "sflow/policy.hpp"
#include "sflow/rng.hpp"

namespace sflow {

/// Nearest-rank percentile (ceil convention) of an unsorted sample:
/// element at index max(0, ceil(q*n) - 1) of the sorted list. The median
/// (q = 0.5) of an odd-length list is its middle element, so one wild
/// outlier cannot move it.
inline double percentile(std::vector<double> xs, double q) {
  if (xs.empty()) throw std::invalid_argument("percentile: empty sample");
  if (q < 0 || q > 1) throw std::invalid_argument("percentile: q outside [0,1]");
  std::sort(xs.begin(), xs.end());
  const auto n = static_cast<std::int64_t>(xs.size());
  std::int64_t idx = static_cast<std::int64_t>(
                         std::ceil(q * static_cast<double>(n))) - 1;
  idx = std::clamp<std::int64_t>(idx, 0, n - 1);
  return xs[static_cast<std::size_t>(idx)];
}

struct BenchRow {
  int n_layers = 0;
  int n_vis_tokens = 0;
  int n_diffusion_steps = 0;
  double median_ms = 0, p10_ms = 0, p90_ms = 0;
  int n_trials = 0;
};

struct LatencyReport {
  std::vector<BenchRow> rows;
  std::string hardware;
  int threads = 1;
  std::string dtype;
};

template <typename T>
const char* dtype_name() {
  if (sizeof(T) == 4) return "float32";
  if (sizeof(T) == 8) return "float64";
  return "unknown";
}

inline std::string cpu_model_string() {
  std::ifstream is("/proc/cpuinfo");
  std::string line;
  while (std::getline(is, line)) {
    const auto pos = line.find("model name");
    if (pos != std::string::npos) {
      const auto colon = line.find(':');
      if (colon != std::string::npos && colon + 2 <= line.size())
        return line.substr(colon + 2);
    }
  }
  return "unknown-cpu";
}

/// Approximate multiply-accumulate count of one full inference
/// (vision-language pass once, then n_steps action-stream passes).
/// Dominant matmul terms only; used to compare axes at matched compute.
inline double inference_flops(const PolicyConfig& cfg, int n_steps) {
  const double d = cfg.d_model;
  const double p = cfg.prefix_len();
  const double s = cfg.suffix_len();
  const double l = cfg.n_layers;
  const double prefix_layer = 12.0 * p * d * d + 2.0 * p * p * d;
  const double suffix_layer = 12.0 * s * d * d + 2.0 * s * (p + s) * d;
  return l * prefix_layer + static_cast<double>(n_steps) * l * suffix_layer;
}

/// Times one full inference (cache build + n_steps cached forwards) for
/// each grid configuration, varying one axis at a time from the base
/// config. Model weights and inputs are drawn deterministically per row.
template <typename T>
LatencyReport bench_sweep(const PolicyConfig& base,
                          const std::vector<int>& depth_grid,
                          const std::vector<int>& token_grid,
                          int n_diffusion_steps, int trials, int warmup,
                          std::uint64_t seed) {
  if (depth_grid.empty() || token_grid.empty())
    throw std::invalid_argument("bench_sweep: empty grid");
  if (warmup < 5)
    throw std::invalid_argument("bench_sweep: need at least 5 warmup runs");
  if (trials < 30)
    throw std::invalid_argument("bench_sweep: need at least 30 trials");
  base.validate();

  std::vector<std::pair<int, int>> points;  // (n_layers, n_vis_tokens)
  auto push_unique = [&points](int l, int v) {
    for (const auto& p : points)
      if (p.first == l && p.second == v) return;
    points.emplace_back(l, v);
  };
  for (int l : depth_grid) push_unique(l, base.n_vis_tokens);
  for (int v : token_grid) push_unique(base.n_layers, v);

  LatencyReport report;
  report.hardware = cpu_model_string();
  report.threads = 1;
  report.dtype = dtype_name<T>();

  NoGradGuard ng;
  for (std::size_t pi = 0; pi < points.size(); ++pi) {
    PolicyConfig cfg = base;
    cfg.n_layers = points[pi].first;
    cfg.n_vis_tokens = points[pi].second;
    cfg.validate();
    Rng rng(seed, pi);
    PolicyParams<T> params = init_policy<T>(cfg, rng);
    Observation<T> obs;
    obs.vis = Tensor<T>::gaussian({cfg.n_vis_tokens, cfg.d_model}, rng);
    obs.lang = Tensor<T>::gaussian({cfg.n_lang_tokens, cfg.d_model}, rng);
    obs.state = Tensor<T>::gaussian({cfg.state_dim}, rng);
    Tensor<T> a0 = Tensor<T>::gaussian({cfg.chunk_len, cfg.action_dim}, rng);

    volatile T sink = T(0);
    auto run_once = [&]() {
      PrefixCache<T> cache = build_prefix_cache(params, obs);
      Tensor<T> a = integrate_velocity_field<T>(
          [&](const Tensor<T>& x, T tau) {
            return policy_forward_cached(params, cache, obs.state, x, tau)
                .velocity;
          },
          a0, n_diffusion_steps);
      sink = sink + a.values()[0];
    };
    for (int i = 0; i < warmup; ++i) run_once();
    std::vector<double> times_ms;
    times_ms.reserve(static_cast<std::size_t>(trials));
    for (int i = 0; i < trials; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      run_once();
      const auto t1 = std::chrono::steady_clock::now();
      times_ms.push_back(
          std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    BenchRow row;
    row.n_layers = cfg.n_layers;
    row.n_vis_tokens = cfg.n_vis_tokens;
    row.n_diffusion_steps = n_diffusion_steps;
    row.median_ms = percentile(times_ms, 0.5);
    row.p10_ms = percentile(times_ms, 0.10);
    row.p90_ms = percentile(times_ms, 0.90);
    row.n_trials = trials;
    report.rows.push_back(row);
  }
  return report;
}

/// Least-squares R^2 of y against x.
inline double r_squared(const std::vector<double>& xs,
                        const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw std::invalid_argument("r_squared: need >= 2 paired points");
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double denom = n * sxx - sx * sx;
  if (denom == 0) throw std::invalid_argument("r_squared: degenerate x values");
  const double b = (n * sxy - sx * sy) / denom;
  const double a = (sy - b * sx) / n;
  double ss_res = 0, ss_tot = 0;
  const double mean_y = sy / n;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double e = ys[i] - (a + b * xs[i]);
    ss_res += e * e;
    ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
  }
  if (ss_tot == 0) return 1.0;
  return 1.0 - ss_res / ss_tot;
}

/// Latency ratios between the extremes of each sweep axis, with the
/// FLOP-model ratios alongside so the two axes can be compared at matched
/// compute reduction (ratio per unit of FLOP reduction).
struct SpeedupSummary {
  int depth_hi = 0, depth_lo = 0;
  double depth_latency_ratio = 1;  // median(depth_hi) / median(depth_lo)
  double depth_flop_ratio = 1;
  int tokens_hi = 0, tokens_lo = 0;
  double token_latency_ratio = 1;
  double token_flop_ratio = 1;
  double depth_r2 = 0;  // linearity of median latency vs depth
};

inline SpeedupSummary speedup_summary(const LatencyReport& report,
                                      const PolicyConfig& base) {
  SpeedupSummary s;
  std::vector<double> depth_x, depth_y;
  const BenchRow* dmin = nullptr;
  const BenchRow* dmax = nullptr;
  const BenchRow* tmin = nullptr;
  const BenchRow* tmax = nullptr;
  for (const auto& r : report.rows) {
    if (r.n_vis_tokens == base.n_vis_tokens) {
      depth_x.push_back(r.n_layers);
      depth_y.push_back(r.median_ms);
      if (!dmin || r.n_layers < dmin->n_layers) dmin = &r;
      if (!dmax || r.n_layers > dmax->n_layers) dmax = &r;
    }
    if (r.n_layers == base.n_layers) {
      if (!tmin || r.n_vis_tokens < tmin->n_vis_tokens) tmin = &r;
      if (!tmax || r.n_vis_tokens > tmax->n_vis_tokens) tmax = &r;
    }
  }
  if (!dmin || !dmax || !tmin || !tmax)
    throw std::invalid_argument("speedup_summary: report missing axis rows");
  auto flops = [&base](int layers, int tokens, int steps) {
    PolicyConfig c = base;
    c.n_layers = layers;
    c.n_vis_tokens = tokens;
    return inference_flops(c, steps);
  };
  s.depth_hi = dmax->n_layers;
  s.depth_lo = dmin->n_layers;
  s.depth_latency_ratio = dmax->median_ms / dmin->median_ms;
  s.depth_flop_ratio =
      flops(dmax->n_layers, base.n_vis_tokens, dmax->n_diffusion_steps) /
      flops(dmin->n_layers, base.n_vis_tokens, dmin->n_diffusion_steps);
  s.tokens_hi = tmax->n_vis_tokens;
  s.tokens_lo = tmin->n_vis_tokens;
  s.token_latency_ratio = tmax->median_ms / tmin->median_ms;
  s.token_flop_ratio =
      flops(base.n_layers, tmax->n_vis_tokens, tmax->n_diffusion_steps) /
      flops(base.n_layers, tmin->n_vis_tokens, tmin->n_diffusion_steps);
  if (depth_x.size() >= 2) s.depth_r2 = r_squared(depth_x, depth_y);
  return s;
}

inline void write_bench_csv(const std::string& path,
                            const LatencyReport& report) {
  CsvWriter csv(path);
  csv.raw_line(
      "n_layers,n_vis_tokens,n_diffusion_steps,median_ms,p10_ms,p90_ms,"
      "n_trials");
  for (const auto& r : report.rows)
    csv.row(r.n_layers, r.n_vis_tokens, r.n_diffusion_steps, r.median_ms,
            r.p10_ms, r.p90_ms, r.n_trials);
  csv.close();
}

inline nlohmann::json bench_json(const LatencyReport& report,
                                 const SpeedupSummary& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows)
    rows.push_back({{"n_layers", r.n_layers},
                    {"n_vis_tokens", r.n_vis_tokens},
                    {"n_diffusion_steps", r.n_diffusion_steps},
                    {"median_ms", r.median_ms},
                    {"p10_ms", r.p10_ms},
                    {"p90_ms", r.p90_ms},
                    {"n_trials", r.n_trials}});
  return nlohmann::json{
      {"rows", rows},
      {"environment",
       {{"hardware", report.hardware},
        {"threads", report.threads},
        {"dtype", report.dtype}}},
      {"summary",
       {{"depth_hi", s.depth_hi},
        {"depth_lo", s.depth_lo},
        {"depth_latency_ratio", s.depth_latency_ratio},
        {"depth_flop_ratio", s.depth_flop_ratio},
        {"tokens_hi", s.tokens_hi},
        {"tokens_lo", s.tokens_lo},
        {"token_latency_ratio", s.token_latency_ratio},
        {"token_flop_ratio", s.token_flop_ratio},
        {"depth_r2", s.depth_r2}}}};
}

}  // namespace sflow
