#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sflow/analysis.hpp"
#include "sflow/bench.hpp"
#include "sflow/distill.hpp"
#include "sflow/executor.hpp"
#include "sflow/flow.hpp"
#include "sflow/policy.hpp"
#include "sflow/sim.hpp"
#include "sflow/trainer.hpp"

namespace sflow::cli {

using json = nlohmann::json;

inline json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config file '" + path + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config file '" + path + "': " + e.what());
  }
  if (!j.is_object())
    throw std::invalid_argument("config file '" + path + "' is not a JSON object");
  return j;
}

template <typename S>
S config_section(const json& j, const char* key) {
  if (!j.contains(key)) return S{};
  try {
    return j.at(key).get<S>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("config section '" + std::string(key) +
                                "': " + e.what());
  }
}

inline std::string in_dir(const std::string& run_dir, const std::string& name) {
  return (std::filesystem::path(run_dir) / name).string();
}

/// Every run writes its fully resolved configuration into the run
/// directory before doing any work.
inline void write_resolved_config(const std::string& run_dir,
                                  const std::string& name, const json& j) {
  std::filesystem::create_directories(run_dir);
  std::ofstream os(in_dir(run_dir, name + ".config.json"));
  if (!os)
    throw std::runtime_error("cannot write resolved config in '" + run_dir + "'");
  os << j.dump(2) << '\n';
}

inline std::vector<int> parse_int_list(const std::string& s, const char* what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string(what) + ": bad integer '" + item +
                                  "'");
    }
  }
  if (out.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
  return out;
}

inline std::vector<double> parse_double_list(const std::string& s,
                                             const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string(what) + ": bad number '" + item +
                                  "'");
    }
  }
  if (out.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
  return out;
}

using Scalar = float;  // training and CLI dtype

// --------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string config, run_dir = ".", out, variant;
  int episodes = -1;
  std::int64_t seed = -1;
};

inline int cmd_gen_data(const GenDataArgs& a) {
  json cfg = load_config_file(a.config);
  SimParams sim = config_section<SimParams>(cfg, "sim");
  PolicyConfig pol = config_section<PolicyConfig>(cfg, "policy");
  int episodes = cfg.value("episodes", 100);
  std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  std::string variant = cfg.value("variant", std::string("static"));
  if (a.episodes >= 0) episodes = a.episodes;
  if (a.seed >= 0) seed = static_cast<std::uint64_t>(a.seed);
  if (!a.variant.empty()) variant = a.variant;
  if (variant != "static" && variant != "dynamic")
    throw std::invalid_argument("variant must be static|dynamic, got '" +
                                variant + "'");
  sim.moving_target = variant == "dynamic";
  sim.validate();
  pol.validate();
  if (episodes < 1) throw std::invalid_argument("episodes must be >= 1");
  const std::string out = a.out.empty() ? in_dir(a.run_dir, "dataset.bin") : a.out;

  json resolved{{"sim", sim},      {"policy", pol}, {"episodes", episodes},
                {"seed", seed},    {"variant", variant}, {"out", out}};
  write_resolved_config(a.run_dir, "gen-data", resolved);

  Dataset<Scalar> ds = gen_dataset<Scalar>(sim, pol.d_model, pol.n_vis_tokens,
                                           pol.chunk_len, episodes, seed);
  save_dataset(out, ds);
  std::cout << "wrote " << ds.records.size() << " records from " << episodes
            << " episodes to " << out << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// train-teacher

struct TrainTeacherArgs {
  std::string config, run_dir = ".", out, data;
  int steps = -1;
  std::int64_t seed = -1;
};

inline int cmd_train_teacher(const TrainTeacherArgs& a) {
  json cfg = load_config_file(a.config);
  PolicyConfig pol = config_section<PolicyConfig>(cfg, "policy");
  TrainConfig train = config_section<TrainConfig>(cfg, "train");
  if (a.steps >= 0) train.steps = a.steps;
  if (a.seed >= 0) train.seed = static_cast<std::uint64_t>(a.seed);
  if (a.data.empty()) throw std::invalid_argument("train-teacher needs --data");
  pol.validate();
  train.validate();
  const std::string out = a.out.empty() ? in_dir(a.run_dir, "teacher.ckpt") : a.out;

  json resolved{{"policy", pol}, {"train", train}, {"data", a.data}, {"out", out}};
  write_resolved_config(a.run_dir, "train-teacher", resolved);

  Dataset<Scalar> ds = load_dataset<Scalar>(a.data);
  Rng init_rng(train.seed, kInitStream);
  PolicyParams<Scalar> policy = init_policy<Scalar>(pol, init_rng);
  train_flow_matching(policy, ds, train, in_dir(a.run_dir, "teacher_loss.csv"),
                      [](int step, double loss) {
                        if (step % 500 == 0)
                          std::cout << "step " << step << " loss " << loss << "\n";
                      });
  save_policy(out, policy);
  std::cout << "wrote teacher checkpoint to " << out << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// distill

struct DistillArgs {
  std::string config, run_dir = ".", out, data, teacher;
  int steps = -1, layers = -1;
  double lambda_task = -1, lambda_kd = -1, lambda_attn = -1;
  std::string placement, scope;
  std::int64_t seed = -1;
};

inline int cmd_distill(const DistillArgs& a) {
  json cfg = load_config_file(a.config);
  DistillConfig dc = config_section<DistillConfig>(cfg, "distill");
  if (a.steps >= 0) dc.steps = a.steps;
  if (a.layers >= 0) dc.student_layers = a.layers;
  if (a.lambda_task >= 0) dc.lambda_task = a.lambda_task;
  if (a.lambda_kd >= 0) dc.lambda_kd = a.lambda_kd;
  if (a.lambda_attn >= 0) dc.lambda_attn = a.lambda_attn;
  if (!a.placement.empty()) dc.attn_placement = parse_placement(a.placement);
  if (!a.scope.empty()) dc.attn_scope = parse_scope(a.scope);
  if (a.seed >= 0) dc.seed = static_cast<std::uint64_t>(a.seed);
  if (a.teacher.empty()) throw std::invalid_argument("distill needs --teacher");
  if (a.data.empty()) throw std::invalid_argument("distill needs --data");
  dc.validate();
  const std::string out = a.out.empty() ? in_dir(a.run_dir, "student.ckpt") : a.out;

  json resolved{{"distill", dc}, {"teacher", a.teacher}, {"data", a.data},
                {"out", out}};
  write_resolved_config(a.run_dir, "distill", resolved);

  PolicyParams<Scalar> teacher = load_policy<Scalar>(a.teacher);
  Dataset<Scalar> ds = load_dataset<Scalar>(a.data);
  PolicyParams<Scalar> student =
      distill_train(teacher, ds, dc, in_dir(a.run_dir, "distill_loss.csv"),
                    [](const DistillStepLog& log) {
                      if (log.step % 500 == 0)
                        std::cout << "step " << log.step << " total "
                                  << log.total << "\n";
                    });
  save_policy(out, student);
  std::cout << "wrote student checkpoint to " << out << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// eval

/// Median wall-clock of one full inference of this checkpoint, used when
/// staleness is derived from measured latency (`--staleness auto`).
inline double measure_policy_latency_ms(const PolicyParams<Scalar>& p,
                                        const Codebook<Scalar>& cb,
                                        const SimParams& sim,
                                        int n_diffusion_steps) {
  Rng rng(0, 0xBE);
  WorldState<Scalar> w = sample_world<Scalar>(sim, rng);
  ChunkSource<Scalar> source = policy_source(p, cb, n_diffusion_steps);
  std::vector<double> times;
  for (int i = 0; i < 36; ++i) {
    Rng step_rng(0, 0xBF);
    const auto t0 = std::chrono::steady_clock::now();
    Tensor<Scalar> c = source(w, step_rng);
    const auto t1 = std::chrono::steady_clock::now();
    (void)c;
    if (i >= 5)
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return percentile(times, 0.5);
}

struct EvalArgs {
  std::string config, run_dir = ".", out, ckpt, suite, staleness;
  int episodes = -1;
  std::int64_t seed = -1;
};

inline int cmd_eval(const EvalArgs& a) {
  json cfg = load_config_file(a.config);
  SimParams sim = config_section<SimParams>(cfg, "sim");
  ExecutorConfig exec = config_section<ExecutorConfig>(cfg, "exec");
  const json ev = cfg.value("eval", json::object());
  int episodes = ev.value("episodes", 200);
  std::uint64_t base_seed = ev.value("base_seed", std::uint64_t{9000});
  int n_diffusion_steps = ev.value("n_diffusion_steps", 10);
  double control_period_ms = ev.value("control_period_ms", 33.3);
  std::string suite = ev.value("suite", std::string("static"));
  std::string staleness = ev.value("staleness", std::string("0"));
  std::uint64_t codebook_seed = cfg.value("codebook_seed", std::uint64_t{0});

  if (a.episodes >= 0) episodes = a.episodes;
  if (a.seed >= 0) base_seed = static_cast<std::uint64_t>(a.seed);
  if (!a.suite.empty()) suite = a.suite;
  if (!a.staleness.empty()) staleness = a.staleness;
  if (a.ckpt.empty()) throw std::invalid_argument("eval needs --ckpt");
  if (suite != "static" && suite != "dynamic")
    throw std::invalid_argument("suite must be static|dynamic, got '" + suite +
                                "'");
  sim.moving_target = suite == "dynamic";
  sim.validate();
  if (episodes < 1) throw std::invalid_argument("episodes must be >= 1");

  PolicyParams<Scalar> policy = load_policy<Scalar>(a.ckpt);
  if (exec.chunk_len != policy.cfg.chunk_len) {
    if (cfg.contains("exec") && cfg["exec"].contains("chunk_len"))
      throw std::invalid_argument("exec.chunk_len disagrees with the checkpoint");
    exec.chunk_len = policy.cfg.chunk_len;
  }
  Codebook<Scalar> cb = make_codebook<Scalar>(
      policy.cfg.d_model, policy.cfg.n_vis_tokens, sim.n_tasks, codebook_seed);

  double measured_ms = -1;
  if (staleness == "auto") {
    measured_ms = measure_policy_latency_ms(policy, cb, sim, n_diffusion_steps);
    exec.staleness_frames = staleness_model(measured_ms, control_period_ms);
  } else if (staleness == "synth") {
    exec.staleness_frames = synthetic_staleness(policy.cfg.n_layers);
  } else {
    try {
      exec.staleness_frames = std::stoi(staleness);
    } catch (const std::exception&) {
      throw std::invalid_argument("staleness must be auto|synth|<frames>, got '" +
                                  staleness + "'");
    }
  }
  exec.validate();

  json resolved{{"sim", sim},
                {"exec", exec},
                {"eval",
                 {{"episodes", episodes},
                  {"base_seed", base_seed},
                  {"n_diffusion_steps", n_diffusion_steps},
                  {"suite", suite},
                  {"staleness", staleness},
                  {"control_period_ms", control_period_ms}}},
                {"codebook_seed", codebook_seed},
                {"ckpt", a.ckpt}};
  write_resolved_config(a.run_dir, "eval", resolved);

  EvalResult<Scalar> res = evaluate(policy_source(policy, cb, n_diffusion_steps),
                                    sim, exec, episodes, base_seed);
  const std::string csv_path =
      a.out.empty() ? in_dir(a.run_dir, "episodes.csv") : a.out;
  write_episode_csv(csv_path, res.episodes);
  json out_json{{"success_rate", res.success_rate},
                {"episodes", episodes},
                {"suite", suite},
                {"staleness_frames", exec.staleness_frames},
                {"mean_steps_to_success", res.mean_steps}};
  if (measured_ms >= 0) out_json["measured_latency_ms"] = measured_ms;
  {
    std::ofstream os(in_dir(a.run_dir, "eval.json"));
    os << out_json.dump(2) << '\n';
  }
  std::cout << "success_rate " << res.success_rate << " over " << episodes
            << " episodes (suite " << suite << ", staleness "
            << exec.staleness_frames << ")\n";
  return 0;
}

// --------------------------------------------------------------------------
// analyze-similarity

struct SimilarityArgs {
  std::string config, run_dir = ".", out, ckpt, data, taus;
  int max_records = -1;
  std::int64_t seed = -1;
};

inline int cmd_analyze_similarity(const SimilarityArgs& a) {
  json cfg = load_config_file(a.config);
  const json an = cfg.value("analysis", json::object());
  std::vector<double> tau_grid =
      an.contains("tau_grid") ? an.at("tau_grid").get<std::vector<double>>()
                              : std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0};
  int max_records = an.value("max_records", 32);
  std::uint64_t seed = an.value("seed", std::uint64_t{0});
  if (!a.taus.empty()) tau_grid = parse_double_list(a.taus, "--taus");
  if (a.max_records >= 0) max_records = a.max_records;
  if (a.seed >= 0) seed = static_cast<std::uint64_t>(a.seed);
  if (a.ckpt.empty()) throw std::invalid_argument("analyze-similarity needs --ckpt");
  if (a.data.empty()) throw std::invalid_argument("analyze-similarity needs --data");
  if (max_records < 1) throw std::invalid_argument("max_records must be >= 1");
  const std::string out =
      a.out.empty() ? in_dir(a.run_dir, "similarity.csv") : a.out;

  json resolved{{"analysis",
                 {{"tau_grid", tau_grid},
                  {"max_records", max_records},
                  {"seed", seed}}},
                {"ckpt", a.ckpt},
                {"data", a.data},
                {"out", out}};
  write_resolved_config(a.run_dir, "analyze-similarity", resolved);

  PolicyParams<Scalar> policy = load_policy<Scalar>(a.ckpt);
  Dataset<Scalar> ds = load_dataset<Scalar>(a.data);
  std::vector<DatasetRecord<Scalar>> eval_set(
      ds.records.begin(),
      ds.records.begin() +
          std::min<std::size_t>(ds.records.size(),
                                static_cast<std::size_t>(max_records)));
  auto rows = cosine_similarity_profile(policy, eval_set, tau_grid, seed);
  write_similarity_csv(out, rows);
  std::cout << "wrote " << rows.size() << " similarity rows to " << out << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// analyze-sensitivity / analyze-progressive

struct SensitivityArgs {
  std::string config, run_dir = ".", out, ckpt, suite;
  int episodes = -1, max_removed = -1;
  std::int64_t seed = -1;
  bool progressive = false;
};

inline EvalSetup eval_setup_from(const json& cfg, const SensitivityArgs& a,
                                 const PolicyParams<Scalar>& policy) {
  EvalSetup setup;
  setup.sim = config_section<SimParams>(cfg, "sim");
  setup.exec = config_section<ExecutorConfig>(cfg, "exec");
  const json ev = cfg.value("eval", json::object());
  setup.n_episodes = ev.value("episodes", 100);
  setup.base_seed = ev.value("base_seed", std::uint64_t{9000});
  setup.n_diffusion_steps = ev.value("n_diffusion_steps", 10);
  std::string suite = ev.value("suite", std::string("static"));
  if (!a.suite.empty()) suite = a.suite;
  if (suite != "static" && suite != "dynamic")
    throw std::invalid_argument("suite must be static|dynamic");
  setup.sim.moving_target = suite == "dynamic";
  if (a.episodes >= 0) setup.n_episodes = a.episodes;
  if (a.seed >= 0) setup.base_seed = static_cast<std::uint64_t>(a.seed);
  if (setup.exec.chunk_len != policy.cfg.chunk_len) {
    if (cfg.contains("exec") && cfg["exec"].contains("chunk_len"))
      throw std::invalid_argument("exec.chunk_len disagrees with the checkpoint");
    setup.exec.chunk_len = policy.cfg.chunk_len;
  }
  setup.sim.validate();
  setup.exec.validate();
  if (setup.n_episodes < 1)
    throw std::invalid_argument("episodes must be >= 1");
  return setup;
}

inline int cmd_analyze_sensitivity(const SensitivityArgs& a) {
  json cfg = load_config_file(a.config);
  if (a.ckpt.empty())
    throw std::invalid_argument("layer analysis needs --ckpt");
  PolicyParams<Scalar> policy = load_policy<Scalar>(a.ckpt);
  EvalSetup setup = eval_setup_from(cfg, a, policy);
  std::uint64_t codebook_seed = cfg.value("codebook_seed", std::uint64_t{0});
  int max_removed = a.max_removed >= 0
                        ? a.max_removed
                        : cfg.value("eval", json::object())
                              .value("max_removed", policy.cfg.n_layers - 1);

  json resolved{{"sim", setup.sim},
                {"exec", setup.exec},
                {"eval",
                 {{"episodes", setup.n_episodes},
                  {"base_seed", setup.base_seed},
                  {"n_diffusion_steps", setup.n_diffusion_steps},
                  {"max_removed", max_removed}}},
                {"codebook_seed", codebook_seed},
                {"ckpt", a.ckpt}};
  write_resolved_config(a.run_dir,
                        a.progressive ? "analyze-progressive"
                                      : "analyze-sensitivity",
                        resolved);

  Codebook<Scalar> cb =
      make_codebook<Scalar>(policy.cfg.d_model, policy.cfg.n_vis_tokens,
                            setup.sim.n_tasks, codebook_seed);
  SensitivityTable table = sensitivity_sweep(policy, cb, setup);
  const std::string sens_out =
      (!a.progressive && !a.out.empty()) ? a.out
                                         : in_dir(a.run_dir, "sensitivity.csv");
  write_sensitivity_csv(sens_out, table);
  std::cout << "baseline success " << table.baseline << "; wrote " << sens_out
            << "\n";
  if (a.progressive) {
    auto order = ascending_sensitivity_order(table);
    auto rates = progressive_skip_eval(policy, cb, setup, order, max_removed);
    const std::string prog_out =
        a.out.empty() ? in_dir(a.run_dir, "progressive.csv") : a.out;
    write_progressive_csv(prog_out, rates);
    std::cout << "wrote " << prog_out << "\n";
  }
  return 0;
}

// --------------------------------------------------------------------------
// bench-latency

struct BenchArgs {
  std::string config, run_dir = ".", out, depths, tokens;
  int steps = -1, trials = -1, warmup = -1;
  std::int64_t seed = -1;
  bool json_out = false;
};

inline int cmd_bench(const BenchArgs& a) {
  json cfg = load_config_file(a.config);
  PolicyConfig pol = config_section<PolicyConfig>(cfg, "policy");
  const json bench = cfg.value("bench", json::object());
  std::vector<int> depth_grid =
      bench.contains("depth_grid")
          ? bench.at("depth_grid").get<std::vector<int>>()
          : std::vector<int>{2, 4, 6, 8, 12, 18};
  std::vector<int> token_grid =
      bench.contains("token_grid")
          ? bench.at("token_grid").get<std::vector<int>>()
          : std::vector<int>{pol.n_vis_tokens};
  int n_steps = bench.value("n_diffusion_steps", 10);
  int trials = bench.value("trials", 30);
  int warmup = bench.value("warmup", 5);
  std::uint64_t seed = bench.value("seed", std::uint64_t{0});
  if (!a.depths.empty()) depth_grid = parse_int_list(a.depths, "--depths");
  if (!a.tokens.empty()) token_grid = parse_int_list(a.tokens, "--tokens");
  if (a.steps >= 0) n_steps = a.steps;
  if (a.trials >= 0) trials = a.trials;
  if (a.warmup >= 0) warmup = a.warmup;
  if (a.seed >= 0) seed = static_cast<std::uint64_t>(a.seed);
  const std::string out = a.out.empty() ? in_dir(a.run_dir, "bench.csv") : a.out;

  json resolved{{"policy", pol},
                {"bench",
                 {{"depth_grid", depth_grid},
                  {"token_grid", token_grid},
                  {"n_diffusion_steps", n_steps},
                  {"trials", trials},
                  {"warmup", warmup},
                  {"seed", seed}}},
                {"out", out}};
  write_resolved_config(a.run_dir, "bench-latency", resolved);

  LatencyReport report = bench_sweep<Scalar>(pol, depth_grid, token_grid,
                                             n_steps, trials, warmup, seed);
  write_bench_csv(out, report);
  SpeedupSummary summary = speedup_summary(report, pol);
  if (a.json_out) {
    std::ofstream os(in_dir(a.run_dir, "bench.json"));
    os << bench_json(report, summary).dump(2) << '\n';
  }
  std::cout << "depth " << summary.depth_hi << " vs " << summary.depth_lo
            << ": latency ratio " << summary.depth_latency_ratio << " (R^2 "
            << summary.depth_r2 << ")\n";
  return 0;
}

// --------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"flow-matching policy compression workbench"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a demonstration dataset");
  gen_cmd->add_option("--config", gen.config, "JSON config file");
  gen_cmd->add_option("--run-dir", gen.run_dir, "output directory");
  gen_cmd->add_option("--out", gen.out, "dataset path");
  gen_cmd->add_option("--episodes", gen.episodes, "number of episodes");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->add_option("--variant", gen.variant, "static|dynamic");

  TrainTeacherArgs tt;
  auto* tt_cmd = app.add_subcommand("train-teacher", "train a policy from scratch");
  tt_cmd->add_option("--config", tt.config, "JSON config file");
  tt_cmd->add_option("--run-dir", tt.run_dir, "output directory");
  tt_cmd->add_option("--out", tt.out, "checkpoint path");
  tt_cmd->add_option("--data", tt.data, "dataset path");
  tt_cmd->add_option("--steps", tt.steps, "training steps");
  tt_cmd->add_option("--seed", tt.seed, "training seed");

  DistillArgs di;
  auto* di_cmd = app.add_subcommand("distill", "distill a shallow student");
  di_cmd->add_option("--config", di.config, "JSON config file");
  di_cmd->add_option("--run-dir", di.run_dir, "output directory");
  di_cmd->add_option("--out", di.out, "student checkpoint path");
  di_cmd->add_option("--teacher", di.teacher, "teacher checkpoint");
  di_cmd->add_option("--data", di.data, "dataset path");
  di_cmd->add_option("--steps", di.steps, "training steps");
  di_cmd->add_option("--layers", di.layers, "student depth");
  di_cmd->add_option("--lambda-task", di.lambda_task, "task loss weight");
  di_cmd->add_option("--lambda-kd", di.lambda_kd, "velocity matching weight");
  di_cmd->add_option("--lambda-attn", di.lambda_attn, "attention matching weight");
  di_cmd->add_option("--placement", di.placement, "initial|middle|later");
  di_cmd->add_option("--scope", di.scope, "action_only|all_tokens");
  di_cmd->add_option("--seed", di.seed, "training seed");

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "evaluate a checkpoint in the simulator");
  ev_cmd->add_option("--config", ev.config, "JSON config file");
  ev_cmd->add_option("--run-dir", ev.run_dir, "output directory");
  ev_cmd->add_option("--out", ev.out, "episode CSV path");
  ev_cmd->add_option("--ckpt", ev.ckpt, "policy checkpoint");
  ev_cmd->add_option("--suite", ev.suite, "static|dynamic");
  ev_cmd->add_option("--staleness", ev.staleness, "auto|synth|<frames>");
  ev_cmd->add_option("--episodes", ev.episodes, "episode count");
  ev_cmd->add_option("--seed", ev.seed, "base world seed");

  SimilarityArgs sa;
  auto* sa_cmd = app.add_subcommand("analyze-similarity",
                                    "adjacent-layer cosine similarity profile");
  sa_cmd->add_option("--config", sa.config, "JSON config file");
  sa_cmd->add_option("--run-dir", sa.run_dir, "output directory");
  sa_cmd->add_option("--out", sa.out, "CSV path");
  sa_cmd->add_option("--ckpt", sa.ckpt, "policy checkpoint");
  sa_cmd->add_option("--data", sa.data, "dataset with eval records");
  sa_cmd->add_option("--taus", sa.taus, "comma list of noise levels");
  sa_cmd->add_option("--max-records", sa.max_records, "eval records to use");
  sa_cmd->add_option("--seed", sa.seed, "noise seed");

  SensitivityArgs se;
  auto* se_cmd = app.add_subcommand("analyze-sensitivity",
                                    "success-rate drop per skipped layer");
  se_cmd->add_option("--config", se.config, "JSON config file");
  se_cmd->add_option("--run-dir", se.run_dir, "output directory");
  se_cmd->add_option("--out", se.out, "CSV path");
  se_cmd->add_option("--ckpt", se.ckpt, "policy checkpoint");
  se_cmd->add_option("--suite", se.suite, "static|dynamic");
  se_cmd->add_option("--episodes", se.episodes, "episodes per sweep");
  se_cmd->add_option("--seed", se.seed, "base world seed");

  SensitivityArgs pr;
  pr.progressive = true;
  auto* pr_cmd = app.add_subcommand(
      "analyze-progressive", "success rate vs number of skipped layers");
  pr_cmd->add_option("--config", pr.config, "JSON config file");
  pr_cmd->add_option("--run-dir", pr.run_dir, "output directory");
  pr_cmd->add_option("--out", pr.out, "CSV path");
  pr_cmd->add_option("--ckpt", pr.ckpt, "policy checkpoint");
  pr_cmd->add_option("--suite", pr.suite, "static|dynamic");
  pr_cmd->add_option("--episodes", pr.episodes, "episodes per sweep");
  pr_cmd->add_option("--max-removed", pr.max_removed, "largest skip-set size");
  pr_cmd->add_option("--seed", pr.seed, "base world seed");

  BenchArgs be;
  auto* be_cmd = app.add_subcommand("bench-latency",
                                    "inference latency across depth/token grids");
  be_cmd->add_option("--config", be.config, "JSON config file");
  be_cmd->add_option("--run-dir", be.run_dir, "output directory");
  be_cmd->add_option("--out", be.out, "CSV path");
  be_cmd->add_option("--depths", be.depths, "comma list of layer counts");
  be_cmd->add_option("--tokens", be.tokens, "comma list of vision token counts");
  be_cmd->add_option("--steps", be.steps, "diffusion steps per inference");
  be_cmd->add_option("--trials", be.trials, "timed trials per grid point");
  be_cmd->add_option("--warmup", be.warmup, "warmup runs per grid point");
  be_cmd->add_option("--seed", be.seed, "weight seed");
  be_cmd->add_flag("--json", be.json_out, "also write bench.json");

  std::vector<const char*> argv;
  argv.push_back("sflow");
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(gen_cmd)) return cmd_gen_data(gen);
    if (app.got_subcommand(tt_cmd)) return cmd_train_teacher(tt);
    if (app.got_subcommand(di_cmd)) return cmd_distill(di);
    if (app.got_subcommand(ev_cmd)) return cmd_eval(ev);
    if (app.got_subcommand(sa_cmd)) return cmd_analyze_similarity(sa);
    if (app.got_subcommand(se_cmd)) return cmd_analyze_sensitivity(se);
    if (app.got_subcommand(pr_cmd)) return cmd_analyze_sensitivity(pr);
    if (app.got_subcommand(be_cmd)) return cmd_bench(be);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace sflow::cli
