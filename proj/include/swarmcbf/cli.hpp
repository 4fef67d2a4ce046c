#pragma once

// Command-line wiring: train / eval / sweep subcommands, reproducible run
// directories with manifests, and the exit-code contract (0 success,
// 2 config or usage error, 3 numeric failure).

#include <chrono>
#include <cstdlib>
#include <ctime>

#include <CLI11.hpp>

#include "eval.hpp"

namespace swarmcbf {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

namespace detail_cli {

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// The manifest plus a verbatim copy of the config land in the run directory
/// before any other output, so a run can always be reproduced from it.
inline void write_manifest(const std::string& out_dir, const std::string& command,
                           const std::string& config_bytes, std::uint64_t seed,
                           const std::vector<std::string>& outputs) {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream copy(out_dir + "/config.toml", std::ios::binary);
    copy << config_bytes;
  }
  nlohmann::json j;
  j["command"] = command;
  j["code_version"] = kVersion;
  j["seed"] = seed;
  j["config_hash"] = fnv1a_hex(config_bytes);
  j["start_time"] = utc_now();
  j["outputs"] = outputs;
  std::ofstream os(out_dir + "/manifest.json", std::ios::binary);
  os << j.dump(2) << "\n";
}

inline std::uint64_t resolve_seed(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("SWARMCBF_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw ConfigError("SWARMCBF_SEED is not an integer");
    }
  }
  return flag_seed;
}

}  // namespace detail_cli

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Safe distributed multi-robot control under communication delays"};
  app.require_subcommand(1);

  // train
  std::string train_config, train_out, train_init, train_schedule;
  std::uint64_t train_seed = 0;
  long train_steps = -1;
  auto* train = app.add_subcommand("train", "Train models on simulated episodes");
  train->add_option("--config", train_config, "Scenario config file")->required();
  train->add_option("--seed", train_seed, "Run seed (SWARMCBF_SEED overrides)");
  train->add_option("--steps", train_steps, "Total simulation steps (overrides config)");
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--init-checkpoint", train_init, "Warm-start checkpoint");
  train->add_option("--schedule", train_schedule,
                    "auto | cbf_controller_only | predictor_only | alternating");

  // eval
  std::string eval_config, eval_checkpoint, eval_mode_str = "nominal-only", eval_out;
  std::uint64_t eval_seed = 0;
  int eval_episodes = 100, eval_robots = -1, eval_workers = 0;
  double eval_cdel = -1.0, eval_phi = -1.0;
  bool eval_dump = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a controller over Monte Carlo episodes");
  eval->add_option("--config", eval_config, "Scenario config file")->required();
  eval->add_option("--checkpoint", eval_checkpoint, "Model checkpoint");
  eval->add_option("--mode", eval_mode_str,
                   "nominal-only | gnn | gnn+predictor | heuristic | analytic-baseline");
  eval->add_option("--episodes", eval_episodes, "Episodes to run");
  eval->add_option("--robots", eval_robots, "Override robot count");
  eval->add_option("--c-del", eval_cdel, "Override delay coefficient");
  eval->add_option("--phi", eval_phi, "Override heuristic switching coefficient");
  eval->add_option("--seed", eval_seed, "Run seed (SWARMCBF_SEED overrides)");
  eval->add_option("--out", eval_out, "Output directory (default: stdout CSV)");
  eval->add_option("--workers", eval_workers, "Worker threads (default: hardware)");
  eval->add_flag("--dump-trajectories", eval_dump, "Write per-step JSONL trajectories");

  // sweep
  std::string sweep_spec_path, sweep_config, sweep_out;
  int sweep_workers = 0;
  auto* sweep = app.add_subcommand("sweep", "Run a (mode, robots, c_del) metrics sweep");
  sweep->add_option("--spec", sweep_spec_path, "Sweep spec JSON")->required();
  sweep->add_option("--config", sweep_config, "Base scenario config (overrides spec's)");
  sweep->add_option("--out", sweep_out, "Output directory")->required();
  sweep->add_option("--workers", sweep_workers, "Worker threads (default: hardware)");

  std::vector<const char*> argv;
  argv.push_back("swarmcbf");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "usage error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (train->parsed()) {
      const std::string config_bytes = detail_cli::read_file(train_config);
      std::istringstream cs(config_bytes);
      Config cfg = parse_config(cs);
      if (train_steps >= 0) cfg.training.total_steps = train_steps;
      if (!train_schedule.empty()) cfg.training.schedule = schedule_from_string(train_schedule);
      const std::uint64_t seed = detail_cli::resolve_seed(train_seed);

      TrainOptions opts;
      opts.out_dir = train_out;
      if (!train_init.empty())
        opts.init = load_models(train_init, cfg.model, cfg.scenario.dynamics,
                                cfg.scenario.delta_max);
      detail_cli::write_manifest(train_out, "train", config_bytes, seed,
                                 {"training_log.csv", "ckpt_final.txt"});
      TrainResult r = run_training(cfg, seed, opts);
      out << "trained " << r.steps << " steps, " << r.update_events << " update events, "
          << r.episodes << " episodes\n";
      return kExitOk;
    }

    if (eval->parsed()) {
      const std::string config_bytes = detail_cli::read_file(eval_config);
      std::istringstream cs(config_bytes);
      Config cfg = parse_config(cs);
      if (eval_robots > 0) cfg.scenario.robots = eval_robots;
      if (eval_cdel >= 0.0) cfg.scenario.c_del = eval_cdel;
      if (eval_phi >= 0.0) cfg.training.phi = eval_phi;
      validate(cfg);
      const EvalMode mode = eval_mode_from_string(eval_mode_str);
      if (mode == EvalMode::AnalyticBaseline &&
          cfg.scenario.dynamics != DynamicsKind::SingleIntegrator)
        throw ConfigError("analytic-baseline supports single-integrator dynamics only");
      if (mode_needs_checkpoint(mode) && eval_checkpoint.empty())
        throw ConfigError("mode " + eval_mode_str + " requires --checkpoint");
      if (eval_episodes < 1) throw ConfigError("--episodes must be >= 1");
      const std::uint64_t seed = detail_cli::resolve_seed(eval_seed);

      std::optional<Models> models;
      if (mode_needs_checkpoint(mode))
        models = load_models(eval_checkpoint, cfg.model, cfg.scenario.dynamics,
                             cfg.scenario.delta_max);

      if (!eval_out.empty())
        detail_cli::write_manifest(eval_out, "eval", config_bytes, seed, {"metrics.csv"});

      const int workers = eval_workers > 0
                              ? eval_workers
                              : std::max(1u, std::thread::hardware_concurrency());
      auto results = run_cell(models ? &*models : nullptr, cfg, mode, seed, 0, eval_episodes,
                              workers);
      const std::string row =
          metrics_csv_row(mode, cfg.scenario.robots, cfg.scenario.c_del,
                          aggregate_metrics(results), seed);
      if (eval_out.empty()) {
        out << metrics_csv_header() << "\n" << row << "\n";
      } else {
        std::ofstream csv(eval_out + "/metrics.csv", std::ios::binary);
        csv << metrics_csv_header() << "\n" << row << "\n";
      }

      if (eval_dump) {
        const std::string dir = eval_out.empty() ? "." : eval_out;
        for (int e = 0; e < eval_episodes; ++e) {
          std::vector<TrajRecord> traj;
          run_episode(models ? &*models : nullptr, cfg, mode, seed, 0, e, &traj);
          char name[64];
          std::snprintf(name, sizeof(name), "%s/traj_ep%03d.jsonl", dir.c_str(), e);
          std::ofstream jf(name, std::ios::binary);
          write_trajectory_jsonl(jf, traj, cfg.scenario.dynamics);
        }
      }
      return kExitOk;
    }

    if (sweep->parsed()) {
      const std::string spec_bytes = detail_cli::read_file(sweep_spec_path);
      std::istringstream ss(spec_bytes);
      nlohmann::json spec_json;
      try {
        ss >> spec_json;
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("sweep spec is not valid JSON: ") + e.what());
      }
      std::string config_path = sweep_config;
      if (config_path.empty() && spec_json.contains("config"))
        config_path = spec_json.at("config").get<std::string>();
      if (config_path.empty())
        throw ConfigError("sweep needs a base config (spec \"config\" field or --config)");
      const std::string config_bytes = detail_cli::read_file(config_path);
      std::istringstream cs(config_bytes);
      Config cfg = parse_config(cs);

      std::istringstream ss2(spec_bytes);
      SweepSpec spec = parse_sweep_spec(ss2);
      detail_cli::write_manifest(sweep_out, "sweep", config_bytes, spec.seed, {"metrics.csv"});

      const int workers = sweep_workers > 0
                              ? sweep_workers
                              : std::max(1u, std::thread::hardware_concurrency());
      std::ostringstream csv;
      run_sweep(spec, cfg, workers, csv);
      std::ofstream f(sweep_out + "/metrics.csv", std::ios::binary);
      f << csv.str();
      return kExitOk;
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace swarmcbf
