#pragma once

// Monte Carlo evaluation: per-mode episode rollouts, safety/performance
// metrics, and the density/delay sweep driver with per-episode RNG streams.

#include <future>
#include <thread>

#include <json.hpp>

#include "training.hpp"

namespace swarmcbf {

enum class EvalMode { NominalOnly, Gnn, GnnPredictor, Heuristic, AnalyticBaseline };

inline std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::NominalOnly: return "nominal-only";
    case EvalMode::Gnn: return "gnn";
    case EvalMode::GnnPredictor: return "gnn+predictor";
    case EvalMode::Heuristic: return "heuristic";
    case EvalMode::AnalyticBaseline: return "analytic-baseline";
  }
  return "?";
}

inline EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "nominal-only") return EvalMode::NominalOnly;
  if (s == "gnn") return EvalMode::Gnn;
  if (s == "gnn+predictor") return EvalMode::GnnPredictor;
  if (s == "heuristic") return EvalMode::Heuristic;
  if (s == "analytic-baseline") return EvalMode::AnalyticBaseline;
  throw ConfigError("unknown eval mode: " + s);
}

inline bool mode_needs_checkpoint(EvalMode m) {
  return m == EvalMode::Gnn || m == EvalMode::GnnPredictor || m == EvalMode::Heuristic;
}

struct EpisodeResult {
  bool collided = false;
  bool saturation_flag = false;  // min-norm clamp broke the constraint somewhere
  std::vector<int> steps_to_goal;
  std::vector<double> final_goal_dist;
  std::vector<double> min_dist_trace;  // per-step minimum pairwise distance
};

struct TrajRecord {
  int t = 0;
  int id = 0;
  RobotState state;
  ControlInput u_ref{0, 0};
  ControlInput u_corr{0, 0};
  int aoi_max = -1;
};

inline int max_dataset_age(const GraphSnapshot& graph, int robot) {
  int worst = -1;
  for (const auto& [j, d] : graph.in_edges[robot])
    for (const auto& e : d.entries) worst = std::max(worst, e.aoi);
  return worst;
}

/// Deterministic rollout of one episode under the given controller mode.
/// `models` may be null for the nominal-only and analytic-baseline modes.
inline EpisodeResult run_episode(Models* models, const Config& cfg, EvalMode mode,
                                 std::uint64_t seed, std::uint64_t cell,
                                 std::uint64_t episode,
                                 std::vector<TrajRecord>* trajectory = nullptr) {
  const ScenarioConfig& sc = cfg.scenario;
  const HyperParams& hp = cfg.training;
  if (mode_needs_checkpoint(mode) && models == nullptr)
    throw std::invalid_argument("run_episode: mode requires a checkpoint");
  if (mode == EvalMode::AnalyticBaseline && sc.dynamics != DynamicsKind::SingleIntegrator)
    throw ConfigError("analytic-baseline supports single-integrator dynamics only");

  const std::uint64_t ep_seed = RngStream::derive(seed ^ kEvalSalt, cell, episode).next_u64();
  RngStream placement_rng = RngStream::derive(ep_seed ^ kPlacementSalt);
  Placement placement = sample_placement(sc, placement_rng);
  std::vector<RobotState> states = placement.starts;
  std::vector<ControlInput> prev(sc.robots, ControlInput{0.0, 0.0});
  CommsChannel channel(sc.robots, sc.comms(), ep_seed, 0);

  EpisodeResult result;
  result.steps_to_goal.assign(sc.robots, hp.episode_deadline);
  std::vector<bool> reached(sc.robots, false);

  const bool needs_comms = mode != EvalMode::NominalOnly && !sc.perfect_info;

  for (int t = 0; t < hp.episode_deadline; ++t) {
    GraphSnapshot graph;
    if (mode != EvalMode::NominalOnly) {
      if (sc.perfect_info) {
        graph = perfect_info_snapshot(states, prev, sc.comm_radius);
      } else {
        channel.step(t, states, prev);
        graph = channel.snapshot();
      }
    }

    std::vector<ControlInput> applied(sc.robots);
    for (int r = 0; r < sc.robots; ++r) {
      const ControlInput u_ref =
          nominal_control(states[r], placement.goals[r], sc.gains, sc.bounds);
      ControlInput corr{0.0, 0.0};
      switch (mode) {
        case EvalMode::NominalOnly:
          break;
        case EvalMode::Gnn:
          corr = corrective_control(models->ctrl, model_input_diffs(graph, r, false, nullptr),
                                    u_ref);
          break;
        case EvalMode::GnnPredictor:
          corr = corrective_control(models->ctrl,
                                    model_input_diffs(graph, r, true, &models->pred), u_ref);
          break;
        case EvalMode::Heuristic:
          corr = heuristic_control(models->cbf, models->ctrl, models->pred,
                                   graph.in_edges[r], u_ref, hp.phi, hp.eps_margin, hp.alpha,
                                   sc.ts);
          break;
        case EvalMode::AnalyticBaseline: {
          KeyedDiffs w = model_input_diffs(graph, r, false, nullptr);
          if (w.empty()) {
            applied[r] = saturate(u_ref, sc.dynamics, sc.bounds);
            if (trajectory != nullptr)
              trajectory->push_back({t, r, states[r], u_ref, {0, 0}, max_dataset_age(graph, r)});
            continue;
          }
          auto c = analytic_cbf(w, sc.d_coll);
          auto filtered =
              min_norm_filter(u_ref, c.h, c.grad, hp.alpha, sc.dynamics, sc.bounds);
          result.saturation_flag = result.saturation_flag || filtered.saturation_broke_constraint;
          applied[r] = filtered.u;
          if (trajectory != nullptr)
            trajectory->push_back(
                {t, r, states[r], u_ref, filtered.u - u_ref, max_dataset_age(graph, r)});
          continue;
        }
      }
      applied[r] = saturate(u_ref + corr, sc.dynamics, sc.bounds);
      if (trajectory != nullptr)
        trajectory->push_back({t, r, states[r], u_ref, corr,
                               mode == EvalMode::NominalOnly ? -1 : max_dataset_age(graph, r)});
    }

    for (int r = 0; r < sc.robots; ++r) states[r] = step(states[r], applied[r], sc.ts);
    prev = applied;

    const double min_dist = sc.robots > 1 ? min_pairwise_distance(states)
                                          : std::numeric_limits<double>::infinity();
    result.min_dist_trace.push_back(min_dist);
    if (min_dist < sc.d_coll) result.collided = true;

    bool all_reached = true;
    for (int r = 0; r < sc.robots; ++r) {
      if (!reached[r] && distance(states[r].p, placement.goals[r]) <= sc.gains.goal_tol) {
        reached[r] = true;
        result.steps_to_goal[r] = t + 1;
      }
      all_reached = all_reached && reached[r];
    }
    if (all_reached) break;
  }
  (void)needs_comms;

  for (int r = 0; r < sc.robots; ++r)
    result.final_goal_dist.push_back(distance(states[r].p, placement.goals[r]));
  return result;
}

inline double safety_rate(std::span<const EpisodeResult> results) {
  if (results.empty()) throw std::invalid_argument("safety_rate: no episodes");
  long safe = 0;
  for (const auto& r : results) safe += r.collided ? 0 : 1;
  return static_cast<double>(safe) / static_cast<double>(results.size());
}

struct Metrics {
  int episodes = 0;
  double safety_rate = 0.0;
  double mean_traj_len = 0.0;
  double mean_goal_dist = 0.0;
  double mean_min_dist = 0.0;  // episode-minimum pairwise distance, averaged
};

inline Metrics aggregate_metrics(std::span<const EpisodeResult> results) {
  if (results.empty()) throw std::invalid_argument("aggregate_metrics: no episodes");
  Metrics m;
  m.episodes = static_cast<int>(results.size());
  m.safety_rate = safety_rate(results);
  double len = 0.0, dist = 0.0, mind = 0.0;
  for (const auto& r : results) {
    double ep_len = 0.0, ep_dist = 0.0;
    for (int s : r.steps_to_goal) ep_len += s;
    for (double d : r.final_goal_dist) ep_dist += d;
    len += ep_len / static_cast<double>(r.steps_to_goal.size());
    dist += ep_dist / static_cast<double>(r.final_goal_dist.size());
    double ep_min = std::numeric_limits<double>::infinity();
    for (double d : r.min_dist_trace) ep_min = std::min(ep_min, d);
    mind += ep_min;
  }
  m.mean_traj_len = len / m.episodes;
  m.mean_goal_dist = dist / m.episodes;
  m.mean_min_dist = mind / m.episodes;
  return m;
}

/// Run `episodes` rollouts of one sweep cell, optionally across worker
/// threads. Each worker clones the models, every episode draws from its own
/// (seed, cell, episode) stream, and results are indexed by episode, so the
/// outcome does not depend on the worker count.
inline std::vector<EpisodeResult> run_cell(Models* models, const Config& cfg, EvalMode mode,
                                           std::uint64_t seed, std::uint64_t cell,
                                           int episodes, int workers) {
  std::vector<EpisodeResult> results(episodes);
  workers = std::max(1, std::min(workers, episodes));
  if (workers == 1) {
    for (int e = 0; e < episodes; ++e)
      results[e] = run_episode(models, cfg, mode, seed, cell, e);
    return results;
  }
  std::vector<std::future<void>> futures;
  for (int w = 0; w < workers; ++w) {
    futures.push_back(std::async(std::launch::async, [&, w]() {
      std::optional<Models> local;
      Models* local_ptr = nullptr;
      if (models != nullptr) {
        local = *models;  // private copy per worker
        local_ptr = &*local;
      }
      for (int e = w; e < episodes; e += workers)
        results[e] = run_episode(local_ptr, cfg, mode, seed, cell, e);
    }));
  }
  for (auto& f : futures) f.get();
  return results;
}

// ---------------------------------------------------------------------------
// Sweeps.

struct SweepSpec {
  std::vector<int> robots;
  std::vector<double> c_del;
  std::vector<EvalMode> modes;
  int episodes = 100;
  std::uint64_t seed = 0;
  // (mode, c_del) -> checkpoint path, for the modes that need one.
  std::vector<std::tuple<EvalMode, double, std::string>> checkpoints;

  const std::string* find_checkpoint(EvalMode mode, double c) const {
    for (const auto& [m, cd, path] : checkpoints)
      if (m == mode && cd == c) return &path;
    return nullptr;
  }
};

inline SweepSpec parse_sweep_spec(std::istream& is) {
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sweep spec is not valid JSON: ") + e.what());
  }
  SweepSpec spec;
  try {
    for (const auto& r : j.at("robots")) spec.robots.push_back(r.get<int>());
    for (const auto& c : j.at("c_del")) spec.c_del.push_back(c.get<double>());
    for (const auto& m : j.at("modes"))
      spec.modes.push_back(eval_mode_from_string(m.get<std::string>()));
    spec.episodes = j.at("episodes").get<int>();
    spec.seed = j.value("seed", 0ull);
    if (j.contains("checkpoints")) {
      for (const auto& c : j.at("checkpoints"))
        spec.checkpoints.push_back({eval_mode_from_string(c.at("mode").get<std::string>()),
                                    c.at("c_del").get<double>(),
                                    c.at("path").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed sweep spec: ") + e.what());
  }
  if (spec.robots.empty() || spec.c_del.empty() || spec.modes.empty())
    throw ConfigError("sweep spec: robots, c_del and modes must be nonempty");
  if (spec.episodes < 1) throw ConfigError("sweep spec: episodes must be >= 1");
  return spec;
}

inline std::string metrics_csv_header() {
  return "mode,R,c_del,episodes,safety_rate,mean_traj_len,mean_goal_dist,mean_min_dist,seed";
}

inline std::string metrics_csv_row(EvalMode mode, int robots, double c_del,
                                   const Metrics& m, std::uint64_t seed) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%d,%s,%d,%s,%s,%s,%s,%llu", to_string(mode).c_str(),
                robots, format_double(c_del).c_str(), m.episodes,
                format_double(m.safety_rate).c_str(), format_double(m.mean_traj_len).c_str(),
                format_double(m.mean_goal_dist).c_str(), format_double(m.mean_min_dist).c_str(),
                static_cast<unsigned long long>(seed));
  return buf;
}

/// Cross product of (mode, R, c_del) cells, one CSV row each.
inline void run_sweep(const SweepSpec& spec, const Config& base_cfg, int workers,
                      std::ostream& csv) {
  // Validate all checkpoint mappings before running anything.
  for (EvalMode mode : spec.modes) {
    if (!mode_needs_checkpoint(mode)) continue;
    for (double c : spec.c_del)
      if (spec.find_checkpoint(mode, c) == nullptr)
        throw ConfigError("sweep spec: missing checkpoint for mode " + to_string(mode) +
                          " at c_del " + format_double(c));
  }
  if (base_cfg.scenario.dynamics != DynamicsKind::SingleIntegrator)
    for (EvalMode mode : spec.modes)
      if (mode == EvalMode::AnalyticBaseline)
        throw ConfigError("analytic-baseline supports single-integrator dynamics only");

  csv << metrics_csv_header() << "\n";
  std::uint64_t cell = 0;
  for (EvalMode mode : spec.modes) {
    for (int robots : spec.robots) {
      for (double c : spec.c_del) {
        Config cfg = base_cfg;
        cfg.scenario.robots = robots;
        cfg.scenario.c_del = c;
        std::optional<Models> models;
        if (mode_needs_checkpoint(mode)) {
          models = load_models(*spec.find_checkpoint(mode, c), cfg.model,
                               cfg.scenario.dynamics, cfg.scenario.delta_max);
        }
        auto results = run_cell(models ? &*models : nullptr, cfg, mode, spec.seed, cell,
                                spec.episodes, workers);
        csv << metrics_csv_row(mode, robots, c, aggregate_metrics(results), spec.seed) << "\n";
        ++cell;
      }
    }
  }
}

/// JSON-lines trajectory dump, one record per robot per step.
inline void write_trajectory_jsonl(std::ostream& os, std::span<const TrajRecord> records,
                                   DynamicsKind kind) {
  for (const auto& r : records) {
    nlohmann::json j;
    j["t"] = r.t;
    j["id"] = r.id;
    j["p"] = {r.state.p[0], r.state.p[1]};
    if (kind == DynamicsKind::DubinsCar) {
      j["v"] = r.state.v;
      j["theta"] = r.state.theta;
    }
    j["u_ref"] = {r.u_ref[0], r.u_ref[1]};
    j["u_corr"] = {r.u_corr[0], r.u_corr[1]};
    j["aoi_max"] = r.aoi_max;
    os << j.dump() << "\n";
  }
}

}  // namespace swarmcbf
