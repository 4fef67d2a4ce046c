#pragma once

// Shared episode machinery: start/goal placement and assembly of the
// relative-state inputs the learned models consume.

#include <vector>

#include "comms.hpp"
#include "config.hpp"
#include "models.hpp"

namespace swarmcbf {

// Salts keep derived stream families disjoint from the per-robot channel
// streams, which use the raw (seed, episode, robot) tuple.
inline constexpr std::uint64_t kPlacementSalt = 0x706c6163656d656eull;
inline constexpr std::uint64_t kEpsilonSalt = 0x657073696c6f6e00ull;
inline constexpr std::uint64_t kSamplingSalt = 0x73616d706c696e67ull;
inline constexpr std::uint64_t kEvalSalt = 0x6576616c00000000ull;

struct Placement {
  std::vector<RobotState> starts;
  std::vector<Vec2> goals;
};

/// Uniform rejection sampling inside the margin-shrunk workspace until all
/// pairwise start distances and all pairwise goal distances reach d_safe.
inline Placement sample_placement(const ScenarioConfig& scenario, RngStream& rng) {
  const double lo = scenario.workspace_min + scenario.placement_margin;
  const double hi = scenario.workspace_max - scenario.placement_margin;
  auto draw_points = [&](int n) {
    std::vector<Vec2> pts;
    while (static_cast<int>(pts.size()) < n) {
      Vec2 cand{rng.uniform(lo, hi), rng.uniform(lo, hi)};
      bool ok = true;
      for (const auto& p : pts) ok = ok && distance(p, cand) >= scenario.d_safe;
      if (ok) pts.push_back(cand);
    }
    return pts;
  };
  Placement out;
  auto starts = draw_points(scenario.robots);
  out.goals = draw_points(scenario.robots);
  for (int r = 0; r < scenario.robots; ++r) {
    if (scenario.dynamics == DynamicsKind::SingleIntegrator) {
      out.starts.push_back(RobotState::single_integrator(starts[r]));
    } else {
      const double heading = rng.uniform(-kPi, kPi);
      out.starts.push_back(RobotState::dubins(starts[r], 0.0, heading));
    }
  }
  return out;
}

/// Relative-state inputs for robot i, one entry per nonempty dataset edge.
/// With `use_predictor` the predictor projects each dataset to the current
/// step; otherwise the freshest stored difference is used as-is.
inline KeyedDiffs model_input_diffs(const GraphSnapshot& graph, int i, bool use_predictor,
                                    PredictorModel* pred) {
  KeyedDiffs out;
  for (const auto& [j, dataset] : graph.in_edges[i]) {
    if (dataset.empty()) continue;
    if (use_predictor) {
      out.push_back({j, predict(*pred, dataset)});
    } else {
      out.push_back({j, dataset.latest().dx});
    }
  }
  return out;
}

/// True current relative states for robot i over its graph neighbors.
inline KeyedDiffs true_diffs(const GraphSnapshot& graph, std::span<const RobotState> states,
                             int i) {
  KeyedDiffs out;
  for (const auto& [j, dataset] : graph.in_edges[i]) {
    if (dataset.empty()) continue;
    out.push_back({j, state_diff(states[i], states[j])});
  }
  return out;
}

/// True relative states of robot i with respect to every other robot,
/// regardless of communication; used for safety labeling and collisions.
inline std::vector<StateDiff> all_true_diffs(std::span<const RobotState> states, int i) {
  std::vector<StateDiff> out;
  for (size_t j = 0; j < states.size(); ++j) {
    if (static_cast<int>(j) == i) continue;
    out.push_back(state_diff(states[i], states[static_cast<int>(j)]));
  }
  return out;
}

inline double min_pairwise_distance(std::span<const RobotState> states) {
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < states.size(); ++i)
    for (size_t j = i + 1; j < states.size(); ++j)
      best = std::min(best, distance(states[i].p, states[j].p));
  return best;
}

}  // namespace swarmcbf
