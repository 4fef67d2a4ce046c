#pragma once

// Replay buffer, the CBF / control / predictor losses, batched loss assembly,
// the alternating update schedule and the episode-driven training loop.

#include <deque>
#include <filesystem>
#include <iostream>
#include <optional>

#include "sim.hpp"

namespace swarmcbf {

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One per-step snapshot: true states, nominal inputs, the message-passing
/// graph with its datasets, applied inputs, the rollout successor, and the
/// safety labels computed once at insertion.
struct Sample {
  std::vector<RobotState> states;
  std::vector<ControlInput> u_ref;
  GraphSnapshot graph;
  std::vector<ControlInput> applied;
  std::vector<RobotState> next_states;
  std::vector<SafetyLabel> labels;  // per robot, from true distances
  SafetyLabel cls = SafetyLabel::Safe;  // sample class for balanced draws
};

inline void label_sample(Sample& s, const SafetyLabeler& labeler) {
  s.labels.clear();
  bool any_unsafe = false, all_safe = true;
  for (int i = 0; i < static_cast<int>(s.states.size()); ++i) {
    auto diffs = all_true_diffs(s.states, i);
    const SafetyLabel l = labeler.label(diffs);
    s.labels.push_back(l);
    any_unsafe = any_unsafe || l == SafetyLabel::Unsafe;
    all_safe = all_safe && l == SafetyLabel::Safe;
  }
  s.cls = any_unsafe ? SafetyLabel::Unsafe
                     : (all_safe ? SafetyLabel::Safe : SafetyLabel::Boundary);
}

/// FIFO buffer with a hard capacity.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw std::invalid_argument("ReplayBuffer: capacity must be >= 1");
  }

  void push(Sample s, const SafetyLabeler& labeler) {
    label_sample(s, labeler);
    if (s.cls == SafetyLabel::Unsafe) ++unsafe_;
    data_.push_back(std::move(s));
    if (static_cast<int>(data_.size()) > capacity_) {
      if (data_.front().cls == SafetyLabel::Unsafe) --unsafe_;
      data_.pop_front();
    }
  }

  size_t size() const { return data_.size(); }
  const Sample& operator[](size_t i) const { return data_[i]; }
  double unsafe_fraction() const {
    return data_.empty() ? 0.0 : static_cast<double>(unsafe_) / data_.size();
  }

 private:
  int capacity_;
  long unsafe_ = 0;
  std::deque<Sample> data_;
};

/// Draw up to S samples, targeting an even safe/unsafe split. A shortfall of
/// unsafe samples is covered by safe ones and any remainder by boundary
/// samples. Draws are without replacement within each class.
inline std::vector<const Sample*> balanced_sample(const ReplayBuffer& buffer, int batch_size,
                                                  RngStream& rng,
                                                  std::ostream* warnings = nullptr) {
  if (buffer.size() == 0) throw std::invalid_argument("balanced_sample: empty buffer");
  std::vector<size_t> safe, unsafe, boundary;
  for (size_t i = 0; i < buffer.size(); ++i) {
    switch (buffer[i].cls) {
      case SafetyLabel::Safe: safe.push_back(i); break;
      case SafetyLabel::Unsafe: unsafe.push_back(i); break;
      case SafetyLabel::Boundary: boundary.push_back(i); break;
    }
  }
  auto take = [&rng](std::vector<size_t>& pool, int want, std::vector<size_t>& out) {
    const int n = std::min<int>(want, static_cast<int>(pool.size()));
    for (int k = 0; k < n; ++k) {  // partial Fisher-Yates
      const size_t pick = k + rng.uniform_index(pool.size() - k);
      std::swap(pool[k], pool[pick]);
      out.push_back(pool[k]);
    }
    pool.erase(pool.begin(), pool.begin() + n);
  };

  std::vector<size_t> chosen;
  const int half = batch_size / 2;
  take(unsafe, half, chosen);
  if (chosen.empty() && warnings != nullptr)
    *warnings << "warning: no unsafe samples in buffer, batch is safe-only\n";
  take(safe, batch_size - static_cast<int>(chosen.size()), chosen);
  take(boundary, batch_size - static_cast<int>(chosen.size()), chosen);
  take(unsafe, batch_size - static_cast<int>(chosen.size()), chosen);  // leftovers

  std::vector<const Sample*> batch;
  batch.reserve(chosen.size());
  for (size_t i : chosen) batch.push_back(&buffer[i]);
  return batch;
}

// ---------------------------------------------------------------------------
// Loss assembly.

struct LossContext {
  const ScenarioConfig& scenario;
  const HyperParams& hp;
  bool realistic = false;  // models consume predictor outputs instead of true w
};

/// One Euler step on the tape; only the control input carries gradients.
/// Returns the state as a flat tensor matching RobotState layout.
inline Tensor euler_step_t(Tape& tape, const RobotState& x, Tensor u, double ts) {
  if (x.kind == DynamicsKind::SingleIntegrator) {
    return tape.add_const(tape.scale(u, ts), {x.p[0], x.p[1]});
  }
  const Vec2 p_next = x.p + ts * Vec2{x.v * std::cos(x.theta), x.v * std::sin(x.theta)};
  Tensor p = tape.input({p_next[0], p_next[1]}, "dubins_p_next");
  Tensor v = tape.add_const(tape.scale(tape.slice(u, 0, 1), ts), {x.v});
  Tensor th = tape.add_const(tape.scale(tape.slice(u, 1, 1), ts), {x.theta});
  return tape.concat({p, v, th});
}

/// Relative state between two on-tape successor states; Dubins heading
/// difference wrapped back to the principal interval.
inline Tensor state_diff_t(Tape& tape, Tensor xi, Tensor xj, DynamicsKind kind) {
  Tensor d = tape.sub(xi, xj);
  if (kind == DynamicsKind::SingleIntegrator) return d;
  return tape.concat({tape.slice(d, 0, 3), tape.wrap(tape.slice(d, 3, 1))});
}

namespace detail_loss {

inline Tensor hinge(Tape& tape, Tensor x) { return tape.relu(x); }

inline Tensor stage_diff_values(Tape& tape, const StateDiff& d) {
  auto flat = d.flat();
  return tape.input(Vec(flat.begin(), flat.begin() + d.dim()), "w_val");
}

}  // namespace detail_loss

/// Per-sample loss terms, one slot per robot (invalid tensors mean the robot
/// contributed nothing).
struct SampleLosses {
  std::vector<Tensor> cbf;
  std::vector<Tensor> contr;
  Tensor total;  // (1/R) * sum_i (cbf_i + contr_i)
};

/// Assemble the distributed-CBF and control losses for every robot of one
/// sample on the tape.
///
/// Classification hinges and the class-K term consume the model inputs (the
/// predictor outputs under realistic information, the true relative states
/// under perfect information). The finite-difference quotient always uses
/// true relative states: the successor is regenerated on the tape by applying
/// u_j = u_ref_j + pi_xi(inputs_j) for the whole neighborhood, so gradients
/// flow through the current controller.
inline SampleLosses sample_cbf_ctrl_losses(Tape& tape, Models& models, const Sample& sample,
                                           const LossContext& ctx) {
  const int robots = static_cast<int>(sample.states.size());
  const double ts = ctx.scenario.ts;
  const double eps = ctx.hp.eps_margin;

  SampleLosses out;
  out.cbf.assign(robots, Tensor{});
  out.contr.assign(robots, Tensor{});

  // Model inputs and corrective actions per robot (empty neighborhoods yield
  // zero corrective action and are skipped in the loss).
  std::vector<KeyedTensors> inputs(robots);
  std::vector<Tensor> u_applied(robots);
  std::vector<bool> has_neighbors(robots, false);
  for (int j = 0; j < robots; ++j) {
    KeyedDiffs w = model_input_diffs(sample.graph, j, ctx.realistic, &models.pred);
    Tensor u_ref = tape.input({sample.u_ref[j][0], sample.u_ref[j][1]}, "u_ref");
    if (w.empty()) {
      u_applied[j] = u_ref;
      continue;
    }
    has_neighbors[j] = true;
    inputs[j] = stage_diffs(tape, w);
    Tensor pi = corrective_control_t(tape, models.ctrl, inputs[j], u_ref);
    out.contr[j] = tape.scale(tape.norm2(pi), ctx.hp.w_contr);
    u_applied[j] = tape.add(u_ref, pi);
  }

  // Successor states under the current controller.
  std::vector<Tensor> next(robots);
  for (int j = 0; j < robots; ++j)
    next[j] = euler_step_t(tape, sample.states[j], u_applied[j], ts);

  for (int i = 0; i < robots; ++i) {
    if (!has_neighbors[i]) continue;

    Tensor h_model = cbf_value_t(tape, models.cbf, inputs[i]);

    // True relative states now and after one step, same neighborhood.
    KeyedTensors w_true_now, w_true_next;
    for (const auto& [j, dataset] : sample.graph.in_edges[i]) {
      if (dataset.empty()) continue;
      w_true_now.push_back(
          {j, detail_loss::stage_diff_values(tape, state_diff(sample.states[i], sample.states[j]))});
      w_true_next.push_back(
          {j, state_diff_t(tape, next[i], next[j], ctx.scenario.dynamics)});
    }
    Tensor h_true_now = ctx.realistic ? cbf_value_t(tape, models.cbf, w_true_now) : h_model;
    Tensor h_true_next = cbf_value_t(tape, models.cbf, w_true_next);
    Tensor hdot = tape.scale(tape.sub(h_true_next, h_true_now), 1.0 / ts);

    // [eps - hdot - alpha*h]_+ applies to every labeled sample.
    Tensor cond = tape.add_const(
        tape.sub(tape.scale(hdot, -1.0), tape.scale(h_model, ctx.hp.alpha)), {eps});
    Tensor loss = tape.scale(detail_loss::hinge(tape, cond), ctx.hp.w_der);

    if (sample.labels[i] == SafetyLabel::Safe) {
      Tensor t1 = detail_loss::hinge(tape, tape.add_const(tape.scale(h_model, -1.0), {eps}));
      loss = tape.add(loss, tape.scale(t1, ctx.hp.w_safe));
    } else if (sample.labels[i] == SafetyLabel::Unsafe) {
      Tensor t2 = detail_loss::hinge(tape, tape.add_const(h_model, {eps}));
      loss = tape.add(loss, tape.scale(t2, ctx.hp.w_unsafe));
    }
    out.cbf[i] = loss;
  }

  Tensor acc{-1};
  for (int i = 0; i < robots; ++i) {
    for (Tensor t : {out.cbf[i], out.contr[i]}) {
      if (t.id < 0) continue;
      acc = acc.id < 0 ? t : tape.add(acc, t);
    }
  }
  out.total = acc.id < 0 ? tape.scalar(0.0, "zero_loss") : tape.scale(acc, 1.0 / robots);
  return out;
}

/// Relative prediction error summed over every nonempty dataset of a sample.
/// True relative states are training-time privileged information; pairs with
/// a vanishing true difference are skipped.
inline Tensor sample_pred_loss(Tape& tape, PredictorModel& pred, const Sample& sample) {
  const int robots = static_cast<int>(sample.states.size());
  Tensor acc{-1};
  for (int i = 0; i < robots; ++i) {
    for (const auto& [j, dataset] : sample.graph.in_edges[i]) {
      if (dataset.empty()) continue;
      const StateDiff w_true = state_diff(sample.states[i], sample.states[j]);
      const double denom = w_true.norm();
      if (denom < 1e-9) continue;
      Tensor w_hat = predict_t(tape, pred, dataset);
      Tensor diff = tape.sub(w_hat, detail_loss::stage_diff_values(tape, w_true));
      if (pred.kind == DynamicsKind::DubinsCar)
        diff = tape.concat({tape.slice(diff, 0, 3), tape.wrap(tape.slice(diff, 3, 1))});
      Tensor rel = tape.scale(tape.norm2(diff), 1.0 / denom);
      acc = acc.id < 0 ? rel : tape.add(acc, rel);
    }
  }
  return acc.id < 0 ? tape.scalar(0.0, "zero_pred_loss") : acc;
}

struct BatchLossValues {
  double cbf = 0.0;
  double contr = 0.0;
  double pred = 0.0;
};

/// Mean over the batch of the per-sample robot-averaged CBF + control loss.
inline Tensor batch_cbf_ctrl_loss(Tape& tape, Models& models,
                                  std::span<const Sample* const> batch,
                                  const LossContext& ctx, BatchLossValues* values = nullptr) {
  if (batch.empty()) throw std::invalid_argument("batch_cbf_ctrl_loss: empty batch");
  Tensor acc{-1};
  double cbf_sum = 0.0, contr_sum = 0.0;
  for (const Sample* s : batch) {
    SampleLosses l = sample_cbf_ctrl_losses(tape, models, *s, ctx);
    acc = acc.id < 0 ? l.total : tape.add(acc, l.total);
    if (values != nullptr) {
      const int robots = static_cast<int>(s->states.size());
      for (int i = 0; i < robots; ++i) {
        if (l.cbf[i].id >= 0) cbf_sum += tape.value(l.cbf[i])[0] / robots;
        if (l.contr[i].id >= 0) contr_sum += tape.value(l.contr[i])[0] / robots;
      }
    }
  }
  Tensor mean = tape.scale(acc, 1.0 / static_cast<double>(batch.size()));
  if (values != nullptr) {
    values->cbf = cbf_sum / static_cast<double>(batch.size());
    values->contr = contr_sum / static_cast<double>(batch.size());
  }
  return mean;
}

/// Mean over the batch of the per-sample predictor loss.
inline Tensor batch_pred_loss(Tape& tape, PredictorModel& pred,
                              std::span<const Sample* const> batch,
                              BatchLossValues* values = nullptr) {
  if (batch.empty()) throw std::invalid_argument("batch_pred_loss: empty batch");
  Tensor acc{-1};
  for (const Sample* s : batch) {
    Tensor l = sample_pred_loss(tape, pred, *s);
    acc = acc.id < 0 ? l : tape.add(acc, l);
  }
  Tensor mean = tape.scale(acc, 1.0 / static_cast<double>(batch.size()));
  if (values != nullptr) values->pred = tape.value(mean)[0];
  return mean;
}

// ---------------------------------------------------------------------------
// Training loop.

enum class ModelGroup { CbfController, Predictor };

/// Probability of applying the nominal-only action at global step t (1-based),
/// decaying as 1/t with a small floor to retain late exploration.
inline double exploration_epsilon(long t, double eps_min) {
  return std::max(1.0 / static_cast<double>(t), eps_min);
}

/// Which group an update slot belongs to under the alternating schedule.
/// The predictor leads: it must supply usable estimates before the CBF and
/// controller can train on them.
inline ModelGroup alternating_group(long slot, int alternate_every) {
  return (slot / alternate_every) % 2 == 0 ? ModelGroup::Predictor
                                           : ModelGroup::CbfController;
}

struct TrainOptions {
  std::string out_dir;                 // empty: keep everything in memory
  std::optional<Models> init;          // warm start from a checkpoint
  std::ostream* log = nullptr;         // CSV rows mirror the on-disk log
  std::ostream* warnings = nullptr;    // defaults to stderr
};

struct TrainResult {
  Models models;
  long steps = 0;
  long update_events = 0;
  long episodes = 0;
  std::vector<std::string> checkpoint_paths;
};

inline const char* group_name(ModelGroup g) {
  return g == ModelGroup::CbfController ? "cbf_controller" : "predictor";
}

inline TrainResult run_training(const Config& cfg, std::uint64_t seed, TrainOptions opts = {}) {
  validate(cfg);
  const ScenarioConfig& sc = cfg.scenario;
  const HyperParams& hp = cfg.training;
  const bool realistic = !sc.perfect_info;

  Schedule schedule = hp.schedule;
  if (schedule == Schedule::Auto)
    schedule = realistic ? Schedule::Alternating : Schedule::CbfControllerOnly;

  TrainResult result;
  result.models = opts.init.has_value()
                      ? *opts.init
                      : make_models(cfg.model, sc.dynamics, sc.delta_max, seed);
  Models& models = result.models;

  SafetyLabeler labeler(sc.d_coll, sc.d_safe);
  ReplayBuffer buffer(hp.buffer_capacity);
  RngStream eps_rng = RngStream::derive(seed ^ kEpsilonSalt);
  RngStream sample_rng = RngStream::derive(seed ^ kSamplingSalt);
  AdamConfig adam;
  adam.lr = hp.lr;
  LossContext ctx{sc, hp, realistic};

  std::ofstream log_file;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log_file.open(opts.out_dir + "/training_log.csv", std::ios::binary);
    if (!log_file) throw std::runtime_error("cannot open training log in " + opts.out_dir);
  }
  auto log_row = [&](const std::string& row) {
    if (log_file.is_open()) log_file << row << "\n";
    if (opts.log != nullptr) *opts.log << row << "\n";
  };
  log_row("global_step,event,group,loss_cbf,loss_contr,loss_pred,unsafe_fraction,epsilon_t");

  auto write_checkpoint = [&](const std::string& name, long step) {
    if (opts.out_dir.empty()) return;
    const std::string path = opts.out_dir + "/" + name;
    save_models(path, models, step);
    result.checkpoint_paths.push_back(path);
  };

  ModelGroup group = schedule == Schedule::PredictorOnly ? ModelGroup::Predictor
                                                         : ModelGroup::CbfController;
  long global_step = 0;
  long descent_count = 0;
  double last_eps = 1.0;

  auto scheduled_group = [&](long event_index) {
    switch (schedule) {
      case Schedule::CbfControllerOnly: return ModelGroup::CbfController;
      case Schedule::PredictorOnly: return ModelGroup::Predictor;
      default:
        return alternating_group(hp.alternate_by_events ? event_index : descent_count,
                                 hp.alternate_every);
    }
  };

  auto update_event = [&]() {
    ++result.update_events;
    BatchLossValues values;
    bool have_cbf = false, have_pred = false;
    for (int d = 0; d < hp.n_desc; ++d) {
      group = scheduled_group(result.update_events - 1);
      auto batch = balanced_sample(buffer, hp.batch_size, sample_rng, opts.warnings);
      Tape tape;
      try {
        if (group == ModelGroup::CbfController) {
          models.cbf.params.zero_grads();
          models.ctrl.params.zero_grads();
          Tensor loss = batch_cbf_ctrl_loss(tape, models, batch, ctx, &values);
          tape.backward(loss);
          adam_step(models.cbf.params, adam);
          adam_step(models.ctrl.params, adam);
          have_cbf = true;
        } else {
          models.pred.params.zero_grads();
          Tensor loss = batch_pred_loss(tape, models.pred, batch, &values);
          tape.backward(loss);
          adam_step(models.pred.params, adam);
          have_pred = true;
        }
      } catch (const std::runtime_error& e) {
        throw NumericError("training aborted at step " + std::to_string(global_step) + ": " +
                           e.what());
      }
      ++descent_count;
    }
    char row[256];
    std::snprintf(row, sizeof(row), "%ld,%ld,%s,%s,%s,%s,%.6f,%.6f", global_step,
                  result.update_events, group_name(group),
                  have_cbf ? format_double(values.cbf).c_str() : "nan",
                  have_cbf ? format_double(values.contr).c_str() : "nan",
                  have_pred ? format_double(values.pred).c_str() : "nan",
                  buffer.unsafe_fraction(), last_eps);
    log_row(row);
  };

  while (global_step < hp.total_steps) {
    const std::uint64_t episode = static_cast<std::uint64_t>(result.episodes);
    RngStream placement_rng = RngStream::derive(seed ^ kPlacementSalt, episode);
    Placement placement = sample_placement(sc, placement_rng);
    std::vector<RobotState> states = placement.starts;
    std::vector<ControlInput> prev(sc.robots, ControlInput{0.0, 0.0});
    CommsChannel channel(sc.robots, sc.comms(), seed, episode);
    ++result.episodes;

    for (int t = 0; t < hp.episode_deadline && global_step < hp.total_steps; ++t) {
      ++global_step;
      const double eps_t = exploration_epsilon(global_step, hp.eps_min);
      last_eps = eps_t;

      GraphSnapshot graph;
      if (sc.perfect_info) {
        graph = perfect_info_snapshot(states, prev, sc.comm_radius);
      } else {
        channel.step(t, states, prev);
        graph = channel.snapshot();
      }

      Sample sample;
      sample.states = states;
      sample.graph = graph;

      const bool explore = eps_rng.uniform() < eps_t;
      std::vector<ControlInput> applied(sc.robots);
      for (int r = 0; r < sc.robots; ++r) {
        const ControlInput u_ref =
            nominal_control(states[r], placement.goals[r], sc.gains, sc.bounds);
        sample.u_ref.push_back(u_ref);
        ControlInput u = u_ref;
        if (!explore) {
          KeyedDiffs w = model_input_diffs(graph, r, realistic, &models.pred);
          u = u + corrective_control(models.ctrl, w, u_ref);
        }
        applied[r] = saturate(u, sc.dynamics, sc.bounds);
      }
      sample.applied = applied;

      for (int r = 0; r < sc.robots; ++r) states[r] = step(states[r], applied[r], sc.ts);
      prev = applied;
      sample.next_states = states;
      buffer.push(std::move(sample), labeler);

      if (global_step % hp.delta_train == 0) update_event();
      if (hp.checkpoint_every > 0 && global_step % hp.checkpoint_every == 0 &&
          global_step < hp.total_steps)
        write_checkpoint("ckpt_step" + std::to_string(global_step) + ".txt", global_step);

      bool all_at_goal = true;
      for (int r = 0; r < sc.robots; ++r)
        all_at_goal =
            all_at_goal && distance(states[r].p, placement.goals[r]) <= sc.gains.goal_tol;
      if (all_at_goal) break;
    }
  }

  result.steps = global_step;
  write_checkpoint("ckpt_final.txt", global_step);
  return result;
}

}  // namespace swarmcbf
