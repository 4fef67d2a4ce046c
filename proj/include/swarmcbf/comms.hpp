#pragma once

// Slotted broadcast channel with disk connectivity and per-sender random
// delays. Receivers keep message histories, turn them into relative datasets
// tagged with Age-of-Information, and prune anything older than delta_max.

#include <map>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dynamics.hpp"
#include "rng.hpp"

namespace swarmcbf {

/// Payload broadcast by `sender` at step `timestamp`: its state and the input
/// applied at the previous step (zero at t = 0).
struct Message {
  int sender = -1;
  RobotState state;
  ControlInput prev_input{0.0, 0.0};
  int timestamp = 0;
};

struct InFlight {
  Message message;
  int receiver = -1;
  int delivery_step = 0;  // timestamp + sampled delay
};

/// Receiver-side form of a message: state difference, previous-input
/// difference, and the age t - t' of the underlying data in steps.
struct RelativeMessage {
  StateDiff dx;
  Vec2 du{0.0, 0.0};
  int aoi = 0;
};

/// Time-ordered relative messages for one (receiver, sender) pair. Entries
/// ascend by source timestamp, i.e. descend by age; at most one per source
/// step and none older than delta_max.
struct RelativeDataset {
  std::vector<RelativeMessage> entries;

  bool empty() const { return entries.empty(); }
  const RelativeMessage& latest() const {
    if (entries.empty()) throw std::logic_error("RelativeDataset::latest: empty dataset");
    return entries.back();
  }
};

struct CommsConfig {
  double comm_radius = 1.0;
  double c_del = 0.5;
  int delta_max = 5;
  double erasure_prob = 0.0;  // not part of the delay model; defaults off
};

/// Poisson-distributed delay with mean c_del * neighbor_count.
inline int sample_delay(int neighbor_count, double c_del, RngStream& rng) {
  if (neighbor_count < 0) throw std::invalid_argument("sample_delay: negative count");
  if (c_del < 0.0) throw std::invalid_argument("sample_delay: negative c_del");
  return rng.poisson(c_del * neighbor_count);
}

/// Enqueue one message per ordered in-range pair (sender -> receiver). The
/// delay is sampled once per sender per step and shared by all receivers.
/// Range gates transmission only; in-flight messages always get delivered.
inline std::vector<InFlight> broadcast(std::span<const RobotState> states,
                                       std::span<const ControlInput> prev_inputs,
                                       int t, const CommsConfig& cfg,
                                       std::span<RngStream> delay_rng,
                                       std::span<RngStream> erasure_rng = {}) {
  const int robots = static_cast<int>(states.size());
  std::vector<InFlight> out;
  for (int j = 0; j < robots; ++j) {
    std::vector<int> receivers;
    for (int i = 0; i < robots; ++i) {
      if (i != j && distance(states[i].p, states[j].p) <= cfg.comm_radius)
        receivers.push_back(i);
    }
    const int delay = sample_delay(static_cast<int>(receivers.size()), cfg.c_del, delay_rng[j]);
    for (int i : receivers) {
      if (cfg.erasure_prob > 0.0 && !erasure_rng.empty() &&
          erasure_rng[j].uniform() < cfg.erasure_prob)
        continue;
      InFlight f;
      f.message = Message{j, states[j], prev_inputs[j], t};
      f.receiver = i;
      f.delivery_step = t + delay;
      out.push_back(f);
    }
  }
  return out;
}

/// Remove and return every in-flight message due at step t. Arrival order
/// follows delivery step, so older timestamps may arrive after newer ones.
inline std::vector<InFlight> deliver(std::vector<InFlight>& queue, int t) {
  std::vector<InFlight> due;
  std::vector<InFlight> keep;
  keep.reserve(queue.size());
  for (auto& f : queue) {
    if (f.delivery_step == t)
      due.push_back(f);
    else
      keep.push_back(f);
  }
  queue.swap(keep);
  return due;
}

/// Inbox entry: the raw received message content keyed by source timestamp.
struct ReceivedRecord {
  RobotState state;
  ControlInput prev_input{0.0, 0.0};
};

/// One slot of a robot's own history ring: its state at `timestamp` and the
/// input it applied at `timestamp - 1`.
struct SelfRecord {
  int timestamp = 0;
  RobotState state;
  ControlInput prev_input{0.0, 0.0};
};

/// Assemble the pruned, time-ordered relative dataset for one sender from the
/// receiver's inbox and its own stored history.
inline RelativeDataset build_relative_dataset(const std::map<int, ReceivedRecord>& inbox,
                                              std::span<const SelfRecord> self_history,
                                              int t, int delta_max) {
  RelativeDataset out;
  for (const auto& [src_t, rec] : inbox) {  // map iterates ascending timestamps
    const int aoi = t - src_t;
    if (aoi > delta_max) continue;
    const SelfRecord* self = nullptr;
    for (const auto& s : self_history) {
      if (s.timestamp == src_t) {
        self = &s;
        break;
      }
    }
    if (self == nullptr)
      throw std::logic_error("build_relative_dataset: missing self-history entry (ring buffer sized wrong)");
    RelativeMessage m;
    m.dx = state_diff(self->state, rec.state);
    m.du = self->prev_input - rec.prev_input;
    m.aoi = aoi;
    out.entries.push_back(m);
  }
  return out;
}

/// Per-receiver view of the message-passing graph: for every robot, the
/// senders with nonempty datasets, ascending by sender id.
struct GraphSnapshot {
  std::vector<std::vector<std::pair<int, RelativeDataset>>> in_edges;

  bool has_edge(int receiver, int sender) const {
    for (const auto& [j, d] : in_edges[receiver])
      if (j == sender) return !d.empty();
    return false;
  }
  size_t edge_count() const {
    size_t n = 0;
    for (const auto& e : in_edges) n += e.size();
    return n;
  }
};

/// Degenerate snapshot for instantaneous communication: every in-range pair
/// gets a singleton dataset holding the current relative state at age zero.
inline GraphSnapshot perfect_info_snapshot(std::span<const RobotState> states,
                                           std::span<const ControlInput> prev_inputs,
                                           double comm_radius) {
  const int robots = static_cast<int>(states.size());
  GraphSnapshot g;
  g.in_edges.resize(robots);
  for (int i = 0; i < robots; ++i) {
    for (int j = 0; j < robots; ++j) {
      if (i == j || distance(states[i].p, states[j].p) > comm_radius) continue;
      RelativeMessage m;
      m.dx = state_diff(states[i], states[j]);
      m.du = prev_inputs[i] - prev_inputs[j];
      m.aoi = 0;
      RelativeDataset d;
      d.entries.push_back(m);
      g.in_edges[i].push_back({j, std::move(d)});
    }
  }
  return g;
}

/// The delay network for one episode: a single logical state machine advanced
/// step by step. Distinct episodes get independent channels and RNG streams.
class CommsChannel {
 public:
  CommsChannel(int robots, CommsConfig cfg, std::uint64_t seed, std::uint64_t episode)
      : robots_(robots), cfg_(cfg) {
    inbox_.resize(static_cast<size_t>(robots) * robots);
    history_.resize(robots);
    for (int r = 0; r < robots; ++r) {
      delay_rng_.push_back(RngStream::derive(seed, episode, static_cast<std::uint64_t>(r), 0));
      erasure_rng_.push_back(RngStream::derive(seed, episode, static_cast<std::uint64_t>(r), 1));
    }
  }

  /// Advance to step t: record own history, broadcast I(t), deliver messages
  /// due now, and prune entries beyond delta_max.
  void step(int t, std::span<const RobotState> states,
            std::span<const ControlInput> prev_inputs) {
    now_ = t;
    for (int r = 0; r < robots_; ++r) {
      history_[r].push_back({t, states[r], prev_inputs[r]});
      const size_t depth = static_cast<size_t>(cfg_.delta_max) + 2;
      if (history_[r].size() > depth)
        history_[r].erase(history_[r].begin(), history_[r].end() - depth);
    }
    auto sent = broadcast(states, prev_inputs, t, cfg_, delay_rng_, erasure_rng_);
    enqueued_ += static_cast<long>(sent.size());
    queue_.insert(queue_.end(), sent.begin(), sent.end());
    deliver_due(t);
    prune(t);
  }

  /// Deliver-only tick (no broadcast, no history); used to drain the queue.
  void tick_deliver_only(int t) {
    now_ = t;
    deliver_due(t);
    prune(t);
  }

  RelativeDataset relative_dataset(int receiver, int sender) const {
    return build_relative_dataset(inbox_[idx(receiver, sender)], history_[receiver], now_,
                                  cfg_.delta_max);
  }

  GraphSnapshot snapshot() const {
    GraphSnapshot g;
    g.in_edges.resize(robots_);
    for (int i = 0; i < robots_; ++i) {
      for (int j = 0; j < robots_; ++j) {
        if (i == j) continue;
        RelativeDataset d = relative_dataset(i, j);
        if (!d.empty()) g.in_edges[i].push_back({j, std::move(d)});
      }
    }
    return g;
  }

  long enqueued_count() const { return enqueued_; }
  long delivered_count() const { return delivered_; }
  size_t in_flight_count() const { return queue_.size(); }
  int now() const { return now_; }

 private:
  size_t idx(int receiver, int sender) const {
    return static_cast<size_t>(receiver) * robots_ + sender;
  }

  void deliver_due(int t) {
    auto due = deliver(queue_, t);
    delivered_ += static_cast<long>(due.size());
    for (const auto& f : due) {
      if (t - f.message.timestamp > cfg_.delta_max) continue;  // stale on arrival
      inbox_[idx(f.receiver, f.message.sender)][f.message.timestamp] =
          ReceivedRecord{f.message.state, f.message.prev_input};
    }
  }

  void prune(int t) {
    for (auto& box : inbox_) {
      while (!box.empty() && t - box.begin()->first > cfg_.delta_max) box.erase(box.begin());
    }
  }

  int robots_;
  CommsConfig cfg_;
  int now_ = -1;
  long enqueued_ = 0;
  long delivered_ = 0;
  std::vector<InFlight> queue_;
  std::vector<std::map<int, ReceivedRecord>> inbox_;
  std::vector<std::vector<SelfRecord>> history_;
  std::vector<RngStream> delay_rng_;
  std::vector<RngStream> erasure_rng_;
};

}  // namespace swarmcbf
