#pragma once

// The learned models and analytic baselines: the distributed CBF network
// h_theta, the GNN corrective controller pi_xi, the recurrent relative-state
// predictor lambda_zeta, safe-set labeling, the closed-form analytic CBF with
// its min-norm filter, and the heuristic switching controller.

#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "comms.hpp"
#include "dynamics.hpp"

namespace swarmcbf {

/// Network widths. Defaults are desk scale; the larger research-scale
/// configuration stays expressible through these fields.
struct ModelConfig {
  int node_feature_dim = 8;
  std::vector<int> phi_hidden{64, 64};
  int embed_dim = 64;  // phi output / attention input
  std::vector<int> att_hidden{32, 32};
  std::vector<int> gamma_hidden{64, 64};
  int gnn_dim = 64;  // gamma output
  std::vector<int> head_hidden{64, 32, 16};
  int pred_hidden = 64;
  int pred_layers = 1;
  double pred_dropout = 0.0;

  bool operator==(const ModelConfig&) const = default;
};

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

using KeyedDiffs = std::vector<std::pair<int, StateDiff>>;
using KeyedTensors = std::vector<std::pair<int, Tensor>>;

/// One message-passing round shared by the CBF and controller networks:
/// edge MLP phi per neighbor, attention-weighted aggregation, then the node
/// update gamma on (initial all-ones feature, aggregate).
struct GnnLayer {
  Mlp phi;
  Mlp att;
  Mlp gamma;
  int node_feature_dim = 0;
};

inline GnnLayer make_gnn_layer(ParamSet& params, const std::string& prefix,
                               const ModelConfig& cfg, int edge_dim, RngStream& rng) {
  GnnLayer layer;
  layer.node_feature_dim = cfg.node_feature_dim;
  layer.phi = make_mlp(params, prefix + ".phi",
                       {edge_dim, cfg.phi_hidden, cfg.embed_dim, Activation::Relu,
                        Activation::None},
                       rng);
  layer.att = make_mlp(params, prefix + ".att",
                       {cfg.embed_dim, cfg.att_hidden, 1, Activation::Relu, Activation::None},
                       rng);
  layer.gamma = make_mlp(params, prefix + ".gamma",
                         {cfg.node_feature_dim + cfg.embed_dim, cfg.gamma_hidden, cfg.gnn_dim,
                          Activation::Relu, Activation::None},
                         rng);
  return layer;
}

inline Tensor gnn_features(Tape& tape, ParamSet& params, const GnnLayer& layer,
                           const KeyedTensors& neighbor_w) {
  if (neighbor_w.empty())
    throw std::invalid_argument("gnn_features: empty neighborhood");
  KeyedTensors embedded;
  embedded.reserve(neighbor_w.size());
  for (const auto& [j, w] : neighbor_w)
    embedded.push_back({j, mlp_forward(tape, params, layer.phi, w)});
  Tensor agg = attentional_aggregate(tape, params, layer.att, std::move(embedded));
  Tensor f0 = tape.input(Vec(static_cast<size_t>(layer.node_feature_dim), 1.0), "f0_ones");
  return mlp_forward(tape, params, layer.gamma, tape.concat({f0, agg}));
}

inline KeyedTensors stage_diffs(Tape& tape, const KeyedDiffs& diffs) {
  KeyedTensors out;
  out.reserve(diffs.size());
  for (const auto& [j, d] : diffs) {
    auto flat = d.flat();
    out.push_back({j, tape.input(Vec(flat.begin(), flat.begin() + d.dim()), "w_ij")});
  }
  return out;
}

// ---------------------------------------------------------------------------
// CBF network h_theta: GNN layer plus a head MLP with tanh output, so the
// certificate value always lies strictly inside (-1, 1).

struct CbfModel {
  DynamicsKind kind = DynamicsKind::SingleIntegrator;
  ModelConfig cfg;
  ParamSet params;
  GnnLayer gnn;
  Mlp head;
};

inline CbfModel make_cbf_model(const ModelConfig& cfg, DynamicsKind kind, RngStream& rng) {
  CbfModel m;
  m.kind = kind;
  m.cfg = cfg;
  m.gnn = make_gnn_layer(m.params, "gnn", cfg, state_dim(kind), rng);
  m.head = make_mlp(m.params, "head",
                    {cfg.gnn_dim, cfg.head_hidden, 1, Activation::Relu, Activation::Tanh},
                    rng);
  return m;
}

inline Tensor cbf_value_t(Tape& tape, CbfModel& model, const KeyedTensors& neighbor_w) {
  Tensor g = gnn_features(tape, model.params, model.gnn, neighbor_w);
  return mlp_forward(tape, model.params, model.head, g);
}

inline double cbf_value(CbfModel& model, const KeyedDiffs& neighbor_w) {
  Tape tape;
  return tape.value(cbf_value_t(tape, model, stage_diffs(tape, neighbor_w)))[0];
}

/// Forward-difference quotient of the learned CBF between two snapshots of
/// the same neighborhood.
inline double fd_cbf_derivative(CbfModel& model, const KeyedDiffs& w_now,
                                const KeyedDiffs& w_next, double ts) {
  if (w_now.size() != w_next.size())
    throw std::invalid_argument("fd_cbf_derivative: neighborhood mismatch");
  for (size_t k = 0; k < w_now.size(); ++k)
    if (w_now[k].first != w_next[k].first)
      throw std::invalid_argument("fd_cbf_derivative: neighborhood mismatch");
  return (cbf_value(model, w_next) - cbf_value(model, w_now)) / ts;
}

// ---------------------------------------------------------------------------
// Controller network pi_xi: its own GNN layer plus a head MLP that consumes
// (aggregated feature, nominal input) and emits a corrective action.

struct ControllerModel {
  DynamicsKind kind = DynamicsKind::SingleIntegrator;
  ModelConfig cfg;
  ParamSet params;
  GnnLayer gnn;
  Mlp head;
};

inline ControllerModel make_controller_model(const ModelConfig& cfg, DynamicsKind kind,
                                             RngStream& rng) {
  ControllerModel m;
  m.kind = kind;
  m.cfg = cfg;
  m.gnn = make_gnn_layer(m.params, "gnn", cfg, state_dim(kind), rng);
  m.head = make_mlp(m.params, "head",
                    {cfg.gnn_dim + 2, cfg.head_hidden, 2, Activation::Relu, Activation::None},
                    rng);
  return m;
}

inline Tensor corrective_control_t(Tape& tape, ControllerModel& model,
                                   const KeyedTensors& neighbor_w, Tensor u_ref) {
  Tensor g = gnn_features(tape, model.params, model.gnn, neighbor_w);
  return mlp_forward(tape, model.params, model.head, tape.concat({g, u_ref}));
}

/// Zero when the neighborhood is empty, otherwise the network output. The
/// caller applies saturate(u_ref + corrective) downstream.
inline ControlInput corrective_control(ControllerModel& model, const KeyedDiffs& neighbor_w,
                                       const ControlInput& u_ref) {
  if (neighbor_w.empty()) return {0.0, 0.0};
  Tape tape;
  Tensor u = corrective_control_t(tape, model, stage_diffs(tape, neighbor_w),
                                  tape.input({u_ref[0], u_ref[1]}, "u_ref"));
  return {tape.value(u)[0], tape.value(u)[1]};
}

// ---------------------------------------------------------------------------
// Predictor lambda_zeta: embeds each relative message (dx, du, aoi/delta_max),
// scans the sequence with the recurrent stack and projects the final hidden
// state to an estimate of the current relative state.

struct PredictorModel {
  DynamicsKind kind = DynamicsKind::SingleIntegrator;
  ModelConfig cfg;
  int delta_max = 5;
  ParamSet params;
  Mlp embed;
  GruStack gru;
  Mlp head;
};

inline PredictorModel make_predictor_model(const ModelConfig& cfg, DynamicsKind kind,
                                           int delta_max, RngStream& rng) {
  PredictorModel m;
  m.kind = kind;
  m.cfg = cfg;
  m.delta_max = delta_max;
  const int in_dim = state_dim(kind) + 3;  // dx, du, normalized aoi
  m.embed = make_mlp(m.params, "embed", {in_dim, {}, cfg.pred_hidden}, rng);
  m.gru = make_gru(m.params, "gru", cfg.pred_hidden, cfg.pred_hidden, cfg.pred_layers,
                   cfg.pred_dropout, rng);
  m.head = make_mlp(m.params, "head", {cfg.pred_hidden, {}, state_dim(kind)}, rng);
  return m;
}

inline Vec relative_message_features(const RelativeMessage& m, DynamicsKind kind,
                                     int delta_max) {
  auto flat = m.dx.flat();
  Vec f(flat.begin(), flat.begin() + state_dim(kind));
  f.push_back(m.du[0]);
  f.push_back(m.du[1]);
  f.push_back(static_cast<double>(m.aoi) / std::max(1, delta_max));
  return f;
}

/// aoi_shift lets the heuristic ask "and one step later?" by aging every
/// entry without adding information.
inline Tensor predict_t(Tape& tape, PredictorModel& model, const RelativeDataset& dataset,
                        int aoi_shift = 0, bool training = false,
                        RngStream* dropout_rng = nullptr) {
  if (dataset.empty()) throw std::invalid_argument("predict: empty dataset");
  std::vector<Tensor> seq;
  seq.reserve(dataset.entries.size());
  for (const auto& e : dataset.entries) {
    RelativeMessage shifted = e;
    shifted.aoi += aoi_shift;
    Tensor in = tape.input(relative_message_features(shifted, model.kind, model.delta_max),
                           "rel_msg");
    seq.push_back(mlp_forward(tape, model.params, model.embed, in));
  }
  Tensor h = recurrent_forward(tape, model.params, model.gru, seq, training, dropout_rng);
  return mlp_forward(tape, model.params, model.head, h);
}

inline StateDiff predict(PredictorModel& model, const RelativeDataset& dataset,
                         int aoi_shift = 0) {
  Tape tape;
  const Vec& v = tape.value(predict_t(tape, model, dataset, aoi_shift));
  StateDiff d;
  d.kind = model.kind;
  d.dp = {v[0], v[1]};
  if (model.kind == DynamicsKind::DubinsCar) {
    d.dv = v[2];
    d.dtheta = v[3];
  }
  return d;
}

// ---------------------------------------------------------------------------
// Safe-set labeling on true neighbor distances.

enum class SafetyLabel { Safe, Unsafe, Boundary };

struct SafetyLabeler {
  double d_coll = 0.1;
  double d_safe = 0.2;

  SafetyLabeler(double coll = 0.1, double safe = 0.2) : d_coll(coll), d_safe(safe) {
    if (!(d_safe > d_coll && d_coll > 0.0))
      throw std::invalid_argument("SafetyLabeler: requires d_safe > d_coll > 0");
  }

  /// Label from the minimum neighbor distance; an empty neighborhood is safe.
  SafetyLabel label(std::span<const StateDiff> neighbor_w) const {
    double dmin = std::numeric_limits<double>::infinity();
    for (const auto& w : neighbor_w) dmin = std::min(dmin, norm(w.dp));
    if (dmin < d_coll) return SafetyLabel::Unsafe;
    if (dmin >= d_safe) return SafetyLabel::Safe;
    return SafetyLabel::Boundary;
  }
};

// ---------------------------------------------------------------------------
// Analytic baseline: the closed-form collision CBF h = min_j ||p_ij|| - d_coll
// and the single-constraint min-norm projection filter.

struct AnalyticCbf {
  double h = 0.0;
  Vec2 grad{0.0, 0.0};  // d h / d p_i, unit vector toward the closest neighbor
  int argmin_sender = -1;
};

inline AnalyticCbf analytic_cbf(const KeyedDiffs& neighbor_w, double d_coll) {
  if (neighbor_w.empty()) throw std::invalid_argument("analytic_cbf: empty neighborhood");
  AnalyticCbf out;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [j, w] : neighbor_w) {
    const double d = norm(w.dp);
    // Ties break toward the lowest sender id: strict improvement wins, and on
    // equal distance the smaller id wins.
    if (d < best || (d == best && (out.argmin_sender < 0 || j < out.argmin_sender))) {
      best = d;
      out.argmin_sender = j;
      if (d == 0.0) throw std::invalid_argument("analytic_cbf: coincident positions");
      out.grad = (1.0 / d) * w.dp;
    }
  }
  out.h = best - d_coll;
  return out;
}

struct MinNormResult {
  ControlInput u{0.0, 0.0};
  bool saturation_broke_constraint = false;
};

/// Project the nominal input onto the half-space a'u >= -alpha*h, then clamp
/// to the input box. The projection is exact for the single constraint; the
/// clamp can break it, which the result flags.
inline MinNormResult min_norm_filter(const ControlInput& u_ref, double h, const Vec2& a,
                                     double alpha, DynamicsKind kind,
                                     const InputBounds& bounds = {}) {
  const double a_norm_sq = dot(a, a);
  if (a_norm_sq == 0.0) throw std::invalid_argument("min_norm_filter: zero gradient");
  const double needed = -alpha * h;
  MinNormResult out;
  if (dot(a, u_ref) >= needed) {
    out.u = saturate(u_ref, kind, bounds);
    return out;
  }
  const double shift = (needed - dot(a, u_ref)) / a_norm_sq;
  out.u = saturate(u_ref + shift * a, kind, bounds);
  out.saturation_broke_constraint = dot(a, out.u) < needed - 1e-12;
  return out;
}

// ---------------------------------------------------------------------------
// Heuristic switching control: zero correction when the estimated CBF
// condition holds with margin phi*eps, the learned correction otherwise.
// No safety guarantee is retained.

inline ControlInput heuristic_control(CbfModel& cbf, ControllerModel& ctrl,
                                      PredictorModel& pred,
                                      const std::vector<std::pair<int, RelativeDataset>>& datasets,
                                      const ControlInput& u_ref, double phi, double eps,
                                      double alpha, double ts) {
  KeyedDiffs w_now, w_next;
  for (const auto& [j, d] : datasets) {
    if (d.empty()) continue;
    w_now.push_back({j, predict(pred, d)});
    w_next.push_back({j, predict(pred, d, 1)});
  }
  if (w_now.empty()) return {0.0, 0.0};
  const double h_now = cbf_value(cbf, w_now);
  const double h_next = cbf_value(cbf, w_next);
  const double hdot = (h_next - h_now) / ts;
  if (hdot + alpha * h_now >= phi * eps) return {0.0, 0.0};
  return corrective_control(ctrl, w_now, u_ref);
}

// ---------------------------------------------------------------------------
// Checkpoints: one document holds all three parameter sets plus the metadata
// needed to validate shapes at load time.

struct Models {
  DynamicsKind kind = DynamicsKind::SingleIntegrator;
  ModelConfig cfg;
  int delta_max = 5;
  CbfModel cbf;
  ControllerModel ctrl;
  PredictorModel pred;
};

inline Models make_models(const ModelConfig& cfg, DynamicsKind kind, int delta_max,
                          std::uint64_t seed) {
  Models m;
  m.kind = kind;
  m.cfg = cfg;
  m.delta_max = delta_max;
  RngStream cbf_rng = RngStream::derive(seed, 1001);
  RngStream ctrl_rng = RngStream::derive(seed, 1002);
  RngStream pred_rng = RngStream::derive(seed, 1003);
  m.cbf = make_cbf_model(cfg, kind, cbf_rng);
  m.ctrl = make_controller_model(cfg, kind, ctrl_rng);
  m.pred = make_predictor_model(cfg, kind, delta_max, pred_rng);
  return m;
}

inline std::map<std::string, std::string> model_meta(const Models& m, long training_step) {
  std::map<std::string, std::string> meta;
  meta["dynamics"] = to_string(m.kind);
  meta["delta_max"] = std::to_string(m.delta_max);
  meta["training_step"] = std::to_string(training_step);
  meta["node_feature_dim"] = std::to_string(m.cfg.node_feature_dim);
  meta["phi_hidden"] = join_ints(m.cfg.phi_hidden);
  meta["embed_dim"] = std::to_string(m.cfg.embed_dim);
  meta["att_hidden"] = join_ints(m.cfg.att_hidden);
  meta["gamma_hidden"] = join_ints(m.cfg.gamma_hidden);
  meta["gnn_dim"] = std::to_string(m.cfg.gnn_dim);
  meta["head_hidden"] = join_ints(m.cfg.head_hidden);
  meta["pred_hidden"] = std::to_string(m.cfg.pred_hidden);
  meta["pred_layers"] = std::to_string(m.cfg.pred_layers);
  meta["pred_dropout"] = format_double(m.cfg.pred_dropout);
  return meta;
}

inline void save_models(std::ostream& os, const Models& m, long training_step) {
  CheckpointDoc doc;
  doc.meta = model_meta(m, training_step);
  auto copy_params = [&doc](const std::string& model, const ParamSet& params) {
    for (const auto& p : params.tensors())
      doc.params[model + "/" + p.name] = {{p.rows, p.cols}, p.value};
  };
  copy_params("cbf", m.cbf.params);
  copy_params("ctrl", m.ctrl.params);
  copy_params("pred", m.pred.params);
  write_checkpoint_doc(os, doc);
}

inline void save_models(const std::string& path, const Models& m, long training_step) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  save_models(os, m, training_step);
}

/// Rebuild models from a checkpoint, validating dynamics kind, delta_max and
/// every tensor shape against the expected configuration.
inline Models load_models(std::istream& is, const ModelConfig& cfg, DynamicsKind kind,
                          int delta_max) {
  CheckpointDoc doc = read_checkpoint_doc(is);
  auto need = [&doc](const std::string& key) {
    auto it = doc.meta.find(key);
    if (it == doc.meta.end()) throw std::runtime_error("checkpoint: missing meta " + key);
    return it->second;
  };
  if (need("dynamics") != to_string(kind))
    throw std::runtime_error("checkpoint: dynamics kind mismatch (checkpoint has " +
                             need("dynamics") + ")");
  if (std::stoi(need("delta_max")) != delta_max)
    throw std::runtime_error("checkpoint: delta_max mismatch");
  Models m = make_models(cfg, kind, delta_max, 0);
  load_param_set(doc, "cbf", m.cbf.params);
  load_param_set(doc, "ctrl", m.ctrl.params);
  load_param_set(doc, "pred", m.pred.params);
  return m;
}

inline Models load_models(const std::string& path, const ModelConfig& cfg, DynamicsKind kind,
                          int delta_max) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  return load_models(is, cfg, kind, delta_max);
}

}  // namespace swarmcbf
