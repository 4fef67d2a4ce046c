#pragma once

// Scenario and training configuration: a small TOML-style file format with
// [section] headers and key = value lines, field-level validation, and the
// run manifest that makes every output directory reproducible.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynamics.hpp"
#include "models.hpp"

namespace swarmcbf {

inline constexpr const char* kVersion = "0.1.0";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ScenarioConfig {
  DynamicsKind dynamics = DynamicsKind::SingleIntegrator;
  int robots = 6;
  double workspace_min = 0.0;
  double workspace_max = 3.0;
  double placement_margin = 0.1;  // keep starts/goals off the walls
  double comm_radius = 1.0;
  double d_coll = 0.1;
  double d_safe = 0.2;
  double ts = 0.03;
  double c_del = 0.5;
  int delta_max = 5;
  bool perfect_info = false;
  double erasure_prob = 0.0;
  InputBounds bounds;
  NominalGains gains;

  bool operator==(const ScenarioConfig&) const = default;

  CommsConfig comms() const {
    CommsConfig c;
    c.comm_radius = comm_radius;
    c.c_del = c_del;
    c.delta_max = delta_max;
    c.erasure_prob = erasure_prob;
    return c;
  }
};

enum class Schedule { Auto, CbfControllerOnly, PredictorOnly, Alternating };

inline std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::Auto: return "auto";
    case Schedule::CbfControllerOnly: return "cbf_controller_only";
    case Schedule::PredictorOnly: return "predictor_only";
    case Schedule::Alternating: return "alternating";
  }
  return "auto";
}

inline Schedule schedule_from_string(const std::string& s) {
  if (s == "auto") return Schedule::Auto;
  if (s == "cbf_controller_only") return Schedule::CbfControllerOnly;
  if (s == "predictor_only") return Schedule::PredictorOnly;
  if (s == "alternating") return Schedule::Alternating;
  throw ConfigError("unknown schedule: " + s);
}

struct HyperParams {
  double w_safe = 1.0;
  double w_unsafe = 1.0;
  double w_der = 0.7;
  double w_contr = 0.001;
  double alpha = 1.0;       // linear class-K slope
  double eps_margin = 0.02; // hinge slack
  double phi = 1.0;         // heuristic switching coefficient
  int delta_train = 512;    // simulation steps between update events
  int n_desc = 10;          // descent steps per update event
  int alternate_every = 10; // update events per model group before switching
  bool alternate_by_events = true;  // false: count descent steps instead
  double lr = 1e-3;
  int buffer_capacity = 50000;
  int batch_size = 32;
  double eps_min = 0.01;    // exploration floor after step 100
  long total_steps = 50000;
  int episode_deadline = 500;
  long checkpoint_every = 5120;
  Schedule schedule = Schedule::Auto;

  bool operator==(const HyperParams&) const = default;
};

struct Config {
  ScenarioConfig scenario;
  ModelConfig model;
  HyperParams training;

  bool operator==(const Config&) const = default;
};

inline void validate(const Config& cfg) {
  const auto& s = cfg.scenario;
  if (s.robots < 1) throw ConfigError("scenario.robots must be >= 1");
  if (!(s.ts > 0.0)) throw ConfigError("scenario.ts must be > 0");
  if (!(s.d_coll > 0.0)) throw ConfigError("scenario.d_coll must be > 0");
  if (!(s.d_safe > s.d_coll)) throw ConfigError("scenario.d_safe must exceed d_coll");
  if (s.comm_radius < s.d_coll)
    throw ConfigError("scenario.comm_radius must be at least d_coll");
  if (s.workspace_max <= s.workspace_min) throw ConfigError("empty workspace");
  if (s.delta_max < 0) throw ConfigError("scenario.delta_max must be >= 0");
  if (s.c_del < 0.0) throw ConfigError("scenario.c_del must be >= 0");
  if (s.erasure_prob < 0.0 || s.erasure_prob >= 1.0)
    throw ConfigError("scenario.erasure_prob must be in [0, 1)");

  const auto& t = cfg.training;
  if (t.w_safe < 0 || t.w_unsafe < 0 || t.w_der < 0 || t.w_contr < 0)
    throw ConfigError("loss weights must be >= 0");
  if (!(t.alpha > 0.0)) throw ConfigError("training.alpha must be > 0");
  if (!(t.eps_margin > 0.0)) throw ConfigError("training.eps_margin must be > 0");
  if (t.phi < 0.0) throw ConfigError("training.phi must be >= 0");
  if (t.delta_train < 1 || t.n_desc < 1 || t.alternate_every < 1)
    throw ConfigError("training schedule fields must be >= 1");
  if (t.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (t.buffer_capacity < 1) throw ConfigError("training.buffer_capacity must be >= 1");
  if (!(t.lr > 0.0)) throw ConfigError("training.lr must be > 0");
  if (t.episode_deadline < 1) throw ConfigError("training.episode_deadline must be >= 1");

  const auto& m = cfg.model;
  if (m.node_feature_dim < 1 || m.embed_dim < 1 || m.gnn_dim < 1 || m.pred_hidden < 1 ||
      m.pred_layers < 1)
    throw ConfigError("model dimensions must be >= 1");
  if (m.pred_dropout < 0.0 || m.pred_dropout >= 1.0)
    throw ConfigError("model.pred_dropout must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// Parsing.

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct RawConfig {
  // section -> key -> raw value text
  std::map<std::string, std::map<std::string, std::string>> values;

  const std::string* find(const std::string& section, const std::string& key) const {
    auto s = values.find(section);
    if (s == values.end()) return nullptr;
    auto k = s->second.find(key);
    if (k == s->second.end()) return nullptr;
    return &k->second;
  }
};

inline RawConfig parse_raw(std::istream& is) {
  RawConfig raw;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
    raw.values[section][key] = value;
  }
  return raw;
}

inline double parse_double(const std::string& v, const std::string& what) {
  try {
    size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw ConfigError("expected a number for " + what + ", got '" + v + "'");
  }
}

inline long parse_long(const std::string& v, const std::string& what) {
  try {
    size_t used = 0;
    long x = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw ConfigError("expected an integer for " + what + ", got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& v, const std::string& what) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("expected true/false for " + what + ", got '" + v + "'");
}

inline std::string parse_string(const std::string& v, const std::string& what) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
    return v.substr(1, v.size() - 2);
  throw ConfigError("expected a quoted string for " + what + ", got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& v, const std::string& what) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']')
    throw ConfigError("expected [a, b, ...] for " + what + ", got '" + v + "'");
  std::vector<int> out;
  std::string inner = v.substr(1, v.size() - 2);
  std::stringstream ss(inner);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<int>(parse_long(item, what)));
  }
  return out;
}

}  // namespace detail

inline Config parse_config(std::istream& is) {
  using namespace detail;
  RawConfig raw = parse_raw(is);
  Config cfg;

  auto dbl = [&](const char* sec, const char* key, double& field) {
    if (const auto* v = raw.find(sec, key)) field = parse_double(*v, std::string(sec) + "." + key);
  };
  auto intf = [&](const char* sec, const char* key, int& field) {
    if (const auto* v = raw.find(sec, key))
      field = static_cast<int>(parse_long(*v, std::string(sec) + "." + key));
  };
  auto longf = [&](const char* sec, const char* key, long& field) {
    if (const auto* v = raw.find(sec, key)) field = parse_long(*v, std::string(sec) + "." + key);
  };
  auto boolf = [&](const char* sec, const char* key, bool& field) {
    if (const auto* v = raw.find(sec, key)) field = parse_bool(*v, std::string(sec) + "." + key);
  };
  auto listf = [&](const char* sec, const char* key, std::vector<int>& field) {
    if (const auto* v = raw.find(sec, key))
      field = parse_int_list(*v, std::string(sec) + "." + key);
  };

  auto& s = cfg.scenario;
  if (const auto* v = raw.find("scenario", "dynamics")) {
    try {
      s.dynamics = dynamics_kind_from_string(parse_string(*v, "scenario.dynamics"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  intf("scenario", "robots", s.robots);
  dbl("scenario", "workspace_min", s.workspace_min);
  dbl("scenario", "workspace_max", s.workspace_max);
  dbl("scenario", "placement_margin", s.placement_margin);
  dbl("scenario", "comm_radius", s.comm_radius);
  dbl("scenario", "d_coll", s.d_coll);
  dbl("scenario", "d_safe", s.d_safe);
  dbl("scenario", "ts", s.ts);
  dbl("scenario", "c_del", s.c_del);
  intf("scenario", "delta_max", s.delta_max);
  boolf("scenario", "perfect_info", s.perfect_info);
  dbl("scenario", "erasure_prob", s.erasure_prob);
  dbl("scenario", "si_speed_limit", s.bounds.si_speed);
  dbl("scenario", "dubins_accel_limit", s.bounds.dubins_accel);
  dbl("scenario", "dubins_turn_limit", s.bounds.dubins_turn);
  dbl("scenario", "kp", s.gains.kp);
  dbl("scenario", "kv", s.gains.kv);
  dbl("scenario", "kd", s.gains.kd);
  dbl("scenario", "v_max_nom", s.gains.v_max_nom);
  dbl("scenario", "ktheta", s.gains.ktheta);
  dbl("scenario", "goal_tol", s.gains.goal_tol);

  auto& m = cfg.model;
  intf("model", "node_feature_dim", m.node_feature_dim);
  listf("model", "phi_hidden", m.phi_hidden);
  intf("model", "embed_dim", m.embed_dim);
  listf("model", "att_hidden", m.att_hidden);
  listf("model", "gamma_hidden", m.gamma_hidden);
  intf("model", "gnn_dim", m.gnn_dim);
  listf("model", "head_hidden", m.head_hidden);
  intf("model", "pred_hidden", m.pred_hidden);
  intf("model", "pred_layers", m.pred_layers);
  dbl("model", "pred_dropout", m.pred_dropout);

  auto& t = cfg.training;
  dbl("training", "w_safe", t.w_safe);
  dbl("training", "w_unsafe", t.w_unsafe);
  dbl("training", "w_der", t.w_der);
  dbl("training", "w_contr", t.w_contr);
  dbl("training", "alpha", t.alpha);
  dbl("training", "eps_margin", t.eps_margin);
  dbl("training", "phi", t.phi);
  intf("training", "delta_train", t.delta_train);
  intf("training", "n_desc", t.n_desc);
  intf("training", "alternate_every", t.alternate_every);
  boolf("training", "alternate_by_events", t.alternate_by_events);
  dbl("training", "lr", t.lr);
  intf("training", "buffer_capacity", t.buffer_capacity);
  intf("training", "batch_size", t.batch_size);
  dbl("training", "eps_min", t.eps_min);
  longf("training", "total_steps", t.total_steps);
  intf("training", "episode_deadline", t.episode_deadline);
  longf("training", "checkpoint_every", t.checkpoint_every);
  if (const auto* v = raw.find("training", "schedule"))
    t.schedule = schedule_from_string(parse_string(*v, "training.schedule"));

  validate(cfg);
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  return parse_config(is);
}

inline void write_config(std::ostream& os, const Config& cfg) {
  const auto& s = cfg.scenario;
  os << "[scenario]\n";
  os << "dynamics = \"" << to_string(s.dynamics) << "\"\n";
  os << "robots = " << s.robots << "\n";
  os << "workspace_min = " << format_double(s.workspace_min) << "\n";
  os << "workspace_max = " << format_double(s.workspace_max) << "\n";
  os << "placement_margin = " << format_double(s.placement_margin) << "\n";
  os << "comm_radius = " << format_double(s.comm_radius) << "\n";
  os << "d_coll = " << format_double(s.d_coll) << "\n";
  os << "d_safe = " << format_double(s.d_safe) << "\n";
  os << "ts = " << format_double(s.ts) << "\n";
  os << "c_del = " << format_double(s.c_del) << "\n";
  os << "delta_max = " << s.delta_max << "\n";
  os << "perfect_info = " << (s.perfect_info ? "true" : "false") << "\n";
  os << "erasure_prob = " << format_double(s.erasure_prob) << "\n";
  os << "si_speed_limit = " << format_double(s.bounds.si_speed) << "\n";
  os << "dubins_accel_limit = " << format_double(s.bounds.dubins_accel) << "\n";
  os << "dubins_turn_limit = " << format_double(s.bounds.dubins_turn) << "\n";
  os << "kp = " << format_double(s.gains.kp) << "\n";
  os << "kv = " << format_double(s.gains.kv) << "\n";
  os << "kd = " << format_double(s.gains.kd) << "\n";
  os << "v_max_nom = " << format_double(s.gains.v_max_nom) << "\n";
  os << "ktheta = " << format_double(s.gains.ktheta) << "\n";
  os << "goal_tol = " << format_double(s.gains.goal_tol) << "\n";

  const auto& m = cfg.model;
  os << "\n[model]\n";
  os << "node_feature_dim = " << m.node_feature_dim << "\n";
  os << "phi_hidden = [" << join_ints(m.phi_hidden) << "]\n";
  os << "embed_dim = " << m.embed_dim << "\n";
  os << "att_hidden = [" << join_ints(m.att_hidden) << "]\n";
  os << "gamma_hidden = [" << join_ints(m.gamma_hidden) << "]\n";
  os << "gnn_dim = " << m.gnn_dim << "\n";
  os << "head_hidden = [" << join_ints(m.head_hidden) << "]\n";
  os << "pred_hidden = " << m.pred_hidden << "\n";
  os << "pred_layers = " << m.pred_layers << "\n";
  os << "pred_dropout = " << format_double(m.pred_dropout) << "\n";

  const auto& t = cfg.training;
  os << "\n[training]\n";
  os << "w_safe = " << format_double(t.w_safe) << "\n";
  os << "w_unsafe = " << format_double(t.w_unsafe) << "\n";
  os << "w_der = " << format_double(t.w_der) << "\n";
  os << "w_contr = " << format_double(t.w_contr) << "\n";
  os << "alpha = " << format_double(t.alpha) << "\n";
  os << "eps_margin = " << format_double(t.eps_margin) << "\n";
  os << "phi = " << format_double(t.phi) << "\n";
  os << "delta_train = " << t.delta_train << "\n";
  os << "n_desc = " << t.n_desc << "\n";
  os << "alternate_every = " << t.alternate_every << "\n";
  os << "alternate_by_events = " << (t.alternate_by_events ? "true" : "false") << "\n";
  os << "lr = " << format_double(t.lr) << "\n";
  os << "buffer_capacity = " << t.buffer_capacity << "\n";
  os << "batch_size = " << t.batch_size << "\n";
  os << "eps_min = " << format_double(t.eps_min) << "\n";
  os << "total_steps = " << t.total_steps << "\n";
  os << "episode_deadline = " << t.episode_deadline << "\n";
  os << "checkpoint_every = " << t.checkpoint_every << "\n";
  os << "schedule = \"" << to_string(t.schedule) << "\"\n";
}

inline std::string config_to_string(const Config& cfg) {
  std::ostringstream os;
  write_config(os, cfg);
  return os.str();
}

/// FNV-1a hash of the raw file bytes, reported in the run manifest.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace swarmcbf
