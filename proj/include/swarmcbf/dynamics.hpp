#pragma once

// Robot kinematic models: single integrator and Dubins car, with forward-Euler
// stepping, box input saturation, state differencing and the built-in nominal
// goal-reaching controllers.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace swarmcbf {

using Vec2 = std::array<double, 2>;

inline Vec2 operator+(const Vec2& a, const Vec2& b) { return {a[0] + b[0], a[1] + b[1]}; }
inline Vec2 operator-(const Vec2& a, const Vec2& b) { return {a[0] - b[0], a[1] - b[1]}; }
inline Vec2 operator*(double s, const Vec2& a) { return {s * a[0], s * a[1]}; }
inline double dot(const Vec2& a, const Vec2& b) { return a[0] * b[0] + a[1] * b[1]; }
inline double norm(const Vec2& a) { return std::sqrt(dot(a, a)); }
inline double distance(const Vec2& a, const Vec2& b) { return norm(a - b); }

constexpr double kPi = 3.14159265358979323846;

/// Wrap an angle to the principal interval (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

enum class DynamicsKind { SingleIntegrator, DubinsCar };

inline std::string to_string(DynamicsKind k) {
  return k == DynamicsKind::SingleIntegrator ? "single_integrator" : "dubins";
}

inline DynamicsKind dynamics_kind_from_string(const std::string& s) {
  if (s == "single_integrator") return DynamicsKind::SingleIntegrator;
  if (s == "dubins") return DynamicsKind::DubinsCar;
  throw std::invalid_argument("unknown dynamics kind: " + s);
}

inline int state_dim(DynamicsKind k) {
  return k == DynamicsKind::SingleIntegrator ? 2 : 4;
}

/// Kinematic state. Position in meters; for the Dubins car additionally speed
/// [m/s] and heading [rad], heading always normalized to (-pi, pi].
struct RobotState {
  DynamicsKind kind = DynamicsKind::SingleIntegrator;
  Vec2 p{0.0, 0.0};
  double v = 0.0;
  double theta = 0.0;

  static RobotState single_integrator(Vec2 p) {
    return RobotState{DynamicsKind::SingleIntegrator, p, 0.0, 0.0};
  }
  static RobotState dubins(Vec2 p, double v, double theta) {
    return RobotState{DynamicsKind::DubinsCar, p, v, wrap_angle(theta)};
  }

  bool finite() const {
    return std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(v) &&
           std::isfinite(theta);
  }
};

/// Control input. Single integrator: velocity command [m/s] per axis.
/// Dubins car: (acceleration [m/s^2], angular rate [rad/s]).
using ControlInput = Vec2;

/// Per-model input boxes. Defaults follow the simulated platforms: speed
/// limit 0.4 per axis, acceleration limit 10, angular rate limit 100.
struct InputBounds {
  double si_speed = 0.4;
  double dubins_accel = 10.0;
  double dubins_turn = 100.0;

  Vec2 box(DynamicsKind k) const {
    return k == DynamicsKind::SingleIntegrator ? Vec2{si_speed, si_speed}
                                               : Vec2{dubins_accel, dubins_turn};
  }
};

inline ControlInput saturate(const ControlInput& u, DynamicsKind kind,
                             const InputBounds& bounds = {}) {
  if (std::isnan(u[0]) || std::isnan(u[1]))
    throw std::invalid_argument("saturate: NaN control input");
  const Vec2 box = bounds.box(kind);
  auto clamp = [](double x, double b) { return x < -b ? -b : (x > b ? b : x); };
  return {clamp(u[0], box[0]), clamp(u[1], box[1])};
}

/// Componentwise difference of two states of the same kind; Dubins heading
/// difference is wrapped back to (-pi, pi].
struct StateDiff {
  DynamicsKind kind = DynamicsKind::SingleIntegrator;
  Vec2 dp{0.0, 0.0};
  double dv = 0.0;
  double dtheta = 0.0;

  int dim() const { return state_dim(kind); }

  /// Flat vector form (dp) or (dp, dv, dtheta), used as network edge feature.
  std::array<double, 4> flat() const { return {dp[0], dp[1], dv, dtheta}; }

  double norm() const {
    double s = dp[0] * dp[0] + dp[1] * dp[1];
    if (kind == DynamicsKind::DubinsCar) s += dv * dv + dtheta * dtheta;
    return std::sqrt(s);
  }
};

inline StateDiff state_diff(const RobotState& a, const RobotState& b) {
  if (a.kind != b.kind)
    throw std::invalid_argument("state_diff: dynamics variant mismatch");
  StateDiff d;
  d.kind = a.kind;
  d.dp = a.p - b.p;
  if (a.kind == DynamicsKind::DubinsCar) {
    d.dv = a.v - b.v;
    d.dtheta = wrap_angle(a.theta - b.theta);
  }
  return d;
}

/// One forward-Euler step. Caller saturates the input; ts must be positive.
inline RobotState step(const RobotState& x, const ControlInput& u, double ts,
                       DynamicsKind model) {
  if (x.kind != model)
    throw std::invalid_argument("step: state does not match declared dynamics model");
  if (!(ts > 0.0)) throw std::invalid_argument("step: ts must be > 0");
  RobotState next = x;
  if (model == DynamicsKind::SingleIntegrator) {
    next.p = x.p + ts * u;
  } else {
    next.p = x.p + ts * Vec2{x.v * std::cos(x.theta), x.v * std::sin(x.theta)};
    next.v = x.v + ts * u[0];
    next.theta = wrap_angle(x.theta + ts * u[1]);
  }
  return next;
}

inline RobotState step(const RobotState& x, const ControlInput& u, double ts) {
  return step(x, u, ts, x.kind);
}

/// Gains of the nominal goal-reaching controllers.
struct NominalGains {
  double kp = 4.0;        // single integrator proportional gain
  double kv = 5.0;        // Dubins speed gain
  double kd = 2.0;        // Dubins reference-speed-per-distance gain
  double v_max_nom = 1.0; // Dubins nominal cruise speed cap
  double ktheta = 10.0;   // Dubins heading gain
  double goal_tol = 0.02; // goal tolerance, also the Dubins deadband radius
};

/// Safety-unaware controller driving the robot straight to its goal.
/// Single integrator: saturated proportional law (exactly zero at the goal).
/// Dubins car: heading alignment toward the goal bearing plus speed tracking
/// of a distance-scaled reference; returns zero inside the goal deadband.
inline ControlInput nominal_control(const RobotState& x, const Vec2& goal,
                                    const NominalGains& gains = {},
                                    const InputBounds& bounds = {}) {
  if (!std::isfinite(goal[0]) || !std::isfinite(goal[1]))
    throw std::invalid_argument("nominal_control: goal must be finite");
  if (x.kind == DynamicsKind::SingleIntegrator) {
    return saturate(gains.kp * (goal - x.p), x.kind, bounds);
  }
  const double d = distance(goal, x.p);
  if (d <= gains.goal_tol) return {0.0, 0.0};
  const double bearing = std::atan2(goal[1] - x.p[1], goal[0] - x.p[0]);
  const double v_ref = std::min(gains.v_max_nom, gains.kd * d);
  const ControlInput u{gains.kv * (v_ref - x.v),
                       gains.ktheta * wrap_angle(bearing - x.theta)};
  return saturate(u, x.kind, bounds);
}

}  // namespace swarmcbf
