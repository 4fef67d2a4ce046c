#include <doctest.h>

#include <swarmcbf/dynamics.hpp>
#include <swarmcbf/rng.hpp>

#include <cmath>

using namespace swarmcbf;

namespace {

// Independent wrap oracle: shift by full turns until inside (-pi, pi].
double wrap_oracle(double a) {
  while (a > kPi) a -= 2.0 * kPi;
  while (a <= -kPi) a += 2.0 * kPi;
  return a;
}

}  // namespace

TEST_SUITE_BEGIN("dynamics");

TEST_CASE("euler step, single integrator") {
  auto x = RobotState::single_integrator({1.0, 2.0});
  auto next = step(x, {0.4, 0.0}, 0.03);
  CHECK(next.p[0] == doctest::Approx(1.012).epsilon(1e-15));
  CHECK(next.p[1] == 2.0);

  auto still = step(x, {0.0, 0.0}, 0.03);
  CHECK(still.p == x.p);

  // Euler consistency is exact: the update is p + ts*u bit for bit, with no
  // hidden drift terms. From the origin the displacement equals ts*u exactly.
  RngStream rng = RngStream::derive(7);
  for (int i = 0; i < 200; ++i) {
    Vec2 p{rng.uniform(-5, 5), rng.uniform(-5, 5)};
    ControlInput u{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
    double ts = rng.uniform(0.001, 0.2);
    auto y = step(RobotState::single_integrator(p), u, ts);
    CHECK(y.p[0] == p[0] + ts * u[0]);
    CHECK(y.p[1] == p[1] + ts * u[1]);
    auto z = step(RobotState::single_integrator({0.0, 0.0}), u, ts);
    CHECK(z.p[0] - 0.0 == ts * u[0]);
    CHECK(z.p[1] - 0.0 == ts * u[1]);
  }
}

TEST_CASE("euler step, dubins car") {
  auto x = RobotState::dubins({0.0, 0.0}, 2.0, kPi / 2.0);
  auto next = step(x, {0.0, 0.0}, 0.03);
  CHECK(next.p[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(next.p[1] == doctest::Approx(0.06).epsilon(1e-12));
  CHECK(next.v == 2.0);
  CHECK(next.theta == doctest::Approx(kPi / 2.0));

  // Heading stays in (-pi, pi] over long sequences of aggressive turns.
  RngStream rng = RngStream::derive(11);
  auto s = RobotState::dubins({0, 0}, 0.5, 3.0);
  for (int i = 0; i < 2000; ++i) {
    ControlInput u{rng.uniform(-10, 10), rng.uniform(-100, 100)};
    s = step(s, u, 0.03);
    CHECK(s.theta > -kPi);
    CHECK(s.theta <= kPi);
  }
}

TEST_CASE("step errors") {
  auto si = RobotState::single_integrator({0, 0});
  CHECK_THROWS_AS(step(si, {0, 0}, 0.03, DynamicsKind::DubinsCar), std::invalid_argument);
  CHECK_THROWS_AS(step(si, {0, 0}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(step(si, {0, 0}, -0.03), std::invalid_argument);
}

TEST_CASE("saturation") {
  CHECK(saturate({0.5, -0.1}, DynamicsKind::SingleIntegrator) == ControlInput{0.4, -0.1});
  CHECK(saturate({12.0, 150.0}, DynamicsKind::DubinsCar) == ControlInput{10.0, 100.0});
  CHECK(saturate({0.1, 0.1}, DynamicsKind::SingleIntegrator) == ControlInput{0.1, 0.1});
  CHECK_THROWS_AS(saturate({std::nan(""), 0.0}, DynamicsKind::SingleIntegrator),
                  std::invalid_argument);

  // Idempotence.
  RngStream rng = RngStream::derive(3);
  for (int i = 0; i < 200; ++i) {
    ControlInput u{rng.uniform(-30, 30), rng.uniform(-300, 300)};
    for (auto kind : {DynamicsKind::SingleIntegrator, DynamicsKind::DubinsCar}) {
      auto once = saturate(u, kind);
      CHECK(saturate(once, kind) == once);
    }
  }
}

TEST_CASE("state differencing") {
  auto a = RobotState::single_integrator({1.0, 1.0});
  auto b = RobotState::single_integrator({0.4, 1.0});
  auto d = state_diff(a, b);
  CHECK(d.dp[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(d.dp[1] == 0.0);

  auto z = state_diff(a, a);
  CHECK(z.dp == Vec2{0.0, 0.0});
  CHECK(z.dv == 0.0);
  CHECK(z.dtheta == 0.0);

  auto da = RobotState::dubins({0, 0}, 1.0, 3.0);
  auto db = RobotState::dubins({0, 0}, 1.0, -3.0);
  auto dd = state_diff(da, db);
  CHECK(dd.dtheta == doctest::Approx(wrap_oracle(6.0)).epsilon(1e-12));
  CHECK(dd.dtheta == doctest::Approx(-0.2832).epsilon(1e-3));

  CHECK_THROWS_AS(state_diff(a, da), std::invalid_argument);

  RngStream rng = RngStream::derive(5);
  for (int i = 0; i < 500; ++i) {
    double ta = rng.uniform(-8, 8), tb = rng.uniform(-8, 8);
    auto w = state_diff(RobotState::dubins({0, 0}, 0, ta), RobotState::dubins({0, 0}, 0, tb));
    CHECK(w.dtheta == doctest::Approx(wrap_oracle(wrap_angle(ta) - wrap_angle(tb))).epsilon(1e-12));
  }
}

TEST_CASE("nominal controller, single integrator") {
  auto x = RobotState::single_integrator({0, 0});
  CHECK(nominal_control(x, {1.0, 0.0}) == ControlInput{0.4, 0.0});
  auto u = nominal_control(x, {0.005, 0.0});
  CHECK(u[0] == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(u[1] == 0.0);
  CHECK(nominal_control(RobotState::single_integrator({0.7, 0.3}), {0.7, 0.3}) ==
        ControlInput{0.0, 0.0});
  CHECK_THROWS_AS(nominal_control(x, {std::nan(""), 0.0}), std::invalid_argument);
}

TEST_CASE("nominal controller converges from anywhere in the workspace") {
  RngStream rng = RngStream::derive(17);
  NominalGains gains;
  for (int trial = 0; trial < 60; ++trial) {
    Vec2 start{rng.uniform(0, 3), rng.uniform(0, 3)};
    Vec2 goal{rng.uniform(0, 3), rng.uniform(0, 3)};
    auto x = RobotState::single_integrator(start);
    int steps = 0;
    while (distance(x.p, goal) > gains.goal_tol && steps < 500) {
      x = step(x, nominal_control(x, goal), 0.03);
      ++steps;
    }
    CHECK(steps < 500);
  }
}

TEST_CASE("nominal controller, dubins car") {
  // At the goal the deadband returns zero input.
  auto at_goal = RobotState::dubins({1.0, 1.0}, 0.3, 0.0);
  CHECK(nominal_control(at_goal, {1.0, 1.01}) == ControlInput{0.0, 0.0});

  // Heading error steers toward the goal bearing.
  auto x = RobotState::dubins({0, 0}, 0.0, 0.0);
  auto u = nominal_control(x, {0.0, 1.0});  // bearing pi/2
  CHECK(u[1] > 0.0);
  CHECK(u[0] > 0.0);  // accelerate toward the reference speed

  // Closed loop makes progress toward the goal.
  auto s = RobotState::dubins({0.5, 0.5}, 0.0, -2.0);
  Vec2 goal{2.5, 2.0};
  double d0 = distance(s.p, goal);
  for (int i = 0; i < 500; ++i) s = step(s, nominal_control(s, goal), 0.03);
  CHECK(distance(s.p, goal) < 0.25 * d0);
}

TEST_SUITE_END();
