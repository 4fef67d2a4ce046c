#include <doctest.h>

#include <swarmcbf/models.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "grid_oracle.hpp"

using namespace swarmcbf;

namespace {

StateDiff si_diff(double x, double y) {
  StateDiff d;
  d.kind = DynamicsKind::SingleIntegrator;
  d.dp = {x, y};
  return d;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.node_feature_dim = 4;
  cfg.phi_hidden = {8};
  cfg.embed_dim = 8;
  cfg.att_hidden = {6};
  cfg.gamma_hidden = {8};
  cfg.gnn_dim = 8;
  cfg.head_hidden = {8};
  cfg.pred_hidden = 8;
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("models");

TEST_CASE("safety labeling") {
  SafetyLabeler labeler;
  std::vector<StateDiff> a{si_diff(0.5, 0), si_diff(0.09, 0)};
  CHECK(labeler.label(a) == SafetyLabel::Unsafe);
  std::vector<StateDiff> b{si_diff(0.25, 0), si_diff(0.9, 0)};
  CHECK(labeler.label(b) == SafetyLabel::Safe);
  std::vector<StateDiff> c{si_diff(0.15, 0)};
  CHECK(labeler.label(c) == SafetyLabel::Boundary);
  CHECK(labeler.label({}) == SafetyLabel::Safe);
  CHECK_THROWS_AS(SafetyLabeler(0.2, 0.1), std::invalid_argument);

  // The label depends only on the multiset of distances, and adding a
  // neighbor farther than the current minimum cannot change it.
  std::vector<StateDiff> base{si_diff(0.3, 0.1), si_diff(0.0, 0.18)};
  std::vector<StateDiff> permuted{base[1], base[0]};
  CHECK(labeler.label(base) == labeler.label(permuted));
  std::vector<StateDiff> extended = base;
  extended.push_back(si_diff(1.5, -0.7));
  CHECK(labeler.label(base) == labeler.label(extended));
}

TEST_CASE("cbf network output") {
  RngStream rng = RngStream::derive(200);
  CbfModel model = make_cbf_model(tiny_config(), DynamicsKind::SingleIntegrator, rng);

  KeyedDiffs w{{2, si_diff(0.4, -0.1)}, {0, si_diff(-0.2, 0.3)}, {5, si_diff(1.0, 2.0)}};

  SUBCASE("tanh head keeps values strictly inside (-1, 1)") {
    RngStream gen = RngStream::derive(201);
    for (int i = 0; i < 200; ++i) {
      KeyedDiffs big;
      const int n = 1 + static_cast<int>(gen.uniform_index(5));
      for (int j = 0; j < n; ++j)
        big.push_back({j, si_diff(gen.uniform(-50, 50), gen.uniform(-50, 50))});
      const double h = cbf_value(model, big);
      CHECK(h > -1.0);
      CHECK(h < 1.0);
    }
  }

  SUBCASE("permutation invariance and determinism") {
    const double h1 = cbf_value(model, w);
    KeyedDiffs p1{w[2], w[0], w[1]};
    KeyedDiffs p2{w[1], w[2], w[0]};
    CHECK(cbf_value(model, p1) == h1);
    CHECK(cbf_value(model, p2) == h1);
    CHECK(cbf_value(model, w) == h1);
  }

  SUBCASE("empty neighborhood is a hard error") {
    CHECK_THROWS_AS(cbf_value(model, {}), std::invalid_argument);
  }
}

TEST_CASE("corrective controller output") {
  RngStream rng = RngStream::derive(210);
  ControllerModel model = make_controller_model(tiny_config(), DynamicsKind::SingleIntegrator, rng);
  const ControlInput u_ref{0.2, -0.1};

  CHECK(corrective_control(model, {}, u_ref) == ControlInput{0.0, 0.0});

  KeyedDiffs w{{3, si_diff(0.4, -0.1)}, {1, si_diff(-0.2, 0.3)}};
  auto out = corrective_control(model, w, u_ref);
  KeyedDiffs swapped{w[1], w[0]};
  CHECK(corrective_control(model, swapped, u_ref) == out);
  CHECK(corrective_control(model, w, u_ref) == out);
}

TEST_CASE("predictor output") {
  RngStream rng = RngStream::derive(220);
  PredictorModel model = make_predictor_model(tiny_config(), DynamicsKind::SingleIntegrator, 5, rng);

  RelativeDataset d;
  for (int aoi : {4, 2, 1}) {
    RelativeMessage m;
    m.dx = si_diff(0.3 + 0.01 * aoi, -0.2);
    m.du = {0.05, 0.0};
    m.aoi = aoi;
    d.entries.push_back(m);
  }

  auto w = predict(model, d);
  CHECK(w.kind == DynamicsKind::SingleIntegrator);
  CHECK(w.dim() == 2);
  auto w2 = predict(model, d);
  CHECK(w.dp == w2.dp);

  RelativeDataset empty;
  CHECK_THROWS_AS(predict(model, empty), std::invalid_argument);

  RngStream drng = RngStream::derive(221);
  PredictorModel dubins =
      make_predictor_model(tiny_config(), DynamicsKind::DubinsCar, 10, drng);
  RelativeDataset dd;
  RelativeMessage m;
  m.dx.kind = DynamicsKind::DubinsCar;
  m.dx.dp = {0.5, 0.1};
  m.dx.dv = 0.2;
  m.dx.dtheta = -0.4;
  m.aoi = 3;
  dd.entries.push_back(m);
  CHECK(predict(dubins, dd).dim() == 4);
}

TEST_CASE("finite-difference cbf derivative") {
  RngStream rng = RngStream::derive(230);
  CbfModel model = make_cbf_model(tiny_config(), DynamicsKind::SingleIntegrator, rng);
  KeyedDiffs w{{1, si_diff(0.4, 0.0)}, {2, si_diff(-0.3, 0.2)}};

  CHECK(fd_cbf_derivative(model, w, w, 0.03) == 0.0);

  KeyedDiffs w_next{{1, si_diff(0.41, 0.0)}, {2, si_diff(-0.31, 0.2)}};
  const double expected = (cbf_value(model, w_next) - cbf_value(model, w)) / 0.03;
  CHECK(fd_cbf_derivative(model, w, w_next, 0.03) == expected);
  CHECK((0.26 - 0.2) / 0.03 == doctest::Approx(2.0).epsilon(1e-12));

  KeyedDiffs other_ids{{1, si_diff(0.41, 0.0)}, {3, si_diff(-0.31, 0.2)}};
  CHECK_THROWS_AS(fd_cbf_derivative(model, w, other_ids, 0.03), std::invalid_argument);
  KeyedDiffs fewer{{1, si_diff(0.41, 0.0)}};
  CHECK_THROWS_AS(fd_cbf_derivative(model, w, fewer, 0.03), std::invalid_argument);
}

TEST_CASE("forward difference tracks the analytic derivative on smooth paths") {
  // Analytic baseline CBF along a straight-line relative trajectory. The
  // quotient must match the chain-rule derivative to first order in ts.
  RngStream rng = RngStream::derive(240);
  for (int trial = 0; trial < 100; ++trial) {
    Vec2 w0{rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)};
    Vec2 dw{rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
    const double ts = 0.03;
    KeyedDiffs now{{1, si_diff(w0[0], w0[1])}};
    KeyedDiffs next{{1, si_diff(w0[0] + ts * dw[0], w0[1] + ts * dw[1])}};
    auto c0 = analytic_cbf(now, 0.1);
    auto c1 = analytic_cbf(next, 0.1);
    const double fd = (c1.h - c0.h) / ts;
    const double chain = dot(c0.grad, dw);
    const double bound = ts * dot(dw, dw) / norm(w0);  // curvature of ||w||
    CHECK(std::abs(fd - chain) <= bound + 1e-12);
  }
}

TEST_CASE("analytic cbf") {
  KeyedDiffs w{{1, si_diff(0.5, 0)}, {2, si_diff(0.15, 0)}, {3, si_diff(0.9, 0)}};
  auto c = analytic_cbf(w, 0.1);
  CHECK(c.h == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(c.argmin_sender == 2);

  KeyedDiffs boundary{{1, si_diff(0.1, 0)}};
  CHECK(analytic_cbf(boundary, 0.1).h == 0.0);

  KeyedDiffs axis{{1, si_diff(0.3, 0)}};
  auto g = analytic_cbf(axis, 0.1);
  CHECK(g.grad[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(g.grad[1] == 0.0);

  KeyedDiffs coincident{{1, si_diff(0, 0)}};
  CHECK_THROWS_AS(analytic_cbf(coincident, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(analytic_cbf({}, 0.1), std::invalid_argument);

  // Ties break toward the lowest sender id.
  KeyedDiffs tie{{4, si_diff(0.0, 0.2)}, {2, si_diff(0.2, 0.0)}};
  CHECK(analytic_cbf(tie, 0.1).argmin_sender == 2);
}

TEST_CASE("min-norm filter") {
  const DynamicsKind si = DynamicsKind::SingleIntegrator;

  SUBCASE("inactive constraint returns the nominal input") {
    auto r = min_norm_filter({0.1, 0.2}, 0.5, {1.0, 0.0}, 1.0, si);
    CHECK(r.u == ControlInput{0.1, 0.2});
    CHECK_FALSE(r.saturation_broke_constraint);
  }

  SUBCASE("matches the grid oracle on the pinned instance") {
    // a'u >= 0.2 from u_ref = 0: the projection lands exactly on a grid node.
    auto r = min_norm_filter({0.0, 0.0}, -0.2, {1.0, 0.0}, 1.0, si);
    CHECK(r.u[0] == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(r.u[1] == 0.0);
    auto g = testing::grid_min_norm({0.0, 0.0}, 0.2, {1.0, 0.0}, 0.4);
    REQUIRE(g.feasible_found);
    CHECK(std::abs(g.u[0] - r.u[0]) <= 1e-12);
    CHECK(std::abs(g.u[1] - r.u[1]) <= 1e-12);
  }

  SUBCASE("random active instances agree with the grid objective") {
    RngStream rng = RngStream::derive(250);
    int tested = 0;
    while (tested < 15) {
      ControlInput u_ref{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
      const double angle = rng.uniform(0, 2 * kPi);
      Vec2 a{std::cos(angle), std::sin(angle)};
      const double h = rng.uniform(-0.2, 0.3);
      const double needed = -1.0 * h;
      if (dot(a, u_ref) >= needed) continue;  // want the projection active
      auto r = min_norm_filter(u_ref, h, a, 1.0, si);
      if (r.saturation_broke_constraint) continue;
      if (std::abs(r.u[0]) > 0.39 || std::abs(r.u[1]) > 0.39) continue;  // interior only
      ++tested;
      CHECK(dot(a, r.u) >= needed - 1e-9);
      auto g = testing::grid_min_norm(u_ref, needed, a, 0.4);
      REQUIRE(g.feasible_found);
      const double cf_obj = norm(r.u - u_ref);
      CHECK(cf_obj <= g.objective + 1e-12);  // closed form is never beaten
      CHECK(std::abs(cf_obj - g.objective) <= 1e-3);
    }
  }

  SUBCASE("zero gradient is a hard error") {
    CHECK_THROWS_AS(min_norm_filter({0, 0}, 0.1, {0, 0}, 1.0, si), std::invalid_argument);
  }

  SUBCASE("saturation flag raises when the box cuts the projection") {
    auto r = min_norm_filter({0.4, 0.0}, -0.5, {1.0, 0.0}, 1.0, si);
    CHECK(r.u[0] == 0.4);
    CHECK(r.saturation_broke_constraint);
  }
}

TEST_CASE("analytic baseline keeps a head-on pair forward invariant") {
  const double ts = 0.03, d_coll = 0.1, d_safe = 0.2;
  auto x1 = RobotState::single_integrator({1.0, 1.5});
  auto x2 = RobotState::single_integrator({2.0, 1.5});
  const Vec2 g1{2.0, 1.5}, g2{1.0, 1.5};
  REQUIRE(distance(x1.p, x2.p) >= d_safe);
  double min_dist = distance(x1.p, x2.p);
  for (int t = 0; t < 500; ++t) {
    auto filt = [&](const RobotState& self, const RobotState& other, const Vec2& goal) {
      KeyedDiffs w{{0, state_diff(self, other)}};
      auto c = analytic_cbf(w, d_coll);
      return min_norm_filter(nominal_control(self, goal), c.h, c.grad, 1.0, self.kind).u;
    };
    auto u1 = filt(x1, x2, g1);
    auto u2 = filt(x2, x1, g2);
    x1 = step(x1, u1, ts);
    x2 = step(x2, u2, ts);
    min_dist = std::min(min_dist, distance(x1.p, x2.p));
  }
  CHECK(min_dist > d_coll);
}

TEST_CASE("heuristic switching control") {
  RngStream rng = RngStream::derive(260);
  ModelConfig cfg = tiny_config();
  CbfModel cbf = make_cbf_model(cfg, DynamicsKind::SingleIntegrator, rng);
  ControllerModel ctrl = make_controller_model(cfg, DynamicsKind::SingleIntegrator, rng);
  PredictorModel pred = make_predictor_model(cfg, DynamicsKind::SingleIntegrator, 5, rng);

  auto random_datasets = [&rng](int n) {
    std::vector<std::pair<int, RelativeDataset>> out;
    for (int j = 0; j < n; ++j) {
      RelativeDataset d;
      const int entries = 1 + static_cast<int>(rng.uniform_index(4));
      for (int k = 0; k < entries; ++k) {
        RelativeMessage m;
        m.dx = si_diff(rng.uniform(-1, 1), rng.uniform(-1, 1));
        m.du = {rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
        m.aoi = static_cast<int>(rng.uniform_index(5));
        d.entries.push_back(m);
      }
      std::sort(d.entries.begin(), d.entries.end(),
                [](const auto& a, const auto& b) { return a.aoi > b.aoi; });
      out.push_back({j, std::move(d)});
    }
    return out;
  };

  // Negating the CBF head flips the sign of h, hence of the whole switching
  // margin, so each model and its twin exercise opposite branches.
  auto negate_head = [](CbfModel m) {
    for (int idx : {m.head.weights.back(), m.head.biases.back()})
      for (auto& x : m.params[idx].value) x = -x;
    return m;
  };

  const double eps = 0.02, alpha = 1.0, ts = 0.03;
  int zero_branch = 0, corr_branch = 0;
  CbfModel twin = negate_head(cbf);
  for (int trial = 0; trial < 100; ++trial) {
    if (trial % 10 == 0) {  // fresh model draw
      cbf = make_cbf_model(cfg, DynamicsKind::SingleIntegrator, rng);
      ctrl = make_controller_model(cfg, DynamicsKind::SingleIntegrator, rng);
      pred = make_predictor_model(cfg, DynamicsKind::SingleIntegrator, 5, rng);
      twin = negate_head(cbf);
    }
    CbfModel& active = trial % 2 ? twin : cbf;
    auto ds = random_datasets(1 + static_cast<int>(rng.uniform_index(3)));
    ControlInput u_ref{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
    const double phi = rng.uniform(0.0, 3.0);

    // Independent evaluation of the switching condition.
    KeyedDiffs w_now, w_next;
    for (const auto& [j, d] : ds) {
      w_now.push_back({j, predict(pred, d)});
      w_next.push_back({j, predict(pred, d, 1)});
    }
    const double h = cbf_value(active, w_now);
    const double hdot = (cbf_value(active, w_next) - h) / ts;
    const bool expect_zero = hdot + alpha * h >= phi * eps;

    auto u = heuristic_control(active, ctrl, pred, ds, u_ref, phi, eps, alpha, ts);
    if (expect_zero) {
      ++zero_branch;
      CHECK(u == ControlInput{0.0, 0.0});
    } else {
      ++corr_branch;
      CHECK(u == corrective_control(ctrl, w_now, u_ref));
    }

    // A huge phi never lets the condition hold.
    auto aggressive = heuristic_control(active, ctrl, pred, ds, u_ref, 1e6, eps, alpha, ts);
    CHECK(aggressive == corrective_control(ctrl, w_now, u_ref));
  }
  CHECK(zero_branch > 0);
  CHECK(corr_branch > 0);

  CHECK(heuristic_control(cbf, ctrl, pred, {}, {0.1, 0.1}, 1.0, eps, alpha, ts) ==
        ControlInput{0.0, 0.0});
}

TEST_CASE("model checkpoint round trip") {
  ModelConfig cfg = tiny_config();
  Models m = make_models(cfg, DynamicsKind::SingleIntegrator, 5, 99);
  std::stringstream ss;
  save_models(ss, m, 1234);

  Models loaded = load_models(ss, cfg, DynamicsKind::SingleIntegrator, 5);
  KeyedDiffs w{{1, si_diff(0.3, -0.2)}};
  CHECK(cbf_value(loaded.cbf, w) == cbf_value(m.cbf, w));
  CHECK(corrective_control(loaded.ctrl, w, {0.1, 0.0}) ==
        corrective_control(m.ctrl, w, {0.1, 0.0}));

  std::stringstream ss2;
  save_models(ss2, m, 1234);
  CHECK_THROWS(load_models(ss2, cfg, DynamicsKind::DubinsCar, 10));
  std::stringstream ss3;
  save_models(ss3, m, 1234);
  ModelConfig other = cfg;
  other.gnn_dim = 16;
  CHECK_THROWS(load_models(ss3, other, DynamicsKind::SingleIntegrator, 5));
}

TEST_SUITE_END();
