#pragma once

// Finite-difference gradient oracle used by the unit and acceptance suites.
// It only drives forward evaluations of the function under test, so it stays
// independent of the backward implementation it checks.

#include <swarmcbf/autodiff.hpp>

#include <cmath>
#include <functional>
#include <vector>

namespace swarmcbf::testing {

struct FdProbe {
  Tensor output;                    // scalar
  std::vector<Tensor> input_nodes;  // tape nodes created from `inputs`
};

// `build` assembles the computation on a fresh tape, reading parameter values
// from `params` and input values from `inputs` (so this harness can perturb
// them in place between evaluations).
using BuildFn = std::function<FdProbe(Tape&)>;

inline double relative_error(double analytic, double fd) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(fd)});
  return std::abs(analytic - fd) / denom;
}

inline double max_fd_rel_error(ParamSet& params, std::vector<Vec*> inputs,
                               const BuildFn& build, double h = 1e-5) {
  // Analytic gradients.
  params.zero_grads();
  Tape tape;
  FdProbe probe = build(tape);
  tape.backward(probe.output);
  std::vector<Vec> input_grads;
  for (Tensor t : probe.input_nodes) input_grads.push_back(tape.grad(t));

  auto eval = [&]() {
    Tape fresh;
    return fresh.value(build(fresh).output)[0];
  };

  double worst = 0.0;
  auto probe_storage = [&](Vec& storage, const Vec& analytic) {
    for (size_t i = 0; i < storage.size(); ++i) {
      const double saved = storage[i];
      storage[i] = saved + h;
      const double fp = eval();
      storage[i] = saved - h;
      const double fm = eval();
      storage[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, relative_error(analytic[i], fd));
    }
  };

  for (auto& p : params.tensors()) probe_storage(p.value, p.grad);
  for (size_t k = 0; k < inputs.size(); ++k) probe_storage(*inputs[k], input_grads[k]);
  return worst;
}

}  // namespace swarmcbf::testing
