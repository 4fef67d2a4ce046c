#pragma once

// Reverse-mode automatic differentiation over dense real vectors, plus the
// layer primitives built on it: MLPs, a gated recurrent cell, attention-based
// neighbor aggregation, the adaptive-moment optimizer and checkpoint IO.
//
// A Tape records vector-valued nodes in topological order; backward() walks
// them once in reverse. Model parameters live outside the tape in ParamSet
// and are staged onto a tape per evaluation, so parameter snapshots can be
// shared read-only across threads while training mutates a single owner copy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rng.hpp"

namespace swarmcbf {

using Vec = std::vector<double>;

struct Tensor {
  int id = -1;
};

namespace detail {

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  SMul,      // scalar tensor times vector tensor
  Scale,     // constant times vector tensor
  AddConst,  // vector tensor plus constant vector (constant untracked)
  MatVec,
  Relu,
  Tanh,
  Sigmoid,
  Softmax,
  Concat,
  Slice,
  Dot,
  Sum,
  Norm2,
  WrapAngle,
  Dropout,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::SMul: return "smul";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::MatVec: return "matvec";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softmax: return "softmax";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Dot: return "dot";
    case Op::Sum: return "sum";
    case Op::Norm2: return "norm2";
    case Op::WrapAngle: return "wrap_angle";
    case Op::Dropout: return "dropout";
  }
  return "?";
}

}  // namespace detail

/// Named parameter tensor (row-major when rows > 1) with optimizer moments.
struct ParamTensor {
  std::string name;
  int rows = 0;
  int cols = 0;
  Vec value;
  Vec grad;
  Vec m;  // first moment
  Vec v;  // second moment

  int size() const { return rows * cols; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// A flat registry of parameter tensors; one per trainable model.
class ParamSet {
 public:
  int add(std::string name, int rows, int cols) {
    ParamTensor p;
    p.name = std::move(name);
    p.rows = rows;
    p.cols = cols;
    p.value.assign(static_cast<size_t>(rows) * cols, 0.0);
    p.grad.assign(p.value.size(), 0.0);
    p.m.assign(p.value.size(), 0.0);
    p.v.assign(p.value.size(), 0.0);
    tensors_.push_back(std::move(p));
    return static_cast<int>(tensors_.size()) - 1;
  }

  ParamTensor& operator[](int i) { return tensors_.at(i); }
  const ParamTensor& operator[](int i) const { return tensors_.at(i); }
  int count() const { return static_cast<int>(tensors_.size()); }

  std::vector<ParamTensor>& tensors() { return tensors_; }
  const std::vector<ParamTensor>& tensors() const { return tensors_; }

  void zero_grads() {
    for (auto& p : tensors_) p.zero_grad();
  }

  /// Uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)].
  void init_uniform(int index, int fan_in, RngStream& rng) {
    auto& p = tensors_.at(index);
    const double bound = std::sqrt(1.0 / std::max(1, fan_in));
    for (auto& x : p.value) x = rng.uniform(-bound, bound);
  }

  int adam_steps = 0;

 private:
  std::vector<ParamTensor> tensors_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One adaptive-moment update from the gradients accumulated in the set.
/// Moments persist across calls inside the ParamTensor storage.
inline void adam_step(ParamSet& params, const AdamConfig& cfg) {
  params.adam_steps += 1;
  const double t = static_cast<double>(params.adam_steps);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& p : params.tensors()) {
    if (p.grad.size() != p.value.size())
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + p.name);
    for (size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.m[i] / bc1;
      const double vhat = p.v[i] / bc2;
      p.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

class Tape {
 public:
  Tensor input(Vec v, const char* tag = "input") {
    return make_leaf(std::move(v), tag);
  }

  Tensor scalar(double x, const char* tag = "scalar") {
    return make_leaf(Vec{x}, tag);
  }

  /// Stage a parameter tensor onto the tape. Repeated bindings of the same
  /// tensor share one node so gradients accumulate in a single place.
  Tensor bind(ParamTensor& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Tensor{it->second};
    Tensor t = make_leaf(p.value, p.name.c_str());
    bound_.emplace(&p, t.id);
    bound_list_.push_back({&p, t.id});
    return t;
  }

  const Vec& value(Tensor t) const { return nodes_.at(t.id).val; }
  const Vec& grad(Tensor t) const {
    if (!ran_backward_) throw std::logic_error("grad: backward has not run");
    return nodes_.at(t.id).grad;
  }
  int len(Tensor t) const { return static_cast<int>(nodes_.at(t.id).val.size()); }
  size_t size() const { return nodes_.size(); }

  Tensor add(Tensor a, Tensor b) {
    check_same_len(a, b, "add");
    Vec out = nodes_[a.id].val;
    const Vec& vb = nodes_[b.id].val;
    for (size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(detail::Op::Add, std::move(out), {a.id, b.id});
  }

  Tensor sub(Tensor a, Tensor b) {
    check_same_len(a, b, "sub");
    Vec out = nodes_[a.id].val;
    const Vec& vb = nodes_[b.id].val;
    for (size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(detail::Op::Sub, std::move(out), {a.id, b.id});
  }

  Tensor mul(Tensor a, Tensor b) {
    check_same_len(a, b, "mul");
    Vec out = nodes_[a.id].val;
    const Vec& vb = nodes_[b.id].val;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(detail::Op::Mul, std::move(out), {a.id, b.id});
  }

  /// Scalar tensor (length 1) times vector tensor.
  Tensor smul(Tensor s, Tensor x) {
    if (len(s) != 1) throw std::invalid_argument("smul: first operand must be scalar");
    const double sv = nodes_[s.id].val[0];
    Vec out = nodes_[x.id].val;
    for (auto& o : out) o *= sv;
    return push(detail::Op::SMul, std::move(out), {s.id, x.id});
  }

  Tensor scale(Tensor a, double c) {
    Vec out = nodes_[a.id].val;
    for (auto& o : out) o *= c;
    Tensor t = push(detail::Op::Scale, std::move(out), {a.id});
    nodes_[t.id].aux_scalar = c;
    return t;
  }

  /// Add an untracked constant vector (no gradient flows into it).
  Tensor add_const(Tensor a, const Vec& c) {
    if (static_cast<size_t>(len(a)) != c.size())
      throw std::invalid_argument("add_const: length mismatch");
    Vec out = nodes_[a.id].val;
    for (size_t i = 0; i < out.size(); ++i) out[i] += c[i];
    return push(detail::Op::AddConst, std::move(out), {a.id});
  }

  /// y = W x for a row-major (rows x cols) matrix node W.
  Tensor matvec(Tensor W, int rows, int cols, Tensor x) {
    if (len(W) != rows * cols) throw std::invalid_argument("matvec: bad matrix shape");
    if (len(x) != cols) throw std::invalid_argument("matvec: vector length mismatch");
    const Vec& w = nodes_[W.id].val;
    const Vec& vx = nodes_[x.id].val;
    Vec out(static_cast<size_t>(rows), 0.0);
    for (int r = 0; r < rows; ++r) {
      const double* row = w.data() + static_cast<size_t>(r) * cols;
      double acc = 0.0;
      for (int c = 0; c < cols; ++c) acc += row[c] * vx[c];
      out[r] = acc;
    }
    Tensor t = push(detail::Op::MatVec, std::move(out), {W.id, x.id});
    nodes_[t.id].aux_i0 = rows;
    nodes_[t.id].aux_i1 = cols;
    return t;
  }

  Tensor relu(Tensor a) {
    Vec out = nodes_[a.id].val;
    for (auto& o : out) o = o > 0.0 ? o : 0.0;
    return push(detail::Op::Relu, std::move(out), {a.id});
  }

  Tensor tanh_(Tensor a) {
    Vec out = nodes_[a.id].val;
    for (auto& o : out) o = std::tanh(o);
    return push(detail::Op::Tanh, std::move(out), {a.id});
  }

  Tensor sigmoid(Tensor a) {
    Vec out = nodes_[a.id].val;
    for (auto& o : out) o = 1.0 / (1.0 + std::exp(-o));
    return push(detail::Op::Sigmoid, std::move(out), {a.id});
  }

  /// Numerically stable softmax over the whole vector.
  Tensor softmax(Tensor a) {
    Vec out = nodes_[a.id].val;
    double mx = out[0];
    for (double x : out) mx = std::max(mx, x);
    double denom = 0.0;
    for (auto& o : out) {
      o = std::exp(o - mx);
      denom += o;
    }
    for (auto& o : out) o /= denom;
    return push(detail::Op::Softmax, std::move(out), {a.id});
  }

  Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat: empty list");
    Vec out;
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (Tensor p : parts) {
      const Vec& v = nodes_[p.id].val;
      out.insert(out.end(), v.begin(), v.end());
      ids.push_back(p.id);
    }
    return push(detail::Op::Concat, std::move(out), ids);
  }

  Tensor concat(std::initializer_list<Tensor> parts) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()));
  }

  Tensor slice(Tensor a, int offset, int count) {
    if (offset < 0 || count <= 0 || offset + count > len(a))
      throw std::invalid_argument("slice: out of range");
    const Vec& v = nodes_[a.id].val;
    Vec out(v.begin() + offset, v.begin() + offset + count);
    Tensor t = push(detail::Op::Slice, std::move(out), {a.id});
    nodes_[t.id].aux_i0 = offset;
    return t;
  }

  Tensor dot(Tensor a, Tensor b) {
    check_same_len(a, b, "dot");
    const Vec& va = nodes_[a.id].val;
    const Vec& vb = nodes_[b.id].val;
    double acc = 0.0;
    for (size_t i = 0; i < va.size(); ++i) acc += va[i] * vb[i];
    return push(detail::Op::Dot, Vec{acc}, {a.id, b.id});
  }

  Tensor sum(Tensor a) {
    const Vec& v = nodes_[a.id].val;
    double acc = 0.0;
    for (double x : v) acc += x;
    return push(detail::Op::Sum, Vec{acc}, {a.id});
  }

  /// Euclidean norm with a zero-gradient guard at the origin.
  Tensor norm2(Tensor a) {
    const Vec& v = nodes_[a.id].val;
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return push(detail::Op::Norm2, Vec{std::sqrt(acc)}, {a.id});
  }

  /// Elementwise wrap to (-pi, pi]; gradient passes through unchanged.
  Tensor wrap(Tensor a) {
    Vec out = nodes_[a.id].val;
    for (auto& o : out) {
      o = std::fmod(o + 3.14159265358979323846, 2.0 * 3.14159265358979323846);
      if (o <= 0.0) o += 2.0 * 3.14159265358979323846;
      o -= 3.14159265358979323846;
    }
    return push(detail::Op::WrapAngle, std::move(out), {a.id});
  }

  /// Inverted dropout; active only when training with p > 0.
  Tensor dropout(Tensor a, double p, bool training, RngStream& rng) {
    if (!training || p <= 0.0) return a;
    if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
    Vec out = nodes_[a.id].val;
    Vec mask(out.size());
    const double keep = 1.0 - p;
    for (size_t i = 0; i < out.size(); ++i) {
      mask[i] = rng.uniform() < p ? 0.0 : 1.0 / keep;
      out[i] *= mask[i];
    }
    Tensor t = push(detail::Op::Dropout, std::move(out), {a.id});
    nodes_[t.id].aux_vec = std::move(mask);
    return t;
  }

  /// Reverse pass from a scalar output. May run once per tape.
  void backward(Tensor out) {
    if (len(out) != 1) throw std::invalid_argument("backward: output must be scalar");
    if (ran_backward_) throw std::logic_error("backward: repeated backward without reset");
    ran_backward_ = true;
    for (auto& n : nodes_) n.grad.assign(n.val.size(), 0.0);
    nodes_[out.id].grad[0] = 1.0;

    for (int id = out.id; id >= 0; --id) {
      Node& n = nodes_[id];
      bool all_zero = true;
      for (double g : n.grad) {
        if (!std::isfinite(g))
          throw std::runtime_error(std::string("backward: non-finite gradient at op ") +
                                   detail::op_name(n.op) + " tag=" + (n.tag ? n.tag : "") +
                                   " node=" + std::to_string(id));
        if (g != 0.0) all_zero = false;
      }
      if (all_zero) continue;
      propagate(n);
    }

    for (auto& [p, node_id] : bound_list_) {
      const Vec& g = nodes_[node_id].grad;
      for (size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }
  }

  void clear() {
    nodes_.clear();
    bound_.clear();
    bound_list_.clear();
    ran_backward_ = false;
  }

 private:
  struct Node {
    detail::Op op = detail::Op::Leaf;
    Vec val;
    Vec grad;
    std::vector<int> parents;
    double aux_scalar = 0.0;
    int aux_i0 = 0;
    int aux_i1 = 0;
    Vec aux_vec;
    const char* tag = nullptr;
  };

  Tensor make_leaf(Vec v, const char* tag) {
    check_finite(v, "leaf", tag);
    Node n;
    n.op = detail::Op::Leaf;
    n.val = std::move(v);
    n.tag = tag;
    nodes_.push_back(std::move(n));
    return Tensor{static_cast<int>(nodes_.size()) - 1};
  }

  Tensor push(detail::Op op, Vec out, std::vector<int> parents) {
    check_finite(out, detail::op_name(op), nullptr);
    Node n;
    n.op = op;
    n.val = std::move(out);
    n.parents = std::move(parents);
    nodes_.push_back(std::move(n));
    return Tensor{static_cast<int>(nodes_.size()) - 1};
  }

  void check_same_len(Tensor a, Tensor b, const char* what) const {
    if (len(a) != len(b))
      throw std::invalid_argument(std::string(what) + ": length mismatch");
  }

  static void check_finite(const Vec& v, const char* op, const char* tag) {
    for (double x : v) {
      if (!std::isfinite(x))
        throw std::runtime_error(std::string("non-finite value produced by op ") + op +
                                 (tag ? std::string(" tag=") + tag : std::string()));
    }
  }

  void propagate(Node& n) {
    using detail::Op;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add: {
        accumulate(n.parents[0], n.grad);
        accumulate(n.parents[1], n.grad);
        break;
      }
      case Op::Sub: {
        accumulate(n.parents[0], n.grad);
        Vec& gb = nodes_[n.parents[1]].grad;
        for (size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
        break;
      }
      case Op::Mul: {
        const Vec& va = nodes_[n.parents[0]].val;
        const Vec& vb = nodes_[n.parents[1]].val;
        Vec& ga = nodes_[n.parents[0]].grad;
        Vec& gb = nodes_[n.parents[1]].grad;
        for (size_t i = 0; i < n.grad.size(); ++i) {
          ga[i] += n.grad[i] * vb[i];
          gb[i] += n.grad[i] * va[i];
        }
        break;
      }
      case Op::SMul: {
        const double sv = nodes_[n.parents[0]].val[0];
        const Vec& vx = nodes_[n.parents[1]].val;
        Vec& gs = nodes_[n.parents[0]].grad;
        Vec& gx = nodes_[n.parents[1]].grad;
        double acc = 0.0;
        for (size_t i = 0; i < n.grad.size(); ++i) {
          acc += n.grad[i] * vx[i];
          gx[i] += n.grad[i] * sv;
        }
        gs[0] += acc;
        break;
      }
      case Op::Scale: {
        Vec& ga = nodes_[n.parents[0]].grad;
        for (size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * n.aux_scalar;
        break;
      }
      case Op::AddConst:
      case Op::WrapAngle: {
        accumulate(n.parents[0], n.grad);
        break;
      }
      case Op::MatVec: {
        const int rows = n.aux_i0, cols = n.aux_i1;
        const Vec& w = nodes_[n.parents[0]].val;
        const Vec& vx = nodes_[n.parents[1]].val;
        Vec& gw = nodes_[n.parents[0]].grad;
        Vec& gx = nodes_[n.parents[1]].grad;
        for (int r = 0; r < rows; ++r) {
          const double gy = n.grad[r];
          if (gy == 0.0) continue;
          const double* wrow = w.data() + static_cast<size_t>(r) * cols;
          double* gwrow = gw.data() + static_cast<size_t>(r) * cols;
          for (int c = 0; c < cols; ++c) {
            gwrow[c] += gy * vx[c];
            gx[c] += gy * wrow[c];
          }
        }
        break;
      }
      case Op::Relu: {
        const Vec& vin = nodes_[n.parents[0]].val;
        Vec& g = nodes_[n.parents[0]].grad;
        for (size_t i = 0; i < n.grad.size(); ++i)
          if (vin[i] > 0.0) g[i] += n.grad[i];
        break;
      }
      case Op::Tanh: {
        Vec& g = nodes_[n.parents[0]].grad;
        for (size_t i = 0; i < n.grad.size(); ++i)
          g[i] += n.grad[i] * (1.0 - n.val[i] * n.val[i]);
        break;
      }
      case Op::Sigmoid: {
        Vec& g = nodes_[n.parents[0]].grad;
        for (size_t i = 0; i < n.grad.size(); ++i)
          g[i] += n.grad[i] * n.val[i] * (1.0 - n.val[i]);
        break;
      }
      case Op::Softmax: {
        Vec& g = nodes_[n.parents[0]].grad;
        double inner = 0.0;
        for (size_t i = 0; i < n.grad.size(); ++i) inner += n.grad[i] * n.val[i];
        for (size_t i = 0; i < n.grad.size(); ++i)
          g[i] += n.val[i] * (n.grad[i] - inner);
        break;
      }
      case Op::Concat: {
        size_t off = 0;
        for (int pid : n.parents) {
          Vec& g = nodes_[pid].grad;
          for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[off + i];
          off += g.size();
        }
        break;
      }
      case Op::Slice: {
        Vec& g = nodes_[n.parents[0]].grad;
        for (size_t i = 0; i < n.grad.size(); ++i) g[n.aux_i0 + i] += n.grad[i];
        break;
      }
      case Op::Dot: {
        const Vec& va = nodes_[n.parents[0]].val;
        const Vec& vb = nodes_[n.parents[1]].val;
        Vec& ga = nodes_[n.parents[0]].grad;
        Vec& gb = nodes_[n.parents[1]].grad;
        const double gy = n.grad[0];
        for (size_t i = 0; i < va.size(); ++i) {
          ga[i] += gy * vb[i];
          gb[i] += gy * va[i];
        }
        break;
      }
      case Op::Sum: {
        Vec& g = nodes_[n.parents[0]].grad;
        for (auto& gi : g) gi += n.grad[0];
        break;
      }
      case Op::Norm2: {
        const double y = n.val[0];
        if (y > 1e-12) {
          const Vec& vin = nodes_[n.parents[0]].val;
          Vec& g = nodes_[n.parents[0]].grad;
          const double gy = n.grad[0] / y;
          for (size_t i = 0; i < vin.size(); ++i) g[i] += gy * vin[i];
        }
        break;
      }
      case Op::Dropout: {
        Vec& g = nodes_[n.parents[0]].grad;
        for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * n.aux_vec[i];
        break;
      }
    }
  }

  void accumulate(int id, const Vec& g) {
    Vec& dst = nodes_[id].grad;
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  std::vector<Node> nodes_;
  std::unordered_map<const ParamTensor*, int> bound_;
  std::vector<std::pair<ParamTensor*, int>> bound_list_;
  bool ran_backward_ = false;
};

enum class Activation { None, Relu, Tanh };

/// Multi-layer perceptron: affine layers with the hidden activation between
/// them and an optional output activation. An empty hidden list is a single
/// affine map.
struct MlpSpec {
  int in = 0;
  std::vector<int> hidden;
  int out = 0;
  Activation hidden_act = Activation::Relu;
  Activation out_act = Activation::None;
};

struct Mlp {
  MlpSpec spec;
  std::vector<int> weights;  // ParamSet indices, one per layer
  std::vector<int> biases;
};

inline Mlp make_mlp(ParamSet& params, const std::string& prefix, const MlpSpec& spec,
                    RngStream& rng) {
  Mlp mlp;
  mlp.spec = spec;
  std::vector<int> dims;
  dims.push_back(spec.in);
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(spec.out);
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    const int fan_in = dims[l], fan_out = dims[l + 1];
    int w = params.add(prefix + ".w" + std::to_string(l), fan_out, fan_in);
    int b = params.add(prefix + ".b" + std::to_string(l), fan_out, 1);
    params.init_uniform(w, fan_in, rng);
    params.init_uniform(b, fan_in, rng);
    mlp.weights.push_back(w);
    mlp.biases.push_back(b);
  }
  return mlp;
}

inline Tensor apply_activation(Tape& tape, Tensor x, Activation act) {
  switch (act) {
    case Activation::None: return x;
    case Activation::Relu: return tape.relu(x);
    case Activation::Tanh: return tape.tanh_(x);
  }
  return x;
}

inline Tensor mlp_forward(Tape& tape, ParamSet& params, const Mlp& mlp, Tensor x) {
  if (tape.len(x) != mlp.spec.in)
    throw std::invalid_argument("mlp_forward: input length mismatch");
  Tensor h = x;
  const size_t layers = mlp.weights.size();
  for (size_t l = 0; l < layers; ++l) {
    ParamTensor& W = params[mlp.weights[l]];
    ParamTensor& b = params[mlp.biases[l]];
    Tensor y = tape.matvec(tape.bind(W), W.rows, W.cols, h);
    h = tape.add(y, tape.bind(b));
    h = apply_activation(tape, h, l + 1 < layers ? mlp.spec.hidden_act : mlp.spec.out_act);
  }
  return h;
}

/// Attention-weighted aggregation: a score MLP rates each neighbor feature,
/// softmax turns scores into weights, and the output is the weighted sum.
/// Contributions are summed in ascending key order so the result is invariant
/// (bitwise) under any permutation of the input list.
inline Tensor attentional_aggregate(Tape& tape, ParamSet& params, const Mlp& score_mlp,
                                    std::vector<std::pair<int, Tensor>> keyed_features) {
  if (keyed_features.empty())
    throw std::invalid_argument("attentional_aggregate: empty neighbor list");
  std::sort(keyed_features.begin(), keyed_features.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  std::vector<Tensor> scores;
  scores.reserve(keyed_features.size());
  for (const auto& [key, feat] : keyed_features)
    scores.push_back(mlp_forward(tape, params, score_mlp, feat));
  Tensor weights = tape.softmax(tape.concat(std::span<const Tensor>(scores)));

  Tensor acc{-1};
  for (size_t k = 0; k < keyed_features.size(); ++k) {
    Tensor w = tape.slice(weights, static_cast<int>(k), 1);
    Tensor contrib = tape.smul(w, keyed_features[k].second);
    acc = k == 0 ? contrib : tape.add(acc, contrib);
  }
  return acc;
}

/// Stacked gated recurrent cells (GRU). Hidden state starts at zero.
struct GruStack {
  int input = 0;
  int hidden = 0;
  int layers = 1;
  double dropout = 0.0;  // between stacked layers, training only
  // Per layer: wz, uz, bz, wr, ur, br, wh, uh, bh.
  std::vector<std::array<int, 9>> cells;
};

inline GruStack make_gru(ParamSet& params, const std::string& prefix, int input,
                         int hidden, int layers, double dropout, RngStream& rng) {
  if (layers < 1) throw std::invalid_argument("make_gru: layers must be >= 1");
  GruStack gru;
  gru.input = input;
  gru.hidden = hidden;
  gru.layers = layers;
  gru.dropout = dropout;
  for (int l = 0; l < layers; ++l) {
    const int in_dim = l == 0 ? input : hidden;
    const std::string base = prefix + ".l" + std::to_string(l);
    std::array<int, 9> ids{};
    const char* names[3] = {"z", "r", "h"};
    for (int gate = 0; gate < 3; ++gate) {
      int w = params.add(base + ".w" + names[gate], hidden, in_dim);
      int u = params.add(base + ".u" + names[gate], hidden, hidden);
      int b = params.add(base + ".b" + names[gate], hidden, 1);
      params.init_uniform(w, in_dim, rng);
      params.init_uniform(u, hidden, rng);
      params.init_uniform(b, hidden, rng);
      ids[gate * 3 + 0] = w;
      ids[gate * 3 + 1] = u;
      ids[gate * 3 + 2] = b;
    }
    gru.cells.push_back(ids);
  }
  return gru;
}

inline Tensor gru_cell(Tape& tape, ParamSet& params, const std::array<int, 9>& ids,
                       Tensor x, Tensor h) {
  auto affine = [&](int wi, int ui, int bi, Tensor in, Tensor state) {
    ParamTensor& W = params[wi];
    ParamTensor& U = params[ui];
    ParamTensor& b = params[bi];
    Tensor wx = tape.matvec(tape.bind(W), W.rows, W.cols, in);
    Tensor uh = tape.matvec(tape.bind(U), U.rows, U.cols, state);
    return tape.add(tape.add(wx, uh), tape.bind(b));
  };
  Tensor z = tape.sigmoid(affine(ids[0], ids[1], ids[2], x, h));
  Tensor r = tape.sigmoid(affine(ids[3], ids[4], ids[5], x, h));
  Tensor hr = tape.mul(r, h);
  Tensor cand = tape.tanh_(affine(ids[6], ids[7], ids[8], x, hr));
  // h' = (1 - z) * h + z * cand
  Tensor ones = tape.input(Vec(static_cast<size_t>(tape.len(h)), 1.0), "gru_ones");
  Tensor keep = tape.mul(tape.sub(ones, z), h);
  return tape.add(keep, tape.mul(z, cand));
}

/// Left-to-right scan over a nonempty input sequence; returns the top layer's
/// hidden state after the final step.
inline Tensor recurrent_forward(Tape& tape, ParamSet& params, const GruStack& gru,
                                std::span<const Tensor> sequence, bool training = false,
                                RngStream* dropout_rng = nullptr) {
  if (sequence.empty())
    throw std::invalid_argument("recurrent_forward: empty input sequence");
  std::vector<Tensor> states(gru.layers);
  for (int l = 0; l < gru.layers; ++l)
    states[l] = tape.input(Vec(static_cast<size_t>(gru.hidden), 0.0), "gru_h0");
  for (Tensor x : sequence) {
    Tensor in = x;
    for (int l = 0; l < gru.layers; ++l) {
      states[l] = gru_cell(tape, params, gru.cells[l], in, states[l]);
      in = states[l];
      if (training && gru.dropout > 0.0 && l + 1 < gru.layers) {
        if (dropout_rng == nullptr)
          throw std::invalid_argument("recurrent_forward: dropout requires an rng");
        in = tape.dropout(in, gru.dropout, training, *dropout_rng);
      }
    }
  }
  return states[gru.layers - 1];
}

// ---------------------------------------------------------------------------
// Checkpoint IO: a self-describing text document, line oriented. Doubles are
// written with %.17g so values round-trip exactly and identical runs produce
// byte-identical files.

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline void write_param_set(std::ostream& os, const std::string& model,
                            const ParamSet& params) {
  for (const auto& p : params.tensors()) {
    os << "param " << model << "/" << p.name << " " << p.rows << " " << p.cols << "\n";
    for (int i = 0; i < p.size(); ++i) {
      if (i) os << " ";
      os << format_double(p.value[i]);
    }
    os << "\n";
  }
}

struct CheckpointDoc {
  int version = 1;
  std::map<std::string, std::string> meta;                   // sorted keys
  std::map<std::string, std::pair<std::pair<int, int>, Vec>> params;  // name -> (shape, values)
};

inline void write_checkpoint_doc(std::ostream& os, const CheckpointDoc& doc) {
  os << "swarmcbf-checkpoint " << doc.version << "\n";
  for (const auto& [k, v] : doc.meta) os << "meta " << k << " " << v << "\n";
  for (const auto& [name, entry] : doc.params) {
    os << "param " << name << " " << entry.first.first << " " << entry.first.second << "\n";
    const Vec& vals = entry.second;
    for (size_t i = 0; i < vals.size(); ++i) {
      if (i) os << " ";
      os << format_double(vals[i]);
    }
    os << "\n";
  }
  os << "end\n";
}

inline CheckpointDoc read_checkpoint_doc(std::istream& is) {
  CheckpointDoc doc;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("checkpoint: empty file");
  {
    std::istringstream head(line);
    std::string magic;
    head >> magic >> doc.version;
    if (magic != "swarmcbf-checkpoint")
      throw std::runtime_error("checkpoint: bad magic line");
    if (doc.version != 1)
      throw std::runtime_error("checkpoint: unsupported format version");
  }
  while (std::getline(is, line)) {
    if (line == "end") return doc;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      doc.meta[key] = value;
    } else if (word == "param") {
      std::string name;
      int rows = 0, cols = 0;
      ls >> name >> rows >> cols;
      if (name.empty() || rows <= 0 || cols <= 0)
        throw std::runtime_error("checkpoint: malformed param header");
      if (!std::getline(is, line))
        throw std::runtime_error("checkpoint: missing values for " + name);
      std::istringstream vs(line);
      Vec vals(static_cast<size_t>(rows) * cols);
      for (auto& x : vals) {
        if (!(vs >> x)) throw std::runtime_error("checkpoint: short value row for " + name);
      }
      doc.params[name] = {{rows, cols}, std::move(vals)};
    } else if (!word.empty()) {
      throw std::runtime_error("checkpoint: unknown directive " + word);
    }
  }
  throw std::runtime_error("checkpoint: missing end marker");
}

/// Copy values from a checkpoint document into a freshly built ParamSet,
/// validating that every tensor exists with the expected shape.
inline void load_param_set(const CheckpointDoc& doc, const std::string& model,
                           ParamSet& params) {
  for (auto& p : params.tensors()) {
    const std::string key = model + "/" + p.name;
    auto it = doc.params.find(key);
    if (it == doc.params.end())
      throw std::runtime_error("checkpoint: missing parameter " + key);
    const auto& [shape, vals] = it->second;
    if (shape.first != p.rows || shape.second != p.cols)
      throw std::runtime_error("checkpoint: shape mismatch for " + key);
    p.value = vals;
  }
}

}  // namespace swarmcbf
