#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stuffnet/tensor.hpp"

namespace stuffnet {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode graph. Nodes are appended in evaluation order,
// so the node sequence is already a topological order.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  explicit Graph(bool record_grad = true) : record_(record_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) {
    nodes_.push_back(Node{std::move(t), {}, nullptr, false, nullptr, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Leaf whose gradient stays in the node.
  Var leaf(Tensor t) {
    nodes_.push_back(Node{std::move(t), {}, nullptr, record_, nullptr, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Leaf bound to an externally owned parameter; backward accumulates into
  // param.grad(). The parameter must outlive the graph and stay unmodified.
  Var param(Tensor& p) {
    nodes_.push_back(Node{Tensor(), {}, nullptr, record_, &p, &p});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Parameter used read-only (no gradient).
  Var param_const(const Tensor& p) {
    nodes_.push_back(Node{Tensor(), {}, nullptr, false, &p, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  std::span<const double> grad(Var v) const { return node(v).grad; }

  // Gradient buffer of an input, allocated on first use. Only valid during backward.
  std::vector<double>& grad_buffer(int id) {
    Node& n = nodes_.at(static_cast<size_t>(id));
    if (n.grad.empty()) n.grad.assign(value(Var{id}).size(), 0.0);
    return n.grad;
  }

  Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    if (record_)
      for (Var in : inputs) rg = rg || node(in).requires_grad;
    nodes_.push_back(Node{std::move(out), {}, rg ? std::move(fn) : nullptr, rg, nullptr, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void backward(Var loss) {
    if (!record_) throw GraphError("backward on a graph built without gradient recording");
    if (consumed_) throw GraphError("backward called twice on the same graph");
    if (value(loss).size() != 1)
      throw GraphError("backward requires a scalar loss, got dims " + shape_str(value(loss).dims()));
    consumed_ = true;
    if (!node(loss).requires_grad) return;
    grad_buffer(loss.id)[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        n.param->ensure_grad();
        auto pg = n.param->grad();
        for (size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  bool consumed() const { return consumed_; }

  // Non-differentiable decisions (relu signs, pooling argmax) can be folded
  // into a signature so finite-difference probes can detect kink crossings.
  void set_track_decisions(bool on) { track_ = on; }
  bool tracking_decisions() const { return track_; }
  void note_decision(uint64_t h) { signature_ = (signature_ ^ h) * 0x100000001b3ULL + 0x9E37; }
  uint64_t decision_signature() const { return signature_; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    bool requires_grad;
    const Tensor* external;
    Tensor* param;
  };

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size())
      throw GraphError("invalid graph variable " + std::to_string(v.id));
    return nodes_[static_cast<size_t>(v.id)];
  }

  std::deque<Node> nodes_;
  bool record_;
  bool consumed_ = false;
  bool track_ = false;
  uint64_t signature_ = 0xcbf29ce484222325ULL;
};

inline double fd_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

using ScalarGraphFn = std::function<Var(Graph&, Var)>;

/// Max relative error between reverse-mode and central-difference gradients of
/// f at x, taken over every element of x.
inline double finite_difference_check(const ScalarGraphFn& f, const Tensor& x, double h) {
  if (!(h > 0)) throw InvalidArgument("finite_difference_check: step must be positive");
  Graph g;
  Var xv = g.leaf(x);
  Var out = f(g, xv);
  g.backward(out);
  std::vector<double> analytic(x.size(), 0.0);
  auto ga = g.grad(xv);
  if (!ga.empty()) std::copy(ga.begin(), ga.end(), analytic.begin());

  auto eval = [&](const Tensor& at) {
    Graph ng(false);
    return ng.value(f(ng, ng.constant(at)))[0];
  };
  double worst = 0.0;
  Tensor probe = x;
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    worst = std::max(worst, fd_relative_error(analytic[i], (fp - fm) / (2 * h)));
  }
  return worst;
}

}  // namespace stuffnet
