#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "misty/types.hpp"

namespace misty {

// Trainable tensor: value plus accumulated gradient of identical shape.
struct Param {
  Matrix value;
  Matrix grad;

  Param() = default;
  explicit Param(Matrix v) : value(std::move(v)) { grad = Matrix::Zero(value.rows(), value.cols()); }

  void zero_grad() { grad.setZero(); }
  Index size() const { return value.size(); }
};

// Handle into a Tape.
struct Node {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense matrices. Forward ops append nodes;
// backward() runs the recorded closures in reverse order and accumulates
// leaf gradients into their Param sinks.
//
// With recording disabled the same op functions run as plain Eigen forward
// passes (no closures, no parent bookkeeping), which is the inference path.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  Node input(Matrix v, bool requires_grad = false) {
    return emit(std::move(v), {}, nullptr, nullptr, requires_grad);
  }

  Node constant(Matrix v) { return emit(std::move(v), {}, nullptr, nullptr, false); }

  // Leased parameter leaf; backward() adds into p.grad.
  Node param(Param& p) { return emit(p.value, {}, nullptr, &p, true); }

  // Parameter used as a constant: values flow, gradient does not reach it.
  // Gradient still flows *through* ops that consume it to their other parents.
  Node frozen(const Param& p) { return emit(p.value, {}, nullptr, nullptr, false); }

  const Matrix& value(Node n) const { return nodes_[n.id].value; }

  // Valid after backward() for nodes that needed a gradient.
  const Matrix& grad(Node n) const { return nodes_[n.id].grad; }

  bool needs_grad(Node n) const { return nodes_[n.id].needs_grad; }

  Matrix& grad_ref(Node n) { return nodes_[n.id].grad; }

  // Op authors: record a node. `back` pulls grad(out) into the parents.
  Node emit(Matrix value, std::vector<int> parents, std::function<void(Tape&, Node)> back,
            Param* sink, bool requires_grad) {
    Entry e;
    e.value = std::move(value);
    e.sink = sink;
    if (recording_) {
      e.needs_grad = requires_grad || sink != nullptr;
      for (int pid : parents)
        if (nodes_[pid].needs_grad) e.needs_grad = true;
      if (e.needs_grad) {
        e.parents = std::move(parents);
        e.backward = std::move(back);
      }
    }
    nodes_.push_back(std::move(e));
    return Node{static_cast<int>(nodes_.size()) - 1};
  }

  // Reverse sweep from a 1x1 loss node. Leaf Param sinks receive accumulation.
  void backward(Node loss) {
    if (!recording_) throw StateError("backward on a non-recording tape");
    const Matrix& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1) throw DimensionError("backward: loss must be 1x1");
    if (!std::isfinite(lv(0, 0))) throw TrainingError("backward: non-finite loss");
    for (auto& e : nodes_)
      if (e.needs_grad) e.grad = Matrix::Zero(e.value.rows(), e.value.cols());
    if (!nodes_[loss.id].needs_grad) return;  // nothing trainable upstream
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Entry& e = nodes_[i];
      if (e.needs_grad && e.backward) e.backward(*this, Node{i});
    }
    for (auto& e : nodes_)
      if (e.sink && e.needs_grad) e.sink->grad += e.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void reset() { nodes_.clear(); }

 private:
  struct Entry {
    Matrix value;
    Matrix grad;
    std::vector<int> parents;
    std::function<void(Tape&, Node)> backward;
    Param* sink = nullptr;
    bool needs_grad = false;
  };
  std::vector<Entry> nodes_;
  bool recording_;
};

// ---------------------------------------------------------------------------
// Ops. Each returns a new node; shapes are checked where a mismatch would
// otherwise produce a silent Eigen assert.

Node add(Tape& t, Node a, Node b);
Node sub(Tape& t, Node a, Node b);
Node matmul(Tape& t, Node a, Node b);
Node transpose(Tape& t, Node a);
Node hadamard(Tape& t, Node a, Node b);
Node scale(Tape& t, Node a, double s);
Node add_scalar(Tape& t, Node a, double c);
Node square(Tape& t, Node a);
Node exp_elem(Tape& t, Node a);
Node clamp(Tape& t, Node a, double lo, double hi);

// Broadcast a 1xN row vector across the rows of x.
Node add_rowvec(Tape& t, Node x, Node v);
Node mul_rowvec(Tape& t, Node x, Node v);

Node concat_rows(Tape& t, const std::vector<Node>& parts);
Node slice_rows(Tape& t, Node a, Index first, Index count);
Node concat_cols(Tape& t, const std::vector<Node>& parts);
Node slice_cols(Tape& t, Node a, Index first, Index count);

Node mean_rows(Tape& t, Node a);  // TxD -> 1xD
Node sum_all(Tape& t, Node a);    // -> 1x1
Node gelu(Tape& t, Node a);
Node softmax_rows(Tape& t, Node a);
Node layer_norm(Tape& t, Node x, Param& gamma, Param& beta, double eps = 1e-6);
Node layer_norm_nodes(Tape& t, Node x, Node gamma, Node beta, double eps = 1e-6);

// y = x * W + b (b broadcast per row).
Node linear(Tape& t, Node x, Param& w, Param& b);
Node linear_frozen(Tape& t, Node x, const Param& w, const Param& b);

Node mse(Tape& t, Node a, Node b);                                  // mean over entries
Node cross_entropy_logits(Tape& t, Node logits, const std::vector<int>& labels);

// sum of squared entries scaled by `s` (drift loss kernel: s = 1/K).
Node sum_sq_scaled(Tape& t, Node a, double s);

// Plain forward helpers shared by tape ops and oracle-free call sites.
Matrix gelu_forward(const Matrix& x);
Matrix softmax_rows_forward(const Matrix& x);
Matrix layer_norm_forward(const Matrix& x, const RowVector& gamma, const RowVector& beta,
                          double eps = 1e-6);

// Max relative error between analytic and central-difference gradients.
// Entries whose absolute difference is under 1e-8 count as exact; that is
// the noise floor of the central difference for structurally zero
// gradients. `f(with_grad)` must return the loss and, when with_grad,
// leave fresh gradients in `params` (grad_check zeroes them first).
double grad_check(const std::function<double(bool)>& f, const std::vector<Param*>& params,
                  double eps);

}  // namespace misty
