#pragma once

#include <string>
#include <utility>
#include <vector>

#include "misty/autograd.hpp"

namespace misty {

using NamedParams = std::vector<std::pair<std::string, Param*>>;

// Ordered dense stack: each layer is (optional pre-LayerNorm) -> linear
// -> (optional GELU). Residual wiring is composed by the owning module.
class MlpStack {
 public:
  struct Layer {
    Param weight;  // in x out
    Param bias;    // 1 x out
    Param ln_gamma, ln_beta;
    bool pre_norm = false;
    bool gelu_act = false;
  };

  MlpStack() = default;

  // dims = {in, h1, ..., out}; norm/act flags apply per layer.
  MlpStack(const std::vector<Index>& dims, const std::vector<bool>& pre_norm,
           const std::vector<bool>& gelu_act, Rng& rng);

  Node forward(Tape& t, Node x) const;
  Node forward_frozen(Tape& t, Node x) const;
  Matrix forward_plain(Matrix x) const;  // no tape, same arithmetic

  Index in_dim() const { return layers_.empty() ? 0 : layers_.front().weight.value.rows(); }
  Index out_dim() const { return layers_.empty() ? 0 : layers_.back().weight.value.cols(); }

  void collect(const std::string& prefix, NamedParams& out);

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  // Zeroes the final linear map so the stack's output is identically zero.
  void zero_output();

 private:
  // mutable access in forward for param leasing
  mutable std::vector<Layer> layers_;
};

// Xavier-uniform weight, zero bias.
Param make_linear_weight(Index in, Index out, Rng& rng, double gain = 1.0);
Param make_zeros(Index rows, Index cols);
Param make_ones_row(Index cols);

// Gradient descent with momentum and global gradient-norm clipping.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum, double clip_norm)
      : lr_(lr), momentum_(momentum), clip_norm_(clip_norm) {}

  void step(const NamedParams& params);
  void zero_grad(const NamedParams& params);
  double last_grad_norm() const { return last_grad_norm_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, momentum_, clip_norm_;
  double last_grad_norm_ = 0.0;
  std::vector<Matrix> velocity_;
};

}  // namespace misty
