#include "misty/nn.hpp"

#include <cmath>

namespace misty {

MlpStack::MlpStack(const std::vector<Index>& dims, const std::vector<bool>& pre_norm,
                   const std::vector<bool>& gelu_act, Rng& rng) {
  if (dims.size() < 2) throw InputError("MlpStack: need at least one layer");
  std::size_t n = dims.size() - 1;
  if (pre_norm.size() != n || gelu_act.size() != n)
    throw InputError("MlpStack: flag count mismatch");
  layers_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Layer l;
    l.weight = make_linear_weight(dims[i], dims[i + 1], rng);
    l.bias = make_zeros(1, dims[i + 1]);
    l.pre_norm = pre_norm[i];
    l.gelu_act = gelu_act[i];
    if (l.pre_norm) {
      l.ln_gamma = make_ones_row(dims[i]);
      l.ln_beta = make_zeros(1, dims[i]);
    }
    layers_.push_back(std::move(l));
  }
}

Node MlpStack::forward(Tape& t, Node x) const {
  for (auto& l : layers_) {
    if (l.pre_norm) x = layer_norm(t, x, l.ln_gamma, l.ln_beta);
    x = linear(t, x, l.weight, l.bias);
    if (l.gelu_act) x = gelu(t, x);
  }
  return x;
}

Node MlpStack::forward_frozen(Tape& t, Node x) const {
  for (auto& l : layers_) {
    if (l.pre_norm)
      x = layer_norm_nodes(t, x, t.frozen(l.ln_gamma), t.frozen(l.ln_beta));
    x = linear_frozen(t, x, l.weight, l.bias);
    if (l.gelu_act) x = gelu(t, x);
  }
  return x;
}

Matrix MlpStack::forward_plain(Matrix x) const {
  for (const auto& l : layers_) {
    if (l.pre_norm)
      x = layer_norm_forward(x, l.ln_gamma.value.row(0), l.ln_beta.value.row(0));
    x = ((x * l.weight.value).rowwise() + l.bias.value.row(0)).eval();
    if (l.gelu_act) x = gelu_forward(x);
  }
  return x;
}

void MlpStack::collect(const std::string& prefix, NamedParams& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    std::string base = prefix + "/l" + std::to_string(i);
    out.emplace_back(base + "/w", &l.weight);
    out.emplace_back(base + "/b", &l.bias);
    if (l.pre_norm) {
      out.emplace_back(base + "/ln_g", &l.ln_gamma);
      out.emplace_back(base + "/ln_b", &l.ln_beta);
    }
  }
}

void MlpStack::zero_output() {
  if (layers_.empty()) return;
  layers_.back().weight.value.setZero();
  layers_.back().bias.value.setZero();
}

Param make_linear_weight(Index in, Index out, Rng& rng, double gain) {
  double bound = gain * std::sqrt(6.0 / double(in + out));
  Matrix w(in, out);
  for (Index i = 0; i < in; ++i)
    for (Index j = 0; j < out; ++j) w(i, j) = rng.uniform(-bound, bound);
  return Param(std::move(w));
}

Param make_zeros(Index rows, Index cols) { return Param(Matrix::Zero(rows, cols)); }

Param make_ones_row(Index cols) { return Param(Matrix::Ones(1, cols)); }

void SgdMomentum::step(const NamedParams& params) {
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (auto& [name, p] : params)
      velocity_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  double sq = 0.0;
  for (auto& [name, p] : params) sq += p->grad.squaredNorm();
  last_grad_norm_ = std::sqrt(sq);
  double s = 1.0;
  if (clip_norm_ > 0.0 && last_grad_norm_ > clip_norm_) s = clip_norm_ / last_grad_norm_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param* p = params[i].second;
    velocity_[i] = momentum_ * velocity_[i] + s * p->grad;
    p->value -= lr_ * velocity_[i];
  }
}

void SgdMomentum::zero_grad(const NamedParams& params) {
  for (auto& [name, p] : params) p->zero_grad();
}

}  // namespace misty
