#pragma once

#include <vector>

#include "misty/config.hpp"
#include "misty/scene_encoder.hpp"

namespace misty {

// Frozen linear trajectory basis: decode(y) = W y + mu, flattened as
// [x0, y0, x1, y1, ...] of length 2H.
struct PcaHead {
  Matrix w;      // 2H x d_pca, orthonormal columns
  RowVector mu;  // 2H
  bool fitted = false;

  Index d() const { return w.cols(); }
  Index flat_dim() const { return w.rows(); }
};

RowVector flatten_traj(const Trajectory& t);
Trajectory unflatten_traj(const RowVector& flat);

// Batched: y is K x d_pca, result K x 2H. Linear in y.
Matrix pca_decode(const Matrix& y, const PcaHead& head);
Node pca_decode_node(Tape& t, Node y, const PcaHead& head);
Trajectory pca_decode_traj(const RowVector& y, const PcaHead& head);

// Sinusoidal embedding of the guidance scale followed by a 2-layer MLP.
struct ConditionEmbed {
  Index freq_dim = 0;
  MlpStack mlp;  // freq_dim -> D -> D

  ConditionEmbed() = default;
  ConditionEmbed(Index d, Rng& rng);

  RowVector sinusoid(double alpha) const;
  Node apply(Tape& t, double alpha) const;
  void collect(const std::string& prefix, NamedParams& out);
};

// One mixer block: adaLN-modulated token mixing then channel mixing, both
// residual and gated. Modulation weights start at zero so a fresh block is
// the identity map for any conditioning value.
struct MixerBlock {
  MlpStack token_mix;    // T -> token_hidden -> T
  MlpStack channel_mix;  // D -> mult*D -> D
  Param mod_w, mod_b;    // D -> 6D: shift1, scale1, gate1, shift2, scale2, gate2

  MixerBlock() = default;
  MixerBlock(Index tokens, Index d, Index token_hidden, int channel_mult, Rng& rng);

  void collect(const std::string& prefix, NamedParams& out);
};

// Single-step decoder over token sequences [noise, agent, map].
class Decoder {
 public:
  Decoder() = default;
  Decoder(const RunConfig& cfg, Rng& rng);

  // 3 x D token stack for one proposal.
  Node assemble_input(Tape& t, Node noise_row, const SceneTokens& tokens) const;

  // noise: K x D constant node; returns K x d_pca latents.
  Node forward(Tape& t, Node noise, const SceneTokens& tokens, double alpha) const;

  // Inference path without tape bookkeeping; matches forward to machine
  // precision (tested).
  Matrix forward_plain(const Matrix& noise, const Matrix& agent_token,
                       const Matrix& map_token, double alpha) const;

  void collect(NamedParams& out);

  Index hidden() const { return d_; }
  Index out_dim() const { return d_pca_; }

 private:
  Index d_ = 0, d_pca_ = 0;
  bool context_modulation_ = false;
  ConditionEmbed cond_;
  std::vector<MixerBlock> blocks_;
  Param readout_w_, readout_b_;
};

}  // namespace misty
