#pragma once

#include <vector>

#include "misty/config.hpp"
#include "misty/nn.hpp"
#include "misty/scenario.hpp"

namespace misty {

// Learnable-query pooling: alpha_j = softmax_j(q . (W h_j)), pooled = sum_j alpha_j h_j.
struct AttentionPool {
  Param q;  // 1 x D
  Param w;  // D x D

  AttentionPool() = default;
  AttentionPool(Index d, Rng& rng);

  Node apply(Tape& t, Node feats) const;
  Matrix weights(const Matrix& feats) const;  // N x 1, rows of feats scored
  void collect(const std::string& prefix, NamedParams& out);
};

// Pre-LN multi-head self-attention + feedforward, both residual.
struct SelfAttentionBlock {
  Param wq, bq, wk, bk, wv, bv, wo, bo;
  Param ln_gamma, ln_beta;
  MlpStack ffn;  // pre-norm + GELU inside
  int heads = 1;

  SelfAttentionBlock() = default;
  SelfAttentionBlock(Index d, int heads, int ffn_mult, Rng& rng);

  // attn_out, when given, receives one row-stochastic N x N matrix per head
  Node apply(Tape& t, Node x, std::vector<Matrix>* attn_out = nullptr) const;
  void collect(const std::string& prefix, NamedParams& out);
};

// Eq-style point encoder: extra(MLP_pt(v) + Proj(v)); extra may be empty.
struct PointEncoder {
  MlpStack mlp;          // vector_width -> D -> D
  Param proj_w, proj_b;  // vector_width -> D
  MlpStack extra;        // depth = point_extra_blocks, D -> D each

  PointEncoder() = default;
  PointEncoder(Index in, Index d, int extra_blocks, Rng& rng);

  Node apply(Tape& t, Node vectors) const;
  void collect(const std::string& prefix, NamedParams& out);
};

struct SceneTokens {
  Node agent;  // 1 x D
  Node map;    // 1 x D
};

// Rows of the matrix form of one polyline: [start, end, attributes].
Matrix polyline_matrix(const Polyline& p);

// Hierarchical encoder: per-polyline point features -> attention pooling ->
// per-modality self-attention -> joint attention over both modalities ->
// second pooling into one agent and one map context token.
class SceneEncoder {
 public:
  SceneEncoder() = default;
  SceneEncoder(const RunConfig& cfg, Rng& rng);

  SceneTokens encode(Tape& t, const VectorizedScene& scene) const;
  void collect(NamedParams& out);

  Index hidden() const { return d_; }

  PointEncoder& agent_points() { return agent_points_; }
  PointEncoder& map_points() { return map_points_; }

 private:
  Node modality_tokens(Tape& t, const std::vector<Polyline>& lines, const PointEncoder& pe,
                       const AttentionPool& pool) const;

  Index d_ = 0;
  PointEncoder agent_points_, map_points_;
  AttentionPool agent_pool_, map_pool_;
  std::vector<SelfAttentionBlock> agent_sa_, map_sa_, global_sa_;
  AttentionPool agent_pool2_, map_pool2_;
};

}  // namespace misty
