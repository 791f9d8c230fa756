#include "misty/scene_encoder.hpp"

#include <cmath>

namespace misty {

AttentionPool::AttentionPool(Index d, Rng& rng)
    : q(make_linear_weight(1, d, rng).value), w(make_linear_weight(d, d, rng).value) {}

Node AttentionPool::apply(Tape& t, Node feats) const {
  if (t.value(feats).rows() < 1) throw DimensionError("attention_pool: empty features");
  auto* self = const_cast<AttentionPool*>(this);
  Node wn = t.recording() ? t.param(self->w) : t.frozen(w);
  Node qn = t.recording() ? t.param(self->q) : t.frozen(q);
  // scores_j = q . (W h_j)  ->  feats W^T q^T, one score per row
  Node scores = matmul(t, matmul(t, feats, transpose(t, wn)), transpose(t, qn));
  Node alpha = softmax_rows(t, transpose(t, scores));  // 1 x N
  return matmul(t, alpha, feats);                      // 1 x D
}

Matrix AttentionPool::weights(const Matrix& feats) const {
  Matrix scores = feats * w.value.transpose() * q.value.transpose();  // N x 1
  return softmax_rows_forward(scores.transpose()).transpose();
}

void AttentionPool::collect(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + "/q", &q);
  out.emplace_back(prefix + "/w", &w);
}

SelfAttentionBlock::SelfAttentionBlock(Index d, int n_heads, int ffn_mult, Rng& rng)
    : wq(make_linear_weight(d, d, rng)),
      bq(make_zeros(1, d)),
      wk(make_linear_weight(d, d, rng)),
      bk(make_zeros(1, d)),
      wv(make_linear_weight(d, d, rng)),
      bv(make_zeros(1, d)),
      wo(make_linear_weight(d, d, rng)),
      bo(make_zeros(1, d)),
      ln_gamma(make_ones_row(d)),
      ln_beta(make_zeros(1, d)),
      ffn({d, ffn_mult * d, d}, {true, false}, {true, false}, rng),
      heads(n_heads) {
  if (d % n_heads != 0) throw DimensionError("self_attention: D must divide by heads");
}

Node SelfAttentionBlock::apply(Tape& t, Node x, std::vector<Matrix>* attn_out) const {
  const Index d = t.value(x).cols();
  const Index dh = d / heads;
  auto* self = const_cast<SelfAttentionBlock*>(this);
  auto lease = [&](Param& p) { return t.recording() ? t.param(p) : t.frozen(p); };

  Node xn = layer_norm_nodes(t, x, lease(self->ln_gamma), lease(self->ln_beta));
  Node q = add_rowvec(t, matmul(t, xn, lease(self->wq)), lease(self->bq));
  Node k = add_rowvec(t, matmul(t, xn, lease(self->wk)), lease(self->bk));
  Node v = add_rowvec(t, matmul(t, xn, lease(self->wv)), lease(self->bv));

  std::vector<Node> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Node qh = slice_cols(t, q, h * dh, dh);
    Node kh = slice_cols(t, k, h * dh, dh);
    Node vh = slice_cols(t, v, h * dh, dh);
    Node logits = scale(t, matmul(t, qh, transpose(t, kh)), 1.0 / std::sqrt(double(dh)));
    Node attn = softmax_rows(t, logits);
    if (attn_out) attn_out->push_back(t.value(attn));
    head_outs.push_back(matmul(t, attn, vh));
  }
  Node merged = heads == 1 ? head_outs[0] : concat_cols(t, head_outs);
  Node mha = add_rowvec(t, matmul(t, merged, lease(self->wo)), lease(self->bo));
  Node res = add(t, x, mha);
  Node out = add(t, res, t.recording() ? ffn.forward(t, res) : ffn.forward_frozen(t, res));
  return out;
}

void SelfAttentionBlock::collect(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + "/wq", &wq);
  out.emplace_back(prefix + "/bq", &bq);
  out.emplace_back(prefix + "/wk", &wk);
  out.emplace_back(prefix + "/bk", &bk);
  out.emplace_back(prefix + "/wv", &wv);
  out.emplace_back(prefix + "/bv", &bv);
  out.emplace_back(prefix + "/wo", &wo);
  out.emplace_back(prefix + "/bo", &bo);
  out.emplace_back(prefix + "/ln_g", &ln_gamma);
  out.emplace_back(prefix + "/ln_b", &ln_beta);
  ffn.collect(prefix + "/ffn", out);
}

PointEncoder::PointEncoder(Index in, Index d, int extra_blocks, Rng& rng)
    : mlp({in, d, d}, {false, false}, {true, false}, rng),
      proj_w(make_linear_weight(in, d, rng)),
      proj_b(make_zeros(1, d)) {
  if (extra_blocks > 0) {
    std::vector<Index> dims(static_cast<std::size_t>(extra_blocks) + 1, d);
    std::vector<bool> pn(static_cast<std::size_t>(extra_blocks), true);
    std::vector<bool> act(static_cast<std::size_t>(extra_blocks), true);
    extra = MlpStack(dims, pn, act, rng);
  }
}

Node PointEncoder::apply(Tape& t, Node vectors) const {
  auto* self = const_cast<PointEncoder*>(this);
  Node base = t.recording() ? mlp.forward(t, vectors) : mlp.forward_frozen(t, vectors);
  Node proj = t.recording() ? linear(t, vectors, self->proj_w, self->proj_b)
                            : linear_frozen(t, vectors, proj_w, proj_b);
  Node h = add(t, base, proj);
  if (extra.layers().empty()) return h;
  return t.recording() ? extra.forward(t, h) : extra.forward_frozen(t, h);
}

void PointEncoder::collect(const std::string& prefix, NamedParams& out) {
  mlp.collect(prefix + "/mlp", out);
  out.emplace_back(prefix + "/proj_w", &proj_w);
  out.emplace_back(prefix + "/proj_b", &proj_b);
  if (!extra.layers().empty()) extra.collect(prefix + "/extra", out);
}

Matrix polyline_matrix(const Polyline& p) {
  if (p.vectors.empty()) throw InputError("polyline_matrix: empty polyline");
  const Index width = 4 + p.vectors[0].attr.size();
  Matrix m(Index(p.vectors.size()), width);
  for (Index i = 0; i < m.rows(); ++i) {
    const auto& v = p.vectors[std::size_t(i)];
    m(i, 0) = v.start.x();
    m(i, 1) = v.start.y();
    m(i, 2) = v.end.x();
    m(i, 3) = v.end.y();
    m.block(i, 4, 1, v.attr.size()) = v.attr;
  }
  if (!all_finite(m)) throw InputError("polyline_matrix: non-finite coordinates");
  return m;
}

SceneEncoder::SceneEncoder(const RunConfig& cfg, Rng& rng) : d_(cfg.hidden) {
  const Index vw = cfg.vector_width();
  agent_points_ = PointEncoder(vw, d_, cfg.point_extra_blocks, rng);
  map_points_ = PointEncoder(vw, d_, cfg.point_extra_blocks, rng);
  agent_pool_ = AttentionPool(d_, rng);
  map_pool_ = AttentionPool(d_, rng);
  for (int i = 0; i < cfg.enc_depth_agent; ++i)
    agent_sa_.emplace_back(d_, cfg.heads, cfg.ffn_mult, rng);
  for (int i = 0; i < cfg.enc_depth_map; ++i)
    map_sa_.emplace_back(d_, cfg.heads, cfg.ffn_mult, rng);
  for (int i = 0; i < cfg.enc_depth_global; ++i)
    global_sa_.emplace_back(d_, cfg.heads, cfg.ffn_mult, rng);
  agent_pool2_ = AttentionPool(d_, rng);
  map_pool2_ = AttentionPool(d_, rng);
}

Node SceneEncoder::modality_tokens(Tape& t, const std::vector<Polyline>& lines,
                                   const PointEncoder& pe, const AttentionPool& pool) const {
  std::vector<Node> tokens;
  tokens.reserve(lines.size());
  for (const auto& line : lines) {
    Node feats = pe.apply(t, t.input(polyline_matrix(line)));
    tokens.push_back(pool.apply(t, feats));
  }
  return tokens.size() == 1 ? tokens[0] : concat_rows(t, tokens);
}

SceneTokens SceneEncoder::encode(Tape& t, const VectorizedScene& scene) const {
  if (scene.agent_polylines.empty()) throw StateError("encode_scene: no agent polylines");
  if (scene.map_polylines.empty()) throw StateError("encode_scene: no map polylines");

  Node agents = modality_tokens(t, scene.agent_polylines, agent_points_, agent_pool_);
  Node maps = modality_tokens(t, scene.map_polylines, map_points_, map_pool_);
  for (const auto& blk : agent_sa_) agents = blk.apply(t, agents);
  for (const auto& blk : map_sa_) maps = blk.apply(t, maps);

  const Index na = t.value(agents).rows();
  const Index nm = t.value(maps).rows();
  Node joint = concat_rows(t, {agents, maps});
  for (const auto& blk : global_sa_) joint = blk.apply(t, joint);
  Node agents2 = slice_rows(t, joint, 0, na);
  Node maps2 = slice_rows(t, joint, na, nm);

  SceneTokens out;
  out.agent = agent_pool2_.apply(t, agents2);
  out.map = map_pool2_.apply(t, maps2);
  return out;
}

void SceneEncoder::collect(NamedParams& out) {
  agent_points_.collect("enc/agent_pts", out);
  map_points_.collect("enc/map_pts", out);
  agent_pool_.collect("enc/agent_pool", out);
  map_pool_.collect("enc/map_pool", out);
  for (std::size_t i = 0; i < agent_sa_.size(); ++i)
    agent_sa_[i].collect("enc/agent_sa" + std::to_string(i), out);
  for (std::size_t i = 0; i < map_sa_.size(); ++i)
    map_sa_[i].collect("enc/map_sa" + std::to_string(i), out);
  for (std::size_t i = 0; i < global_sa_.size(); ++i)
    global_sa_[i].collect("enc/global_sa" + std::to_string(i), out);
  agent_pool2_.collect("enc/agent_pool2", out);
  map_pool2_.collect("enc/map_pool2", out);
}

}  // namespace misty
