#include "misty/decoder.hpp"

#include <cmath>

namespace misty {

RowVector flatten_traj(const Trajectory& t) {
  RowVector flat(t.rows() * 2);
  for (Index i = 0; i < t.rows(); ++i) {
    flat(2 * i) = t(i, 0);
    flat(2 * i + 1) = t(i, 1);
  }
  return flat;
}

Trajectory unflatten_traj(const RowVector& flat) {
  if (flat.size() % 2 != 0) throw DimensionError("unflatten_traj: odd length");
  Trajectory t(flat.size() / 2, 2);
  for (Index i = 0; i < t.rows(); ++i) {
    t(i, 0) = flat(2 * i);
    t(i, 1) = flat(2 * i + 1);
  }
  return t;
}

Matrix pca_decode(const Matrix& y, const PcaHead& head) {
  if (!head.fitted) throw StateError("pca_decode: head not fitted");
  if (y.cols() != head.d()) throw DimensionError("pca_decode: latent width mismatch");
  return ((y * head.w.transpose()).rowwise() + head.mu).eval();
}

Node pca_decode_node(Tape& t, Node y, const PcaHead& head) {
  if (!head.fitted) throw StateError("pca_decode: head not fitted");
  if (t.value(y).cols() != head.d()) throw DimensionError("pca_decode: latent width mismatch");
  Node basis = t.constant(head.w.transpose());
  Node mu = t.constant(head.mu);
  return add_rowvec(t, matmul(t, y, basis), mu);
}

Trajectory pca_decode_traj(const RowVector& y, const PcaHead& head) {
  return unflatten_traj(pca_decode(Matrix(y), head).row(0));
}

ConditionEmbed::ConditionEmbed(Index d, Rng& rng)
    : freq_dim(d), mlp({d, d, d}, {false, false}, {true, false}, rng) {
  if (d % 2 != 0) throw DimensionError("condition_embed: width must be even");
}

RowVector ConditionEmbed::sinusoid(double alpha) const {
  if (!std::isfinite(alpha)) throw InputError("condition_embed: non-finite alpha");
  const Index half = freq_dim / 2;
  RowVector e(freq_dim);
  for (Index k = 0; k < half; ++k) {
    double omega = std::exp(-std::log(10000.0) * double(k) / double(half));
    e(k) = std::sin(alpha * omega);
    e(half + k) = std::cos(alpha * omega);
  }
  return e;
}

Node ConditionEmbed::apply(Tape& t, double alpha) const {
  Node in = t.input(Matrix(sinusoid(alpha)));
  return t.recording() ? mlp.forward(t, in) : mlp.forward_frozen(t, in);
}

void ConditionEmbed::collect(const std::string& prefix, NamedParams& out) {
  mlp.collect(prefix + "/mlp", out);
}

MixerBlock::MixerBlock(Index tokens, Index d, Index token_hidden, int channel_mult, Rng& rng)
    : token_mix({tokens, token_hidden, tokens}, {false, false}, {true, false}, rng),
      channel_mix({d, channel_mult * d, d}, {false, false}, {true, false}, rng),
      mod_w(make_zeros(d, 6 * d)),
      mod_b(make_zeros(1, 6 * d)) {}

void MixerBlock::collect(const std::string& prefix, NamedParams& out) {
  token_mix.collect(prefix + "/tok", out);
  channel_mix.collect(prefix + "/ch", out);
  out.emplace_back(prefix + "/mod_w", &mod_w);
  out.emplace_back(prefix + "/mod_b", &mod_b);
}

Decoder::Decoder(const RunConfig& cfg, Rng& rng)
    : d_(cfg.hidden),
      d_pca_(cfg.d_pca),
      context_modulation_(cfg.context_modulation),
      cond_(cfg.hidden, rng),
      readout_w_(make_linear_weight(cfg.hidden, cfg.d_pca, rng, 0.05)),
      readout_b_(make_zeros(1, cfg.d_pca)) {
  for (int i = 0; i < cfg.mixer_depth; ++i)
    blocks_.emplace_back(3, cfg.hidden, cfg.mixer_token_hidden, cfg.mixer_channel_mult, rng);
}

Node Decoder::assemble_input(Tape& t, Node noise_row, const SceneTokens& tokens) const {
  if (t.value(noise_row).rows() != 1 || t.value(noise_row).cols() != d_)
    throw DimensionError("assemble_input: noise must be 1 x D");
  if (t.value(tokens.agent).cols() != d_ || t.value(tokens.map).cols() != d_)
    throw DimensionError("assemble_input: token width mismatch");
  return concat_rows(t, {noise_row, tokens.agent, tokens.map});
}

Node Decoder::forward(Tape& t, Node noise, const SceneTokens& tokens, double alpha) const {
  if (blocks_.empty()) throw StateError("decoder: no mixer blocks");
  const Index K = t.value(noise).rows();
  if (K < 1) throw DimensionError("decoder: need at least one noise row");
  auto* self = const_cast<Decoder*>(this);
  auto lease = [&](Param& p) { return t.recording() ? t.param(p) : t.frozen(p); };

  Node cond = cond_.apply(t, alpha);
  if (context_modulation_) cond = add(t, cond, add(t, tokens.agent, tokens.map));

  std::vector<Node> rows;
  rows.reserve(std::size_t(K));
  for (Index k = 0; k < K; ++k)
    rows.push_back(assemble_input(t, slice_rows(t, noise, k, 1), tokens));
  Node x = K == 1 ? rows[0] : concat_rows(t, rows);

  Node ln_g = t.constant(Matrix::Ones(1, d_));
  Node ln_b = t.constant(Matrix::Zero(1, d_));

  for (auto& blk : self->blocks_) {
    Node mod = add_rowvec(t, matmul(t, cond, lease(blk.mod_w)), lease(blk.mod_b));
    Node shift1 = slice_cols(t, mod, 0, d_);
    Node scale1 = slice_cols(t, mod, d_, d_);
    Node gate1 = slice_cols(t, mod, 2 * d_, d_);
    Node shift2 = slice_cols(t, mod, 3 * d_, d_);
    Node scale2 = slice_cols(t, mod, 4 * d_, d_);
    Node gate2 = slice_cols(t, mod, 5 * d_, d_);

    Node h1 = add_rowvec(
        t, mul_rowvec(t, layer_norm_nodes(t, x, ln_g, ln_b), add_scalar(t, scale1, 1.0)),
        shift1);
    std::vector<Node> cols;
    cols.reserve(std::size_t(K));
    for (Index k = 0; k < K; ++k)
      cols.push_back(transpose(t, slice_rows(t, h1, 3 * k, 3)));
    Node u = K == 1 ? cols[0] : concat_rows(t, cols);  // (K D) x 3
    Node v = t.recording() ? blk.token_mix.forward(t, u) : blk.token_mix.forward_frozen(t, u);
    std::vector<Node> back;
    back.reserve(std::size_t(K));
    for (Index k = 0; k < K; ++k)
      back.push_back(transpose(t, slice_rows(t, v, k * d_, d_)));
    Node mixed = K == 1 ? back[0] : concat_rows(t, back);  // 3K x D
    x = add(t, x, mul_rowvec(t, mixed, gate1));

    Node h2 = add_rowvec(
        t, mul_rowvec(t, layer_norm_nodes(t, x, ln_g, ln_b), add_scalar(t, scale2, 1.0)),
        shift2);
    Node ch =
        t.recording() ? blk.channel_mix.forward(t, h2) : blk.channel_mix.forward_frozen(t, h2);
    x = add(t, x, mul_rowvec(t, ch, gate2));
  }

  Node xf = layer_norm_nodes(t, x, ln_g, ln_b);
  Matrix pool = Matrix::Zero(K, 3 * K);
  for (Index k = 0; k < K; ++k) pool.block(k, 3 * k, 1, 3).setConstant(1.0 / 3.0);
  Node pooled = matmul(t, t.constant(std::move(pool)), xf);
  return t.recording() ? linear(t, pooled, self->readout_w_, self->readout_b_)
                       : linear_frozen(t, pooled, readout_w_, readout_b_);
}

Matrix Decoder::forward_plain(const Matrix& noise, const Matrix& agent_token,
                              const Matrix& map_token, double alpha) const {
  if (blocks_.empty()) throw StateError("decoder: no mixer blocks");
  const Index K = noise.rows();
  if (K < 1 || noise.cols() != d_) throw DimensionError("decoder: noise must be K x D");
  if (agent_token.cols() != d_ || map_token.cols() != d_)
    throw DimensionError("decoder: token width mismatch");
  const RowVector ones = RowVector::Ones(d_);
  const RowVector zeros = RowVector::Zero(d_);

  Matrix cond = cond_.mlp.forward_plain(Matrix(cond_.sinusoid(alpha)));
  if (context_modulation_) cond += agent_token + map_token;

  Matrix x(3 * K, d_);
  for (Index k = 0; k < K; ++k) {
    x.row(3 * k) = noise.row(k);
    x.row(3 * k + 1) = agent_token.row(0);
    x.row(3 * k + 2) = map_token.row(0);
  }

  for (const auto& blk : blocks_) {
    RowVector mod = (cond * blk.mod_w.value + blk.mod_b.value).row(0);
    RowVector shift1 = mod.segment(0, d_), scale1 = mod.segment(d_, d_);
    RowVector gate1 = mod.segment(2 * d_, d_), shift2 = mod.segment(3 * d_, d_);
    RowVector scale2 = mod.segment(4 * d_, d_), gate2 = mod.segment(5 * d_, d_);

    Matrix h1 = layer_norm_forward(x, ones, zeros);
    h1 = ((h1.array().rowwise() * (scale1.array() + 1.0)).rowwise() + shift1.array()).matrix();
    Matrix u(K * d_, 3);
    for (Index k = 0; k < K; ++k)
      u.middleRows(k * d_, d_) = h1.middleRows(3 * k, 3).transpose();
    Matrix v = blk.token_mix.forward_plain(u);
    Matrix mixed(3 * K, d_);
    for (Index k = 0; k < K; ++k)
      mixed.middleRows(3 * k, 3) = v.middleRows(k * d_, d_).transpose();
    x += (mixed.array().rowwise() * gate1.array()).matrix();

    Matrix h2 = layer_norm_forward(x, ones, zeros);
    h2 = ((h2.array().rowwise() * (scale2.array() + 1.0)).rowwise() + shift2.array()).matrix();
    Matrix ch = blk.channel_mix.forward_plain(h2);
    x += (ch.array().rowwise() * gate2.array()).matrix();
  }

  Matrix xf = layer_norm_forward(x, ones, zeros);
  Matrix pooled(K, d_);
  for (Index k = 0; k < K; ++k)
    pooled.row(k) = (xf.row(3 * k) + xf.row(3 * k + 1) + xf.row(3 * k + 2)) / 3.0;
  return ((pooled * readout_w_.value).rowwise() + readout_b_.value.row(0)).eval();
}

void Decoder::collect(NamedParams& out) {
  cond_.collect("dec/cond", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].collect("dec/b" + std::to_string(i), out);
  out.emplace_back("dec/readout_w", &readout_w_);
  out.emplace_back("dec/readout_b", &readout_b_);
}

}  // namespace misty
