#include "misty/drift.hpp"

#include <chrono>
#include <cmath>
#include <iostream>

#include "json.hpp"

namespace misty {

using json = nlohmann::ordered_json;

NormStats union_stats(const DriftBatch& b) {
  Index d = 0;
  for (const Matrix* m : {&b.z_fake, &b.z_cond, &b.z_unc})
    if (m->rows() > 0) d = m->cols();
  Index n = b.z_fake.rows() + b.z_cond.rows() + b.z_unc.rows();
  if (n < 2) throw InputError("union_stats: need at least 2 samples across the sets");
  RowVector sum = RowVector::Zero(d);
  for (const Matrix* m : {&b.z_fake, &b.z_cond, &b.z_unc}) {
    if (m->rows() == 0) continue;
    if (m->cols() != d) throw DimensionError("union_stats: latent width mismatch");
    sum += m->colwise().sum();
  }
  NormStats st;
  st.mean = sum / double(n);
  RowVector ss = RowVector::Zero(d);
  for (const Matrix* m : {&b.z_fake, &b.z_cond, &b.z_unc}) {
    if (m->rows() == 0) continue;
    ss += (m->rowwise() - st.mean).array().square().colwise().sum().matrix();
  }
  st.std = (ss / double(n)).array().sqrt().max(1e-6).matrix();
  return st;
}

Matrix apply_norm(const Matrix& x, const NormStats& st) {
  if (x.rows() == 0) return x;
  if (x.cols() != st.mean.cols()) throw DimensionError("apply_norm: width mismatch");
  RowVector neg = -st.mean;
  RowVector inv = st.std.cwiseInverse();
  Matrix out = x;
  out.array().rowwise() += neg.array();
  out.array().rowwise() *= inv.array();
  return out;
}

Node apply_norm_node(Tape& t, Node x, const NormStats& st) {
  RowVector neg = -st.mean;
  RowVector inv = st.std.cwiseInverse();
  Node shifted = add_rowvec(t, x, t.constant(neg));
  return mul_rowvec(t, shifted, t.constant(inv));
}

NormStats normalize_features(DriftBatch& batch) {
  NormStats st = union_stats(batch);
  batch.z_fake = apply_norm(batch.z_fake, st);
  batch.z_cond = apply_norm(batch.z_cond, st);
  batch.z_unc = apply_norm(batch.z_unc, st);
  return st;
}

Matrix pairwise_distances(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("pairwise_distances: width mismatch");
  Matrix d(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).norm();
  return d;
}

Matrix bidirectional_softmax(const Matrix& d, double temperature) {
  if (temperature <= 0.0) throw InputError("bidirectional_softmax: temperature must be > 0");
  Matrix s = -d / temperature;
  Matrix rows = softmax_rows_forward(s);
  Matrix cols = softmax_rows_forward(s.transpose()).transpose();
  return 0.5 * (rows + cols);
}

Matrix drift_vectors(const Matrix& z_from, const Matrix& targets, const Matrix& peers,
                     double temperature) {
  if (z_from.rows() < 1) throw InputError("drift_vectors: empty sample set");
  if (targets.rows() < 1) throw InputError("drift_vectors: empty target set");
  if (z_from.cols() != targets.cols()) throw DimensionError("drift_vectors: width mismatch");
  if (peers.rows() != z_from.rows() || peers.cols() != z_from.cols())
    throw DimensionError("drift_vectors: peers must be the sample set");
  if (temperature <= 0.0) throw InputError("drift_vectors: temperature must be > 0");

  Matrix wp = bidirectional_softmax(pairwise_distances(z_from, targets), temperature);
  Matrix field = wp * targets;
  field.array() -= z_from.array().colwise() * wp.rowwise().sum().array();

  const Index k = z_from.rows();
  if (k > 1) {
    Matrix s = -pairwise_distances(z_from, peers) / temperature;
    s.diagonal().setConstant(-std::numeric_limits<double>::infinity());
    Matrix wr = softmax_rows_forward(s);
    Matrix wc = softmax_rows_forward(s.transpose()).transpose();
    Matrix wm = 0.5 * (wr + wc);
    Matrix rep = wm * peers;
    rep.array() -= z_from.array().colwise() * wm.rowwise().sum().array();
    field -= rep;
  }
  return field;
}

Matrix interpolate_guidance(const Matrix& v_cond, const Matrix& v_unc, double alpha) {
  if (v_cond.rows() != v_unc.rows() || v_cond.cols() != v_unc.cols())
    throw DimensionError("interpolate_guidance: shape mismatch");
  if (alpha == 0.0) return v_unc;
  if (alpha == 1.0) return v_cond;
  return v_unc + alpha * (v_cond - v_unc);
}

Matrix magnitude_normalize(const Matrix& v, double c, double c_max) {
  if (v.rows() == 0) return v;
  Vector norms = v.rowwise().norm();
  double s = c / (norms.mean() + 1e-8);
  Matrix out = s * v;
  for (Index i = 0; i < out.rows(); ++i) {
    double n = s * norms(i);
    if (n > c_max) out.row(i) *= c_max / n;
  }
  return out;
}

DriftField compute_drift_field(const DriftBatch& batch, double alpha, double c, double c_max) {
  DriftField f;
  f.v_cond = drift_vectors(batch.z_fake, batch.z_cond, batch.z_fake, batch.temperature);
  f.v_unc = drift_vectors(batch.z_fake, batch.z_unc, batch.z_fake, batch.temperature);
  f.v_total = interpolate_guidance(f.v_cond, f.v_unc, alpha);
  f.v_bar = magnitude_normalize(f.v_total, c, c_max);
  return f;
}

Node drift_loss(Tape& t, Node z_fake, const Matrix& v_bar) {
  // Copy out of the tape: emitting nodes below may reallocate its storage.
  const Matrix z = t.value(z_fake);
  if (z.rows() != v_bar.rows() || z.cols() != v_bar.cols())
    throw DimensionError("drift_loss: field shape mismatch");
  const double inv_k = 1.0 / double(z.rows());
  Node diff = sub(t, z_fake, t.constant(z + v_bar));
  return sum_sq_scaled(t, diff, inv_k);
}

std::string DriftStepReport::jsonl() const {
  json j;
  j["step"] = step;
  j["loss"] = loss;
  j["alpha"] = alpha;
  j["mean_field_norm"] = mean_field_norm;
  j["grad_norm"] = grad_norm;
  j["wall_ms"] = wall_ms;
  j["skipped"] = skipped;
  return j.dump() + "\n";
}

DriftStepReport drift_training_step(Planner& planner, const Scenario& scenario,
                                    const TrajVae& vae, const Dictionary& dict,
                                    const std::vector<Trajectory>& corpus_trajs,
                                    SgdMomentum& opt, const NamedParams& params, Rng& rng,
                                    int step_index, double fixed_alpha) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig& cfg = planner.config();
  DriftStepReport rep;
  rep.step = step_index;

  if (scenario.positives.empty()) {
    std::cerr << "warning: scenario (kind " << scenario.kind << ", seed " << scenario.seed
              << ") has no compliant alternatives, drift step skipped\n";
    rep.skipped = true;
    return rep;
  }

  rep.alpha = std::isfinite(fixed_alpha) ? fixed_alpha
                                         : rng.uniform(cfg.alpha_min, cfg.alpha_max);

  Tape t(true);
  VectorizedScene scene = vectorize(scenario, cfg);
  SceneTokens tokens = planner.encoder().encode(t, scene);
  Node noise = t.constant(rng.normal_matrix(cfg.k_train, cfg.hidden));
  Node y = planner.decoder().forward(t, noise, tokens, rep.alpha);
  Node flat = pca_decode_node(t, y, planner.pca());
  Node z_fake = vae_project_nodes(t, vae, flat);

  Matrix z_cond(Index(scenario.positives.size()), vae.latent_dim());
  for (std::size_t i = 0; i < scenario.positives.size(); ++i)
    z_cond.row(Index(i)) = vae_project(vae, scenario.positives[i]);

  const int n_macro = dict.n_macro();
  Matrix z_unc(Index(n_macro) * cfg.unc_per_class, vae.latent_dim());
  Index row = 0;
  for (int c = 0; c < n_macro; ++c) {
    const auto& members = dict.members[std::size_t(c)];
    for (int j = 0; j < cfg.unc_per_class; ++j, ++row) {
      if (members.empty()) {
        z_unc.row(row) = vae_project(vae, unflatten_traj(dict.macro_centroids.row(c)));
        continue;
      }
      int pick = members[std::size_t(rng.uniform_int(0, int(members.size()) - 1))];
      if (pick < 0 || std::size_t(pick) >= corpus_trajs.size())
        throw InputError("drift_training_step: dictionary member index out of range");
      z_unc.row(row) = vae_project(vae, corpus_trajs[std::size_t(pick)]);
    }
  }

  DriftBatch batch{t.value(z_fake), z_cond, z_unc, cfg.drift_temperature};
  NormStats st = normalize_features(batch);
  Node z_fake_norm = apply_norm_node(t, z_fake, st);

  DriftField field = compute_drift_field(batch, rep.alpha, cfg.drift_norm_scale,
                                         cfg.drift_norm_cap);
  Node loss = drift_loss(t, z_fake_norm, field.v_bar);

  opt.zero_grad(params);
  t.backward(loss);
  opt.step(params);

  rep.loss = t.value(loss)(0, 0);
  rep.mean_field_norm = field.v_bar.rowwise().norm().mean();
  rep.grad_norm = opt.last_grad_norm();
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
  return rep;
}

}  // namespace misty
